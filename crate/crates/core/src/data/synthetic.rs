use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Cohort, DataError, Demographics, Epoch, EpochGeometry, Gender, Result, SleepStage, SubjectRecord};
use crate::seed::derive_seed;
use crate::stratify::{classify_demographics, AgeGroup, AhiSeverity};

/// Dominant oscillation of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProfile {
    pub frequency_hz: f64,
    pub amplitude: f64,
}

/// Target proportions. Counts are apportioned exactly by largest remainder,
/// so a 100-subject cohort with weights 26/25/24/25 gets exactly those sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemographicMix {
    pub female_fraction: f64,
    /// Under 50, 50 to 65, over 65.
    pub age_weights: [f64; 3],
    /// Normal, mild, moderate, severe.
    pub ahi_weights: [f64; 4],
}

impl Default for DemographicMix {
    fn default() -> Self {
        DemographicMix { female_fraction: 0.55, age_weights: [33.0, 34.0, 33.0], ahi_weights: [26.0, 25.0, 24.0, 25.0] }
    }
}

/// Conjunction of optional demographic conditions. An empty predicate
/// matches everyone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemographicPredicate {
    pub gender: Option<Gender>,
    pub age_group: Option<AgeGroup>,
    pub ahi_severity: Option<AhiSeverity>,
}

impl DemographicPredicate {
    pub fn matches(&self, d: &Demographics) -> bool {
        let (age, ahi) = classify_demographics(d);
        self.gender.map_or(true, |g| g == d.gender)
            && self.age_group.map_or(true, |a| a == age)
            && self.ahi_severity.map_or(true, |s| s == ahi)
    }
}

/// Systematic signal change applied to every subject matching `predicate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupShift {
    pub predicate: DemographicPredicate,
    #[serde(default)]
    pub frequency_offset_hz: f64,
    #[serde(default = "one")]
    pub amplitude_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    /// Scored epochs per subject.
    pub epochs_per_subject: usize,
    /// Leading epochs written with the excluded label.
    pub preparation_epochs: usize,
    pub channels: usize,
    pub samples_per_epoch: usize,
    pub sample_rate_hz: f64,
    pub mix: DemographicMix,
    /// Indexed by stage code.
    pub stages: [StageProfile; 5],
    pub noise_std: f64,
    /// Per-epoch uniform frequency jitter, ± this many Hz.
    pub frequency_jitter_hz: f64,
    pub subgroup_shift: Option<SubgroupShift>,
    /// Explicit demographics, one per subject, replacing the mix.
    pub demographics: Option<Vec<Demographics>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let p = |frequency_hz, amplitude| StageProfile { frequency_hz, amplitude };
        SyntheticSpec {
            n_subjects: 30,
            epochs_per_subject: 100,
            preparation_epochs: 0,
            channels: 7,
            samples_per_epoch: 3000,
            sample_rate_hz: 100.0,
            mix: DemographicMix::default(),
            stages: [p(10.0, 1.0), p(6.0, 0.8), p(12.0, 1.0), p(2.0, 1.5), p(8.0, 0.8)],
            noise_std: 0.5,
            frequency_jitter_hz: 0.25,
            subgroup_shift: None,
            demographics: None,
        }
    }
}

impl SyntheticSpec {
    pub fn geometry(&self) -> EpochGeometry {
        EpochGeometry { channels: self.channels, samples: self.samples_per_epoch }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if self.epochs_per_subject == 0 || self.channels == 0 || self.samples_per_epoch == 0 {
            return bad("epochs_per_subject, channels and samples_per_epoch must be positive".into());
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !(0.0..=1.0).contains(&self.mix.female_fraction) {
            return bad(format!("female_fraction must lie in [0, 1], got {}", self.mix.female_fraction));
        }
        for (name, w) in [("age_weights", &self.mix.age_weights[..]), ("ahi_weights", &self.mix.ahi_weights[..])] {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("{name} must be non-negative with a positive sum, got {w:?}"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) || !(self.frequency_jitter_hz >= 0.0) {
            return bad("noise_std and frequency_jitter_hz must be non-negative".into());
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let offset = self.subgroup_shift.map_or(0.0, |s| s.frequency_offset_hz);
        for (stage, p) in SleepStage::ALL.iter().zip(&self.stages) {
            let top = p.frequency_hz + offset.max(0.0) + self.frequency_jitter_hz;
            if p.frequency_hz <= 0.0 || top >= nyquist {
                return bad(format!("{stage} frequency {} Hz must lie in (0, {nyquist}) Hz", p.frequency_hz));
            }
        }
        if let Some(d) = &self.demographics {
            if d.len() != self.n_subjects {
                return bad(format!("{} explicit demographics for {} subjects", d.len(), self.n_subjects));
            }
        }
        Ok(())
    }
}

/// Splits `n` into integer counts proportional to `weights`, handing
/// leftovers to the largest remainders (ties go to the earlier index).
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn shuffled_labels<T: Copy>(counts: &[usize], values: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out: Vec<T> = counts.iter().zip(values).flat_map(|(&c, &v)| std::iter::repeat(v).take(c)).collect();
    out.shuffle(rng);
    out
}

fn draw_demographics(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Demographics> {
    let n = spec.n_subjects;
    let mix = &spec.mix;
    let genders = shuffled_labels(
        &apportion(n, &[1.0 - mix.female_fraction, mix.female_fraction]),
        &[Gender::Male, Gender::Female],
        rng,
    );
    let ages = shuffled_labels(&apportion(n, &mix.age_weights), &[(18, 49), (50, 65), (66, 90)], rng);
    let ahis = shuffled_labels(
        &apportion(n, &mix.ahi_weights),
        &[(0.0, 5.0), (5.0, 15.0), (15.0, 30.0), (30.0, 80.0)],
        rng,
    );
    (0..n)
        .map(|i| {
            let (lo, hi) = ages[i];
            let (alo, ahi_hi): (f64, f64) = ahis[i];
            // Truncating to one decimal keeps the value inside its bin.
            let ahi = (rng.gen_range(alo..ahi_hi) * 10.0).floor() / 10.0;
            Demographics { gender: genders[i], age: rng.gen_range(lo..=hi), ahi }
        })
        .collect()
}

const CYCLE: [SleepStage; 6] =
    [SleepStage::Wake, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::N2, SleepStage::Rem];

/// Repeating W, N1, N2, N3, N2, REM cycle with 2 to 6 epochs per segment.
/// Every stage appears within the first 31 epochs.
fn hypnogram(n: usize, rng: &mut ChaCha8Rng) -> Vec<SleepStage> {
    let mut out = Vec::with_capacity(n);
    'outer: loop {
        for &stage in &CYCLE {
            for _ in 0..rng.gen_range(2..=6) {
                if out.len() == n {
                    break 'outer;
                }
                out.push(stage);
            }
        }
    }
    out
}

fn subject_record(spec: &SyntheticSpec, id: String, demographics: Demographics, seed: u64) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l) = (spec.channels, spec.samples_per_epoch);
    let shift = spec.subgroup_shift.filter(|s| s.predicate.matches(&demographics));
    let (offset, scale) = shift.map_or((0.0, 1.0), |s| (s.frequency_offset_hz, s.amplitude_scale));
    let gain = rng.gen_range(0.8..1.2);
    let dc: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");

    let stages = hypnogram(spec.epochs_per_subject, &mut rng);
    let epochs = stages
        .into_iter()
        .enumerate()
        .map(|(i, stage)| {
            let profile = spec.stages[stage.index()];
            let jitter = if spec.frequency_jitter_hz > 0.0 {
                rng.gen_range(-spec.frequency_jitter_hz..=spec.frequency_jitter_hz)
            } else {
                0.0
            };
            let omega = 2.0 * PI * (profile.frequency_hz + offset + jitter) / spec.sample_rate_hz;
            let mut signal = Vec::with_capacity(c * l);
            for ch in 0..c {
                let amp = profile.amplitude * scale * gain / (1.0 + 0.5 * ch as f64);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for t in 0..l {
                    let x = dc[ch] + amp * (omega * t as f64 + phase).sin() + noise.sample(&mut rng);
                    signal.push(x as f32);
                }
            }
            Epoch { index: (spec.preparation_epochs + i) as u32, stage, signal }
        })
        .collect();
    SubjectRecord {
        subject_id: id,
        demographics,
        recorded_epochs: (spec.preparation_epochs + spec.epochs_per_subject) as u32,
        epochs,
    }
}

/// Builds a deterministic cohort in which each stage is a noisy sinusoid at
/// its own frequency.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec, seed: u64) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "demographics"));
    let demographics = match &spec.demographics {
        Some(d) => d.clone(),
        None => draw_demographics(spec, &mut rng),
    };
    let width = spec.n_subjects.to_string().len().max(3);
    let subjects = demographics
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let id = format!("sub{:0width$}", i + 1);
            let s = derive_seed(seed, &format!("signals/{i}"));
            subject_record(spec, id, d, s)
        })
        .collect();
    Cohort::new(spec.geometry(), subjects)
}
