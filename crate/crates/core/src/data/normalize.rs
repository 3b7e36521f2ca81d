use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Cohort, DataError, Result, SubjectRecord};

/// Lower bound applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics and the subjects they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub provenance: BTreeSet<String>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats { mean: vec![0.0; channels], std: vec![1.0; channels], provenance: BTreeSet::new() }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Pools every sample of every scored epoch of the listed subjects. Uses the
/// population variance.
pub fn compute_norm_stats<S: AsRef<str>>(cohort: &Cohort, train_subject_ids: &[S]) -> Result<NormStats> {
    if train_subject_ids.is_empty() {
        return Err(DataError::Invalid("normalization needs at least one training subject".into()));
    }
    let geometry = cohort.geometry;
    let records = train_subject_ids
        .iter()
        .map(|id| cohort.require(id.as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let c = geometry.channels;
    let mut count = 0usize;
    let mut sum = vec![0.0f64; c];
    for r in &records {
        for e in &r.epochs {
            for (ch, row) in e.signal.chunks_exact(geometry.samples).enumerate() {
                sum[ch] += row.iter().map(|&x| x as f64).sum::<f64>();
            }
            count += geometry.samples;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for r in &records {
        for e in &r.epochs {
            for (ch, row) in e.signal.chunks_exact(geometry.samples).enumerate() {
                sq[ch] += row.iter().map(|&x| (x as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    let provenance = train_subject_ids.iter().map(|s| s.as_ref().to_string()).collect();
    Ok(NormStats { mean, std, provenance })
}

/// Returns `(x - mean) / std` per channel. Applying it twice normalizes twice.
pub fn apply_normalization(record: &SubjectRecord, stats: &NormStats) -> SubjectRecord {
    let c = stats.channels();
    let mut out = record.clone();
    for e in &mut out.epochs {
        let samples = e.signal.len() / c;
        for (ch, row) in e.signal.chunks_exact_mut(samples).enumerate() {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            for x in row {
                *x = ((*x as f64 - m) / s) as f32;
            }
        }
    }
    out
}
