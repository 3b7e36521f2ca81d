//! Cohort data model, on-disk format, fold-scoped normalization, sequence
//! windowing and the synthetic cohort generator.

mod format;
mod normalize;
mod synthetic;
mod window;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{load_cohort, read_labels, read_signals, write_cohort, LoadedCohort, MANIFEST_FILE};
pub use normalize::{apply_normalization, compute_norm_stats, NormStats, STD_FLOOR};
pub use synthetic::{
    generate_synthetic_cohort, DemographicMix, DemographicPredicate, StageProfile, SubgroupShift,
    SyntheticSpec,
};
pub use window::{window_sequences, SequenceBatchItem, SequenceWindow, WindowMode};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic bytes, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: header declares {found} {field}, expected {expected}")]
    HeaderMismatch { path: PathBuf, field: &'static str, expected: usize, found: usize },
    #[error("{path}: epoch {epoch} has label code {code}, expected 0-4 or 255")]
    LabelOutOfRange { path: PathBuf, epoch: usize, code: u8 },
    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("subject {subject}: signal file has {signal} epochs but label file has {labels}")]
    EpochCountMismatch { subject: String, signal: usize, labels: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("subject {0} has no scored epochs")]
    NoScoredEpochs(String),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("unknown subject id {0}")]
    UnknownSubject(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Scored sleep stages, encoded 0–4 on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

/// On-disk label code for "Preparation" or "Missing" epochs.
pub const EXCLUDED_CODE: u8 = 255;

impl SleepStage {
    pub const COUNT: usize = 5;
    pub const ALL: [SleepStage; 5] =
        [SleepStage::Wake, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Short column label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            SleepStage::Wake => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "R",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "M" => Some(Gender::Male),
            "F" => Some(Gender::Female),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub age: u32,
    /// Apnea-hypopnea index, events per hour.
    pub ahi: f64,
}

/// Channel count and samples per 30-second epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochGeometry {
    pub channels: usize,
    pub samples: usize,
}

impl EpochGeometry {
    /// Seven PSG channels at 100 Hz.
    pub const PSG: EpochGeometry = EpochGeometry { channels: 7, samples: 3000 };

    pub fn epoch_len(&self) -> usize {
        self.channels * self.samples
    }
}

impl Default for EpochGeometry {
    fn default() -> Self {
        Self::PSG
    }
}

/// One scored epoch. `index` is its position in the original recording,
/// so gaps left by excluded epochs stay visible.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub index: u32,
    pub stage: SleepStage,
    /// Raw amplitudes, `[channel][sample]`.
    pub signal: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub demographics: Demographics,
    /// Number of epochs in the recording, scored or not.
    pub recorded_epochs: u32,
    pub epochs: Vec<Epoch>,
}

impl SubjectRecord {
    pub fn labels(&self) -> impl Iterator<Item = SleepStage> + '_ {
        self.epochs.iter().map(|e| e.stage)
    }
}

/// Immutable collection of subjects sharing one epoch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub geometry: EpochGeometry,
    subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn new(geometry: EpochGeometry, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(DataError::DuplicateSubject(s.subject_id.clone()));
            }
            if s.epochs.is_empty() {
                return Err(DataError::NoScoredEpochs(s.subject_id.clone()));
            }
            if let Some(e) = s.epochs.iter().find(|e| e.signal.len() != geometry.epoch_len()) {
                return Err(DataError::Invalid(format!(
                    "subject {} epoch {} holds {} samples, geometry needs {}",
                    s.subject_id,
                    e.index,
                    e.signal.len(),
                    geometry.epoch_len()
                )));
            }
        }
        Ok(Cohort { geometry, subjects })
    }

    pub fn empty(geometry: EpochGeometry) -> Self {
        Cohort { geometry, subjects: Vec::new() }
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn require(&self, id: &str) -> Result<&SubjectRecord> {
        self.subject(id).ok_or_else(|| DataError::UnknownSubject(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn scored_epochs(&self) -> usize {
        self.subjects.iter().map(|s| s.epochs.len()).sum()
    }
}
