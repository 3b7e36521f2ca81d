use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{SleepStage, SubjectRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Windows of exactly `seq_len` every `stride` epochs; a short tail is dropped.
    Train { stride: usize },
    /// Non-overlapping tiles plus one right-aligned final window.
    Eval,
}

/// Positions into a record's scored-epoch list covered by one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceWindow {
    pub start: usize,
    /// Number of real epochs; positions past it are padding.
    pub valid: usize,
    /// Per position: whether this window is the one whose prediction counts
    /// for that epoch. Always false on padding.
    pub scored: Vec<bool>,
}

impl SequenceWindow {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.valid
    }

    pub fn seq_len(&self) -> usize {
        self.scored.len()
    }
}

/// Computes window placement for a record with `n_epochs` scored epochs.
pub fn window_sequences(n_epochs: usize, seq_len: usize, mode: WindowMode) -> Vec<SequenceWindow> {
    assert!(seq_len > 0, "seq_len must be positive");
    let full = |start| SequenceWindow { start, valid: seq_len, scored: vec![true; seq_len] };
    match mode {
        WindowMode::Train { stride } => {
            assert!(stride > 0, "stride must be positive");
            if n_epochs < seq_len {
                return Vec::new();
            }
            (0..=n_epochs - seq_len).step_by(stride).map(full).collect()
        }
        WindowMode::Eval => {
            if n_epochs == 0 {
                return Vec::new();
            }
            if n_epochs < seq_len {
                let mut scored = vec![false; seq_len];
                scored[..n_epochs].iter_mut().for_each(|s| *s = true);
                return vec![SequenceWindow { start: 0, valid: n_epochs, scored }];
            }
            let tiles = n_epochs / seq_len;
            let mut out: Vec<SequenceWindow> = (0..tiles).map(|i| full(i * seq_len)).collect();
            let covered = tiles * seq_len;
            if covered < n_epochs {
                let start = n_epochs - seq_len;
                let scored = (start..n_epochs).map(|p| p >= covered).collect();
                out.push(SequenceWindow { start, valid: seq_len, scored });
            }
            out
        }
    }
}

/// A materialized window: signals, labels and masks for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatchItem {
    pub subject_id: String,
    pub epochs: Range<usize>,
    /// `[seq_len][channel][sample]`, zero on padding.
    pub input: Vec<f32>,
    /// Padding positions hold `Wake` and are masked out.
    pub labels: Vec<SleepStage>,
    pub valid: Vec<bool>,
    pub scored: Vec<bool>,
}

impl SequenceWindow {
    pub fn materialize(&self, record: &SubjectRecord) -> SequenceBatchItem {
        let epoch_len = record.epochs.first().map_or(0, |e| e.signal.len());
        let n = self.seq_len();
        let mut input = vec![0.0; n * epoch_len];
        let mut labels = vec![SleepStage::Wake; n];
        for (i, e) in record.epochs[self.range()].iter().enumerate() {
            input[i * epoch_len..(i + 1) * epoch_len].copy_from_slice(&e.signal);
            labels[i] = e.stage;
        }
        SequenceBatchItem {
            subject_id: record.subject_id.clone(),
            epochs: self.range(),
            input,
            labels,
            valid: (0..n).map(|i| i < self.valid).collect(),
            scored: self.scored.clone(),
        }
    }
}
