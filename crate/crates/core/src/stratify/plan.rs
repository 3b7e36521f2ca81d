use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SubgroupKey;
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("cannot split {subjects} subjects into {k} folds")]
    TooFewSubjects { subjects: usize, k: usize },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("validation fraction must lie in [0, 1), got {0}")]
    BadValidationFraction(f64),
    #[error("subgroup {subgroup}: insufficient subjects for leakage-safe fine-tuning ({subjects} subject(s))")]
    InsufficientSubjects { subgroup: String, subjects: usize },
    #[error("subgroup {subgroup}: subject {subject} is missing from every Phase-1 test fold")]
    UnplannedSubject { subgroup: String, subject: String },
}

/// One cross-validation fold at subject level.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test: BTreeSet<String>,
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Plan {
    pub seed: u64,
    pub validation_fraction: f64,
    pub folds: Vec<FoldSplit>,
}

impl Phase1Plan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Index of the Phase-1 test fold holding `subject`.
    pub fn test_fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.test.contains(subject))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase2Fold {
    /// Phase-1 checkpoint that initializes this fold.
    pub checkpoint_index: usize,
    #[serde(flatten)]
    pub split: FoldSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Plan {
    pub subgroup: SubgroupKey,
    pub seed: u64,
    pub folds: Vec<Phase2Fold>,
    /// Subgroup members left out of every test fold by the fold cap.
    pub untested: BTreeSet<String>,
}

/// Number of subjects moved to validation: `ceil(fraction · n)`, always
/// leaving at least one for training.
fn validation_count(n: usize, fraction: f64) -> usize {
    if n <= 1 {
        return 0;
    }
    let want = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    want.min(n - 1)
}

fn carve_validation(train_side: BTreeSet<String>, fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut pool: Vec<String> = train_side.into_iter().collect();
    let n_val = validation_count(pool.len(), fraction);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = pool.drain(..n_val).collect();
    (pool.into_iter().collect(), validation)
}

fn check_fraction(f: f64) -> Result<(), PlanError> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(PlanError::BadValidationFraction(f))
    }
}

/// Seeded shuffle, round-robin fold assignment, then a subject-level
/// validation split carved from each fold's training side.
pub fn plan_phase1<S: AsRef<str>>(
    subject_ids: &[S],
    k: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Phase1Plan, PlanError> {
    if k < 2 {
        return Err(PlanError::BadFoldCount(k));
    }
    check_fraction(validation_fraction)?;
    let mut ids: Vec<String> = subject_ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(PlanError::TooFewSubjects { subjects: ids.len(), k });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "phase1/assign")));
    let mut tests = vec![BTreeSet::new(); k];
    for (i, id) in ids.iter().enumerate() {
        tests[i % k].insert(id.clone());
    }
    let all: BTreeSet<String> = ids.into_iter().collect();
    let folds = tests
        .into_iter()
        .enumerate()
        .map(|(i, test)| {
            let side = all.difference(&test).cloned().collect();
            let (train, validation) =
                carve_validation(side, validation_fraction, derive_seed(seed, &format!("phase1/val/{i}")));
            FoldSplit { test, train, validation }
        })
        .collect();
    Ok(Phase1Plan { seed, validation_fraction, folds })
}

/// Fine-tuning folds for one subgroup. Each test fold lies inside a single
/// Phase-1 test fold, and that fold's checkpoint initializes it.
///
/// Test folds are the non-empty intersections of the subgroup with the
/// Phase-1 test folds. Beyond `max_folds` the largest are kept and the rest
/// reported as untested. A subgroup inside one Phase-1 fold is split into
/// up to `max_folds` pieces sharing that checkpoint.
pub fn plan_phase2(
    subgroup: SubgroupKey,
    subgroup_ids: &BTreeSet<String>,
    phase1: &Phase1Plan,
    max_folds: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Phase2Plan, PlanError> {
    if max_folds < 2 {
        return Err(PlanError::BadFoldCount(max_folds));
    }
    check_fraction(validation_fraction)?;
    if subgroup_ids.len() < 2 {
        return Err(PlanError::InsufficientSubjects { subgroup: subgroup.label(), subjects: subgroup_ids.len() });
    }
    let mut by_fold: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for id in subgroup_ids {
        let fold = phase1
            .test_fold_of(id)
            .ok_or_else(|| PlanError::UnplannedSubject { subgroup: subgroup.label(), subject: id.clone() })?;
        by_fold.entry(fold).or_default().insert(id.clone());
    }

    let mut pieces: Vec<(usize, BTreeSet<String>)> = by_fold.into_iter().collect();
    if pieces.len() == 1 {
        let (fold, members) = pieces.pop().unwrap();
        let n = max_folds.min(members.len());
        let mut shuffled: Vec<String> = members.into_iter().collect();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("phase2/{}/split", subgroup.slug()))));
        let mut parts = vec![BTreeSet::new(); n];
        for (i, id) in shuffled.into_iter().enumerate() {
            parts[i % n].insert(id);
        }
        pieces = parts.into_iter().map(|p| (fold, p)).collect();
    }

    let mut untested = BTreeSet::new();
    if pieces.len() > max_folds {
        // Largest first; ties keep the lower Phase-1 index.
        pieces.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        for (_, rest) in pieces.drain(max_folds..) {
            untested.extend(rest);
        }
        pieces.sort_by_key(|p| p.0);
    }

    let folds = pieces
        .into_iter()
        .enumerate()
        .map(|(i, (checkpoint_index, test))| {
            let side = subgroup_ids.difference(&test).cloned().collect();
            let tag = format!("phase2/{}/val/{i}", subgroup.slug());
            let (train, validation) = carve_validation(side, validation_fraction, derive_seed(seed, &tag));
            Phase2Fold { checkpoint_index, split: FoldSplit { test, train, validation } }
        })
        .collect();
    Ok(Phase2Plan { subgroup, seed, folds, untested })
}

/// A single leakage finding, naming the subjects involved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A subject sits in two roles of the same Phase-1 fold.
    Phase1Overlap { fold: usize, subject: String, roles: String },
    /// A subject is in more than one Phase-1 test fold.
    Phase1DuplicateTest { subject: String, folds: Vec<usize> },
    /// A fold's train, validation and test sets do not cover the cohort.
    Phase1Coverage { fold: usize, subject: String },
    /// A fine-tune fold names a checkpoint that does not exist.
    Phase2UnknownCheckpoint { subgroup: String, fold: usize, checkpoint: usize },
    /// A fine-tune test subject was not held out by the fold's checkpoint.
    Phase2TestSeenByCheckpoint { subgroup: String, fold: usize, checkpoint: usize, subject: String },
    /// A fine-tune test subject is also used for training or validation.
    Phase2TrainTestOverlap { subgroup: String, fold: usize, subject: String },
    /// A subject is tested in more than one fine-tune fold of a subgroup.
    Phase2DuplicateTest { subgroup: String, subject: String, folds: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Phase1Overlap { fold, subject, roles } => {
                write!(f, "phase 1 fold {fold}: subject {subject} appears in {roles}")
            }
            Violation::Phase1DuplicateTest { subject, folds } => {
                write!(f, "phase 1: subject {subject} is tested in folds {folds:?}")
            }
            Violation::Phase1Coverage { fold, subject } => {
                write!(f, "phase 1 fold {fold}: subject {subject} is missing from train, validation and test")
            }
            Violation::Phase2UnknownCheckpoint { subgroup, fold, checkpoint } => {
                write!(f, "{subgroup} fold {fold}: checkpoint {checkpoint} does not exist")
            }
            Violation::Phase2TestSeenByCheckpoint { subgroup, fold, checkpoint, subject } => write!(
                f,
                "{subgroup} fold {fold}: test subject {subject} was not held out by checkpoint {checkpoint}"
            ),
            Violation::Phase2TrainTestOverlap { subgroup, fold, subject } => {
                write!(f, "{subgroup} fold {fold}: subject {subject} is both tested and trained on")
            }
            Violation::Phase2DuplicateTest { subgroup, subject, folds } => {
                write!(f, "{subgroup}: subject {subject} is tested in folds {folds:?}")
            }
        }
    }
}

fn overlaps(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Vec<String> {
    a.intersection(b).cloned().collect()
}

/// Checks every leakage rule and returns all violations found.
pub fn verify_no_leakage(phase1: &Phase1Plan, phase2: &[Phase2Plan]) -> Vec<Violation> {
    let mut out = Vec::new();
    let universe: BTreeSet<String> = phase1
        .folds
        .iter()
        .flat_map(|f| f.test.iter().chain(&f.train).chain(&f.validation))
        .cloned()
        .collect();

    let mut tested_in: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in phase1.folds.iter().enumerate() {
        for (a, b, roles) in [
            (&f.train, &f.test, "train and test"),
            (&f.validation, &f.test, "validation and test"),
            (&f.train, &f.validation, "train and validation"),
        ] {
            for subject in overlaps(a, b) {
                out.push(Violation::Phase1Overlap { fold: i, subject, roles: roles.into() });
            }
        }
        for s in universe.iter() {
            if !f.test.contains(s) && !f.train.contains(s) && !f.validation.contains(s) {
                out.push(Violation::Phase1Coverage { fold: i, subject: s.clone() });
            }
        }
        for s in &f.test {
            tested_in.entry(s).or_default().push(i);
        }
    }
    for (s, folds) in tested_in {
        if folds.len() > 1 {
            out.push(Violation::Phase1DuplicateTest { subject: s.to_string(), folds });
        }
    }

    for plan in phase2 {
        let subgroup = plan.subgroup.label();
        let mut tested_in: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, fold) in plan.folds.iter().enumerate() {
            let split = &fold.split;
            match phase1.folds.get(fold.checkpoint_index) {
                None => out.push(Violation::Phase2UnknownCheckpoint {
                    subgroup: subgroup.clone(),
                    fold: i,
                    checkpoint: fold.checkpoint_index,
                }),
                Some(p1) => {
                    for s in split.test.difference(&p1.test) {
                        out.push(Violation::Phase2TestSeenByCheckpoint {
                            subgroup: subgroup.clone(),
                            fold: i,
                            checkpoint: fold.checkpoint_index,
                            subject: s.clone(),
                        });
                    }
                }
            }
            let trained: BTreeSet<String> = split.train.union(&split.validation).cloned().collect();
            for subject in overlaps(&split.test, &trained) {
                out.push(Violation::Phase2TrainTestOverlap { subgroup: subgroup.clone(), fold: i, subject });
            }
            for s in &split.test {
                tested_in.entry(s).or_default().push(i);
            }
        }
        for (s, folds) in tested_in {
            if folds.len() > 1 {
                out.push(Violation::Phase2DuplicateTest { subgroup: subgroup.clone(), subject: s.to_string(), folds });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_count_rounds_up_and_caps() {
        assert_eq!(validation_count(80, 0.1), 8);
        assert_eq!(validation_count(81, 0.1), 9);
        assert_eq!(validation_count(3, 0.1), 1);
        assert_eq!(validation_count(2, 0.9), 1);
        assert_eq!(validation_count(1, 0.5), 0);
        assert_eq!(validation_count(10, 0.0), 0);
    }
}
