use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_weights, fit, predict_records, Checkpoint, Result, TrainConfig, TrainError, TrainingLog};
use crate::data::{apply_normalization, compute_norm_stats, Cohort, NormStats, SubjectRecord};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{ModelConfig, SleepStager};
use crate::seed::derive_seed;
use crate::stratify::{verify_no_leakage, Phase1Plan, Phase2Fold, SubgroupKey};

/// Eval-mode batch size; it affects speed only.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Confusion matrix of each evaluated subject.
    pub per_subject: BTreeMap<String, ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    Baseline,
    Subgroup { key: SubgroupKey },
}

/// Outcome of one evaluated fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: RunKind,
    pub fold_index: usize,
    pub checkpoint_index: usize,
    pub test_subjects: BTreeSet<String>,
    pub lineage: BTreeSet<String>,
    pub evaluation: Evaluation,
    /// The unmodified Phase-1 checkpoint scored on the same test subjects.
    pub baseline_evaluation: Option<Evaluation>,
    pub log: TrainingLog,
    pub wall_seconds: f64,
}

fn records<'a, I: IntoIterator<Item = &'a String>>(cohort: &Cohort, ids: I, stats: &NormStats) -> Result<Vec<SubjectRecord>> {
    ids.into_iter().map(|id| Ok(apply_normalization(cohort.require(id)?, stats))).collect()
}

fn labels_of<'a>(cohort: &'a Cohort, ids: &'a BTreeSet<String>) -> impl Iterator<Item = crate::data::SleepStage> + 'a {
    ids.iter().filter_map(|id| cohort.subject(id)).flat_map(|s| s.labels())
}

/// Scores `model` on `subjects`. Refuses any subject in `lineage`.
pub fn evaluate(
    model: &SleepStager<f32>,
    norm_stats: &NormStats,
    lineage: &BTreeSet<String>,
    cohort: &Cohort,
    subjects: &BTreeSet<String>,
) -> Result<Evaluation> {
    let leaked: Vec<&String> = subjects.intersection(lineage).collect();
    if !leaked.is_empty() {
        return Err(TrainError::Leakage(format!("evaluation subjects {leaked:?} were used to train this model")));
    }
    if let Some(s) = subjects.intersection(&norm_stats.provenance).next() {
        return Err(TrainError::Leakage(format!("evaluation subject {s} contributed normalization statistics")));
    }
    if subjects.is_empty() {
        return Err(TrainError::Config("evaluation needs at least one subject".into()));
    }
    let recs = records(cohort, subjects, norm_stats)?;
    let preds = predict_records(model, &recs, EVAL_BATCH)?;
    let n = model.config().n_classes;
    let mut pooled = ConfusionMatrix::zeros(n);
    let mut per_subject = BTreeMap::new();
    for (r, p) in recs.iter().zip(preds) {
        let truth: Vec<usize> = r.epochs.iter().map(|e| e.stage.index()).collect();
        let cm = crate::metrics::confusion(&truth, &p, n)?;
        pooled.merge(&cm)?;
        per_subject.insert(r.subject_id.clone(), cm);
    }
    Ok(Evaluation { report: MetricsReport::from_confusion(pooled), per_subject })
}

/// Trains the Phase-1 model of one fold.
pub fn pretrain_fold(
    cohort: &Cohort,
    plan: &Phase1Plan,
    fold: usize,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let split = plan
        .folds
        .get(fold)
        .ok_or_else(|| TrainError::Config(format!("plan has no fold {fold}")))?;
    let norm = compute_norm_stats(cohort, &split.train.iter().collect::<Vec<_>>())?;
    let weights = class_weights(labels_of(cohort, &split.train))?;
    let train = records(cohort, &split.train, &norm)?;
    let val = records(cohort, &split.validation, &norm)?;
    let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, &format!("pretrain/{fold}")), ..cfg.clone() };
    let mut model = SleepStager::build(model_config, derive_seed(fold_cfg.seed, "init"))?;
    let log = fit(&mut model, &train, &val, &weights, &fold_cfg)?;
    let lineage = split.train.union(&split.validation).cloned().collect();
    Ok(Checkpoint::from_model(&model, &fold_cfg, fold, norm, lineage, log))
}

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("worker pool: {e}")))
}

/// Phase 1: one checkpoint per fold, folds run on up to `workers` threads.
/// The plan is verified before any training starts.
pub fn pretrain(
    cohort: &Cohort,
    plan: &Phase1Plan,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<Checkpoint>> {
    let violations = verify_no_leakage(plan, &[]);
    if !violations.is_empty() {
        return Err(TrainError::PlanViolations(violations));
    }
    pool(workers)?.install(|| {
        (0..plan.k())
            .into_par_iter()
            .map(|fold| pretrain_fold(cohort, plan, fold, model_config, cfg))
            .collect()
    })
}

pub struct FinetuneOutcome {
    pub model: SleepStager<f32>,
    pub norm_stats: NormStats,
    pub result: RunResult,
}

/// Phase 2 for one fold: start from the matching checkpoint, train on the
/// fold's subgroup subjects, and score both the fine-tuned model and the
/// checkpoint on the fold's test subjects.
pub fn finetune(
    checkpoint: &Checkpoint,
    subgroup: SubgroupKey,
    fold_index: usize,
    fold: &Phase2Fold,
    cohort: &Cohort,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    if fold.checkpoint_index != checkpoint.phase1_fold_index {
        return Err(TrainError::CheckpointMismatch {
            expected: fold.checkpoint_index,
            found: checkpoint.phase1_fold_index,
        });
    }
    let start = Instant::now();
    let split = &fold.split;
    let mut model = checkpoint.to_model()?;
    model.store.reset_optimizer();
    let base_model = model.clone();

    let norm = if cfg.inherit_norm_stats {
        checkpoint.norm_stats.clone()
    } else {
        compute_norm_stats(cohort, &split.train.iter().collect::<Vec<_>>())?
    };
    let weights = class_weights(labels_of(cohort, &split.train))?;
    let train = records(cohort, &split.train, &norm)?;
    let val = records(cohort, &split.validation, &norm)?;
    let fold_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("finetune/{}/{fold_index}", subgroup.slug())),
        ..cfg.clone()
    };
    let log = fit(&mut model, &train, &val, &weights, &fold_cfg)?;

    let mut lineage = checkpoint.lineage.clone();
    lineage.extend(split.train.iter().cloned());
    lineage.extend(split.validation.iter().cloned());
    lineage.extend(norm.provenance.iter().cloned());
    let evaluation = evaluate(&model, &norm, &lineage, cohort, &split.test)?;
    let baseline = evaluate(&base_model, &checkpoint.norm_stats, &checkpoint.lineage, cohort, &split.test)?;
    let result = RunResult {
        run: RunKind::Subgroup { key: subgroup },
        fold_index,
        checkpoint_index: fold.checkpoint_index,
        test_subjects: split.test.clone(),
        lineage,
        evaluation,
        baseline_evaluation: Some(baseline),
        log,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(FinetuneOutcome { model, norm_stats: norm, result })
}
