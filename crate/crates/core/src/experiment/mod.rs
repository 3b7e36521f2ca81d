//! End-to-end orchestration: dataset, plans, both training phases, run
//! files and reports under one output directory.
//!
//! ```text
//! <out>/plans/phase1.json
//! <out>/plans/phase2.json
//! <out>/checkpoints/phase1_fold<i>.ckpt
//! <out>/runs/<run_id>/config.json
//! <out>/runs/<run_id>/<run>_fold<i>.json
//! <out>/reports/<table>.md | .csv, bundle.json
//! ```

mod config;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DatasetConfig, ExperimentConfig, FoldConfig, PhaseOverrides};
pub use report::{build_report, emit_tables, ReportBundle, ReportFormat, ReportRow, ReportTable};

use crate::data::{generate_synthetic_cohort, load_cohort, Cohort, DataError, EpochGeometry};
use crate::seed::{derive_seed, sha256_hex};
use crate::stratify::{
    plan_phase1, plan_phase2, stratify, verify_no_leakage, Phase1Plan, Phase2Plan, PlanError, SubgroupKey, Violation,
};
use crate::train::{
    evaluate, finetune, pool, pretrain_fold, Checkpoint, CheckpointError, RunKind, RunResult, TrainError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("plan failed leakage verification: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Violations(Vec<Violation>),
    #[error("{0}")]
    Leakage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(TrainError),
    #[error("report check failed: {0}")]
    Stale(String),
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::PlanViolations(v) => ExperimentError::Violations(v),
            TrainError::Leakage(_) | TrainError::CheckpointMismatch { .. } => ExperimentError::Leakage(e.to_string()),
            TrainError::Data(d) => ExperimentError::Data(d),
            TrainError::Checkpoint(c) => ExperimentError::Checkpoint(c),
            other => ExperimentError::Train(other),
        }
    }
}

impl ExperimentError {
    pub fn is_leakage(&self) -> bool {
        matches!(self, ExperimentError::Violations(_) | ExperimentError::Leakage(_))
    }

    /// Errors caused by the user's inputs rather than by a run.
    pub fn is_input(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Parse { .. })
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// Paths of every artifact under an output root.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }

    pub fn phase1_plan(&self) -> PathBuf {
        self.root.join("plans").join("phase1.json")
    }

    pub fn phase2_plan(&self) -> PathBuf {
        self.root.join("plans").join("phase2.json")
    }

    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("phase1_fold{fold}.ckpt"))
    }

    pub fn runs_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Content address of everything that influences results. Worker count and
/// output location are excluded, so they never change the id.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let canonical = ExperimentConfig { workers: 1, out_dir: PathBuf::new(), ..cfg.clone() };
    let bytes = serde_json::to_vec(&canonical).expect("config serializes");
    sha256_hex(&bytes)[..16].to_string()
}

/// Loads the manifest or generates the synthetic cohort, returning loader
/// warnings alongside.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Cohort, Vec<String>)> {
    let (cohort, warnings) = match (&cfg.dataset.manifest, &cfg.dataset.synthetic) {
        (Some(path), None) => {
            let loaded = load_cohort(path)?;
            (loaded.cohort, loaded.warnings)
        }
        (None, Some(spec)) => (generate_synthetic_cohort(spec, derive_seed(cfg.seed, "dataset"))?, Vec::new()),
        _ => return Err(ExperimentError::Config("dataset: set exactly one of `manifest` or `synthetic`".into())),
    };
    let want = EpochGeometry { channels: cfg.model.n_channels, samples: cfg.model.samples_per_epoch };
    if !cohort.is_empty() && cohort.geometry != want {
        return Err(ExperimentError::Config(format!(
            "cohort epochs are {}x{} but the model expects {}x{}",
            cohort.geometry.channels, cohort.geometry.samples, want.channels, want.samples
        )));
    }
    Ok((cohort, warnings))
}

/// A requested subgroup that produced no table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSubgroup {
    pub subgroup: SubgroupKey,
    pub label: String,
    pub subjects: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2File {
    pub plans: Vec<Phase2Plan>,
    pub skipped: Vec<SkippedSubgroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    pub phase1: Phase1Plan,
    pub phase2: Phase2File,
}

impl PlanSet {
    pub fn verify(&self) -> Vec<Violation> {
        verify_no_leakage(&self.phase1, &self.phase2.plans)
    }

    pub fn save(&self, layout: &OutputLayout) -> Result<()> {
        write_json(&layout.phase1_plan(), &self.phase1)?;
        write_json(&layout.phase2_plan(), &self.phase2)
    }

    pub fn load(phase1: &Path, phase2: &Path) -> Result<Self> {
        Ok(PlanSet { phase1: read_json(phase1)?, phase2: read_json(phase2)? })
    }
}

/// Phase-1 folds over the whole cohort, then Phase-2 folds for every
/// subgroup of every requested axis that is large enough.
pub fn build_plans(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<PlanSet> {
    let f = &cfg.folds;
    let phase1 = plan_phase1(&cohort.ids(), f.phase1, f.validation_fraction, cfg.seed)?;
    let mut plans = Vec::new();
    let mut skipped = Vec::new();
    for &axis in &cfg.axes {
        let strata = stratify(cohort, axis);
        for key in axis.keys() {
            let ids = strata.get(&key).cloned().unwrap_or_default();
            let skip = |reason: String| SkippedSubgroup { subgroup: key, label: key.label(), subjects: ids.len(), reason };
            let spanned: BTreeSet<usize> = ids.iter().filter_map(|id| phase1.test_fold_of(id)).collect();
            if ids.len() < f.min_subgroup_size {
                skipped.push(skip(format!("{} subject(s), fewer than {}", ids.len(), f.min_subgroup_size)));
            } else if spanned.len() < 2 {
                skipped.push(skip("all subjects share one Phase-1 test fold".into()));
            } else {
                match plan_phase2(key, &ids, &phase1, cfg.max_folds(axis), f.validation_fraction, cfg.seed) {
                    Ok(p) => plans.push(p),
                    Err(e) => skipped.push(skip(e.to_string())),
                }
            }
        }
    }
    Ok(PlanSet { phase1, phase2: Phase2File { plans, skipped } })
}

/// Checks two plan files for leakage.
pub fn verify_plan_files(phase1: &Path, phase2: &Path) -> Result<Vec<Violation>> {
    Ok(PlanSet::load(phase1, phase2)?.verify())
}

fn require_clean(plans: &PlanSet) -> Result<()> {
    let v = plans.verify();
    if v.is_empty() {
        Ok(())
    } else {
        Err(ExperimentError::Violations(v))
    }
}

/// Phase 1 on a bounded worker pool. Returns each fold's checkpoint and its
/// baseline score on the held-out fold.
pub fn run_pretrain(cfg: &ExperimentConfig, cohort: &Cohort, plans: &PlanSet) -> Result<(Vec<Checkpoint>, Vec<RunResult>)> {
    require_clean(plans)?;
    let tcfg = cfg.pretrain_config();
    let outcomes: Vec<Result<(Checkpoint, RunResult)>> = pool(cfg.workers)?.install(|| {
        (0..plans.phase1.k())
            .into_par_iter()
            .map(|fold| {
                let start = Instant::now();
                let ckpt = pretrain_fold(cohort, &plans.phase1, fold, &cfg.model, &tcfg)?;
                let test = &plans.phase1.folds[fold].test;
                let model = ckpt.to_model()?;
                let evaluation = evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, cohort, test)?;
                log::info!("pretrain fold {fold}: kappa {:.3}", evaluation.report.kappa);
                let result = RunResult {
                    run: RunKind::Baseline,
                    fold_index: fold,
                    checkpoint_index: fold,
                    test_subjects: test.clone(),
                    lineage: ckpt.lineage.clone(),
                    evaluation,
                    baseline_evaluation: None,
                    log: ckpt.log.clone(),
                    wall_seconds: start.elapsed().as_secs_f64(),
                };
                Ok((ckpt, result))
            })
            .collect()
    });
    let mut ckpts = Vec::new();
    let mut results = Vec::new();
    for o in outcomes {
        let (c, r) = o?;
        ckpts.push(c);
        results.push(r);
    }
    Ok((ckpts, results))
}

/// Phase 2 for every planned subgroup fold, each initialized from its
/// assigned checkpoint.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    plans: &PlanSet,
    checkpoints: &[Checkpoint],
) -> Result<Vec<RunResult>> {
    require_clean(plans)?;
    for (i, c) in checkpoints.iter().enumerate() {
        if c.phase1_fold_index != i {
            return Err(TrainError::CheckpointMismatch { expected: i, found: c.phase1_fold_index }.into());
        }
    }
    let tcfg = cfg.finetune_config();
    let jobs: Vec<_> = plans
        .phase2
        .plans
        .iter()
        .flat_map(|p| p.folds.iter().enumerate().map(move |(i, f)| (p.subgroup, i, f)))
        .collect();
    pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(key, i, fold)| {
                let ckpt = checkpoints.get(fold.checkpoint_index).ok_or_else(|| {
                    ExperimentError::Config(format!("{key}: fold {i} needs missing checkpoint {}", fold.checkpoint_index))
                })?;
                let out = finetune(ckpt, key, i, fold, cohort, &tcfg)?;
                log::info!("finetune {key} fold {i}: kappa {:.3}", out.result.evaluation.report.kappa);
                Ok(out.result)
            })
            .collect()
    })
}

/// File name of a run result inside its run directory.
pub fn run_file_name(r: &RunResult) -> String {
    match &r.run {
        RunKind::Baseline => format!("baseline_fold{}.json", r.fold_index),
        RunKind::Subgroup { key } => format!("{}_fold{}.json", key.slug(), r.fold_index),
    }
}

pub fn save_checkpoints(layout: &OutputLayout, checkpoints: &[Checkpoint]) -> Result<()> {
    let dir = layout.root.join("checkpoints");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, c) in checkpoints.iter().enumerate() {
        c.save(&layout.checkpoint(i))?;
    }
    Ok(())
}

pub fn load_checkpoints(layout: &OutputLayout, k: usize) -> Result<Vec<Checkpoint>> {
    (0..k).map(|i| Ok(Checkpoint::load(&layout.checkpoint(i))?)).collect()
}

/// Creates the run directory for `cfg` and records the resolved config.
pub fn start_run(layout: &OutputLayout, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = layout.runs_dir(&run_id(cfg));
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

pub fn save_runs(dir: &Path, results: &[RunResult]) -> Result<()> {
    results.iter().try_for_each(|r| write_json(&dir.join(run_file_name(r)), r))
}

/// Every run result in `dir`, sorted by file name.
pub fn load_runs(dir: &Path) -> Result<Vec<RunResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.ends_with("config.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

/// Writes the bundle and its tables under `<out>/reports`.
pub fn write_report(layout: &OutputLayout, bundle: &ReportBundle, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let dir = layout.reports_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = vec![dir.join("bundle.json")];
    write_json(&written[0], bundle)?;
    for &format in formats {
        for (name, text) in emit_tables(bundle, format) {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn load_bundle(layout: &OutputLayout) -> Result<ReportBundle> {
    read_json(&layout.reports_dir().join("bundle.json"))
}

/// Rebuilds the report from saved plans and run files and compares it with
/// the saved bundle. Returns the rebuilt bundle on a match.
pub fn check_report(cfg: &ExperimentConfig, layout: &OutputLayout) -> Result<ReportBundle> {
    let id = run_id(cfg);
    let plans = PlanSet::load(&layout.phase1_plan(), &layout.phase2_plan())?;
    let rebuilt = build_report(cfg, &id, &plans, &load_runs(&layout.runs_dir(&id))?)?;
    let saved = load_bundle(layout)?;
    if saved.run_id != rebuilt.run_id {
        return Err(ExperimentError::Stale(format!("bundle is for run {}, config gives run {id}", saved.run_id)));
    }
    if saved.baseline != rebuilt.baseline {
        return Err(ExperimentError::Stale("baseline row differs from the run files".into()));
    }
    if saved.tables.len() != rebuilt.tables.len() {
        return Err(ExperimentError::Stale("table set differs from the run files".into()));
    }
    for (a, b) in saved.tables.iter().zip(&rebuilt.tables) {
        if a.name != b.name || a.skipped != b.skipped || a.rows.len() != b.rows.len() {
            return Err(ExperimentError::Stale(format!("table {} differs in layout from the run files", a.name)));
        }
        if let Some((r, _)) = a.rows.iter().zip(&b.rows).find(|(x, y)| x != y) {
            return Err(ExperimentError::Stale(format!("row {} of table {} differs from the run files", r.label, a.name)));
        }
    }
    Ok(rebuilt)
}

pub struct ExperimentSummary {
    pub run_id: String,
    pub bundle: ReportBundle,
    pub warnings: Vec<String>,
}

/// Runs everything end to end and writes all artifacts under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, formats: &[ReportFormat]) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let layout = OutputLayout::new(&cfg.out_dir);
    let id = run_id(cfg);
    let (cohort, warnings) = load_dataset(cfg)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let plans = build_plans(cfg, &cohort)?;
    plans.save(&layout)?;
    let (ckpts, mut results) = run_pretrain(cfg, &cohort, &plans)?;
    save_checkpoints(&layout, &ckpts)?;
    results.extend(run_finetune(cfg, &cohort, &plans, &ckpts)?);
    save_runs(&start_run(&layout, cfg)?, &results)?;
    let bundle = build_report(cfg, &id, &plans, &results)?;
    write_report(&layout, &bundle, formats)?;
    Ok(ExperimentSummary { run_id: id, bundle, warnings })
}
