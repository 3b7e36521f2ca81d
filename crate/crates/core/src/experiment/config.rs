use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::SyntheticSpec;
use crate::metrics::Aggregation;
use crate::model::ModelConfig;
use crate::stratify::StratificationAxis;
use crate::train::TrainConfig;

/// Where subjects come from: exactly one of a manifest or a synthetic spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub phase1: usize,
    pub single_axis: usize,
    pub two_way: usize,
    pub validation_fraction: f64,
    /// Smaller subgroups are skipped rather than fine-tuned.
    pub min_subgroup_size: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { phase1: 5, single_axis: 5, two_way: 3, validation_fraction: 0.1, min_subgroup_size: 4 }
    }
}

/// Optional overrides applied on top of a phase's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub plateau_factor: Option<f64>,
    pub plateau_patience: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub min_improvement: Option<f64>,
    pub early_stopping: Option<bool>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub train_stride: Option<usize>,
    pub freeze_feature_extractor: Option<bool>,
    pub inherit_norm_stats: Option<bool>,
}

impl PhaseOverrides {
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { base.$f = v; } )* };
        }
        set!(
            learning_rate, adam_beta1, adam_beta2, adam_epsilon, max_grad_norm, plateau_factor, plateau_patience,
            early_stop_patience, min_improvement, early_stopping, batch_size, max_epochs, freeze_feature_extractor,
            inherit_norm_stats
        );
        if self.train_stride.is_some() {
            base.train_stride = self.train_stride;
        }
        base
    }
}

fn default_axes() -> Vec<StratificationAxis> {
    StratificationAxis::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_axes")]
    pub axes: Vec<StratificationAxis>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub folds: FoldConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PhaseOverrides,
    #[serde(default)]
    pub finetune: PhaseOverrides,
}

impl ExperimentConfig {
    /// Parses TOML without validating. A relative manifest path resolves
    /// against `base_dir`; `out_dir` stays relative to the working directory.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(m) = &cfg.dataset.manifest {
            cfg.dataset.manifest = Some(base_dir.join(m));
        }
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml_str(&text, base).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.pretrain.apply(TrainConfig::pretrain()) }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.finetune.apply(TrainConfig::finetune()) }
    }

    pub fn max_folds(&self, axis: StratificationAxis) -> usize {
        if axis.is_two_way() {
            self.folds.two_way
        } else {
            self.folds.single_axis
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(m), None) => {
                if !m.exists() {
                    return bad(format!("dataset.manifest: {} does not exist", m.display()));
                }
            }
            (None, Some(spec)) => spec.validate().map_err(|e| ExperimentError::Config(format!("dataset.synthetic: {e}")))?,
            _ => return bad("dataset: set exactly one of `manifest` or `synthetic`".into()),
        }
        let f = &self.folds;
        if f.phase1 < 2 || f.single_axis < 2 || f.two_way < 2 {
            return bad("folds: every fold count must be at least 2".into());
        }
        if !(0.0..1.0).contains(&f.validation_fraction) {
            return bad(format!("folds.validation_fraction must lie in [0, 1), got {}", f.validation_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let mut axes = self.axes.clone();
        axes.sort();
        axes.dedup();
        if axes.len() != self.axes.len() {
            return bad("axes: duplicate entries".into());
        }
        self.model.validate().map_err(|e| ExperimentError::Config(format!("model: {e}")))?;
        if let Some(spec) = &self.dataset.synthetic {
            if spec.channels != self.model.n_channels || spec.samples_per_epoch != self.model.samples_per_epoch {
                return bad(format!(
                    "dataset.synthetic geometry {}x{} does not match model {}x{}",
                    spec.channels, spec.samples_per_epoch, self.model.n_channels, self.model.samples_per_epoch
                ));
            }
        }
        for (name, t) in [("pretrain", self.pretrain_config()), ("finetune", self.finetune_config())] {
            t.validate().map_err(|e| ExperimentError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}
