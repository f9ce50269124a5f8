//! Run configuration: one human-editable TOML file with flat sections
//! mirroring the library modules. Every key is optional — an empty file (or
//! no file) runs the desk-scale defaults.

use crate::condition::EncodingParams;
use crate::flow::VelocityConfig;
use crate::fno::{FnoConfig, PretrainConfig};
use crate::hierarchy::HierarchyConfig;
use crate::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which pipeline stages a run executes. Disabled stages must be covered by
/// previously saved checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub pretrain: bool,
    pub train: bool,
    pub refine: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { pretrain: true, train: true, refine: true }
    }
}

/// Per-stage optimizer and loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Learning rate for operator pretraining.
    pub lr_pretrain: f64,
    /// Learning rate for flow-matching training.
    pub lr_train: f64,
    /// Learning rate for constraint refinement (reset at stage entry).
    pub lr_refine: f64,
    /// Learning rate for the validator updates during refinement.
    pub lr_validators: f64,
    /// Learning rate for the schedule parameters (centers, sharpness, gate
    /// slope) during refinement. The constraint pulls the centers in one
    /// direction only, so they get a much smaller step than the field; the
    /// centers should end training near where they started rather than drift
    /// into saturation.
    pub lr_schedules: f64,
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    pub epochs_refine: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch (mini-batches are subsampled per step).
    pub steps_per_epoch: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Margin for the ranking pretraining loss.
    pub margin: f64,
    /// ODE steps used when sampling waveforms during refinement.
    pub refine_sample_steps: usize,
    /// Generated waveforms kept as the refinement "fake" pool per epoch.
    pub refine_pool: usize,
    /// Epochs between regenerations of the refinement pool.
    pub refine_pool_refresh: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_pretrain: 1e-3,
            lr_train: 1e-3,
            lr_refine: 1e-3,
            lr_validators: 1e-3,
            lr_schedules: 5e-5,
            epochs_pretrain: 60,
            epochs_train: 60,
            epochs_refine: 60,
            batch_size: 16,
            steps_per_epoch: 12,
            grad_clip: 1.0,
            margin: 0.05,
            refine_sample_steps: 20,
            refine_pool: 32,
            refine_pool_refresh: 6,
        }
    }
}

/// Data layout for a desk-scale run: two pretraining source domains plus one
/// target domain whose non-training temperatures are held out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Waveforms per domain for pretraining corpora.
    pub pretrain_per_domain: usize,
    /// Temperatures spanned by each pretraining domain.
    pub pretrain_temps: Vec<f64>,
    /// Waveforms in the target training split (train temperature only).
    pub target_train: usize,
    /// Training temperature of the target domain.
    pub train_temp: f64,
    /// Waveforms per evaluation group, each side.
    pub eval_per_group: usize,
    /// Include the target domain in pretraining (the inclusion arm of the
    /// target-exclusion study). Default: excluded.
    pub pretrain_includes_target: bool,
    /// Optional cycle split: hold out cycles above this index from training.
    pub max_train_cycle: Option<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_per_domain: 600,
            pretrain_temps: crate::synth::distinct_eval_temps(),
            target_train: 600,
            train_temp: 24.0,
            eval_per_group: 24,
            pretrain_includes_target: false,
            max_train_cycle: None,
        }
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// ODE integration steps for generation.
    pub ode_steps: usize,
    /// Candidate temperatures for discrimination scoring.
    pub candidate_temps: Vec<f64>,
    /// Monte-Carlo draws per (curve, candidate) discrimination score.
    pub n_mc: usize,
    /// Curves per evaluation group entered into discrimination scoring.
    pub disc_per_group: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ode_steps: 50,
            candidate_temps: crate::synth::distinct_eval_temps(),
            n_mc: 64,
            disc_per_group: 12,
        }
    }
}

/// The complete run configuration. TOML sections: `[stages]`, `[training]`,
/// `[data]`, `[eval]`, `[synth]`, `[encoding]`, `[fno]`, `[velocity]`,
/// `[hierarchy]`, plus top-level `seed` and `out_dir`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub stages: StageToggles,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub encoding: EncodingParams,
    pub fno: FnoConfig,
    pub velocity: VelocityConfig,
    pub hierarchy: HierarchyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: "runs".into(),
            stages: StageToggles::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            encoding: EncodingParams::default(),
            fno: FnoConfig::default(),
            velocity: VelocityConfig::default(),
            hierarchy: HierarchyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let lrs = [
            ("training.lr_pretrain", self.training.lr_pretrain),
            ("training.lr_train", self.training.lr_train),
            ("training.lr_refine", self.training.lr_refine),
            ("training.lr_validators", self.training.lr_validators),
            ("training.lr_schedules", self.training.lr_schedules),
        ];
        for (name, lr) in lrs {
            if !(lr > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0, got {lr}")));
            }
        }
        let epochs = [
            ("training.epochs_pretrain", self.training.epochs_pretrain),
            ("training.epochs_train", self.training.epochs_train),
            ("training.epochs_refine", self.training.epochs_refine),
        ];
        for (name, e) in epochs {
            if e < 1 {
                return Err(ConfigError::Invalid(format!("{name} must be ≥ 1")));
            }
        }
        if self.training.batch_size == 0 || self.training.steps_per_epoch == 0 {
            return Err(ConfigError::Invalid(
                "training.batch_size and training.steps_per_epoch must be ≥ 1".into(),
            ));
        }
        if self.training.refine_pool_refresh == 0 {
            return Err(ConfigError::Invalid("training.refine_pool_refresh must be ≥ 1".into()));
        }
        if self.eval.disc_per_group == 0 {
            return Err(ConfigError::Invalid("eval.disc_per_group must be ≥ 1".into()));
        }
        if !(self.training.grad_clip > 0.0) {
            return Err(ConfigError::Invalid("training.grad_clip must be > 0".into()));
        }
        if self.eval.ode_steps < 2 {
            return Err(ConfigError::Invalid("eval.ode_steps must be ≥ 2".into()));
        }
        if self.eval.candidate_temps.len() < 2 {
            return Err(ConfigError::Invalid("eval.candidate_temps needs ≥ 2 entries".into()));
        }
        if self.velocity.curve_len != self.synth.curve_len
            || self.hierarchy.curve_len != self.synth.curve_len
        {
            return Err(ConfigError::Invalid(format!(
                "curve lengths disagree: synth {}, velocity {}, hierarchy {}",
                self.synth.curve_len, self.velocity.curve_len, self.hierarchy.curve_len
            )));
        }
        Ok(())
    }

    /// The ranking-pretraining settings implied by this config.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.training.epochs_pretrain,
            batch_size: self.training.batch_size,
            learning_rate: self.training.lr_pretrain,
            margin: self.training.margin,
        }
    }
}
