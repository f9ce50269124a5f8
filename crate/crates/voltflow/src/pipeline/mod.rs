//! Three-stage training orchestration, evaluation protocol, and experiment
//! harness: operator pretraining → guided flow-matching → constraint
//! refinement, plus metric reports and the variant-comparison suite.

pub mod variants;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::condition::encode_batch;
use crate::config::{ConfigError, RunConfig};
use crate::flow::{
    cfm_loss, discrimination_draws, generate, matching_score, velocity_var_list, FlowBatch,
    FlowError, Guidance, VelocityField,
};
use crate::fno::{flatten_vars, FnoError, FnoModel, PretrainReport};
use crate::hierarchy::{
    schedule_var_list, total_loss, train_validators, validator_var_list, Hierarchy,
    HierarchyError,
};
use crate::metrics::{
    condition_label, discrimination_accuracy, population_distance, MetricsError,
};
use crate::nn::{apply_step, Adam, AdamConfig, Param, Parameterized};
use crate::synth::{eval_groups, generate_corpus, Chemistry, Corpus, SynthError};
use crate::tape::{Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} diverged at epoch {epoch}: loss = {loss}")]
    Divergence { stage: u8, epoch: usize, loss: f64 },
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Operator(#[from] FnoError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code for this failure: 1 for configuration/usage errors,
    /// 3 for the divergence guard, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::ConfigFile(_) => 1,
            PipelineError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn write_text(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, body)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

// ── data layout ──

/// All corpora one run needs, built deterministically from the config.
#[derive(Debug, Clone)]
pub struct Corpora {
    /// Multi-temperature source domains for operator pretraining.
    pub pretrain: Corpus,
    /// Target-domain training split (train temperature only).
    pub target_train: Corpus,
    /// Real evaluation groups: name → corpus at that group's temperature.
    pub eval: BTreeMap<String, Corpus>,
}

pub fn build_corpora(config: &RunConfig) -> Corpora {
    let seed = config.seed;
    let source_a = crate::synth::SynthConfig {
        chemistry: Chemistry::SourceA,
        encoding: config.encoding,
        ..config.synth.clone()
    };
    let source_b =
        crate::synth::SynthConfig { chemistry: Chemistry::SourceB, ..source_a.clone() };
    let target = crate::synth::SynthConfig { chemistry: Chemistry::Target, ..source_a.clone() };

    // `pretrain_per_domain` counts a whole domain; spread it over the
    // domain's temperature grid
    let per_temp =
        (config.data.pretrain_per_domain / config.data.pretrain_temps.len().max(1)).max(1);
    let mut pretrain = generate_corpus(
        &source_a,
        &config.data.pretrain_temps,
        per_temp,
        seed ^ 0xA11CE,
        "srcA",
    )
    .merged(generate_corpus(
        &source_b,
        &config.data.pretrain_temps,
        per_temp,
        seed ^ 0xB0B57,
        "srcB",
    ));
    if config.data.pretrain_includes_target {
        pretrain = pretrain.merged(generate_corpus(
            &target,
            &config.data.pretrain_temps,
            per_temp,
            seed ^ 0xC4B1E,
            "tgt-pre",
        ));
    }

    let mut target_train = generate_corpus(
        &target,
        &[config.data.train_temp],
        config.data.target_train,
        seed ^ 0xD17A,
        "tgt",
    );
    if let Some(max_cycle) = config.data.max_train_cycle {
        target_train.waveforms.retain(|w| w.cycle <= max_cycle);
    }

    let mut eval = BTreeMap::new();
    for group in eval_groups() {
        let corpus = generate_corpus(
            &target,
            &[group.temp_c],
            config.data.eval_per_group,
            seed ^ group.seed_offset,
            &group.name,
        );
        eval.insert(group.name, corpus);
    }
    Corpora { pretrain, target_train, eval }
}

// ── stage 1: operator pretraining ──

pub fn run_stage1(
    config: &RunConfig,
    pretrain_corpus: &Corpus,
    rng: &mut ChaCha8Rng,
) -> Result<(FnoModel, PretrainReport), PipelineError> {
    crate::fno::pretrain(
        pretrain_corpus,
        config.fno,
        &config.pretrain_config(),
        &config.encoding,
        rng,
    )
    .map_err(|e| match e {
        FnoError::SingleTemperatureGroup(n) => PipelineError::Config(format!(
            "operator pretraining needs at least two temperature groups, corpus has {n}"
        )),
        FnoError::NonFiniteLoss { epoch, loss } => {
            PipelineError::Divergence { stage: 1, epoch, loss }
        }
        other => PipelineError::Operator(other),
    })
}

// ── stage 2: guided flow matching ──

/// Per-epoch mean losses of a training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub epoch_losses: Vec<f64>,
}

/// Exponential moving average with smoothing factor `alpha` ∈ (0, 1] —
/// the smoothed trend used to judge whether a loss curve decreases.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = f64::NAN;
    for (i, &v) in values.iter().enumerate() {
        acc = if i == 0 { v } else { alpha * v + (1.0 - alpha) * acc };
        out.push(acc);
    }
    out
}

fn sample_rows(corpus: &Corpus, count: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>) {
    let idx: Vec<usize> =
        (0..count).map(|_| rng.random_range(0..corpus.len())).collect();
    let temps = idx.iter().map(|&i| corpus.waveforms[i].temperature_c).collect();
    (corpus.batch(&idx), temps)
}

/// Standard stage two: flow-matching only. With `Some(fno)` the frozen
/// operator guides the field and stays bit-unchanged; with `None` the field
/// trains unguided (the pure flow-matching arm).
pub fn run_stage2(
    config: &RunConfig,
    fno: Option<&FnoModel>,
    corpus: &Corpus,
    rng: &mut ChaCha8Rng,
) -> Result<(VelocityField, StageTrace), PipelineError> {
    if let Some(model) = fno {
        if !model.frozen {
            return Err(PipelineError::Config(
                "stage two requires a frozen guidance operator checkpoint".into(),
            ));
        }
    }
    if corpus.is_empty() {
        return Err(PipelineError::Config("stage two training corpus is empty".into()));
    }
    let digest_before = fno.map(|m| m.digest());
    let mut field = VelocityField::new(config.velocity, rng);
    let mut adam = Adam::new(AdamConfig {
        lr: config.training.lr_train,
        clip_norm: config.training.grad_clip,
        ..AdamConfig::default()
    });
    let mut trace = StageTrace { epoch_losses: Vec::with_capacity(config.training.epochs_train) };
    let guidance = match fno {
        Some(model) => Guidance::frozen(model)?,
        None => Guidance::None,
    };
    for epoch in 0..config.training.epochs_train {
        let mut epoch_loss = 0.0;
        for _ in 0..config.training.steps_per_epoch {
            let (x1, temps) = sample_rows(corpus, config.training.batch_size, rng);
            let batch = FlowBatch::draw(x1, temps, &config.encoding, rng)?;
            let mut tape = Tape::new();
            let fvars = field.bind(&mut tape, false);
            let step = cfm_loss(&mut tape, &field, &fvars, &guidance, &batch)?;
            let loss = tape.scalar_value(step.loss);
            if !loss.is_finite() {
                return Err(PipelineError::Divergence { stage: 2, epoch, loss });
            }
            epoch_loss += loss;
            tape.backward(step.loss).expect("scalar loss");
            let grads: Vec<Tensor> = velocity_var_list(&fvars)
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            apply_step(&mut field, &mut adam, &grads);
        }
        trace.epoch_losses.push(epoch_loss / config.training.steps_per_epoch as f64);
    }
    if let (Some(model), Some(before)) = (fno, digest_before) {
        assert_eq!(
            model.digest(),
            before,
            "guidance operator parameters changed during stage two"
        );
    }
    Ok((field, trace))
}

/// Stage two with a trainable operator (the scratch / finetune / partial-
/// freeze arms): operator and field update jointly, and the operator is
/// frozen when the stage completes.
pub fn run_stage2_live(
    config: &RunConfig,
    fno: &mut FnoModel,
    corpus: &Corpus,
    rng: &mut ChaCha8Rng,
) -> Result<(VelocityField, StageTrace), PipelineError> {
    if fno.frozen {
        return Err(PipelineError::Config(
            "live stage two requires a trainable operator; use the frozen path instead".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(PipelineError::Config("stage two training corpus is empty".into()));
    }
    let mut field = VelocityField::new(config.velocity, rng);
    let adam_cfg = AdamConfig {
        lr: config.training.lr_train,
        clip_norm: config.training.grad_clip,
        ..AdamConfig::default()
    };
    let mut adam_field = Adam::new(adam_cfg);
    let mut adam_fno = Adam::new(adam_cfg);
    let mut trace = StageTrace { epoch_losses: Vec::with_capacity(config.training.epochs_train) };
    for epoch in 0..config.training.epochs_train {
        let mut epoch_loss = 0.0;
        for _ in 0..config.training.steps_per_epoch {
            let (x1, temps) = sample_rows(corpus, config.training.batch_size, rng);
            let batch = FlowBatch::draw(x1, temps, &config.encoding, rng)?;
            let mut tape = Tape::new();
            let fvars = field.bind(&mut tape, false);
            let ovars = fno.bind(&mut tape);
            let guidance = Guidance::live(fno, &ovars)?;
            let step = cfm_loss(&mut tape, &field, &fvars, &guidance, &batch)?;
            let loss = tape.scalar_value(step.loss);
            if !loss.is_finite() {
                return Err(PipelineError::Divergence { stage: 2, epoch, loss });
            }
            epoch_loss += loss;
            tape.backward(step.loss).expect("scalar loss");
            let field_grads: Vec<Tensor> = velocity_var_list(&fvars)
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            let fno_grads: Vec<Tensor> =
                flatten_vars(&ovars).into_iter().map(|v| tape.grad_tensor(v)).collect();
            apply_step(&mut field, &mut adam_field, &field_grads);
            apply_step(fno, &mut adam_fno, &fno_grads);
        }
        trace.epoch_losses.push(epoch_loss / config.training.steps_per_epoch as f64);
    }
    fno.freeze();
    Ok((field, trace))
}

// ── stage 3: constraint refinement ──

/// One epoch's hierarchy diagnostics, serialized to the refinement report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub total_loss: f64,
    pub cfm_loss: f64,
    pub operator_consistency_loss: f64,
    pub constraint_loss: f64,
    pub validator_loss: f64,
    /// Schedule centers β, per level.
    pub beta: Vec<f64>,
    pub alpha_gate: f64,
    /// Confounding coefficients in natural orientation: [level][lower].
    pub beta_kj: Vec<Vec<f64>>,
    /// Mean true-condition validator score per level on the last batch.
    pub mean_scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineDiagnostics {
    pub epochs: Vec<EpochDiagnostics>,
}

struct SchedulesOnly<'a> {
    hier: &'a mut Hierarchy,
}

impl Parameterized for SchedulesOnly<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.hier.visit_schedule_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hier.visit_schedule_params_mut(f);
    }
}

struct ValidatorsOnly<'a> {
    hier: &'a mut Hierarchy,
}

impl Parameterized for ValidatorsOnly<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.hier.visit_validator_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hier.visit_validator_params_mut(f);
    }
}

/// Stage three: alternate validator updates (real vs generated), joint
/// field + schedule updates through the total loss, and the per-step
/// confounding regression with projection. Optimizer state is fresh at stage
/// entry (the learning-rate reset). Writes per-epoch diagnostics JSON to
/// `out_dir` when given — including a partial dump if the stage diverges.
pub fn run_stage3(
    config: &RunConfig,
    fno: &FnoModel,
    field: &mut VelocityField,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    rng: &mut ChaCha8Rng,
) -> Result<(Hierarchy, RefineDiagnostics), PipelineError> {
    if !fno.frozen {
        return Err(PipelineError::Config(
            "stage three requires a frozen guidance operator checkpoint".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(PipelineError::Config("stage three training corpus is empty".into()));
    }
    let mut hier = Hierarchy::new(config.hierarchy.clone(), rng);
    let mut adam_refine = Adam::new(AdamConfig {
        lr: config.training.lr_refine,
        clip_norm: config.training.grad_clip,
        ..AdamConfig::default()
    });
    let mut adam_schedules = Adam::new(AdamConfig {
        lr: config.training.lr_schedules,
        clip_norm: config.training.grad_clip,
        ..AdamConfig::default()
    });
    let mut adam_validators = Adam::new(AdamConfig {
        lr: config.training.lr_validators,
        clip_norm: config.training.grad_clip,
        ..AdamConfig::default()
    });
    let mut diagnostics = RefineDiagnostics { epochs: Vec::new() };
    let mut pool: Option<Tensor> = None;
    let pool_refresh = config.training.refine_pool_refresh;

    let flush = |diag: &RefineDiagnostics| -> Result<(), PipelineError> {
        if let Some(dir) = out_dir {
            let body = serde_json::to_string_pretty(diag).expect("serializable diagnostics");
            write_text(&dir.join("refine_diagnostics.json"), &body)?;
        }
        Ok(())
    };

    for epoch in 0..config.training.epochs_refine {
        if epoch % pool_refresh == 0 || pool.is_none() {
            let n = config.training.refine_pool.max(config.training.batch_size);
            let temps: Vec<f64> = (0..n)
                .map(|_| corpus.waveforms[rng.random_range(0..corpus.len())].temperature_c)
                .collect();
            let guidance = Guidance::frozen(fno)?;
            let seed = rng.random::<u64>();
            let generated = generate(
                field,
                &guidance,
                &temps,
                &config.encoding,
                config.training.refine_sample_steps,
                seed,
            )?;
            pool = Some(generated);
        }
        let pool_tensor = pool.as_ref().expect("pool initialized");

        let mut sums = [0.0f64; 5]; // total, cfm, fno, constraint, validator
        let mut last_scores = vec![0.0; config.hierarchy.levels];
        for _ in 0..config.training.steps_per_epoch {
            // (1) validator update: real toward 0, generated toward 1
            let b = config.training.batch_size;
            let (real_x, real_temps) = sample_rows(corpus, b, rng);
            let pool_len = pool_tensor.shape[0];
            let gen_idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..pool_len)).collect();
            let l = corpus.curve_len;
            let mut gen_data = Vec::with_capacity(b * l);
            for &i in &gen_idx {
                gen_data.extend_from_slice(&pool_tensor.data[i * l..(i + 1) * l]);
            }
            let gen_x = Tensor::new(vec![b, l], gen_data);
            let cond_real = encode_batch(&real_temps, &config.encoding)
                .map_err(HierarchyError::Condition)?;

            let mut tape = Tape::new();
            let hvars = hier.bind(&mut tape, false, true);
            let rx = tape.input(&real_x);
            let gx = tape.input(&gen_x);
            let rc = tape.input(&cond_real);
            let v_loss = train_validators(&mut tape, &hier, &hvars, rx, rc, gx, rc)?;
            let v_loss_value = tape.scalar_value(v_loss);
            if !v_loss_value.is_finite() {
                flush(&diagnostics)?;
                return Err(PipelineError::Divergence { stage: 3, epoch, loss: v_loss_value });
            }
            tape.backward(v_loss).expect("scalar loss");
            let v_grads: Vec<Tensor> = validator_var_list(&hvars)
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            apply_step(&mut ValidatorsOnly { hier: &mut hier }, &mut adam_validators, &v_grads);

            // (2) field + schedule update through the composite objective
            let (x1, temps) = sample_rows(corpus, b, rng);
            let batch = FlowBatch::draw(x1, temps, &config.encoding, rng)?;
            let mut tape = Tape::new();
            let fvars = field.bind(&mut tape, false);
            let hvars = hier.bind(&mut tape, true, false);
            let step = total_loss(
                &mut tape,
                field,
                &fvars,
                fno,
                &hier,
                &hvars,
                &batch,
                &config.encoding,
            )?;
            let total = tape.scalar_value(step.total);
            if !total.is_finite() {
                flush(&diagnostics)?;
                return Err(PipelineError::Divergence { stage: 3, epoch, loss: total });
            }
            sums[0] += total;
            sums[1] += tape.scalar_value(step.flow.loss);
            sums[2] += tape.scalar_value(step.fno_recon_loss);
            sums[3] += tape.scalar_value(step.constraint.loss);
            sums[4] += v_loss_value;
            let scores = tape.value(step.constraint.scores);
            for (k, slot) in last_scores.iter_mut().enumerate() {
                *slot = (0..b).map(|i| scores[i * hier.config.levels + k]).sum::<f64>()
                    / b as f64;
            }
            let v_cf = tape.value(step.constraint.v_cf).to_vec();
            tape.backward(step.total).expect("scalar loss");
            let field_grads: Vec<Tensor> = velocity_var_list(&fvars)
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            let sched_grads: Vec<Tensor> = schedule_var_list(&hvars)
                .into_iter()
                .map(|v| tape.grad_tensor(v))
                .collect();
            apply_step(field, &mut adam_refine, &field_grads);
            apply_step(&mut SchedulesOnly { hier: &mut hier }, &mut adam_schedules, &sched_grads);

            // (3) confounding regression on this step's counterfactual
            // scores, then projection
            hier.fit_confounding(&Tensor::new(vec![b, hier.config.levels], v_cf))?;
            hier.project();
        }

        let s = config.training.steps_per_epoch as f64;
        diagnostics.epochs.push(EpochDiagnostics {
            epoch,
            total_loss: sums[0] / s,
            cfm_loss: sums[1] / s,
            operator_consistency_loss: sums[2] / s,
            constraint_loss: sums[3] / s,
            validator_loss: sums[4] / s,
            beta: hier.beta.value.data.clone(),
            alpha_gate: hier.alpha_gate.value.data[0],
            beta_kj: hier.confound_matrix(),
            mean_scores: last_scores,
        });
    }
    flush(&diagnostics)?;
    Ok((hier, diagnostics))
}

// ── checkpoint chaining ──

pub const STAGE1_FILE: &str = "stage1.json";
pub const STAGE2_FILE: &str = "stage2.json";
pub const STAGE3_FILE: &str = "stage3.json";

/// Resolve the stage-1 checkpoint: load it from `out` when present,
/// otherwise run pretraining if the stage is enabled. A disabled stage with
/// no saved artifact is a configuration error naming the missing file.
pub fn ensure_stage1(config: &RunConfig, out: &Path) -> Result<Checkpoint, PipelineError> {
    let path = out.join(STAGE1_FILE);
    if path.exists() {
        return Ok(Checkpoint::load(&path)?);
    }
    if !config.stages.pretrain {
        return Err(PipelineError::Config(format!(
            "pretraining is disabled and the stage-1 checkpoint {} does not exist",
            path.display()
        )));
    }
    let corpora = build_corpora(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (fno, report) = run_stage1(config, &corpora.pretrain, &mut rng)?;
    write_text(
        &out.join("pretrain_report.json"),
        &serde_json::to_string_pretty(&report).expect("serializable report"),
    )?;
    let mut ckpt = Checkpoint::new(config.clone(), rng);
    ckpt.completed_stage = 1;
    ckpt.fno = Some(fno);
    ckpt.save(&path)?;
    Ok(ckpt)
}

/// Resolve the stage-2 checkpoint, chaining through stage 1 as needed.
pub fn ensure_stage2(config: &RunConfig, out: &Path) -> Result<Checkpoint, PipelineError> {
    let path = out.join(STAGE2_FILE);
    if path.exists() {
        return Ok(Checkpoint::load(&path)?);
    }
    if !config.stages.train {
        return Err(PipelineError::Config(format!(
            "flow training is disabled and the stage-2 checkpoint {} does not exist",
            path.display()
        )));
    }
    let mut ckpt = ensure_stage1(config, out)?;
    let fno = ckpt.fno.as_ref().ok_or_else(|| {
        PipelineError::Config("stage-1 checkpoint holds no operator model".into())
    })?;
    let corpora = build_corpora(config);
    let mut rng = ckpt.rng.clone();
    let (field, trace) = run_stage2(config, Some(fno), &corpora.target_train, &mut rng)?;
    write_text(
        &out.join("train_trace.json"),
        &serde_json::to_string_pretty(&trace).expect("serializable trace"),
    )?;
    ckpt.completed_stage = 2;
    ckpt.field = Some(field);
    ckpt.rng = rng;
    ckpt.save(&path)?;
    Ok(ckpt)
}

/// Resolve the stage-3 checkpoint, chaining through stages 1–2 as needed.
pub fn ensure_stage3(config: &RunConfig, out: &Path) -> Result<Checkpoint, PipelineError> {
    let path = out.join(STAGE3_FILE);
    if path.exists() {
        return Ok(Checkpoint::load(&path)?);
    }
    if !config.stages.refine {
        return Err(PipelineError::Config(format!(
            "refinement is disabled and the stage-3 checkpoint {} does not exist",
            path.display()
        )));
    }
    let mut ckpt = ensure_stage2(config, out)?;
    let fno = ckpt.fno.clone().ok_or_else(|| {
        PipelineError::Config("stage-2 checkpoint holds no operator model".into())
    })?;
    let mut field = ckpt.field.take().ok_or_else(|| {
        PipelineError::Config("stage-2 checkpoint holds no velocity field".into())
    })?;
    let corpora = build_corpora(config);
    let mut rng = ckpt.rng.clone();
    let (hier, _diag) =
        run_stage3(config, &fno, &mut field, &corpora.target_train, Some(out), &mut rng)?;
    ckpt.completed_stage = 3;
    ckpt.field = Some(field);
    ckpt.hierarchy = Some(hier);
    ckpt.rng = rng;
    ckpt.save(&path)?;
    Ok(ckpt)
}

// ── evaluation ──

/// The evaluation artifact: per-group error, per-condition feature-space
/// distances, and condition-discrimination accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_per_group: BTreeMap<String, f64>,
    /// Mean RMSE over the held-out (non-train) groups.
    pub rmse_held_out_mean: f64,
    pub pfd_per_condition: BTreeMap<String, f64>,
    pub pfd_aggregate: f64,
    pub discrimination_accuracy: f64,
    pub discrimination_baseline: f64,
    pub sample_counts: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        for (group, v) in &self.rmse_per_group {
            rows.push((format!("rmse[{group}]"), format!("{v:.6}")));
        }
        rows.push(("rmse held-out mean".into(), format!("{:.6}", self.rmse_held_out_mean)));
        for (cond, v) in &self.pfd_per_condition {
            rows.push((format!("pfd[{cond}]"), format!("{v:.6}")));
        }
        rows.push(("pfd aggregate".into(), format!("{:.6}", self.pfd_aggregate)));
        rows.push((
            "discrimination accuracy".into(),
            format!("{:.4}", self.discrimination_accuracy),
        ));
        rows.push((
            "discrimination baseline".into(),
            format!("{:.4}", self.discrimination_baseline),
        ));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, l) = (t.shape[0], t.shape[1]);
    (0..b).map(|i| t.data[i * l..(i + 1) * l].to_vec()).collect()
}

/// Generate waveforms for every evaluation group and score them against the
/// real groups. `fno` carries guidance when present (it must be frozen);
/// otherwise the field runs unguided.
pub fn evaluate(
    config: &RunConfig,
    field: &VelocityField,
    fno: Option<&FnoModel>,
    eval: &BTreeMap<String, Corpus>,
    out_dir: Option<&Path>,
) -> Result<MetricsReport, PipelineError> {
    let guidance = match fno {
        Some(model) => Guidance::frozen(model)?,
        None => Guidance::None,
    };
    let mut rmse_per_group = BTreeMap::new();
    let mut sample_counts = BTreeMap::new();
    let mut gen_by_condition: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut real_by_condition: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut held_out = Vec::new();
    let mut disc_items: Vec<(Vec<f64>, f64)> = Vec::new();

    for (name, corpus) in eval {
        if corpus.is_empty() {
            return Err(PipelineError::Config(format!("evaluation group {name} is empty")));
        }
        let temps: Vec<f64> = corpus.waveforms.iter().map(|w| w.temperature_c).collect();
        let group_seed = eval_generation_seed(config.seed, name);
        let generated = generate(
            field,
            &guidance,
            &temps,
            &config.encoding,
            config.eval.ode_steps,
            group_seed,
        )?;
        let gen_rows = tensor_rows(&generated);
        let real_rows: Vec<Vec<f64>> =
            corpus.waveforms.iter().map(|w| w.values.clone()).collect();
        let err = crate::metrics::rmse(&gen_rows, &real_rows)?;
        if name != "train" {
            held_out.push(err);
        }
        rmse_per_group.insert(name.clone(), err);
        sample_counts.insert(name.clone(), corpus.len());

        let take = config.eval.disc_per_group.min(corpus.len());
        for w in corpus.waveforms.iter().take(take) {
            disc_items.push((w.values.clone(), w.temperature_c));
        }

        if let Some(dir) = out_dir {
            let mut csv = String::from("kind,mean,std,half_diff,range,slope\n");
            for (kind, rows) in [("real", &real_rows), ("generated", &gen_rows)] {
                for row in rows.iter() {
                    let f = crate::metrics::waveform_features(row);
                    csv.push_str(&format!(
                        "{kind},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                        f[0], f[1], f[2], f[3], f[4]
                    ));
                }
            }
            write_text(&dir.join(format!("features_{name}.csv")), &csv)?;
        }

        let label = condition_label(temps[0]);
        gen_by_condition.entry(label.clone()).or_default().extend(gen_rows);
        real_by_condition.entry(label).or_default().extend(real_rows);
    }

    let pfd = population_distance(&gen_by_condition, &real_by_condition)?;

    let l = config.synth.curve_len;
    let disc_seed = config.seed ^ 0x5C0_7E5;
    let disc = discrimination_accuracy(
        &disc_items,
        &config.eval.candidate_temps,
        |idx, values, cand| {
            let draws = discrimination_draws(disc_seed, idx, config.eval.n_mc, l);
            matching_score(field, &guidance, values, cand, &config.encoding, &draws)
                .expect("scoring with validated temperatures")
        },
    )?;

    let rmse_held_out_mean = held_out.iter().sum::<f64>() / held_out.len().max(1) as f64;
    let report = MetricsReport {
        rmse_per_group,
        rmse_held_out_mean,
        pfd_per_condition: pfd.per_condition,
        pfd_aggregate: pfd.mean,
        discrimination_accuracy: disc.accuracy,
        discrimination_baseline: disc.baseline,
        sample_counts,
    };
    if let Some(dir) = out_dir {
        write_text(&dir.join("metrics.json"), &report.to_json())?;
        write_text(&dir.join("metrics.txt"), &report.render_table())?;
    }
    Ok(report)
}

/// Seed for sampling one named evaluation group — shared by waveform export
/// and metric evaluation so both score the same generated population.
pub fn eval_generation_seed(seed: u64, group: &str) -> u64 {
    seed ^ stable_name_seed(group)
}

/// Stable per-name seed offset (FNV-1a), so evaluation seeds don't depend on
/// map iteration order.
fn stable_name_seed(name: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in name.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Derive a fresh deterministic RNG for one named sub-task of a run.
pub fn task_rng(seed: u64, task: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_name_seed(task))
}

/// Smallest end-to-end configuration used across the pipeline tests.
#[cfg(test)]
pub(crate) fn mini_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = 3;
    config.synth.curve_len = 16;
    config.velocity.curve_len = 16;
    config.velocity.cond_hidden = 8;
    config.velocity.cond_embed = 4;
    config.velocity.trunk_width = 16;
    config.velocity.trunk_blocks = 1;
    config.hierarchy.curve_len = 16;
    config.hierarchy.hidden = 8;
    config.hierarchy.grid = vec![4.0, 43.0];
    config.fno = crate::fno::FnoConfig { width: 4, modes: 3, layers: 2 };
    config.data.pretrain_per_domain = 24;
    config.data.pretrain_temps = vec![4.0, 24.0, 43.0];
    config.data.target_train = 24;
    config.data.eval_per_group = 8;
    config.training.epochs_pretrain = 4;
    config.training.epochs_train = 2;
    config.training.epochs_refine = 2;
    config.training.steps_per_epoch = 2;
    config.training.batch_size = 4;
    config.training.refine_pool = 8;
    config.training.refine_sample_steps = 4;
    config.eval.ode_steps = 6;
    config.eval.n_mc = 4;
    config.eval.disc_per_group = 2;
    config
}
