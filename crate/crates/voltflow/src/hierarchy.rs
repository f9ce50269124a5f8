//! Coarse-to-fine constraint hierarchy: per-level validators, sigmoid
//! activation schedules, counterfactual violation scores via condition
//! substitution, confounding-adjusted scores, the hierarchical gate, and the
//! refinement losses built from them.

use crate::condition::{encode, EncodingParams};
use crate::flow::{cfm_loss, BoundFlowStep, FlowBatch, FlowError, Guidance, VelocityField, VelocityVars};
use crate::fno::{FnoError, FnoModel};
use crate::linalg::ridge_fit;
use crate::nn::{Linear, LinearVars, Param, Parameterized};
use crate::synth::phase_weights;
use crate::tape::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("counterfactual grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Condition(#[from] crate::condition::ConditionError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Guidance(#[from] FnoError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    /// Number of constraint levels K.
    pub levels: usize,
    /// Validator hidden width.
    pub hidden: usize,
    /// Waveform length the validators score.
    pub curve_len: usize,
    /// Input weight applied to early/late phase positions.
    pub phase_boost: f64,
    /// Virtual temperatures for the counterfactual substitution grid.
    pub grid: Vec<f64>,
    /// Upper clamp for the confounding coefficients.
    pub clamp_max: f64,
    /// Schedule sharpness initialization.
    pub alpha_init: f64,
    /// Gate sharpness initialization.
    pub alpha_gate_init: f64,
    /// Ridge strength for the confounding regression.
    pub ridge_lambda: f64,
    /// Optional extra shrinkage on confounding coefficients (default off).
    pub confound_penalty: f64,
    /// Weight of the operator-reconstruction loss in the total.
    pub gamma_fno: f64,
    /// Weight of the constraint loss in the total.
    pub gamma_con: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            levels: 3,
            hidden: 64,
            curve_len: 50,
            phase_boost: 3.0,
            grid: crate::synth::distinct_eval_temps(),
            clamp_max: 0.8,
            alpha_init: 10.0,
            alpha_gate_init: 5.0,
            ridge_lambda: 1e-4,
            confound_penalty: 0.0,
            gamma_fno: 0.1,
            gamma_con: 0.01,
        }
    }
}

/// Schedule centers: the canonical [0.2, 0.5, 0.8] for three levels, evenly
/// spaced interior points otherwise.
pub fn default_beta(levels: usize) -> Vec<f64> {
    if levels == 3 {
        vec![0.2, 0.5, 0.8]
    } else {
        (0..levels).map(|k| (k + 1) as f64 / (levels + 1) as f64).collect()
    }
}

/// One per-level scoring network: 2-layer MLP with ReLU hidden and sigmoid
/// output over [phase-weighted waveform ‖ condition].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Validator {
    pub l1: Linear,
    pub l2: Linear,
}

/// The full hierarchy state: validators, schedule parameters, confounding
/// coefficients, and gate sharpness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hierarchy {
    pub config: HierarchyConfig,
    pub validators: Vec<Validator>,
    /// Schedule sharpness α, length K; used through |α|.
    pub alpha: Param,
    /// Schedule centers β, length K; clamped to [0, 1] by `project`.
    pub beta: Param,
    /// Confounding coefficients, stored transposed: entry (j, k) holds the
    /// weight of level-j score inside level k's adjustment (j < k). Updated
    /// only by `fit_confounding`, never by gradient steps.
    pub confound: Param,
    /// Gate sharpness, scalar.
    pub alpha_gate: Param,
    /// Per-position input weights (early/late phases boosted).
    pub phase: Vec<f64>,
}

pub struct HierarchyVars {
    pub validators: Vec<(LinearVars, LinearVars)>,
    pub alpha: Var,
    pub beta: Var,
    pub confound: Var,
    pub alpha_gate: Var,
    pub phase: Var,
}

impl Hierarchy {
    pub fn new(config: HierarchyConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = config.levels;
        assert!(k >= 1, "need at least one level");
        let in_dim = config.curve_len + crate::condition::CONDITION_DIM;
        let validators = (0..k)
            .map(|i| Validator {
                l1: Linear::new(&format!("hier.v{i}.l1"), in_dim, config.hidden, rng),
                l2: Linear::new(&format!("hier.v{i}.l2"), config.hidden, 1, rng),
            })
            .collect();
        let phase = phase_weights(config.curve_len, config.phase_boost);
        Hierarchy {
            validators,
            alpha: Param::new("hier.alpha", Tensor::new(vec![k], vec![config.alpha_init; k])),
            beta: Param::new("hier.beta", Tensor::new(vec![k], default_beta(k))),
            confound: Param::new("hier.confound", Tensor::zeros(vec![k, k])),
            alpha_gate: Param::new(
                "hier.alpha_gate",
                Tensor::new(vec![1], vec![config.alpha_gate_init]),
            ),
            phase,
            config,
        }
    }

    /// Bind onto a tape. Validator and schedule parameters freeze
    /// independently: the refinement step trains schedules with validators
    /// held fixed, while the validator step trains only the validators.
    /// Confounding coefficients are always bound as plain inputs — they are
    /// updated by regression, not by gradient.
    pub fn bind(
        &self,
        tape: &mut Tape,
        validators_frozen: bool,
        schedules_frozen: bool,
    ) -> HierarchyVars {
        HierarchyVars {
            validators: self
                .validators
                .iter()
                .map(|v| (v.l1.bind(tape, validators_frozen), v.l2.bind(tape, validators_frozen)))
                .collect(),
            alpha: self.alpha.bind(tape, schedules_frozen),
            beta: self.beta.bind(tape, schedules_frozen),
            confound: self.confound.bind(tape, true),
            alpha_gate: self.alpha_gate.bind(tape, schedules_frozen),
            phase: tape.constant(Tensor::new(vec![self.phase.len()], self.phase.clone())),
        }
    }

    /// Score one level: `x: [B, L]`, `cond: [B, 3]` → `[B, 1]` in (0, 1).
    pub fn score_level(
        &self,
        tape: &mut Tape,
        vars: &HierarchyVars,
        level: usize,
        x: Var,
        cond: Var,
    ) -> Var {
        let xw = tape.mul_row(x, vars.phase);
        let feats = tape.concat_cols(&[xw, cond]);
        let (l1, l2) = vars.validators[level];
        let h = self.validators[level].l1.apply(tape, l1, feats);
        let h = tape.relu(h);
        let s = self.validators[level].l2.apply(tape, l2, h);
        tape.sigmoid(s)
    }

    /// All level scores with the true condition: `[B, K]`.
    pub fn scores(&self, tape: &mut Tape, vars: &HierarchyVars, x: Var, cond: Var) -> Var {
        let cols: Vec<Var> =
            (0..self.config.levels).map(|k| self.score_level(tape, vars, k, x, cond)).collect();
        tape.concat_cols(&cols)
    }

    /// Counterfactual violation: for each level, the mean validator score
    /// over the substitution grid — the waveform is held fixed while the
    /// condition embedding is replaced by each virtual temperature.
    pub fn counterfactual_violation(
        &self,
        tape: &mut Tape,
        vars: &HierarchyVars,
        x: Var,
        encoding: &EncodingParams,
    ) -> Result<Var, HierarchyError> {
        let grid = &self.config.grid;
        if grid.is_empty() {
            return Err(HierarchyError::EmptyGrid);
        }
        let b = tape.shape(x)[0];
        let mut acc: Vec<Option<Var>> = vec![None; self.config.levels];
        for &t_virtual in grid {
            let row = encode(t_virtual, encoding)?.as_array();
            let cond = tape.constant(Tensor::new(
                vec![b, crate::condition::CONDITION_DIM],
                row.iter().cycle().take(b * 3).copied().collect(),
            ));
            for (k, slot) in acc.iter_mut().enumerate() {
                let s = self.score_level(tape, vars, k, x, cond);
                *slot = Some(match slot.take() {
                    Some(prev) => tape.add(prev, s),
                    None => s,
                });
            }
        }
        let scale = 1.0 / grid.len() as f64;
        let cols: Vec<Var> =
            acc.into_iter().map(|v| tape.scale(v.expect("non-empty grid"), scale)).collect();
        Ok(tape.concat_cols(&cols))
    }

    /// Confounding adjustment: level 1 passes through; every higher level
    /// subtracts its clamped linear combination of *detached* lower-level
    /// scores, so no gradient flows into lower validators through this path.
    pub fn backdoor_adjust(&self, tape: &mut Tape, vars: &HierarchyVars, v_cf: Var) -> Var {
        let k_levels = self.config.levels;
        debug_assert_eq!(tape.shape(v_cf)[1], k_levels);
        let detached = tape.detach(v_cf);
        let mut cols = Vec::with_capacity(k_levels);
        for k in 0..k_levels {
            let own = tape.slice_cols(v_cf, k, 1);
            if k == 0 {
                cols.push(own);
                continue;
            }
            let prefix = tape.slice_cols(detached, 0, k); // [B, k]
            let coef_col = tape.slice_cols(vars.confound, k, 1); // [K, 1]
            let coef = tape.slice_rows(coef_col, 0, k); // [k, 1]
            let contribution = tape.matmul(prefix, coef); // [B, 1]
            cols.push(tape.sub(own, contribution));
        }
        tape.concat_cols(&cols)
    }

    /// The hierarchical gate: g_1 = 1; g_k multiplies sigmoid(−α·v̂_j) over
    /// all lower levels j < k, with v̂ detached — lower-level violations
    /// suppress higher-level constraint gradients without being trained
    /// through the gate.
    pub fn dhg_gate(&self, tape: &mut Tape, vars: &HierarchyVars, v_adj: Var) -> Var {
        let k_levels = self.config.levels;
        let b = tape.shape(v_adj)[0];
        let detached = tape.detach(v_adj);
        let neg = tape.scale(detached, -1.0);
        let scaled = tape.scale_by(neg, vars.alpha_gate);
        let sig = tape.sigmoid(scaled); // [B, K] of σ(−α·v̂_j)
        let mut cols = Vec::with_capacity(k_levels);
        let mut g = tape.constant(Tensor::new(vec![b, 1], vec![1.0; b]));
        cols.push(g);
        for k in 1..k_levels {
            let factor = tape.slice_cols(sig, k - 1, 1);
            g = tape.mul(g, factor);
            cols.push(g);
        }
        tape.concat_cols(&cols)
    }

    /// Per-sample activation schedule λ_k(t) = sigmoid(|α_k|·(t − β_k)),
    /// differentiable in α and β: `[B, K]`.
    pub fn schedule(&self, tape: &mut Tape, vars: &HierarchyVars, t: &[f64]) -> Var {
        let b = t.len();
        let k = self.config.levels;
        let t_col = tape.constant(Tensor::new(vec![b, 1], t.to_vec()));
        let ones = tape.constant(Tensor::new(vec![1, k], vec![1.0; k]));
        let tmat = tape.matmul(t_col, ones); // [B, K] of t_b
        let neg_beta = tape.scale(vars.beta, -1.0);
        let centered = tape.add_row(tmat, neg_beta);
        let sharp = tape.abs(vars.alpha);
        let scaled = tape.mul_row(centered, sharp);
        tape.sigmoid(scaled)
    }

    /// Host-side schedule evaluation for diagnostics and fixtures.
    pub fn schedule_values(&self, t: f64) -> Vec<f64> {
        self.alpha
            .value
            .data
            .iter()
            .zip(&self.beta.value.data)
            .map(|(a, b)| crate::tape::sigmoid(a.abs() * (t - b)))
            .collect()
    }

    /// Refit the confounding coefficients by ridge regression of each level's
    /// counterfactual score on all lower levels' scores (with intercept),
    /// then project into [0, clamp_max]. `v_cf` is a [B, K] value matrix.
    pub fn fit_confounding(&mut self, v_cf: &Tensor) -> Result<(), HierarchyError> {
        let k_levels = self.config.levels;
        assert_eq!(v_cf.shape.len(), 2);
        assert_eq!(v_cf.shape[1], k_levels, "level count mismatch");
        let b = v_cf.shape[0];
        if b == 0 {
            return Err(HierarchyError::EmptyBatch);
        }
        let lambda = self.config.ridge_lambda + self.config.confound_penalty;
        for k in 1..k_levels {
            let rows: Vec<Vec<f64>> =
                (0..b).map(|i| v_cf.data[i * k_levels..i * k_levels + k].to_vec()).collect();
            let targets: Vec<f64> = (0..b).map(|i| v_cf.data[i * k_levels + k]).collect();
            let coef = ridge_fit(&rows, &targets, lambda);
            for j in 0..k {
                self.confound.value.data[j * k_levels + k] =
                    coef[1 + j].clamp(0.0, self.config.clamp_max);
            }
        }
        Ok(())
    }

    /// Post-step projection: schedule centers into [0, 1], confounding
    /// coefficients into [0, clamp_max] with the unused triangle zeroed.
    pub fn project(&mut self) {
        for bv in &mut self.beta.value.data {
            *bv = bv.clamp(0.0, 1.0);
        }
        let k_levels = self.config.levels;
        for j in 0..k_levels {
            for k in 0..k_levels {
                let v = &mut self.confound.value.data[j * k_levels + k];
                *v = if j < k { v.clamp(0.0, self.config.clamp_max) } else { 0.0 };
            }
        }
    }

    /// Confounding coefficients in natural orientation: entry [k][j] = β_kj.
    pub fn confound_matrix(&self) -> Vec<Vec<f64>> {
        let k_levels = self.config.levels;
        (0..k_levels)
            .map(|k| (0..k_levels).map(|j| self.confound.value.data[j * k_levels + k]).collect())
            .collect()
    }

    pub fn visit_validator_params(&self, f: &mut dyn FnMut(&Param)) {
        for v in &self.validators {
            v.l1.visit(f);
            v.l2.visit(f);
        }
    }

    pub fn visit_validator_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for v in &mut self.validators {
            v.l1.visit_mut(f);
            v.l2.visit_mut(f);
        }
    }

    pub fn visit_schedule_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.alpha);
        f(&self.beta);
        f(&self.alpha_gate);
    }

    pub fn visit_schedule_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.alpha);
        f(&mut self.beta);
        f(&mut self.alpha_gate);
    }
}

impl Parameterized for Hierarchy {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.visit_validator_params(f);
        f(&self.alpha);
        f(&self.beta);
        f(&self.confound);
        f(&self.alpha_gate);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_validator_params_mut(f);
        f(&mut self.alpha);
        f(&mut self.beta);
        f(&mut self.confound);
        f(&mut self.alpha_gate);
    }
}

/// Bind-order schedule variable list (α, β, α_gate), matching
/// `visit_schedule_params` order.
pub fn schedule_var_list(vars: &HierarchyVars) -> Vec<Var> {
    vec![vars.alpha, vars.beta, vars.alpha_gate]
}

/// Bind-order validator variable list, matching `visit_validator_params`.
pub fn validator_var_list(vars: &HierarchyVars) -> Vec<Var> {
    let mut out = Vec::new();
    for (l1, l2) in &vars.validators {
        out.extend([l1.w, l1.b, l2.w, l2.b]);
    }
    out
}

// ── losses ──

/// The gated, scheduled constraint combination:
/// mean over samples of Σ_k g[b,k]·λ[b,k]·score[b,k].
pub fn weighted_constraint(tape: &mut Tape, gates: Var, lambdas: Var, scores: Var) -> Var {
    let b = tape.shape(scores)[0];
    let gl = tape.mul(gates, lambdas);
    let prod = tape.mul(gl, scores);
    let total = tape.sum(prod);
    tape.scale(total, 1.0 / b as f64)
}

/// All intermediate pieces of one constraint evaluation, for diagnostics and
/// contract tests.
pub struct ConstraintPieces {
    pub scores: Var,
    pub v_cf: Var,
    pub v_adj: Var,
    pub gates: Var,
    pub lambdas: Var,
    pub loss: Var,
}

/// Constraint loss on a state batch at times `t`: true-condition validator
/// scores, weighted by the hierarchical gate (from counterfactual, adjusted
/// scores) and the per-sample schedule.
pub fn constraint_loss(
    tape: &mut Tape,
    hier: &Hierarchy,
    vars: &HierarchyVars,
    x: Var,
    t: &[f64],
    cond: Var,
    encoding: &EncodingParams,
) -> Result<ConstraintPieces, HierarchyError> {
    if t.is_empty() {
        return Err(HierarchyError::EmptyBatch);
    }
    let scores = hier.scores(tape, vars, x, cond);
    let v_cf = hier.counterfactual_violation(tape, vars, x, encoding)?;
    let v_adj = hier.backdoor_adjust(tape, vars, v_cf);
    let gates = hier.dhg_gate(tape, vars, v_adj);
    let lambdas = hier.schedule(tape, vars, t);
    let loss = weighted_constraint(tape, gates, lambdas, scores);
    Ok(ConstraintPieces { scores, v_cf, v_adj, gates, lambdas, loss })
}

/// Weighted total: L_CFM + γ_fno·L_FNO + γ_con·L_constraint.
pub fn combine_total(
    tape: &mut Tape,
    cfm: Var,
    fno_recon: Var,
    constraint: Var,
    gamma_fno: f64,
    gamma_con: f64,
) -> Var {
    let a = tape.scale(fno_recon, gamma_fno);
    let b = tape.scale(constraint, gamma_con);
    let partial = tape.add(cfm, a);
    tape.add(partial, b)
}

/// Everything produced by one refinement (stage-three) training step on a
/// live tape.
pub struct RefineStep {
    pub flow: BoundFlowStep,
    /// One-step endpoint estimate x̂₁ = x_t + (1 − t)·v.
    pub endpoint: Var,
    pub fno_recon_loss: Var,
    pub constraint: ConstraintPieces,
    pub total: Var,
}

/// The composite refinement objective. The guidance operator must be frozen
/// (its parameters receive no updates), but the endpoint self-consistency
/// penalty stays differentiable through the operator so it steers the
/// velocity field. The constraint loss is evaluated on the current
/// interpolant state, where it trains the schedule and gate parameters.
pub fn total_loss(
    tape: &mut Tape,
    field: &VelocityField,
    fvars: &VelocityVars,
    fno: &FnoModel,
    hier: &Hierarchy,
    hvars: &HierarchyVars,
    batch: &FlowBatch,
    encoding: &EncodingParams,
) -> Result<RefineStep, HierarchyError> {
    let guidance = Guidance::frozen(fno)?;
    let flow = cfm_loss(tape, field, fvars, &guidance, batch)?;

    let one_minus_t: Vec<f64> = batch.t.iter().map(|t| 1.0 - t).collect();
    let omt = tape.constant(Tensor::new(vec![batch.len()], one_minus_t));
    let scaled_v = tape.mul_col(flow.velocity, omt);
    let endpoint = tape.add(flow.x_t, scaled_v);

    let fno_vars = fno.bind(tape);
    let recon = fno.reconstruct(tape, &fno_vars, endpoint, flow.cond)?;
    let resid = tape.sub(endpoint, recon);
    let sq = tape.mul(resid, resid);
    let fno_recon_loss = tape.mean(sq);

    let constraint =
        constraint_loss(tape, hier, hvars, flow.x_t, &batch.t, flow.cond, encoding)?;
    let total = combine_total(
        tape,
        flow.loss,
        fno_recon_loss,
        constraint.loss,
        hier.config.gamma_fno,
        hier.config.gamma_con,
    );
    Ok(RefineStep { flow, endpoint, fno_recon_loss, constraint, total })
}

/// Validator training loss: binary cross-entropy toward 0 on real waveforms
/// and 1 on generated ones, averaged over the two halves.
pub fn train_validators(
    tape: &mut Tape,
    hier: &Hierarchy,
    vars: &HierarchyVars,
    real_x: Var,
    real_cond: Var,
    gen_x: Var,
    gen_cond: Var,
) -> Result<Var, HierarchyError> {
    if tape.shape(real_x)[0] == 0 || tape.shape(gen_x)[0] == 0 {
        return Err(HierarchyError::EmptyBatch);
    }
    let s_real = hier.scores(tape, vars, real_x, real_cond);
    let s_gen = hier.scores(tape, vars, gen_x, gen_cond);
    let one_minus = tape.affine(s_real, -1.0, 1.0);
    let ln_real = tape.ln_clamped(one_minus, 1e-7);
    let ln_gen = tape.ln_clamped(s_gen, 1e-7);
    let mr = tape.mean(ln_real);
    let mg = tape.mean(ln_gen);
    let s = tape.add(mr, mg);
    Ok(tape.scale(s, -0.5))
}
