//! One-dimensional spectral-operator stack: per-mode complex channel mixing
//! in a truncated Fourier basis plus a pointwise bypass, with margin-ranking
//! pretraining and freeze semantics for downstream guidance.

use crate::nn::{xavier, zeros, Adam, AdamConfig, Param, Parameterized};
use crate::synth::Corpus;
use crate::tape::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FnoError {
    #[error("spectral layer keeps {modes} modes but length-{len} signals only have {max}")]
    TooManyModes { modes: usize, len: usize, max: usize },
    #[error("ranking pretraining needs at least two temperature groups, found {0}")]
    SingleTemperatureGroup(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("pretraining diverged at epoch {epoch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FnoConfig {
    /// Channel width of the operator.
    pub width: usize,
    /// Retained Fourier modes per spectral layer.
    pub modes: usize,
    /// Number of spectral layers.
    pub layers: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        FnoConfig { width: 16, modes: 8, layers: 3 }
    }
}

/// Input channels: the waveform sample plus the three condition features.
pub const FNO_IN_CHANNELS: usize = 4;

/// One spectral layer: complex per-mode mixing weights over channels,
/// a pointwise bypass, and a channel bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralLayer {
    /// Real part of the mode-mixing weights, shape `[modes, width, width]`.
    pub mix_re: Param,
    /// Imaginary part, same shape.
    pub mix_im: Param,
    /// Pointwise bypass, shape `[width, width]`.
    pub bypass: Param,
    /// Channel bias, shape `[width]`.
    pub bias: Param,
}

impl SpectralLayer {
    fn new(name: &str, width: usize, modes: usize, rng: &mut ChaCha8Rng) -> Self {
        // gentle spectral initialization keeps the operator near-identity
        let std = 1.0 / width as f64;
        let mut draw = |suffix: &str| {
            let data: Vec<f64> = (0..modes * width * width)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    std * e
                })
                .collect();
            Param {
                name: format!("{name}.{suffix}"),
                value: Tensor::new(vec![modes, width, width], data),
            }
        };
        let mix_re = draw("mix_re");
        let mix_im = draw("mix_im");
        SpectralLayer {
            mix_re,
            mix_im,
            bypass: xavier(&format!("{name}.bypass"), width, width, rng),
            bias: zeros(&format!("{name}.bias"), vec![width]),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.mix_re);
        f(&self.mix_im);
        f(&self.bypass);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.mix_re);
        f(&mut self.mix_im);
        f(&mut self.bypass);
        f(&mut self.bias);
    }
}

#[derive(Clone)]
pub struct SpectralLayerVars {
    pub mix_re: Var,
    pub mix_im: Var,
    pub bypass: Var,
    pub bias: Var,
}

/// The operator model: lift → spectral layers → project. `frozen` detaches
/// the entire model (guidance mode); `layer_trainable` supports partial
/// freezing of individual spectral layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub lift: Param,
    pub layers: Vec<SpectralLayer>,
    pub project: Param,
    pub frozen: bool,
    /// Per-layer training flags; ignored when `frozen` is set.
    pub layer_trainable: Vec<bool>,
}

pub struct FnoVars {
    pub lift: Var,
    pub layers: Vec<SpectralLayerVars>,
    pub project: Var,
}

impl FnoModel {
    pub fn new(config: FnoConfig, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..config.layers)
            .map(|i| SpectralLayer::new(&format!("fno.layer{i}"), config.width, config.modes, rng))
            .collect();
        FnoModel {
            config,
            lift: xavier("fno.lift", FNO_IN_CHANNELS, config.width, rng),
            layers,
            project: xavier("fno.project", config.width, 1, rng),
            frozen: false,
            layer_trainable: vec![true; config.layers],
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Make every parameter trainable again (undo `freeze` and any
    /// `freeze_first_layers` marks).
    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for flag in &mut self.layer_trainable {
            *flag = true;
        }
    }

    /// Mark the first `k` spectral layers frozen (lift/project stay live).
    pub fn freeze_first_layers(&mut self, k: usize) {
        for (i, flag) in self.layer_trainable.iter_mut().enumerate() {
            *flag = i >= k;
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FnoVars {
        let head_frozen = self.frozen;
        FnoVars {
            lift: self.lift.bind(tape, head_frozen),
            layers: self
                .layers
                .iter()
                .zip(&self.layer_trainable)
                .map(|(layer, &trainable)| SpectralLayerVars {
                    mix_re: layer.mix_re.bind(tape, head_frozen || !trainable),
                    mix_im: layer.mix_im.bind(tape, head_frozen || !trainable),
                    bypass: layer.bypass.bind(tape, head_frozen || !trainable),
                    bias: layer.bias.bind(tape, head_frozen || !trainable),
                })
                .collect(),
            project: self.project.bind(tape, head_frozen),
        }
    }

    /// Operator forward: waveforms `[B, L]` and conditions `[B, 3]` to a
    /// field `[B, L]`. The condition is broadcast to every position before
    /// the lift. A frozen model detaches its output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &FnoVars,
        x: Var,
        cond: Var,
    ) -> Result<Var, FnoError> {
        self.run(tape, vars, x, cond, self.frozen)
    }

    /// Forward pass that always stays differentiable in `x`, even when the
    /// model is frozen. Frozen parameters are bound as plain inputs and so
    /// receive no gradient either way; this path is for self-consistency
    /// penalties that must steer whatever produced `x`, whereas `forward`
    /// detaches a frozen model's output entirely (the guidance convention).
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        vars: &FnoVars,
        x: Var,
        cond: Var,
    ) -> Result<Var, FnoError> {
        self.run(tape, vars, x, cond, false)
    }

    fn run(
        &self,
        tape: &mut Tape,
        vars: &FnoVars,
        x: Var,
        cond: Var,
        detach_output: bool,
    ) -> Result<Var, FnoError> {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "fno forward expects [B, L] waveforms");
        let (b, l) = (shape[0], shape[1]);
        let max = l / 2 + 1;
        if self.config.modes > max {
            return Err(FnoError::TooManyModes { modes: self.config.modes, len: l, max });
        }
        assert_eq!(tape.shape(cond), &[b, crate::condition::CONDITION_DIM]);

        // [B·L, 4] per-position features: sample value ‖ condition
        let x_col = tape.reshape(x, vec![b * l, 1]);
        let mut selector = Tensor::zeros(vec![b * l, b]);
        for bi in 0..b {
            for li in 0..l {
                selector.data[(bi * l + li) * b + bi] = 1.0;
            }
        }
        let sel = tape.constant(selector);
        let cond_pos = tape.matmul(sel, cond);
        let feats = tape.concat_cols(&[x_col, cond_pos]);
        let mut h = tape.matmul(feats, vars.lift); // [B·L, C]

        let n_layers = vars.layers.len();
        for (i, layer) in vars.layers.iter().enumerate() {
            let activate = i + 1 < n_layers;
            h = spectral_layer_apply(tape, layer, h, b, l, self.config, activate);
        }

        let out = tape.matmul(h, vars.project); // [B·L, 1]
        let out = tape.reshape(out, vec![b, l]);
        Ok(if detach_output { tape.detach(out) } else { out })
    }

    /// Convenience: bind fresh tensors and run the forward pass.
    pub fn forward_tensors(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        cond: &Tensor,
    ) -> Result<Var, FnoError> {
        let vars = self.bind(tape);
        let xv = tape.input(x);
        let cv = tape.input(cond);
        self.forward(tape, &vars, xv, cv)
    }

    /// Mean field value per curve, the ranking statistic.
    pub fn mean_output(
        &self,
        tape: &mut Tape,
        vars: &FnoVars,
        x: Var,
        cond: Var,
    ) -> Result<Var, FnoError> {
        let field = self.forward(tape, vars, x, cond)?;
        Ok(tape.mean_rows(field))
    }
}

impl Parameterized for FnoModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.lift);
        for layer in &self.layers {
            layer.visit(f);
        }
        f(&self.project);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.lift);
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        f(&mut self.project);
    }
}

/// One spectral layer on channel-last features `h: [B·L, C]`:
/// IDFT(mix · truncate(DFT(h))) + h·W + bias, then GELU when `activate`.
pub fn spectral_layer_apply(
    tape: &mut Tape,
    layer: &SpectralLayerVars,
    h: Var,
    b: usize,
    l: usize,
    config: FnoConfig,
    activate: bool,
) -> Var {
    let c = config.width;
    let m = config.modes;
    debug_assert_eq!(tape.shape(h), &[b * l, c]);

    // channel-major rows for the transform: [B·L, C] → [B·C, L]
    let h3 = tape.reshape(h, vec![b, l, c]);
    let h3 = tape.swap_axes12(h3); // [B, C, L]
    let rows = tape.reshape(h3, vec![b * c, l]);
    let (re, im) = tape.dft(rows, m); // [B·C, M] each

    // mode-major layout so each mode's [B, C] block is contiguous
    let to_mode_major = |tape: &mut Tape, v: Var| {
        let v3 = tape.reshape(v, vec![b, c, m]);
        let v3 = tape.swap_axes12(v3); // [B, M, C]
        let v3 = tape.permute102(v3); // [M, B, C]
        tape.reshape(v3, vec![m * b, c])
    };
    let re_mm = to_mode_major(tape, re);
    let im_mm = to_mode_major(tape, im);

    // flatten per-mode complex weights for contiguous row slicing
    let w_re = tape.reshape(layer.mix_re, vec![m * c, c]);
    let w_im = tape.reshape(layer.mix_im, vec![m * c, c]);

    let mut out_re = Vec::with_capacity(m);
    let mut out_im = Vec::with_capacity(m);
    for k in 0..m {
        let uk_re = tape.slice_rows(re_mm, k * b, b);
        let uk_im = tape.slice_rows(im_mm, k * b, b);
        let wk_re = tape.slice_rows(w_re, k * c, c);
        let wk_im = tape.slice_rows(w_im, k * c, c);
        // (a + ib)(p + iq) = (ap − bq) + i(aq + bp)
        let ap = tape.matmul(uk_re, wk_re);
        let bq = tape.matmul(uk_im, wk_im);
        let aq = tape.matmul(uk_re, wk_im);
        let bp = tape.matmul(uk_im, wk_re);
        out_re.push(tape.sub(ap, bq));
        out_im.push(tape.add(aq, bp));
    }
    let mixed_re = tape.concat_rows(&out_re); // [M·B, C]
    let mixed_im = tape.concat_rows(&out_im);

    let from_mode_major = |tape: &mut Tape, v: Var| {
        let v3 = tape.reshape(v, vec![m, b, c]);
        let v3 = tape.permute102(v3); // [B, M, C]
        let v3 = tape.swap_axes12(v3); // [B, C, M]
        tape.reshape(v3, vec![b * c, m])
    };
    let sp_re = from_mode_major(tape, mixed_re);
    let sp_im = from_mode_major(tape, mixed_im);
    let spectral_rows = tape.idft(sp_re, sp_im, l); // [B·C, L]

    // back to channel-last positions
    let sp3 = tape.reshape(spectral_rows, vec![b, c, l]);
    let sp3 = tape.swap_axes12(sp3); // [B, L, C]
    let spectral = tape.reshape(sp3, vec![b * l, c]);

    let bypass = tape.matmul(h, layer.bypass);
    let summed = tape.add(spectral, bypass);
    let biased = tape.add_row(summed, layer.bias);
    if activate {
        tape.gelu(biased)
    } else {
        biased
    }
}

/// Ranking hinge: mean over pairs of max(0, ȳ_low − ȳ_high + margin) — zero
/// exactly when every pair keeps the low-temperature mean at least `margin`
/// below the high-temperature mean.
pub fn margin_ranking_loss(tape: &mut Tape, mean_low: Var, mean_high: Var, margin: f64) -> Var {
    assert!(margin > 0.0, "margin must be positive");
    assert!(!tape.shape(mean_low).is_empty() && tape.shape(mean_low) == tape.shape(mean_high));
    let diff = tape.sub(mean_low, mean_high);
    let shifted = tape.affine(diff, 1.0, margin);
    let hinged = tape.relu(shifted);
    tape.mean(hinged)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 200, batch_size: 16, learning_rate: 1e-3, margin: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    /// Per-epoch ranking loss.
    pub losses: Vec<f64>,
}

/// A batch of ordered condition pairs: every row pairs a curve from a lower
/// temperature with one from a strictly higher temperature.
pub struct PretrainBatch {
    pub x_low: Tensor,
    pub x_high: Tensor,
    pub cond_low: Tensor,
    pub cond_high: Tensor,
}

/// Sample `batch_size` cross-temperature pairs uniformly: two distinct
/// groups, then one curve from each.
pub fn sample_pairs(
    corpus: &Corpus,
    by_temp: &[(f64, Vec<usize>)],
    batch_size: usize,
    encoding: &crate::condition::EncodingParams,
    rng: &mut ChaCha8Rng,
) -> PretrainBatch {
    let l = corpus.curve_len;
    let mut x_low = Vec::with_capacity(batch_size * l);
    let mut x_high = Vec::with_capacity(batch_size * l);
    let mut t_low = Vec::with_capacity(batch_size);
    let mut t_high = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..by_temp.len());
        let j = loop {
            let j = rng.random_range(0..by_temp.len());
            if j != i {
                break j;
            }
        };
        let (lo, hi) = if by_temp[i].0 < by_temp[j].0 { (i, j) } else { (j, i) };
        let wl = by_temp[lo].1[rng.random_range(0..by_temp[lo].1.len())];
        let wh = by_temp[hi].1[rng.random_range(0..by_temp[hi].1.len())];
        x_low.extend_from_slice(&corpus.waveforms[wl].values);
        x_high.extend_from_slice(&corpus.waveforms[wh].values);
        t_low.push(by_temp[lo].0);
        t_high.push(by_temp[hi].0);
    }
    PretrainBatch {
        x_low: Tensor::new(vec![batch_size, l], x_low),
        x_high: Tensor::new(vec![batch_size, l], x_high),
        cond_low: crate::condition::encode_batch(&t_low, encoding).expect("valid temps"),
        cond_high: crate::condition::encode_batch(&t_high, encoding).expect("valid temps"),
    }
}

/// Group corpus indices by temperature, ascending.
pub fn group_by_temperature(corpus: &Corpus) -> Vec<(f64, Vec<usize>)> {
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, w) in corpus.waveforms.iter().enumerate() {
        match groups.iter_mut().find(|(t, _)| *t == w.temperature_c) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((w.temperature_c, vec![i])),
        }
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    groups
}

/// Stage-one training: margin-ranking over cross-temperature pairs with Adam
/// and global-norm clipping, returning the model frozen.
pub fn pretrain(
    corpus: &Corpus,
    fno_config: FnoConfig,
    config: &PretrainConfig,
    encoding: &crate::condition::EncodingParams,
    rng: &mut ChaCha8Rng,
) -> Result<(FnoModel, PretrainReport), FnoError> {
    let by_temp = group_by_temperature(corpus);
    if by_temp.len() < 2 {
        return Err(FnoError::SingleTemperatureGroup(by_temp.len()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(FnoError::EmptyBatch);
    }
    let mut model = FnoModel::new(fno_config, rng);
    let mut adam = Adam::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batch = sample_pairs(corpus, &by_temp, config.batch_size, encoding, rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let xl = tape.input(&batch.x_low);
        let xh = tape.input(&batch.x_high);
        let cl = tape.input(&batch.cond_low);
        let ch = tape.input(&batch.cond_high);
        let ml = model.mean_output(&mut tape, &vars, xl, cl)?;
        let mh = model.mean_output(&mut tape, &vars, xh, ch)?;
        let loss = margin_ranking_loss(&mut tape, ml, mh, config.margin);
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(FnoError::NonFiniteLoss { epoch, loss: loss_value });
        }
        losses.push(loss_value);
        tape.backward(loss).expect("scalar loss");
        // bind order matches the canonical parameter visit order
        let grads: Vec<Tensor> =
            flatten_vars(&vars).into_iter().map(|v| tape.grad_tensor(v)).collect();
        crate::nn::apply_step(&mut model, &mut adam, &grads);
    }
    model.freeze();
    Ok((model, PretrainReport {
        initial_loss: losses[0],
        final_loss: *losses.last().expect("epochs ≥ 1"),
        epochs: config.epochs,
        losses,
    }))
}

/// Bind-order variable list, matching the canonical parameter visit order —
/// pair with `grad_tensor` to collect gradients for an optimizer step.
pub fn flatten_vars(vars: &FnoVars) -> Vec<Var> {
    let mut out = vec![vars.lift];
    for layer in &vars.layers {
        out.extend([layer.mix_re, layer.mix_im, layer.bypass, layer.bias]);
    }
    out.push(vars.project);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthConfig};
    use crate::tape::TapeError;
    use rand::SeedableRng;

    fn tiny_config() -> FnoConfig {
        FnoConfig { width: 4, modes: 3, layers: 2 }
    }

    fn identity_layer_vars(
        tape: &mut Tape,
        width: usize,
        modes: usize,
        identity_mix: bool,
    ) -> SpectralLayerVars {
        let mut mix_re = Tensor::zeros(vec![modes, width, width]);
        if identity_mix {
            for k in 0..modes {
                for i in 0..width {
                    mix_re.data[k * width * width + i * width + i] = 1.0;
                }
            }
        }
        SpectralLayerVars {
            mix_re: tape.constant(mix_re),
            mix_im: tape.constant(Tensor::zeros(vec![modes, width, width])),
            bypass: tape.constant(Tensor::zeros(vec![width, width])),
            bias: tape.constant(Tensor::zeros(vec![width])),
        }
    }

    #[test]
    fn identity_weights_at_full_bandwidth_reproduce_input() {
        let (b, l, width) = (2, 8, 3);
        let modes = l / 2 + 1;
        let mut tape = Tape::new();
        let layer = identity_layer_vars(&mut tape, width, modes, true);
        let data: Vec<f64> = (0..b * l * width).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let h = tape.input(&Tensor::new(vec![b * l, width], data.clone()));
        let out = spectral_layer_apply(
            &mut tape,
            &layer,
            h,
            b,
            l,
            FnoConfig { width, modes, layers: 1 },
            false,
        );
        let got = tape.value(out);
        for (g, e) in got.iter().zip(&data) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
    }

    #[test]
    fn pure_high_mode_is_zeroed_by_truncation() {
        let (b, l, width) = (1, 8, 2);
        let modes = 3; // keeps k = 0, 1, 2; the test signal lives at k = 4
        let mut tape = Tape::new();
        let layer = identity_layer_vars(&mut tape, width, modes, true);
        let mut data = vec![0.0; b * l * width];
        for li in 0..l {
            let v = (std::f64::consts::PI * li as f64).cos(); // alternating ±1, k = L/2
            for ch in 0..width {
                data[li * width + ch] = v;
            }
        }
        let h = tape.input(&Tensor::new(vec![b * l, width], data));
        let out = spectral_layer_apply(
            &mut tape,
            &layer,
            h,
            b,
            l,
            FnoConfig { width, modes, layers: 1 },
            false,
        );
        for v in tape.value(out) {
            assert!(v.abs() < 1e-12, "high mode leaked: {v}");
        }
    }

    #[test]
    fn truncation_is_a_projection() {
        let (b, l, width) = (2, 10, 3);
        let modes = 4;
        let cfg = FnoConfig { width, modes, layers: 1 };
        let mut tape = Tape::new();
        let layer = identity_layer_vars(&mut tape, width, modes, true);
        let data: Vec<f64> =
            (0..b * l * width).map(|i| ((i * 13 % 17) as f64 / 17.0) - 0.5).collect();
        let h = tape.input(&Tensor::new(vec![b * l, width], data));
        let once = spectral_layer_apply(&mut tape, &layer, h, b, l, cfg, false);
        let twice = spectral_layer_apply(&mut tape, &layer, once, b, l, cfg, false);
        let a = tape.value(once).to_vec();
        let bb = tape.value(twice);
        for (x, y) in a.iter().zip(bb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Brute-force oracle: complex dense DFT → per-mode mixing → Hermitian
    /// inverse, computed with scalar arithmetic.
    fn spectral_oracle(
        input: &[f64], // [B·L, C] channel-last
        mix_re: &[f64], // [M, C, C]
        mix_im: &[f64],
        bypass: &[f64], // [C, C]
        bias: &[f64],   // [C]
        b: usize,
        l: usize,
        c: usize,
        m: usize,
    ) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        let mut out = vec![0.0; b * l * c];
        for bi in 0..b {
            // forward transform per channel
            let mut u_re = vec![vec![0.0; m]; c];
            let mut u_im = vec![vec![0.0; m]; c];
            for ch in 0..c {
                for k in 0..m {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for li in 0..l {
                        let v = input[(bi * l + li) * c + ch];
                        let ang = tau * (li * k) as f64 / l as f64;
                        sr += v * ang.cos();
                        si -= v * ang.sin();
                    }
                    u_re[ch][k] = sr;
                    u_im[ch][k] = si;
                }
            }
            // per-mode channel mixing
            let mut m_re = vec![vec![0.0; m]; c];
            let mut m_im = vec![vec![0.0; m]; c];
            for k in 0..m {
                for co in 0..c {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for ci in 0..c {
                        let wr = mix_re[k * c * c + ci * c + co];
                        let wi = mix_im[k * c * c + ci * c + co];
                        sr += u_re[ci][k] * wr - u_im[ci][k] * wi;
                        si += u_re[ci][k] * wi + u_im[ci][k] * wr;
                    }
                    m_re[co][k] = sr;
                    m_im[co][k] = si;
                }
            }
            // Hermitian-weighted inverse with truncation
            for ch in 0..c {
                for li in 0..l {
                    let mut acc = 0.0;
                    for k in 0..m {
                        let weight = if k == 0 || (l % 2 == 0 && k == l / 2) { 1.0 } else { 2.0 };
                        let ang = tau * (li * k) as f64 / l as f64;
                        acc += weight * (m_re[ch][k] * ang.cos() - m_im[ch][k] * ang.sin());
                    }
                    let spectral = acc / l as f64;
                    let mut byp = 0.0;
                    for ci in 0..c {
                        byp += input[(bi * l + li) * c + ci] * bypass[ci * c + ch];
                    }
                    out[(bi * l + li) * c + ch] = spectral + byp + bias[ch];
                }
            }
        }
        out
    }

    #[test]
    fn random_layers_match_bruteforce_oracle() {
        let (b, l, c, m) = (2, 8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for round in 0..20 {
            let rand_vec =
                |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
                };
            let input = rand_vec(&mut rng, b * l * c);
            let mix_re = rand_vec(&mut rng, m * c * c);
            let mix_im = rand_vec(&mut rng, m * c * c);
            let bypass = rand_vec(&mut rng, c * c);
            let bias = rand_vec(&mut rng, c);
            let expect = spectral_oracle(&input, &mix_re, &mix_im, &bypass, &bias, b, l, c, m);

            let mut tape = Tape::new();
            let layer = SpectralLayerVars {
                mix_re: tape.constant(Tensor::new(vec![m, c, c], mix_re)),
                mix_im: tape.constant(Tensor::new(vec![m, c, c], mix_im)),
                bypass: tape.constant(Tensor::new(vec![c, c], bypass)),
                bias: tape.constant(Tensor::new(vec![c], bias)),
            };
            let h = tape.input(&Tensor::new(vec![b * l, c], input));
            let out = spectral_layer_apply(
                &mut tape,
                &layer,
                h,
                b,
                l,
                FnoConfig { width: c, modes: m, layers: 1 },
                false,
            );
            for (g, e) in tape.value(out).iter().zip(&expect) {
                assert!((g - e).abs() < 1e-9, "round {round}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn zero_weights_collapse_to_projected_bias() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = FnoModel::new(cfg, &mut rng);
        for layer in &mut model.layers {
            layer.mix_re.value.data.fill(0.0);
            layer.mix_im.value.data.fill(0.0);
            layer.bypass.value.data.fill(0.0);
        }
        model.lift.value.data.fill(0.0);
        // distinctive bias in the last layer only
        for layer in &mut model.layers[..cfg.layers - 1] {
            layer.bias.value.data.fill(0.0);
        }
        let bias_val = 0.37;
        model.layers[cfg.layers - 1].bias.value.data.fill(bias_val);
        let projected: f64 = model.project.value.data.iter().map(|w| w * bias_val).sum();

        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 / 12.0).collect());
        let cond = crate::condition::encode_batch(
            &[4.0, 43.0],
            &crate::condition::EncodingParams::default(),
        )
        .unwrap();
        let out = model.forward_tensors(&mut tape, &x, &cond).unwrap();
        for v in tape.value(out) {
            assert!((v - projected).abs() < 1e-9, "{v} vs {projected}");
        }
    }

    #[test]
    fn frozen_model_yields_no_parameter_gradients() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = FnoModel::new(cfg, &mut rng);
        model.freeze();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.input(&Tensor::new(vec![2, 6], vec![0.3; 12]));
        let cond = tape.input(
            &crate::condition::encode_batch(
                &[4.0, 43.0],
                &crate::condition::EncodingParams::default(),
            )
            .unwrap(),
        );
        let out = model.forward(&mut tape, &vars, x, cond).unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        for v in flatten_vars(&vars) {
            assert!(tape.grad(v).is_none(), "frozen parameter received gradient");
        }
        // and the detached output blocks flow into the waveform input too
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn unfrozen_gradients_match_finite_differences() {
        use crate::tape::{finite_difference_gradcheck, ScalarObjective};
        struct Obj {
            model: FnoModel,
            x: Tensor,
            cond: Tensor,
            target: Tensor,
        }
        impl ScalarObjective for Obj {
            fn param_names(&self) -> Vec<String> {
                self.model.param_names()
            }
            fn get_params(&self) -> Vec<Tensor> {
                self.model.param_tensors()
            }
            fn set_params(&mut self, params: &[Tensor]) {
                self.model.set_param_tensors(params);
            }
            fn loss(&mut self) -> f64 {
                let mut tape = Tape::new();
                let vars = self.model.bind(&mut tape);
                let x = tape.input(&self.x);
                let c = tape.input(&self.cond);
                let out = self.model.forward(&mut tape, &vars, x, c).unwrap();
                let t = tape.input(&self.target);
                let d = tape.sub(out, t);
                let sq = tape.mul(d, d);
                let loss = tape.mean(sq);
                tape.scalar_value(loss)
            }
            fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor>), TapeError> {
                let mut tape = Tape::new();
                let vars = self.model.bind(&mut tape);
                let x = tape.input(&self.x);
                let c = tape.input(&self.cond);
                let out = self.model.forward(&mut tape, &vars, x, c).unwrap();
                let t = tape.input(&self.target);
                let d = tape.sub(out, t);
                let sq = tape.mul(d, d);
                let loss = tape.mean(sq);
                let value = tape.scalar_value(loss);
                tape.backward(loss)?;
                let grads =
                    flatten_vars(&vars).into_iter().map(|v| tape.grad_tensor(v)).collect();
                Ok((value, grads))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = FnoModel::new(FnoConfig { width: 3, modes: 3, layers: 2 }, &mut rng);
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| 0.2 + 0.05 * i as f64).collect());
        // low activation energy keeps the Boltzmann feature O(0.1) so every
        // lift row carries a gradient central differences can resolve
        let encoding = crate::condition::EncodingParams {
            activation_energy_ev: 0.05,
            ..Default::default()
        };
        let cond = crate::condition::encode_batch(&[4.0, 43.0], &encoding).unwrap();
        let target = Tensor::new(vec![2, 6], vec![0.5; 12]);
        let mut obj = Obj { model, x, cond, target };
        let report = finite_difference_gradcheck(&mut obj, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn margin_loss_matches_hand_cases() {
        let case = |lo: f64, hi: f64| {
            let mut tape = Tape::new();
            let l = tape.input(&Tensor::new(vec![1], vec![lo]));
            let h = tape.input(&Tensor::new(vec![1], vec![hi]));
            let loss = margin_ranking_loss(&mut tape, l, h, 0.05);
            tape.scalar_value(loss)
        };
        assert_eq!(case(0.2, 0.9), 0.0);
        assert!((case(0.5, 0.5) - 0.05).abs() < 1e-15);
        assert!((case(0.9, 0.2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_too_many_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = FnoModel::new(FnoConfig { width: 4, modes: 9, layers: 1 }, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 8], vec![0.1; 8]);
        let cond = crate::condition::encode_batch(&[24.0], &Default::default()).unwrap();
        match model.forward_tensors(&mut tape, &x, &cond) {
            Err(FnoError::TooManyModes { modes: 9, len: 8, max: 5 }) => {}
            other => panic!("expected mode error, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_on_two_temperatures_orders_the_groups() {
        let synth = SynthConfig::default();
        let corpus = generate_corpus(&synth, &[4.0, 43.0], 24, 5, "pre");
        // find an init whose first batch actually violates the margin, so the
        // run demonstrates learning rather than starting converged
        let probe = PretrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let seed = (0..50u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let (_, r) =
                    pretrain(&corpus, tiny_config(), &probe, &Default::default(), &mut rng)
                        .unwrap();
                r.initial_loss > 0.02
            })
            .expect("some seed starts unordered");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PretrainConfig { epochs: 60, batch_size: 8, ..Default::default() };
        let (model, report) =
            pretrain(&corpus, tiny_config(), &cfg, &Default::default(), &mut rng).unwrap();
        assert!(model.frozen);
        assert!(
            report.final_loss < report.initial_loss && report.final_loss < 0.01,
            "loss {} → {}",
            report.initial_loss,
            report.final_loss
        );
        // frozen model orders the two groups by mean output
        let by_temp = group_by_temperature(&corpus);
        let mut means = Vec::new();
        for (t, idx) in &by_temp {
            let xs = corpus.batch(idx);
            let cond =
                crate::condition::encode_batch(&vec![*t; idx.len()], &Default::default())
                    .unwrap();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let xv = tape.input(&xs);
            let cv = tape.input(&cond);
            let m = model.mean_output(&mut tape, &vars, xv, cv).unwrap();
            let vals = tape.value(m);
            means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        assert!(means[0] < means[1], "low {} vs high {}", means[0], means[1]);
    }

    #[test]
    fn pretrain_rejects_single_temperature() {
        let synth = SynthConfig::default();
        let corpus = generate_corpus(&synth, &[24.0], 12, 5, "solo");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        match pretrain(&corpus, tiny_config(), &Default::default(), &Default::default(), &mut rng)
        {
            Err(FnoError::SingleTemperatureGroup(1)) => {}
            other => panic!("expected single-group error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn partial_freeze_keeps_early_layers_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = FnoModel::new(tiny_config(), &mut rng);
        model.freeze_first_layers(1);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.input(&Tensor::new(vec![1, 6], vec![0.4; 6]));
        let cond = tape
            .input(&crate::condition::encode_batch(&[24.0], &Default::default()).unwrap());
        let out = model.forward(&mut tape, &vars, x, cond).unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(vars.layers[0].mix_re).is_none(), "frozen layer got gradient");
        assert!(tape.grad(vars.layers[1].mix_re).is_some(), "trainable layer missing gradient");
        assert!(tape.grad(vars.lift).is_some());
    }
}
