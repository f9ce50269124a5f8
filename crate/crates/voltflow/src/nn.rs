//! Persistent model parameters and the optimizer that updates them.
//!
//! Models own [`Param`]s across steps; each training step snapshots them onto
//! a fresh tape (trainable or frozen), runs backward, pulls gradients out in
//! the model's canonical parameter order, and hands them to [`Adam`].

use crate::tape::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A named, persistent parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value }
    }

    /// Put this parameter on the tape: trainable, or as a plain input when
    /// frozen so that no gradient is ever accumulated for it.
    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Var {
        if frozen {
            tape.input(&self.value)
        } else {
            tape.param(&self.value)
        }
    }
}

/// Anything holding an ordered collection of parameters.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.name.clone()));
        out
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }

    fn set_param_tensors(&mut self, tensors: &[Tensor]) {
        let mut i = 0;
        self.visit_params_mut(&mut |p| {
            assert_eq!(p.value.shape, tensors[i].shape, "shape drift on {}", p.name);
            p.value = tensors[i].clone();
            i += 1;
        });
        assert_eq!(i, tensors.len(), "parameter count drift");
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    /// SHA-256 over names, shapes, and exact value bits — bit-identical
    /// parameters produce identical digests.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            h.update(p.name.as_bytes());
            for d in &p.value.shape {
                h.update(d.to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        format!("{:x}", h.finalize())
    }
}

// ── initialization ──

/// Xavier/Glorot-normal weight matrix [rows, cols].
pub fn xavier(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Param {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    Param::new(name, Tensor::new(vec![rows, cols], data))
}

pub fn zeros(name: &str, shape: Vec<usize>) -> Param {
    Param::new(name, Tensor::zeros(shape))
}

// ── dense layer ──

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: xavier(&format!("{name}.w"), input, output, rng),
            b: zeros(&format!("{name}.b"), vec![output]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> LinearVars {
        LinearVars { w: self.w.bind(tape, frozen), b: self.b.bind(tape, frozen) }
    }

    pub fn apply(&self, tape: &mut Tape, vars: LinearVars, x: Var) -> Var {
        let y = tape.matmul(x, vars.w);
        tape.add_row(y, vars.b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// One optimizer step over every parameter of a model, with gradients given
/// in canonical visit order. Works through value snapshots so callers never
/// need simultaneous mutable references to all parameters.
pub fn apply_step(model: &mut dyn Parameterized, adam: &mut Adam, grads: &[Tensor]) {
    let mut scratch: Vec<Param> = model
        .param_names()
        .into_iter()
        .zip(model.param_tensors())
        .map(|(name, value)| Param::new(name, value))
        .collect();
    {
        let mut refs: Vec<&mut Param> = scratch.iter_mut().collect();
        adam.step(&mut refs, grads);
    }
    let values: Vec<Tensor> = scratch.into_iter().map(|p| p.value).collect();
    model.set_param_tensors(&values);
}

// ── optimizer ──

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before the moment updates.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam with global-norm gradient clipping. Moment buffers are keyed by
/// position, so a given optimizer must always see the same parameter list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update. `params` and `grads` must be aligned.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
        }
        assert_eq!(self.m.len(), grads.len(), "optimizer bound to a different parameter list");

        let sq_norm: f64 =
            grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum();
        let norm = sq_norm.sqrt();
        let scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };

        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..grad.data.len() {
                let g = grad.data[i] * scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                param.value.data[i] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Param::new("w", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..400 {
            let grad = Tensor::new(vec![2], p.value.data.iter().map(|w| 2.0 * w).collect());
            adam.step(&mut [&mut p], &[grad]);
        }
        assert!(p.value.data.iter().all(|w| w.abs() < 1e-3), "{:?}", p.value.data);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        // One huge gradient: the applied step must reflect norm 1, not 1000.
        let mut p = Param::new("w", Tensor::new(vec![1], vec![0.0]));
        let mut adam = Adam::new(AdamConfig { lr: 1.0, ..Default::default() });
        let grad = Tensor::new(vec![1], vec![1000.0]);
        adam.step(&mut [&mut p], &[grad]);
        // after clipping g=1: m̂ = 1, v̂ = 1 ⇒ step ≈ lr
        assert!((p.value.data[0] + 1.0).abs() < 1e-6, "{}", p.value.data[0]);
    }

    #[test]
    fn digest_tracks_value_bits() {
        struct One(Param);
        impl Parameterized for One {
            fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
                f(&self.0);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.0);
            }
        }
        let a = One(Param::new("w", Tensor::new(vec![2], vec![1.0, 2.0])));
        let b = One(Param::new("w", Tensor::new(vec![2], vec![1.0, 2.0])));
        assert_eq!(a.digest(), b.digest());
        let c = One(Param::new("w", Tensor::new(vec![2], vec![1.0, 2.0 + 1e-15])));
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn xavier_draws_are_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = xavier("a", 4, 3, &mut r1);
        let b = xavier("a", 4, 3, &mut r2);
        assert_eq!(a.value, b.value);
    }
}
