//! Evaluation metrics: index-paired RMSE, a feature-space Fréchet distance
//! between generated and reference populations, and a
//! condition-discrimination protocol.

use crate::linalg::spd_sqrt;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample count mismatch: {a} vs {b}")]
    CountMismatch { a: usize, b: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("empty input")]
    Empty,
}

/// Root-mean-square error between index-paired sets of curves.
pub fn rmse(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if generated.len() != reference.len() {
        return Err(MetricsError::CountMismatch { a: generated.len(), b: reference.len() });
    }
    if generated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, r) in generated.iter().zip(reference) {
        debug_assert_eq!(g.len(), r.len());
        for (x, y) in g.iter().zip(r) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

pub const FEATURE_DIM: usize = 5;

/// Five shape descriptors of a curve: mean level, spread, front/back
/// asymmetry, total range, and the fitted linear trend over τ ∈ [0, 1].
pub fn waveform_features(values: &[f64]) -> [f64; FEATURE_DIM] {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let half = n / 2;
    let front = values[..half].iter().sum::<f64>() / half as f64;
    let back = values[half..].iter().sum::<f64>() / (n - half) as f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    // least-squares slope against τ
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mx = 0.5;
    for (i, &v) in values.iter().enumerate() {
        let tau = i as f64 / (n - 1) as f64;
        sxy += (tau - mx) * (v - mean);
        sxx += (tau - mx) * (tau - mx);
    }
    [mean, var.sqrt(), front - back, hi - lo, sxy / sxx]
}

/// Gaussian fit (mean vector, unbiased covariance) to a feature population.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn fit(features: &[[f64; FEATURE_DIM]]) -> Result<Self, MetricsError> {
        let n = features.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples { need: 2, got: n });
        }
        let mut mean = DVector::<f64>::zeros(FEATURE_DIM);
        for f in features {
            for (j, &v) in f.iter().enumerate() {
                mean[j] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::<f64>::zeros(FEATURE_DIM, FEATURE_DIM);
        for f in features {
            let d = DVector::from_iterator(FEATURE_DIM, f.iter().copied()) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(GaussianSummary { mean, cov, count: n })
    }
}

/// Fréchet distance (squared 2-Wasserstein) between two Gaussian summaries:
/// ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}).
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    let dmu = &a.mean - &b.mean;
    let root_a = spd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    // symmetrize against round-off before the second root
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = spd_sqrt(&inner);
    let trace = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    dmu.norm_squared() + trace.max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationDistanceReport {
    /// Condition label (formatted temperature) → Fréchet distance.
    pub per_condition: BTreeMap<String, f64>,
    /// Unweighted mean over conditions.
    pub mean: f64,
}

pub fn condition_label(temp_c: f64) -> String {
    format!("{temp_c:.1}C")
}

/// Feature-space Fréchet distance per condition (≥6 samples on each side),
/// averaged unweighted over conditions.
pub fn population_distance(
    generated: &BTreeMap<String, Vec<Vec<f64>>>,
    reference: &BTreeMap<String, Vec<Vec<f64>>>,
) -> Result<PopulationDistanceReport, MetricsError> {
    let mut per_condition = BTreeMap::new();
    for (label, gen_curves) in generated {
        let ref_curves = reference
            .get(label)
            .ok_or(MetricsError::CountMismatch { a: generated.len(), b: reference.len() })?;
        let need = 6;
        if gen_curves.len() < need || ref_curves.len() < need {
            return Err(MetricsError::TooFewSamples {
                need,
                got: gen_curves.len().min(ref_curves.len()),
            });
        }
        let gf: Vec<[f64; FEATURE_DIM]> =
            gen_curves.iter().map(|c| waveform_features(c)).collect();
        let rf: Vec<[f64; FEATURE_DIM]> =
            ref_curves.iter().map(|c| waveform_features(c)).collect();
        let d = frechet_distance(&GaussianSummary::fit(&gf)?, &GaussianSummary::fit(&rf)?);
        per_condition.insert(label.clone(), d);
    }
    if per_condition.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mean = per_condition.values().sum::<f64>() / per_condition.len() as f64;
    Ok(PopulationDistanceReport { per_condition, mean })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub accuracy: f64,
    /// Chance level: one over the number of candidate conditions.
    pub baseline: f64,
    pub items: usize,
    pub correct: usize,
}

/// Condition discrimination: for each labeled curve, score every candidate
/// condition with the supplied matching loss and predict the argmin. The
/// scorer must reuse identical randomness across candidates for one curve so
/// the comparison is paired.
pub fn discrimination_accuracy<F>(
    items: &[(Vec<f64>, f64)],
    candidates: &[f64],
    mut score: F,
) -> Result<DiscriminationReport, MetricsError>
where
    F: FnMut(usize, &[f64], f64) -> f64,
{
    if items.is_empty() || candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut correct = 0usize;
    for (idx, (values, true_temp)) in items.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_temp = candidates[0];
        for &cand in candidates {
            let s = score(idx, values, cand);
            if s < best {
                best = s;
                best_temp = cand;
            }
        }
        if best_temp == *true_temp {
            correct += 1;
        }
    }
    Ok(DiscriminationReport {
        accuracy: correct as f64 / items.len() as f64,
        baseline: 1.0 / candidates.len() as f64,
        items: items.len(),
        correct,
    })
}
