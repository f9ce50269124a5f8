//! Physics-structured temperature encoding.
//!
//! A Celsius temperature becomes three features: a normalized linear offset,
//! an Arrhenius inverse-temperature difference against the reference, and a
//! Boltzmann factor. Each component is strictly increasing in temperature —
//! [`monotone_curve_check`] verifies that property on any grid — so the
//! encoding preserves temperature ordering by construction.

use crate::tape::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CELSIUS_TO_KELVIN: f64 = 273.15;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingParams {
    /// Activation energy in eV.
    pub activation_energy_ev: f64,
    /// Reference temperature in °C.
    pub t_ref_celsius: f64,
    /// Linear-normalization width in °C.
    pub sigma_celsius: f64,
    /// Boltzmann constant in eV/K.
    pub boltzmann_ev_per_k: f64,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            activation_energy_ev: 0.6,
            t_ref_celsius: 24.0,
            sigma_celsius: 20.0,
            boltzmann_ev_per_k: 8.617333e-5,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("temperature {0} °C is at or below absolute zero")]
    NonPhysicalTemperature(f64),
    #[error("monotonicity check needs at least 2 temperatures, got {0}")]
    GridTooSmall(usize),
    #[error("monotonicity grid must be strictly ascending at position {0}")]
    GridNotAscending(usize),
}

/// The three encoded features for one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    /// (T − T_ref) / σ
    pub linear: f64,
    /// −(E_a/k_B)·(1/T_K − 1/T_ref,K)
    pub arrhenius: f64,
    /// exp(−E_a / (k_B·T_K))
    pub boltzmann: f64,
}

impl ConditionVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.linear, self.arrhenius, self.boltzmann]
    }
}

/// Width of the encoded condition vector.
pub const CONDITION_DIM: usize = 3;

/// Encode one Celsius temperature.
pub fn encode(temp_c: f64, params: &EncodingParams) -> Result<ConditionVector, ConditionError> {
    if !(temp_c > -CELSIUS_TO_KELVIN) {
        return Err(ConditionError::NonPhysicalTemperature(temp_c));
    }
    let t_k = temp_c + CELSIUS_TO_KELVIN;
    let t_ref_k = params.t_ref_celsius + CELSIUS_TO_KELVIN;
    let ea_over_kb = params.activation_energy_ev / params.boltzmann_ev_per_k;
    Ok(ConditionVector {
        linear: (temp_c - params.t_ref_celsius) / params.sigma_celsius,
        arrhenius: -ea_over_kb * (1.0 / t_k - 1.0 / t_ref_k),
        boltzmann: (-ea_over_kb / t_k).exp(),
    })
}

/// Encode a list of temperatures into a `[B, 3]` tensor.
pub fn encode_batch(temps_c: &[f64], params: &EncodingParams) -> Result<Tensor, ConditionError> {
    let mut data = Vec::with_capacity(temps_c.len() * CONDITION_DIM);
    for &t in temps_c {
        data.extend_from_slice(&encode(t, params)?.as_array());
    }
    Ok(Tensor::new(vec![temps_c.len(), CONDITION_DIM], data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneReport {
    /// True when every component strictly increases along the grid.
    pub strictly_increasing: bool,
    /// max over consecutive pairs and components of v_i − v_{i+1}; a negative
    /// value is the worst-case margin by which monotonicity holds.
    pub largest_violation: f64,
    pub grid_len: usize,
}

/// Check that all three encoded components strictly increase along an
/// ascending temperature grid.
pub fn monotone_curve_check(
    temps_c: &[f64],
    params: &EncodingParams,
) -> Result<MonotoneReport, ConditionError> {
    if temps_c.len() < 2 {
        return Err(ConditionError::GridTooSmall(temps_c.len()));
    }
    for i in 1..temps_c.len() {
        if temps_c[i] <= temps_c[i - 1] {
            return Err(ConditionError::GridNotAscending(i));
        }
    }
    let mut largest = f64::NEG_INFINITY;
    let mut prev = encode(temps_c[0], params)?.as_array();
    for &t in &temps_c[1..] {
        let cur = encode(t, params)?.as_array();
        for c in 0..CONDITION_DIM {
            largest = largest.max(prev[c] - cur[c]);
        }
        prev = cur;
    }
    Ok(MonotoneReport {
        strictly_increasing: largest < 0.0,
        largest_violation: largest,
        grid_len: temps_c.len(),
    })
}
