//! Synthetic discharge-waveform corpus.
//!
//! Each curve is a plateau–knee voltage trace over normalized time τ ∈ [0, 1]:
//! an early exponential sag (internal resistance, largest when cold), a linear
//! plateau decline, and a sigmoid capacity knee whose position walks earlier
//! with cycle count at an Arrhenius-accelerated rate (fastest when hot). After
//! min/max normalization to [0, 1] the two temperature effects reproduce the
//! qualitative signatures the model is trained to respect: cold curves dip
//! hard in the early phase, hot curves collapse first in the late phase, and
//! pooling temperatures flips the sign of the resistance↔retention
//! correlation relative to the within-temperature coupling.

use crate::tape::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

// ── time-base phases ──

/// Relative-time phase boundaries shared by fixtures and validator features:
/// phase 1 is τ < 0.10, phase 3 is τ > 0.86.
pub const PHASE1_END: f64 = 0.10;
pub const PHASE3_START: f64 = 0.86;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    EarlySag,
    Plateau,
    Knee,
}

/// Phase of sample `idx` within a length-`len` curve (τ = idx/(len−1)).
pub fn phase_of(idx: usize, len: usize) -> Phase {
    let rel = idx as f64 / (len - 1) as f64;
    if rel < PHASE1_END {
        Phase::EarlySag
    } else if rel > PHASE3_START {
        Phase::Knee
    } else {
        Phase::Plateau
    }
}

/// Per-sample feature weights: boundary phases (1 and 3) carry `boost`,
/// the plateau carries 1.
pub fn phase_weights(len: usize, boost: f64) -> Vec<f64> {
    (0..len)
        .map(|i| match phase_of(i, len) {
            Phase::Plateau => 1.0,
            _ => boost,
        })
        .collect()
}

// ── configuration ──

/// Source chemistry for a synthetic domain. `Target` is the downstream
/// domain; `SourceA`/`SourceB` are pretraining domains with different plateau
/// baselines and *opposed* sag–temperature couplings, so only the encoded
/// condition is a cross-domain-consistent ranking signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Chemistry {
    Target,
    SourceA,
    SourceB,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Samples per curve.
    pub curve_len: usize,
    /// Resistance sag depth at the reference temperature (raw volts).
    pub sag_ref: f64,
    /// Arrhenius activation of the sag amplitude (eV); positive ⇒ deeper sag
    /// when cold.
    pub sag_activation_ev: f64,
    /// Sag relaxation constant in relative time.
    pub sag_tau: f64,
    /// Linear plateau decline over the full curve (raw volts).
    pub plateau_slope: f64,
    /// Depth of the capacity knee (raw volts).
    pub knee_depth: f64,
    /// Sigmoid sharpness of the knee.
    pub knee_sharpness: f64,
    /// Knee center position at cycle 0 for the reference temperature.
    pub knee_base: f64,
    /// Knee delay per unit of (T_ref − T)/σ below the reference: cold
    /// suppresses the knee reaction, holding the collapse later.
    pub knee_cold_shift: f64,
    /// Knee advance per unit of (T − T_ref)/σ above the reference: heat
    /// brings the collapse earlier even at cycle 0.
    pub knee_hot_shift: f64,
    /// Knee drift per cycle at the reference temperature.
    pub fade_per_cycle: f64,
    /// Arrhenius activation of capacity fade (eV); hot ages faster.
    pub fade_activation_ev: f64,
    /// Per-unit multiplicative jitter on the plateau slope.
    pub unit_slope_jitter: f64,
    /// Per-unit additive jitter on the knee position.
    pub unit_knee_jitter: f64,
    /// Per-unit "vigor" coupling into plateau flatness: a vigorous unit
    /// declines more slowly, which raises both its apparent retention and its
    /// normalized early-sag depth — the within-temperature confounder.
    pub vigor_slope: f64,
    /// Measurement noise after shaping, before normalization.
    pub noise_std: f64,
    /// When false, sag/fade/knee ignore temperature (confounding removed);
    /// the Simpson control fixture uses this.
    pub temperature_coupling: bool,
    pub chemistry: Chemistry,
    pub encoding: crate::condition::EncodingParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            curve_len: 50,
            sag_ref: 0.09,
            sag_activation_ev: 0.22,
            sag_tau: 0.03,
            plateau_slope: 0.18,
            knee_depth: 0.55,
            knee_sharpness: 18.0,
            knee_base: 0.85,
            knee_cold_shift: 0.12,
            knee_hot_shift: 0.05,
            fade_per_cycle: 3.0e-4,
            fade_activation_ev: 0.6,
            unit_slope_jitter: 0.05,
            unit_knee_jitter: 0.002,
            vigor_slope: 0.16,
            noise_std: 0.002,
            temperature_coupling: true,
            chemistry: Chemistry::Target,
            encoding: crate::condition::EncodingParams::default(),
        }
    }
}

// ── data model ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Waveform {
    pub battery_id: String,
    pub temperature_c: f64,
    pub cycle: u32,
    /// Normalized voltage samples in [0, 1].
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub curve_len: usize,
    pub waveforms: Vec<Waveform>,
}

impl Corpus {
    pub fn new(curve_len: usize) -> Self {
        Corpus { curve_len, waveforms: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.waveforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveforms.is_empty()
    }

    /// Waveforms at one temperature (exact float match on the group label).
    pub fn at_temperature(&self, temp_c: f64) -> Vec<&Waveform> {
        self.waveforms.iter().filter(|w| w.temperature_c == temp_c).collect()
    }

    /// Distinct temperatures in insertion order.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for w in &self.waveforms {
            if !out.contains(&w.temperature_c) {
                out.push(w.temperature_c);
            }
        }
        out
    }

    /// Stack a set of waveform indices into a `[B, L]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.curve_len);
        for &i in idx {
            data.extend_from_slice(&self.waveforms[i].values);
        }
        Tensor::new(vec![idx.len(), self.curve_len], data)
    }

    pub fn merged(mut self, other: Corpus) -> Corpus {
        assert_eq!(self.curve_len, other.curve_len, "merging corpora of different lengths");
        self.waveforms.extend(other.waveforms);
        self
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("csv i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse: {0}")]
    Csv(#[from] csv::Error),
    #[error("record {record}: {problem}")]
    Schema { record: usize, problem: String },
    #[error("record {record}: non-finite sample v{index}")]
    NonFinite { record: usize, index: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

// ── generation ──

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Stable per-unit physical traits drawn from the seed.
#[derive(Debug, Clone, Copy)]
struct UnitTraits {
    slope_mul: f64,
    knee_jitter: f64,
    vigor: f64,
}

fn unit_traits(cfg: &SynthConfig, seed: u64, unit: u64) -> UnitTraits {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(unit.wrapping_add(0x5EED))));
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    let vigor: f64 = rng.sample(StandardNormal);
    UnitTraits {
        slope_mul: 1.0 + cfg.unit_slope_jitter * e1,
        knee_jitter: cfg.unit_knee_jitter * e2,
        vigor,
    }
}

/// Chemistry-specific multipliers: (plateau slope, knee depth, sag coupling).
/// SourceB's sag coupling is inverted — its low-temperature polarization is
/// weak — so A+B pretraining cannot rank temperature from sag shape alone.
fn chemistry_mods(chem: Chemistry) -> (f64, f64, f64) {
    match chem {
        Chemistry::Target => (1.0, 1.0, 1.0),
        Chemistry::SourceA => (1.22, 0.91, 1.25),
        Chemistry::SourceB => (0.78, 1.13, -0.8),
    }
}

/// Arrhenius ratio exp((E/k_B)·(1/T_ref − 1/T)) — >1 when T > T_ref.
fn arrhenius_ratio(activation_ev: f64, temp_c: f64, enc: &crate::condition::EncodingParams) -> f64 {
    let t_k = temp_c + crate::condition::CELSIUS_TO_KELVIN;
    let t_ref_k = enc.t_ref_celsius + crate::condition::CELSIUS_TO_KELVIN;
    ((activation_ev / enc.boltzmann_ev_per_k) * (1.0 / t_ref_k - 1.0 / t_k)).exp()
}

/// Knee drift per cycle at `temp_c` (relative-time units). Strictly larger at
/// higher temperature whenever coupling is on.
pub fn fade_rate(cfg: &SynthConfig, temp_c: f64) -> f64 {
    let t = if cfg.temperature_coupling { temp_c } else { cfg.encoding.t_ref_celsius };
    cfg.fade_per_cycle * arrhenius_ratio(cfg.fade_activation_ev, t, &cfg.encoding)
}

fn sigmoid(x: f64) -> f64 {
    crate::tape::sigmoid(x)
}

/// Generate one normalized curve. `noise_rng` supplies measurement noise.
fn generate_curve(
    cfg: &SynthConfig,
    temp_c: f64,
    cycle: u32,
    traits: UnitTraits,
    noise_rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (slope_mul, depth_mul, sag_couple) = chemistry_mods(cfg.chemistry);
    let t_eff = if cfg.temperature_coupling { temp_c } else { cfg.encoding.t_ref_celsius };

    // Sag amplitude: Arrhenius in 1/T around the reference, direction set by
    // the chemistry coupling, floored at a tenth of the reference depth.
    let cold_factor = arrhenius_ratio(cfg.sag_activation_ev, t_eff, &cfg.encoding);
    let sag_shift = sag_couple * (1.0 / cold_factor - 1.0); // >0 when cold for positive coupling
    let sag = (cfg.sag_ref * (1.0 + sag_shift)).max(0.1 * cfg.sag_ref);

    let slope = cfg.plateau_slope
        * slope_mul
        * traits.slope_mul
        * (1.0 - cfg.vigor_slope * traits.vigor).max(0.2);
    let depth = cfg.knee_depth * depth_mul;
    let rel = (cfg.encoding.t_ref_celsius - t_eff) / cfg.encoding.sigma_celsius;
    let temp_knee = if rel >= 0.0 { cfg.knee_cold_shift * rel } else { cfg.knee_hot_shift * rel };
    let knee_center =
        cfg.knee_base + temp_knee + traits.knee_jitter - fade_rate(cfg, temp_c) * cycle as f64;

    let len = cfg.curve_len;
    let mut raw = Vec::with_capacity(len);
    for i in 0..len {
        let tau = i as f64 / (len - 1) as f64;
        let v = 1.0
            - sag * (1.0 - (-tau / cfg.sag_tau).exp())
            - slope * tau
            - depth * sigmoid(cfg.knee_sharpness * (tau - knee_center));
        raw.push(v);
    }
    // normalize the nominal shape, then overlay measurement noise, so the
    // observed extremes do not leak into every sample through the scaling
    normalize(&mut raw);
    if cfg.noise_std > 0.0 {
        for v in raw.iter_mut() {
            let noise: f64 = noise_rng.sample(StandardNormal);
            *v = (*v + cfg.noise_std * noise).clamp(0.0, 1.0);
        }
    }
    raw
}

/// Min/max normalization to [0, 1] in place.
pub fn normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    assert!(range > 1e-12, "degenerate flat curve cannot be normalized");
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// Evenly spaced cycle indices across [0, 150].
pub fn cycle_grid(n: usize) -> Vec<u32> {
    assert!(n >= 1);
    if n == 1 {
        return vec![0];
    }
    (0..n).map(|i| ((150 * i) as f64 / (n - 1) as f64).round() as u32).collect()
}

/// Generate `n_units × cycles.len()` curves at one temperature.
pub fn generate_group(
    cfg: &SynthConfig,
    temp_c: f64,
    n_units: usize,
    cycles: &[u32],
    seed: u64,
    id_prefix: &str,
) -> Vec<Waveform> {
    use rand::SeedableRng;
    let mut out = Vec::with_capacity(n_units * cycles.len());
    for u in 0..n_units {
        let traits = unit_traits(cfg, seed, u as u64 ^ splitmix(temp_c.to_bits()));
        for &cycle in cycles {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(splitmix(
                seed ^ splitmix(temp_c.to_bits() ^ (u as u64) << 32 ^ cycle as u64),
            ));
            let values = generate_curve(cfg, temp_c, cycle, traits, &mut noise_rng);
            out.push(Waveform {
                battery_id: format!("{id_prefix}-t{temp_c:.1}-u{u}"),
                temperature_c: temp_c,
                cycle,
                values,
            });
        }
    }
    out
}

/// Generate a corpus spanning `temps`, with ~`n_per_temp` curves per
/// temperature split over 4 units.
pub fn generate_corpus(
    cfg: &SynthConfig,
    temps: &[f64],
    n_per_temp: usize,
    seed: u64,
    id_prefix: &str,
) -> Corpus {
    let units = 4usize.min(n_per_temp.max(1));
    let per_unit = (n_per_temp / units).max(1);
    let cycles = cycle_grid(per_unit);
    let mut corpus = Corpus::new(cfg.curve_len);
    for &t in temps {
        corpus.waveforms.extend(generate_group(cfg, t, units, &cycles, seed, id_prefix));
    }
    corpus
}

// ── evaluation groups ──

/// The six held-out evaluation groups: name, temperature, unit-seed offset
/// (Low1/Low2 share a temperature but draw disjoint unit populations).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalGroup {
    pub name: String,
    pub temp_c: f64,
    pub seed_offset: u64,
}

pub fn eval_groups() -> Vec<EvalGroup> {
    [
        ("near", 10.6, 101),
        ("low1", 4.0, 201),
        ("low2", 4.0, 301),
        ("high1", 38.9, 401),
        ("high2", 43.0, 501),
        ("train", 24.0, 601),
    ]
    .into_iter()
    .map(|(name, temp_c, seed_offset)| EvalGroup { name: name.into(), temp_c, seed_offset })
    .collect()
}

/// Distinct temperatures across the evaluation groups, ascending.
pub fn distinct_eval_temps() -> Vec<f64> {
    vec![4.0, 10.6, 24.0, 38.9, 43.0]
}

// ── fixtures ──

/// Knee position: first sample where the normalized curve crosses 0.5.
pub fn knee_index(values: &[f64]) -> usize {
    values.iter().position(|&v| v < 0.5).unwrap_or(values.len() - 1)
}

/// Resistance and retention proxies — the confounded pair behind the Simpson
/// fixture. Resistance is the mean height of the early-phase head above the
/// plateau line back-extrapolated from the mid-curve (τ ∈ [0.2, 0.5]): the
/// not-yet-relaxed ohmic sag, isolated from the plateau slope. Retention is
/// the mean normalized voltage.
pub fn confounding_proxies(values: &[f64]) -> (f64, f64) {
    let len = values.len();
    let tau = |i: usize| i as f64 / (len - 1) as f64;
    // least-squares line over the plateau window
    let window: Vec<usize> = (0..len).filter(|&i| (0.2..=0.5).contains(&tau(i))).collect();
    let n = window.len() as f64;
    let mx = window.iter().map(|&i| tau(i)).sum::<f64>() / n;
    let my = window.iter().map(|&i| values[i]).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for &i in &window {
        sxy += (tau(i) - mx) * (values[i] - my);
        sxx += (tau(i) - mx) * (tau(i) - mx);
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let early: Vec<usize> = (0..len).filter(|&i| phase_of(i, len) == Phase::EarlySag).collect();
    let resistance = early
        .iter()
        .map(|&i| values[i] - (alpha + beta * tau(i)))
        .sum::<f64>()
        / early.len() as f64;
    let retention = values.iter().sum::<f64>() / len as f64;
    (resistance, retention)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseFixtureReport {
    /// Mean over curves and phase samples of V(4 °C) − V(43 °C), per phase.
    pub delta_by_phase: [f64; 3],
    pub curves_per_side: usize,
}

/// Mean cold-vs-hot difference per phase over matched cycles.
pub fn phase_fixture_check(cfg: &SynthConfig, seed: u64) -> PhaseFixtureReport {
    let units = 4;
    let cycles = cycle_grid(50); // 4 × 50 = 200 curves per side
    let cold = generate_group(cfg, 4.0, units, &cycles, seed, "fix");
    let hot = generate_group(cfg, 43.0, units, &cycles, seed, "fix");
    let len = cfg.curve_len;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (wc, wh) in cold.iter().zip(&hot) {
        for i in 0..len {
            let p = match phase_of(i, len) {
                Phase::EarlySag => 0,
                Phase::Plateau => 1,
                Phase::Knee => 2,
            };
            sums[p] += wc.values[i] - wh.values[i];
            counts[p] += 1;
        }
    }
    PhaseFixtureReport {
        delta_by_phase: [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64, sums[2] / counts[2] as f64],
        curves_per_side: cold.len(),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx.sqrt() * vy.sqrt() + 1e-300)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimpsonReport {
    pub pooled_r: f64,
    /// (temperature, within-group correlation)
    pub conditional_r: Vec<(f64, f64)>,
    pub curves_per_group: usize,
}

/// Correlate the resistance proxy with apparent retention, pooled and within
/// temperature, over a ≥3-temperature corpus.
pub fn simpson_fixture_check(cfg: &SynthConfig, seed: u64) -> SimpsonReport {
    let temps = [4.0, 24.0, 43.0];
    let units = 10;
    // matched early-to-mid-life cycles, 200 curves per group
    let cycles: Vec<u32> = (0..20).map(|i| (100 * i) / 19).collect();
    let mut pooled_x = Vec::new();
    let mut pooled_y = Vec::new();
    let mut conditional = Vec::new();
    let mut per_group = 0;
    for &t in &temps {
        let group = generate_group(cfg, t, units, &cycles, seed, "simpson");
        per_group = group.len();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for w in &group {
            let (r, ret) = confounding_proxies(&w.values);
            xs.push(r);
            ys.push(ret);
        }
        conditional.push((t, pearson(&xs, &ys)));
        pooled_x.extend(xs);
        pooled_y.extend(ys);
    }
    SimpsonReport {
        pooled_r: pearson(&pooled_x, &pooled_y),
        conditional_r: conditional,
        curves_per_group: per_group,
    }
}

// ── CSV round trip ──

/// Write `battery_id,temperature_c,cycle,v0..v{L−1}` rows.
pub fn write_csv(path: &Path, corpus: &Corpus) -> Result<(), SynthError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "battery_id,temperature_c,cycle")?;
    for i in 0..corpus.curve_len {
        write!(file, ",v{i}")?;
    }
    writeln!(file)?;
    for w in &corpus.waveforms {
        write!(file, "{},{},{}", w.battery_id, w.temperature_c, w.cycle)?;
        for v in &w.values {
            write!(file, ",{v}")?;
        }
        writeln!(file)?;
    }
    Ok(())
}

/// Load a corpus, validating the schema, sample count, and finiteness.
pub fn load_csv(path: &Path) -> Result<Corpus, SynthError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 4
        || &headers[0] != "battery_id"
        || &headers[1] != "temperature_c"
        || &headers[2] != "cycle"
    {
        return Err(SynthError::Schema {
            record: 0,
            problem: format!("header must start battery_id,temperature_c,cycle,v0…; got {headers:?}"),
        });
    }
    let curve_len = headers.len() - 3;
    let mut corpus = Corpus::new(curve_len);
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = idx + 1;
        if record.len() != curve_len + 3 {
            return Err(SynthError::Schema {
                record: line,
                problem: format!("expected {} fields, got {}", curve_len + 3, record.len()),
            });
        }
        let temperature_c: f64 = record[1].parse().map_err(|e| SynthError::Schema {
            record: line,
            problem: format!("temperature_c: {e}"),
        })?;
        let cycle: u32 = record[2]
            .parse()
            .map_err(|e| SynthError::Schema { record: line, problem: format!("cycle: {e}") })?;
        let mut values = Vec::with_capacity(curve_len);
        for i in 0..curve_len {
            let v: f64 = record[i + 3].parse().map_err(|e| SynthError::Schema {
                record: line,
                problem: format!("v{i}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(SynthError::NonFinite { record: line, index: i });
            }
            values.push(v);
        }
        corpus.waveforms.push(Waveform {
            battery_id: record[0].to_string(),
            temperature_c,
            cycle,
            values,
        });
    }
    if corpus.waveforms.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_curves_are_monotone_and_unit_range() {
        let cfg = SynthConfig { noise_std: 0.0, ..Default::default() };
        for temp in [4.0, 24.0, 43.0] {
            let group = generate_group(&cfg, temp, 2, &[0, 75, 150], 9, "mono");
            for w in &group {
                let v = &w.values;
                assert!((v[0] - 1.0).abs() < 1e-12, "starts at the max");
                assert!((v[v.len() - 1]).abs() < 1e-12, "ends at the min");
                for i in 1..v.len() {
                    assert!(
                        v[i] <= v[i - 1] + 1e-12,
                        "non-monotone at {i} for T={temp} cycle={}",
                        w.cycle
                    );
                }
            }
        }
    }

    #[test]
    fn all_values_normalized_to_unit_interval() {
        let cfg = SynthConfig::default();
        let corpus = generate_corpus(&cfg, &[4.0, 24.0, 43.0], 60, 3, "norm");
        for w in &corpus.waveforms {
            for &v in &w.values {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn fade_accelerates_with_temperature() {
        let cfg = SynthConfig::default();
        assert!(fade_rate(&cfg, 43.0) > fade_rate(&cfg, 4.0));
        assert!(fade_rate(&cfg, 43.0) > fade_rate(&cfg, 24.0));
        // and coupling off flattens it
        let flat = SynthConfig { temperature_coupling: false, ..Default::default() };
        assert_eq!(fade_rate(&flat, 43.0), fade_rate(&flat, 4.0));
    }

    #[test]
    fn hot_knee_arrives_before_reference_knee() {
        let cfg = SynthConfig { noise_std: 0.0, ..Default::default() };
        let hot = generate_group(&cfg, 43.0, 1, &[150], 5, "knee");
        let mid = generate_group(&cfg, 24.0, 1, &[150], 5, "knee");
        assert!(
            knee_index(&hot[0].values) < knee_index(&mid[0].values),
            "hot {} vs mid {}",
            knee_index(&hot[0].values),
            knee_index(&mid[0].values)
        );
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_corpus(&cfg, &[4.0, 43.0], 40, 77, "det");
        let b = generate_corpus(&cfg, &[4.0, 43.0], 40, 77, "det");
        assert_eq!(a.waveforms.len(), b.waveforms.len());
        for (x, y) in a.waveforms.iter().zip(&b.waveforms) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn phase_fixture_hits_documented_windows() {
        let report = phase_fixture_check(&SynthConfig::default(), 42);
        let [p1, p2, p3] = report.delta_by_phase;
        assert!(report.curves_per_side >= 200);
        assert!((-0.17..=-0.07).contains(&p1), "phase-1 Δ {p1}");
        assert!((-0.09..=0.01).contains(&p2), "phase-2 Δ {p2}");
        assert!((0.16..=0.41).contains(&p3), "phase-3 Δ {p3}");
    }

    #[test]
    fn simpson_sign_flip_present_and_removable() {
        let report = simpson_fixture_check(&SynthConfig::default(), 42);
        assert!(report.curves_per_group >= 10);
        assert!(report.pooled_r < 0.0, "pooled r = {}", report.pooled_r);
        for (t, r) in &report.conditional_r {
            assert!(*r > 0.0, "conditional r at {t} °C = {r}");
        }
        // with temperature decoupled the paradox disappears: pooled tracks
        // the (positive) within-group coupling
        let control = SynthConfig { temperature_coupling: false, ..Default::default() };
        let flat = simpson_fixture_check(&control, 42);
        assert!(flat.pooled_r > 0.0, "control pooled r = {}", flat.pooled_r);
    }

    #[test]
    fn csv_roundtrip_preserves_corpus() {
        let cfg = SynthConfig::default();
        let corpus = generate_corpus(&cfg, &[24.0], 12, 8, "csv");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.csv");
        write_csv(&path, &corpus).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.curve_len, corpus.curve_len);
        assert_eq!(loaded.len(), corpus.len());
        for (a, b) in corpus.waveforms.iter().zip(&loaded.waveforms) {
            assert_eq!(a.battery_id, b.battery_id);
            assert_eq!(a.temperature_c, b.temperature_c);
            assert_eq!(a.cycle, b.cycle);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn csv_schema_violations_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bad_header = dir.path().join("bad_header.csv");
        std::fs::write(&bad_header, "id,temp,cycle,v0\nx,4.0,1,0.5\n").unwrap();
        assert!(matches!(load_csv(&bad_header), Err(SynthError::Schema { record: 0, .. })));

        let bad_value = dir.path().join("bad_value.csv");
        std::fs::write(
            &bad_value,
            "battery_id,temperature_c,cycle,v0,v1\nx,4.0,1,0.5,NaN\n",
        )
        .unwrap();
        assert!(matches!(
            load_csv(&bad_value),
            Err(SynthError::NonFinite { record: 1, index: 1 })
        ));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "battery_id,temperature_c,cycle,v0\n").unwrap();
        assert!(matches!(load_csv(&empty), Err(SynthError::EmptyCorpus)));
    }

    #[test]
    #[ignore = "tuning diagnostic"]
    fn seed_stability() {
        for seed in 0..12u64 {
            let cfg = SynthConfig::default();
            let ph = phase_fixture_check(&cfg, seed);
            let [p1, p2, p3] = ph.delta_by_phase;
            let si = simpson_fixture_check(&cfg, seed);
            let flat = simpson_fixture_check(
                &SynthConfig { temperature_coupling: false, ..cfg },
                seed,
            );
            let min_cond =
                si.conditional_r.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
            let ok = (-0.17..=-0.07).contains(&p1)
                && (-0.09..=0.01).contains(&p2)
                && (0.16..=0.41).contains(&p3)
                && si.pooled_r < 0.0
                && min_cond > 0.0
                && flat.pooled_r > 0.0;
            println!(
                "{}seed={seed:2} p=[{p1:+.3} {p2:+.3} {p3:+.3}] pooled={:+.2} min_cond={:+.2} flat={:+.2}",
                if ok { "PASS " } else { "FAIL " },
                si.pooled_r,
                min_cond,
                flat.pooled_r,
            );
        }
    }

    #[test]
    #[ignore = "tuning diagnostic"]
    fn tuning_grid() {
        for sag_ref in [0.07, 0.09, 0.11] {
            for sag_activation_ev in [0.30, 0.38] {
                for knee_hot_shift in [0.05, 0.08] {
                    for fade_per_cycle in [2.0e-4, 3.0e-4] {
                        let cfg = SynthConfig {
                            sag_ref,
                            sag_activation_ev,
                            knee_hot_shift,
                            fade_per_cycle,
                            ..Default::default()
                        };
                        let ph = phase_fixture_check(&cfg, 42);
                        let [p1, p2, p3] = ph.delta_by_phase;
                        let si = simpson_fixture_check(&cfg, 42);
                        let flat = simpson_fixture_check(
                            &SynthConfig { temperature_coupling: false, ..cfg.clone() },
                            42,
                        );
                        let min_cond = si
                            .conditional_r
                            .iter()
                            .map(|(_, r)| *r)
                            .fold(f64::INFINITY, f64::min);
                        let ok = (-0.17..=-0.07).contains(&p1)
                            && (-0.09..=0.01).contains(&p2)
                            && (0.16..=0.41).contains(&p3)
                            && si.pooled_r < -0.05
                            && min_cond > 0.05
                            && flat.pooled_r > 0.05;
                        println!(
                            "{}sag={sag_ref:.2} act={sag_activation_ev:.2} hot={knee_hot_shift:.2} fade={fade_per_cycle:.0e} | p=[{p1:+.3} {p2:+.3} {p3:+.3}] pooled={:+.2} min_cond={:+.2} flat={:+.2}",
                            if ok { "PASS " } else { "     " },
                            si.pooled_r,
                            min_cond,
                            flat.pooled_r,
                        );
                    }
                }
            }
        }
    }

    #[test]
    #[ignore = "tuning diagnostic"]
    fn tuning_table() {
        let cfg = SynthConfig::default();
        let ph = phase_fixture_check(&cfg, 42);
        println!("phase deltas: {:?}", ph.delta_by_phase);
        let si = simpson_fixture_check(&cfg, 42);
        println!("pooled r: {:.4}  conditional: {:?}", si.pooled_r, si.conditional_r);
        let flat = simpson_fixture_check(
            &SynthConfig { temperature_coupling: false, ..Default::default() },
            42,
        );
        println!("control pooled r: {:.4}  conditional: {:?}", flat.pooled_r, flat.conditional_r);
        // retention/proxy landscape per temperature
        for t in [4.0, 10.6, 24.0, 38.9, 43.0] {
            let g = generate_group(&cfg, t, 4, &cycle_grid(20), 42, "diag");
            let (mut pr, mut rt) = (0.0, 0.0);
            for w in &g {
                let (r, ret) = confounding_proxies(&w.values);
                pr += r;
                rt += ret;
            }
            let n = g.len() as f64;
            println!("T={t:5.1}  proxy={:.4}  retention={:.4}", pr / n, rt / n);
        }
        // channel probe: correlate proxies against vigor and cycle per temp
        for t in [4.0f64, 24.0, 43.0] {
            let mut vg = Vec::new();
            let mut cy = Vec::new();
            let mut px = Vec::new();
            let mut rt = Vec::new();
            for u in 0..6u64 {
                let traits = unit_traits(&cfg, 42, u ^ splitmix(t.to_bits()));
                for &cycle in &cycle_grid(20) {
                    use rand::SeedableRng;
                    let mut nr = ChaCha8Rng::seed_from_u64(splitmix(
                        42 ^ splitmix(t.to_bits() ^ (u) << 32 ^ cycle as u64),
                    ));
                    let v = generate_curve(&cfg, t, cycle, traits, &mut nr);
                    let (p, r) = confounding_proxies(&v);
                    vg.push(traits.vigor);
                    cy.push(cycle as f64);
                    px.push(p);
                    rt.push(r);
                }
            }
            println!(
                "T={t:5.1} corr(vigor,proxy)={:+.3} corr(vigor,ret)={:+.3} corr(cyc,proxy)={:+.3} corr(cyc,ret)={:+.3}",
                pearson(&vg, &px),
                pearson(&vg, &rt),
                pearson(&cy, &px),
                pearson(&cy, &rt)
            );
        }
    }

    #[test]
    fn phase_boundaries_partition_fifty_samples() {
        // τ<0.10 ⇒ samples 0..=4, τ>0.86 ⇒ samples 43..=49 for L=50
        let len = 50;
        let w = phase_weights(len, 3.0);
        let early: Vec<usize> = (0..len).filter(|&i| phase_of(i, len) == Phase::EarlySag).collect();
        let knee: Vec<usize> = (0..len).filter(|&i| phase_of(i, len) == Phase::Knee).collect();
        assert_eq!(early, vec![0, 1, 2, 3, 4]);
        assert_eq!(knee, (43..50).collect::<Vec<_>>());
        assert_eq!(w[0], 3.0);
        assert_eq!(w[20], 1.0);
        assert_eq!(w[49], 3.0);
    }
}
