//! Dense discrete Fourier transform as explicit matrix products.
//!
//! Signals are short (tens of samples), so the O(L²) dense form is preferred:
//! both directions are plain matmuls, which makes them trivially linear and
//! differentiable through the tape. Real inputs keep the non-redundant
//! `L/2 + 1` coefficients; the inverse folds Hermitian symmetry into its
//! matrix, so spectral truncation is just using fewer matrix rows.

use super::{matmul_acc, ComplexTensor, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DftError {
    #[error("spectrum holds {modes} modes but a length-{len} signal supports at most {max}")]
    LengthMismatch { modes: usize, len: usize, max: usize },
}

/// Forward DFT matrices: `C[l,k] = cos(2πlk/len)`, `S[l,k] = −sin(2πlk/len)`,
/// both `[len, modes]`, so `U = u·(C + iS)` keeps the first `modes`
/// coefficients of `Σ_l u_l e^{−2πi kl/len}`.
pub fn dft_matrices(len: usize, modes: usize) -> (Tensor, Tensor) {
    assert!(len > 0, "dft of an empty signal");
    assert!(modes <= len / 2 + 1, "{modes} modes exceed len {len}/2+1");
    let mut c = vec![0.0; len * modes];
    let mut s = vec![0.0; len * modes];
    for l in 0..len {
        for k in 0..modes {
            let theta = 2.0 * std::f64::consts::PI * (l * k) as f64 / len as f64;
            c[l * modes + k] = theta.cos();
            s[l * modes + k] = -theta.sin();
        }
    }
    (Tensor::new(vec![len, modes], c), Tensor::new(vec![len, modes], s))
}

/// Inverse matrices `[modes, len]` such that `u = Re(U)·Dre + Im(U)·Dim`
/// reconstructs a real signal from its Hermitian half-spectrum, with modes
/// beyond `modes` treated as zero. Interior coefficients carry weight 2; the
/// DC bin and (for even `len`) the Nyquist bin carry weight 1.
pub fn idft_matrices(len: usize, modes: usize) -> (Tensor, Tensor) {
    assert!(len > 0, "idft to an empty signal");
    assert!(modes <= len / 2 + 1, "{modes} modes exceed len {len}/2+1");
    let mut dre = vec![0.0; modes * len];
    let mut dim = vec![0.0; modes * len];
    for k in 0..modes {
        let w = if k == 0 || (len % 2 == 0 && k == len / 2) { 1.0 } else { 2.0 };
        for l in 0..len {
            let theta = 2.0 * std::f64::consts::PI * (l * k) as f64 / len as f64;
            dre[k * len + l] = w * theta.cos() / len as f64;
            dim[k * len + l] = -w * theta.sin() / len as f64;
        }
    }
    (Tensor::new(vec![modes, len], dre), Tensor::new(vec![modes, len], dim))
}

fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        1 => (1, t.shape[0]),
        2 => (t.shape[0], t.shape[1]),
        r => panic!("dft expects rank ≤ 2, got rank {r}"),
    }
}

/// Value-level forward DFT along the last axis, keeping all `len/2 + 1`
/// non-redundant coefficients.
pub fn dft_forward(u: &Tensor) -> ComplexTensor {
    let (rows, len) = as_rows(u);
    let modes = len / 2 + 1;
    let (c, s) = dft_matrices(len, modes);
    let mut re = vec![0.0; rows * modes];
    let mut im = vec![0.0; rows * modes];
    matmul_acc(&u.data, &c.data, rows, len, modes, &mut re);
    matmul_acc(&u.data, &s.data, rows, len, modes, &mut im);
    let shape = if u.shape.len() == 1 { vec![modes] } else { vec![rows, modes] };
    ComplexTensor::new(Tensor::new(shape.clone(), re), Tensor::new(shape, im))
}

/// Value-level inverse for real-signal spectra. Fails if the spectrum holds
/// more modes than a length-`len` signal supports.
pub fn dft_inverse(spec: &ComplexTensor, len: usize) -> Result<Tensor, DftError> {
    let (rows, modes) = as_rows(&spec.re);
    let max = len / 2 + 1;
    if modes > max {
        return Err(DftError::LengthMismatch { modes, len, max });
    }
    let (dre, dim) = idft_matrices(len, modes);
    let mut out = vec![0.0; rows * len];
    matmul_acc(&spec.re.data, &dre.data, rows, modes, len, &mut out);
    matmul_acc(&spec.im.data, &dim.data, rows, modes, len, &mut out);
    let shape = if spec.re.shape.len() == 1 { vec![len] } else { vec![rows, len] };
    Ok(Tensor::new(shape, out))
}

/// Signal-domain energy implied by a Hermitian half-spectrum (Parseval):
/// `(1/len)·Σ_k w_k·|U_k|²` summed over rows. Truncating modes can only
/// shrink this value.
pub fn spectrum_energy(spec: &ComplexTensor, len: usize) -> f64 {
    let (rows, modes) = as_rows(&spec.re);
    let mut total = 0.0;
    for r in 0..rows {
        for k in 0..modes {
            let w = if k == 0 || (len % 2 == 0 && k == len / 2) { 1.0 } else { 2.0 };
            let re = spec.re.data[r * modes + k];
            let im = spec.im.data[r * modes + k];
            total += w * (re * re + im * im);
        }
    }
    total / len as f64
}
