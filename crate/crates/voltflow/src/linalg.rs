//! Small dense helpers on top of nalgebra: clipped symmetric square roots
//! (two independent routes) and ridge regression.

use nalgebra::DMatrix;

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// clipping tiny negative eigenvalues (sampling noise) at zero.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let roots = sym.eigenvalues.map(|l| l.max(0.0).sqrt());
    &sym.eigenvectors * DMatrix::from_diagonal(&roots) * sym.eigenvectors.transpose()
}

/// Denman–Beavers iteration for the principal matrix square root:
/// X ← (X + Y⁻¹)/2, Y ← (Y + X⁻¹)/2 from X=A, Y=I. Returns `None` if an
/// iterate is singular or the iteration fails to converge. Used as an
/// algebraically independent cross-check of [`spd_sqrt`].
pub fn denman_beavers_sqrt(m: &DMatrix<f64>, max_iters: usize) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut x = m.clone();
    let mut y = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iters {
        let x_inv = x.clone().try_inverse()?;
        let y_inv = y.clone().try_inverse()?;
        let next_x = (&x + y_inv) * 0.5;
        let next_y = (&y + x_inv) * 0.5;
        let step = (&next_x - &x).norm();
        x = next_x;
        y = next_y;
        if step < 1e-14 * (1.0 + x.norm()) {
            return Some(x);
        }
    }
    None
}

/// Ridge regression with an unpenalized intercept: returns
/// `[intercept, slope_0, …]` minimizing ‖y − β₀ − Xβ‖² + λ‖β‖².
pub fn ridge_fit(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(rows.len(), targets.len());
    assert!(!rows.is_empty());
    let p = rows[0].len();
    let n = rows.len();
    let mut design = DMatrix::<f64>::zeros(n, p + 1);
    for (i, row) in rows.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for (j, &v) in row.iter().enumerate() {
            design[(i, j + 1)] = v;
        }
    }
    let y = nalgebra::DVector::from_column_slice(targets);
    let mut gram = design.transpose() * &design;
    for j in 1..=p {
        gram[(j, j)] += lambda;
    }
    let rhs = design.transpose() * y;
    gram
        .lu()
        .solve(&rhs)
        .map(|b| b.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; p + 1])
}
