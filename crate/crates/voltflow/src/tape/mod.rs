//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] owns an arena of dense `f64` buffers (rank ≤ 3). Forward calls
//! append one [`Op`] per computed buffer; [`Tape::backward`] replays the ops in
//! reverse, accumulating vector–Jacobian products into per-buffer gradient
//! slots. Gradient buffers are allocated lazily — before `backward` runs,
//! every buffer reports no gradient.
//!
//! Detachment is structural: [`Tape::detach`] copies a buffer's values into a
//! fresh leaf, so no op connects the copy to its source and gradient can never
//! flow upstream through it.

mod dft;
mod gradcheck;

pub use dft::{
    dft_forward, dft_inverse, dft_matrices, idft_matrices, spectrum_energy, DftError,
};
pub use gradcheck::{finite_difference_gradcheck, GradcheckError, GradcheckReport, ScalarObjective};

use thiserror::Error;

// ── dense tensors ──

/// Dense row-major real tensor, rank ≤ 3.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.len() <= 3,
            "tensor rank {} exceeds supported maximum 3",
            shape.len()
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }
}

/// Complex tensor stored as split real/imaginary parts of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Self {
        assert_eq!(re.shape, im.shape, "re/im shape mismatch");
        ComplexTensor { re, im }
    }
}

// ── tape plumbing ──

/// Handle to a buffer on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward has already run on this tape; build a fresh tape to differentiate again")]
    BackwardAlreadyRun,
}

#[derive(Debug, Clone, Copy)]
enum EltBin {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise binary op on same-shape buffers.
    Bin { which: EltBin, a: usize, b: usize },
    /// `row` broadcast across the rows of `a`: out[r,c] = a[r,c] ∘ row[c].
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    /// `col` broadcast across the columns of `a`: out[r,c] = a[r,c] · col[r].
    MulCol { a: usize, col: usize },
    /// Each row of `x` repeated `times` consecutively: [r,c] → [r·times, c].
    RepeatRows { x: usize, times: usize },
    /// Rank-1 `x` spread across `cols` columns: [r] → [r, cols].
    RepeatCols { x: usize, cols: usize },
    /// out = mul·x + add, elementwise with scalar constants.
    Affine { x: usize, mul: f64 },
    /// out = x · s where `s` is a single-element buffer.
    ScaleByVar { x: usize, s: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Reshape { x: usize },
    /// [b, r, c] → [b, c, r].
    SwapAxes12 { x: usize, b: usize, r: usize, c: usize },
    /// [d0, d1, d2] → [d1, d0, d2].
    Permute102 { x: usize, d0: usize, d1: usize, d2: usize },
    /// Contiguous row slice of a rank-2 buffer.
    SliceRows { x: usize, start: usize, cols: usize },
    ConcatRows { xs: Vec<usize> },
    SliceCols { x: usize, start: usize, in_cols: usize },
    ConcatCols { xs: Vec<usize>, rows: usize },
    Sum { x: usize },
    Mean { x: usize },
    /// Row means of a rank-2 buffer: [r, c] → [r].
    MeanRows { x: usize, cols: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Abs { x: usize },
    /// ln(max(x, eps)); gradient is zero where the clamp is active.
    LnClamped { x: usize, eps: f64 },
}

struct Entry {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Arena of buffers plus the operation log connecting them.
pub struct Tape {
    entries: Vec<Entry>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), backward_done: false }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        assert!(shape.len() <= 3, "tape buffers are rank ≤ 3, got {:?}", shape);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry { data, shape, op, needs_grad, grad: None });
        Var(self.entries.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.entries[v.0].needs_grad
    }

    // ── leaves ──

    /// Register a trainable parameter snapshot; gradients accumulate for it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, true)
    }

    /// Register non-trainable input data.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, false)
    }

    /// Register a constant (same semantics as [`Tape::input`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Leaf, false)
    }

    /// Copy `x` into a fresh leaf. No gradient ever flows from the copy back
    /// to `x`; detaching a detached buffer is a further plain copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.entries[x.0].data.clone();
        let shape = self.entries[x.0].shape.clone();
        self.push(data, shape, Op::Leaf, false)
    }

    // ── accessors ──

    pub fn value(&self, v: Var) -> &[f64] {
        &self.entries[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.entries[v.0].shape
    }

    /// Scalar value of a single-element buffer.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.entries[v.0].data.len(), 1, "scalar_value on non-scalar");
        self.entries[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.entries[v.0].shape.clone(), self.entries[v.0].data.clone())
    }

    /// Gradient of the root w.r.t. `v`, if backward has run and `v` tracks
    /// gradients. `None` for untouched or non-tracking buffers.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.entries[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros if no gradient reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.entries[v.0].shape.clone();
        match &self.entries[v.0].grad {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    fn rank2(&self, v: Var, what: &str) -> (usize, usize) {
        let s = &self.entries[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("{what} expects rank ≤ 2, got {s:?}"),
        }
    }

    // ── elementwise ──

    fn bin(&mut self, which: EltBin, a: Var, b: Var) -> Var {
        assert_eq!(
            self.entries[a.0].shape, self.entries[b.0].shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.entries[a.0].shape, self.entries[b.0].shape
        );
        let data: Vec<f64> = self.entries[a.0]
            .data
            .iter()
            .zip(&self.entries[b.0].data)
            .map(|(&x, &y)| match which {
                EltBin::Add => x + y,
                EltBin::Sub => x - y,
                EltBin::Mul => x * y,
            })
            .collect();
        let shape = self.entries[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Bin { which, a: a.0, b: b.0 }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.bin(EltBin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.bin(EltBin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.bin(EltBin::Mul, a, b)
    }

    // ── broadcasts ──

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.rank2(a, "add_row");
        assert_eq!(self.entries[row.0].data.len(), c, "add_row width mismatch");
        let mut data = self.entries[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.entries[row.0].data[j];
            }
        }
        let shape = self.entries[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(row);
        self.push(data, shape, Op::AddRow { a: a.0, row: row.0 }, ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.rank2(a, "mul_row");
        assert_eq!(self.entries[row.0].data.len(), c, "mul_row width mismatch");
        let mut data = self.entries[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= self.entries[row.0].data[j];
            }
        }
        let shape = self.entries[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(row);
        self.push(data, shape, Op::MulRow { a: a.0, row: row.0 }, ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.rank2(a, "mul_col");
        assert_eq!(self.entries[col.0].data.len(), r, "mul_col height mismatch");
        let mut data = self.entries[a.0].data.clone();
        for i in 0..r {
            let s = self.entries[col.0].data[i];
            for j in 0..c {
                data[i * c + j] *= s;
            }
        }
        let shape = self.entries[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(col);
        self.push(data, shape, Op::MulCol { a: a.0, col: col.0 }, ng)
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.rank2(x, "repeat_rows");
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            let row = &self.entries[x.0].data[i * c..(i + 1) * c];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let ng = self.needs(x);
        self.push(data, vec![r * times, c], Op::RepeatRows { x: x.0, times }, ng)
    }

    pub fn repeat_cols(&mut self, x: Var, cols: usize) -> Var {
        assert_eq!(self.entries[x.0].shape.len(), 1, "repeat_cols expects rank 1");
        let r = self.entries[x.0].data.len();
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            let v = self.entries[x.0].data[i];
            data.extend(std::iter::repeat(v).take(cols));
        }
        let ng = self.needs(x);
        self.push(data, vec![r, cols], Op::RepeatCols { x: x.0, cols }, ng)
    }

    // ── scalar arithmetic ──

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| mul * v + add).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Affine { x: x.0, mul }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.entries[s.0].data.len(), 1, "scale_by expects a scalar multiplier");
        let sv = self.entries[s.0].data[0];
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| sv * v).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(s);
        self.push(data, shape, Op::ScaleByVar { x: x.0, s: s.0 }, ng)
    }

    // ── shape movement ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.rank2(a, "matmul lhs");
        let (kb, n) = self.rank2(b, "matmul rhs");
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.entries[a.0].data, &self.entries[b.0].data, m, ka, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], Op::Matmul { a: a.0, b: b.0, m, k: ka, n }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.entries[x.0].data.len(),
            "reshape to {:?} changes element count",
            shape
        );
        let data = self.entries[x.0].data.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Reshape { x: x.0 }, ng)
    }

    pub fn swap_axes12(&mut self, x: Var) -> Var {
        let s = self.entries[x.0].shape.clone();
        assert_eq!(s.len(), 3, "swap_axes12 expects rank 3, got {s:?}");
        let (b, r, c) = (s[0], s[1], s[2]);
        let src = &self.entries[x.0].data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ri in 0..r {
                for ci in 0..c {
                    data[bi * c * r + ci * r + ri] = src[bi * r * c + ri * c + ci];
                }
            }
        }
        let ng = self.needs(x);
        self.push(data, vec![b, c, r], Op::SwapAxes12 { x: x.0, b, r, c }, ng)
    }

    pub fn permute102(&mut self, x: Var) -> Var {
        let s = self.entries[x.0].shape.clone();
        assert_eq!(s.len(), 3, "permute102 expects rank 3, got {s:?}");
        let (d0, d1, d2) = (s[0], s[1], s[2]);
        let src = &self.entries[x.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let from = (i * d1 + j) * d2;
                let to = (j * d0 + i) * d2;
                data[to..to + d2].copy_from_slice(&src[from..from + d2]);
            }
        }
        let ng = self.needs(x);
        self.push(data, vec![d1, d0, d2], Op::Permute102 { x: x.0, d0, d1, d2 }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (r, c) = self.rank2(x, "slice_rows");
        assert!(start + count <= r, "slice_rows {start}+{count} out of {r} rows");
        let data = self.entries[x.0].data[start * c..(start + count) * c].to_vec();
        let ng = self.needs(x);
        self.push(data, vec![count, c], Op::SliceRows { x: x.0, start, cols: c }, ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let (_, c) = self.rank2(xs[0], "concat_rows");
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let (r, cv) = self.rank2(v, "concat_rows");
            assert_eq!(cv, c, "concat_rows width mismatch");
            rows += r;
            data.extend_from_slice(&self.entries[v.0].data);
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(data, vec![rows, c], Op::ConcatRows { xs: xs.iter().map(|v| v.0).collect() }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (r, c) = self.rank2(x, "slice_cols");
        assert!(start + count <= c, "slice_cols {start}+{count} out of {c} cols");
        let src = &self.entries[x.0].data;
        let mut data = Vec::with_capacity(r * count);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + count]);
        }
        let ng = self.needs(x);
        self.push(data, vec![r, count], Op::SliceCols { x: x.0, start, in_cols: c }, ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let (rows, _) = self.rank2(xs[0], "concat_cols");
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (r, c) = self.rank2(v, "concat_cols");
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                let src = &self.entries[v.0].data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(
            data,
            vec![rows, total],
            Op::ConcatCols { xs: xs.iter().map(|v| v.0).collect(), rows },
            ng,
        )
    }

    // ── reductions ──

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.entries[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum { x: x.0 }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.entries[x.0].data.len() as f64;
        let s: f64 = self.entries[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![s / n], vec![1], Op::Mean { x: x.0 }, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rank2(x, "mean_rows");
        let src = &self.entries[x.0].data;
        let data: Vec<f64> =
            (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
        let ng = self.needs(x);
        self.push(data, vec![r], Op::MeanRows { x: x.0, cols: c }, ng)
    }

    // ── nonlinearities ──

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Sigmoid { x: x.0 }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Relu { x: x.0 }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| gelu(v)).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Gelu { x: x.0 }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| v.abs()).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Abs { x: x.0 }, ng)
    }

    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "ln_clamped needs a positive floor");
        let data: Vec<f64> = self.entries[x.0].data.iter().map(|&v| v.max(eps).ln()).collect();
        let shape = self.entries[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::LnClamped { x: x.0, eps }, ng)
    }

    // ── differentiable dense DFT (see tape::dft for the matrices) ──

    /// DFT along the last axis of a rank-2 buffer, keeping `modes`
    /// coefficients: [r, len] → ([r, modes], [r, modes]) as (re, im).
    pub fn dft(&mut self, x: Var, modes: usize) -> (Var, Var) {
        let (_, len) = self.rank2(x, "dft");
        let (c, s) = dft_matrices(len, modes);
        let cv = self.constant(c);
        let sv = self.constant(s);
        (self.matmul(x, cv), self.matmul(x, sv))
    }

    /// Inverse of [`Tape::dft`] for spectra of real signals: modes beyond the
    /// stored ones are treated as zero (spectral truncation).
    pub fn idft(&mut self, re: Var, im: Var, len: usize) -> Var {
        let (_, modes) = self.rank2(re, "idft");
        let (dre, dim) = idft_matrices(len, modes);
        let drev = self.constant(dre);
        let dimv = self.constant(dim);
        let a = self.matmul(re, drev);
        let b = self.matmul(im, dimv);
        self.add(a, b)
    }

    // ── backward ──

    /// Seed the scalar `root` with gradient 1 and replay the tape in reverse.
    /// A second call without rebuilding the tape is rejected.
    pub fn backward(&mut self, root: Var) -> Result<(), TapeError> {
        if self.backward_done {
            return Err(TapeError::BackwardAlreadyRun);
        }
        if self.entries[root.0].data.len() != 1 {
            return Err(TapeError::NonScalarRoot(self.entries[root.0].shape.clone()));
        }
        self.backward_done = true;
        if !self.entries[root.0].needs_grad {
            return Ok(()); // nothing trainable upstream
        }
        self.entries[root.0].grad = Some(vec![1.0]);
        for i in (0..self.entries.len()).rev() {
            if !self.entries[i].needs_grad || self.entries[i].grad.is_none() {
                continue;
            }
            self.backward_op(i);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, contrib: &[f64]) {
        if !self.entries[target].needs_grad {
            return;
        }
        let n = self.entries[target].data.len();
        let slot = self.entries[target].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, &c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn acc_at(&mut self, target: usize, idx: usize, contrib: f64) {
        if !self.entries[target].needs_grad {
            return;
        }
        let n = self.entries[target].data.len();
        let slot = self.entries[target].grad.get_or_insert_with(|| vec![0.0; n]);
        slot[idx] += contrib;
    }

    fn backward_op(&mut self, i: usize) {
        // Move the op out to appease the borrow checker; every arm reads
        // sibling entries immutably and accumulates via acc/acc_at.
        let op = std::mem::replace(&mut self.entries[i].op, Op::Leaf);
        let g = match &self.entries[i].grad {
            Some(g) => g.clone(),
            None => {
                self.entries[i].op = op;
                return;
            }
        };
        match &op {
            Op::Leaf => {}
            Op::Bin { which, a, b } => match which {
                EltBin::Add => {
                    self.acc(*a, &g);
                    self.acc(*b, &g);
                }
                EltBin::Sub => {
                    self.acc(*a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(*b, &neg);
                }
                EltBin::Mul => {
                    if self.entries[*a].needs_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&self.entries[*b].data).map(|(gv, bv)| gv * bv).collect();
                        self.acc(*a, &da);
                    }
                    if self.entries[*b].needs_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&self.entries[*a].data).map(|(gv, av)| gv * av).collect();
                        self.acc(*b, &db);
                    }
                }
            },
            Op::AddRow { a, row } => {
                self.acc(*a, &g);
                if self.entries[*row].needs_grad {
                    let c = self.entries[*row].data.len();
                    let mut dr = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % c] += gv;
                    }
                    self.acc(*row, &dr);
                }
            }
            Op::MulRow { a, row } => {
                let c = self.entries[*row].data.len();
                if self.entries[*a].needs_grad {
                    let rd = self.entries[*row].data.clone();
                    let da: Vec<f64> =
                        g.iter().enumerate().map(|(idx, gv)| gv * rd[idx % c]).collect();
                    self.acc(*a, &da);
                }
                if self.entries[*row].needs_grad {
                    let ad = &self.entries[*a].data;
                    let mut dr = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % c] += gv * ad[idx];
                    }
                    self.acc(*row, &dr);
                }
            }
            Op::MulCol { a, col } => {
                let r = self.entries[*col].data.len();
                let c = g.len() / r;
                if self.entries[*a].needs_grad {
                    let cd = self.entries[*col].data.clone();
                    let da: Vec<f64> =
                        g.iter().enumerate().map(|(idx, gv)| gv * cd[idx / c]).collect();
                    self.acc(*a, &da);
                }
                if self.entries[*col].needs_grad {
                    let ad = &self.entries[*a].data;
                    let mut dc = vec![0.0; r];
                    for (idx, gv) in g.iter().enumerate() {
                        dc[idx / c] += gv * ad[idx];
                    }
                    self.acc(*col, &dc);
                }
            }
            Op::RepeatRows { x, times } => {
                if self.entries[*x].needs_grad {
                    let n = self.entries[*x].data.len();
                    let c = n / self.entries[*x].shape[0].max(1);
                    let c = if self.entries[*x].shape.len() == 1 { n } else { c };
                    let r = n / c;
                    let mut dx = vec![0.0; n];
                    for i0 in 0..r {
                        for t in 0..*times {
                            let src = (i0 * times + t) * c;
                            for j in 0..c {
                                dx[i0 * c + j] += g[src + j];
                            }
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::RepeatCols { x, cols } => {
                if self.entries[*x].needs_grad {
                    let r = self.entries[*x].data.len();
                    let mut dx = vec![0.0; r];
                    for i in 0..r {
                        dx[i] = g[i * cols..(i + 1) * cols].iter().sum();
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::Affine { x, mul } => {
                if self.entries[*x].needs_grad {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * mul).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::ScaleByVar { x, s } => {
                let sv = self.entries[*s].data[0];
                if self.entries[*x].needs_grad {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                    self.acc(*x, &dx);
                }
                if self.entries[*s].needs_grad {
                    let ds: f64 =
                        g.iter().zip(&self.entries[*x].data).map(|(gv, xv)| gv * xv).sum();
                    self.acc_at(*s, 0, ds);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.entries[*a].needs_grad {
                    // dA += g · Bᵀ
                    let bd = &self.entries[*b].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..*m {
                        for kk in 0..*k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bd[kk * n..(kk + 1) * n];
                            for j in 0..*n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    self.acc(*a, &da);
                }
                if self.entries[*b].needs_grad {
                    // dB += Aᵀ · g
                    let ad = &self.entries[*a].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..*m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..*k {
                            let av = ad[i * k + kk];
                            if av != 0.0 {
                                let drow = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..*n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    self.acc(*b, &db);
                }
            }
            Op::Reshape { x } => self.acc(*x, &g),
            Op::SwapAxes12 { x, b, r, c } => {
                if self.entries[*x].needs_grad {
                    let mut dx = vec![0.0; b * r * c];
                    for bi in 0..*b {
                        for ri in 0..*r {
                            for ci in 0..*c {
                                dx[bi * r * c + ri * c + ci] += g[bi * c * r + ci * r + ri];
                            }
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::Permute102 { x, d0, d1, d2 } => {
                if self.entries[*x].needs_grad {
                    let mut dx = vec![0.0; d0 * d1 * d2];
                    for i in 0..*d0 {
                        for j in 0..*d1 {
                            let to = (i * d1 + j) * d2;
                            let from = (j * d0 + i) * d2;
                            dx[to..to + *d2].iter_mut().zip(&g[from..from + *d2]).for_each(
                                |(d, gv)| *d += gv,
                            );
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::SliceRows { x, start, cols } => {
                if self.entries[*x].needs_grad {
                    let n = self.entries[*x].data.len();
                    let mut dx = vec![0.0; n];
                    dx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, gv)| *d += gv);
                    self.acc(*x, &dx);
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &xv in xs {
                    let n = self.entries[xv].data.len();
                    if self.entries[xv].needs_grad {
                        let part = g[offset..offset + n].to_vec();
                        self.acc(xv, &part);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, in_cols } => {
                if self.entries[*x].needs_grad {
                    let n = self.entries[*x].data.len();
                    let count = g.len() / (n / in_cols);
                    let rows = n / in_cols;
                    let mut dx = vec![0.0; n];
                    for i in 0..rows {
                        for j in 0..count {
                            dx[i * in_cols + start + j] += g[i * count + j];
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::ConcatCols { xs, rows } => {
                let widths: Vec<usize> =
                    xs.iter().map(|&v| self.entries[v].data.len() / rows).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&xv, &w) in xs.iter().zip(&widths) {
                    if self.entries[xv].needs_grad {
                        let mut dx = vec![0.0; rows * w];
                        for i in 0..*rows {
                            for j in 0..w {
                                dx[i * w + j] = g[i * total + offset + j];
                            }
                        }
                        self.acc(xv, &dx);
                    }
                    offset += w;
                }
            }
            Op::Sum { x } => {
                if self.entries[*x].needs_grad {
                    let dx = vec![g[0]; self.entries[*x].data.len()];
                    self.acc(*x, &dx);
                }
            }
            Op::Mean { x } => {
                if self.entries[*x].needs_grad {
                    let n = self.entries[*x].data.len();
                    let dx = vec![g[0] / n as f64; n];
                    self.acc(*x, &dx);
                }
            }
            Op::MeanRows { x, cols } => {
                if self.entries[*x].needs_grad {
                    let n = self.entries[*x].data.len();
                    let mut dx = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        for j in 0..*cols {
                            dx[i * cols + j] = gv / *cols as f64;
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.entries[*x].needs_grad {
                    let yd = &self.entries[i].data;
                    let dx: Vec<f64> =
                        g.iter().zip(yd).map(|(gv, &y)| gv * y * (1.0 - y)).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.entries[*x].needs_grad {
                    let xd = &self.entries[*x].data;
                    let dx: Vec<f64> =
                        g.iter().zip(xd).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.entries[*x].needs_grad {
                    let xd = &self.entries[*x].data;
                    let dx: Vec<f64> = g.iter().zip(xd).map(|(gv, &v)| gv * gelu_prime(v)).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Abs { x } => {
                if self.entries[*x].needs_grad {
                    let xd = &self.entries[*x].data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else if v < 0.0 { -*gv } else { 0.0 })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Op::LnClamped { x, eps } => {
                if self.entries[*x].needs_grad {
                    let xd = &self.entries[*x].data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &v)| if v > *eps { gv / v } else { 0.0 })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
        }
        self.entries[i].op = op;
    }
}

// ── scalar math shared with inference paths ──

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

/// Tanh-form GELU (the standard approximation).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// out += a·b for row-major [m,k]·[k,n].
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
