//! Dense row-major tensors and the stateless numerical kernels built on them.
//!
//! Everything the model touches is at most two-dimensional: a batch of row
//! vectors, a weight matrix, or a single row. One-dimensional tensors are
//! treated as a single row wherever a matrix is expected.

use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that the
    /// buffer length equals the product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Matrix constructor for internal use where the shape is known to be valid.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    /// A `1 × n` row.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix; a 1-D tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Transposed copy of a matrix.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// `out (+)= op(a) · op(b)` where `op` optionally transposes its argument.
///
/// `a` is stored row-major as `a_rows × a_cols`; likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if a_t { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if b_t { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the m×k, k×n and m×n index ranges implied by
    // the strides above, which the debug assertions and callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(
        a.data(),
        m,
        a.cols(),
        false,
        b.data(),
        b.rows(),
        n,
        false,
        &mut out,
        false,
    );
    Ok(Tensor::matrix(m, n, out))
}

/// Additive attention bias. `Blocked` plays the role of −∞ without ever
/// putting an infinity into arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bias {
    Open,
    Blocked,
}

impl Bias {
    pub fn from_observed(observed: bool) -> Self {
        if observed {
            Bias::Open
        } else {
            Bias::Blocked
        }
    }

    pub fn is_open(self) -> bool {
        self == Bias::Open
    }
}

/// Softmax over the open entries; blocked entries are exactly zero and an
/// all-blocked row yields all zeros.
pub fn masked_softmax(logits: &[f64], bias: &[Bias]) -> Vec<f64> {
    assert_eq!(logits.len(), bias.len(), "logits and bias lengths differ");
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, |j| bias[j].is_open(), &mut out);
    out
}

pub(crate) fn masked_softmax_into(logits: &[f64], open: impl Fn(usize) -> bool, out: &mut [f64]) {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| open(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (o, &l)) in out.iter_mut().zip(logits).enumerate() {
        *o = if open(j) { (l - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Layer normalization of a single vector followed by an elementwise affine map.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::Config(format!(
            "layer norm needs at least 2 features, got {}",
            x.len()
        )));
    }
    if gain.len() != x.len() || shift.len() != x.len() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: vec![x.len()],
            right: vec![gain.len(), shift.len()],
        });
    }
    let (normalized, _) = normalize(x);
    Ok(normalized
        .iter()
        .zip(gain.iter().zip(shift))
        .map(|(&v, (&g, &s))| v * g + s)
        .collect())
}

/// Zero-mean, unit-variance version of `x` and the inverse standard deviation used.
pub(crate) fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Numerically stable softmax of a full row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, |_| true, &mut out);
    out
}
