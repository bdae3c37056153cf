//! Reverse-mode gradient tape over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! trainable ([`Tape::param`]) or constant ([`Tape::constant`]); gradients are
//! only propagated through nodes that depend on a trainable leaf.

use crate::error::{Error, Result};
use crate::tensor::{gemm, masked_softmax_into, normalize, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    BroadcastRows(Var),
    ScatterRows(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    ZeroRows(Var, Vec<bool>),
    RowSum(Var),
    MaskedSoftmax(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert!(
        a.rows() == b.rows() && a.cols() == b.cols(),
        "{op}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::matrix(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn col_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.cols(),
            bv.rows(),
            "matmul: shape {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, n) = (av.rows(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            av.data(),
            m,
            av.cols(),
            false,
            bv.data(),
            bv.rows(),
            n,
            false,
            &mut out,
            false,
        );
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), tracked)
    }

    /// `x + b` with the `1 × n` row `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert!(bv.rows() == 1 && bv.cols() == xv.cols(), "add_bias: {:?} + {:?}", xv.shape(), bv.shape());
        let c = xv.cols();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let t = Tensor::matrix(xv.rows(), c, out);
        let tracked = self.tracked(&[x, b]);
        self.push(t, Op::AddBias(x, b), tracked)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv);
        let t = zip_map(av, bv, f);
        let tracked = self.tracked(&[a, b]);
        self.push(t, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let tracked = self.tracked(&[x]);
        self.push(t, op, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x ⊙ c` where the `rows × 1` column `c` is broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert!(
            cv.cols() == 1 && cv.rows() == xv.rows(),
            "mul_col: {:?} * {:?}",
            xv.shape(),
            cv.shape()
        );
        let cols = xv.cols();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cv.data()[i / cols])
            .collect();
        let t = Tensor::matrix(xv.rows(), cols, out);
        let tracked = self.tracked(&[x, c]);
        self.push(t, Op::MulCol(x, c), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat: row mismatch {:?}", v.shape());
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let tracked = self.tracked(parts);
        self.push(Tensor::matrix(rows, total, out), Op::Concat(parts.to_vec()), tracked)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "slice {start}..{end} of {:?}", xv.shape());
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(xv.rows(), end - start, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Slice(x, start), tracked)
    }

    /// Repeat a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows needs a single row, got {:?}", xv.shape());
        let data = xv.data().repeat(rows);
        let t = Tensor::matrix(rows, xv.cols(), data);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::BroadcastRows(x), tracked)
    }

    /// Place row `i` of `x` at row `indices[i]` of a zero `rows × n` matrix.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), indices.len(), "scatter_rows index count");
        let c = xv.cols();
        let mut out = vec![0.0; rows * c];
        for (i, &dst) in indices.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(xv.row_slice(i));
        }
        let tracked = self.tracked(&[x]);
        self.push(Tensor::matrix(rows, c, out), Op::ScatterRows(x, indices.to_vec()), tracked)
    }

    /// Row `r` comes from `a` where `take_a[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("select_rows", av, bv);
        assert_eq!(take_a.len(), av.rows());
        let mut out = Vec::with_capacity(av.len());
        for (r, &pick) in take_a.iter().enumerate() {
            out.extend_from_slice(if pick { av.row_slice(r) } else { bv.row_slice(r) });
        }
        let t = Tensor::matrix(av.rows(), av.cols(), out);
        let tracked = self.tracked(&[a, b]);
        self.push(t, Op::SelectRows(take_a.to_vec(), a, b), tracked)
    }

    /// Rows with `keep[r] == false` become exact zeros.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(keep.len(), xv.rows());
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::ZeroRows(x, keep.to_vec()), tracked)
    }

    /// Sum over columns, giving a `rows × 1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = (0..xv.rows()).map(|r| xv.row_slice(r).iter().sum()).collect();
        let t = Tensor::matrix(xv.rows(), 1, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::RowSum(x), tracked)
    }

    /// Row-wise softmax restricted to entries with `open[r * cols + c]`.
    /// Closed entries are exactly zero; a fully closed row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, open: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(open.len(), xv.len(), "masked_softmax mask size");
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let mask = &open[r * c..(r + 1) * c];
            masked_softmax_into(xv.row_slice(r), |j| mask[j], &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::MaskedSoftmax(x), tracked)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            masked_softmax_into(xv.row_slice(r), |_| true, &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Softmax(x), tracked)
    }

    /// Row-wise layer normalization with `1 × n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Var {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let c = xv.cols();
        assert!(c >= 2, "layer_norm needs at least 2 features");
        assert!(gv.len() == c && sv.len() == c, "layer_norm affine size");
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let (n, inv) = normalize(xv.row_slice(r));
            for (j, v) in n.iter().enumerate() {
                out.push(v * gv.data()[j] + sv.data()[j]);
            }
            normalized.extend(n);
            inv_std.push(inv);
        }
        let t = Tensor::matrix(xv.rows(), c, out);
        let tracked = self.tracked(&[x, gain, shift]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            tracked,
        )
    }

    /// `out[r] = x[r, indices[r]]` as a column.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(indices.len(), xv.rows());
        let out: Vec<f64> = indices.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let t = Tensor::matrix(xv.rows(), 1, out);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Pick(x, indices.to_vec()), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    let mut da = vec![0.0; av.len()];
                    gemm(
                        dy.data(),
                        dy.rows(),
                        dy.cols(),
                        false,
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        true,
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, *a, Tensor::matrix(av.rows(), av.cols(), da));
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![0.0; bv.len()];
                    gemm(
                        av.data(),
                        av.rows(),
                        av.cols(),
                        true,
                        dy.data(),
                        dy.rows(),
                        dy.cols(),
                        false,
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, *b, Tensor::matrix(bv.rows(), bv.cols(), db));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, dy.clone());
                self.accumulate(grads, *b, col_sums(dy));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(dy, bv, |g, y| g * y));
                self.accumulate(grads, *b, zip_map(dy, av, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(dy, bv, |g, d| g / d));
                let db: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(g, (n, d))| -g * n / (d * d))
                    .collect();
                self.accumulate(grads, *b, Tensor::matrix(bv.rows(), bv.cols(), db));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, dy.map(|g| g * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.clone()),
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let cols = xv.cols();
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * cv.data()[i / cols])
                    .collect();
                self.accumulate(grads, *x, Tensor::matrix(xv.rows(), cols, dx));
                if self.nodes[c.0].tracked {
                    let dc: Vec<f64> = (0..xv.rows())
                        .map(|r| {
                            dy.row_slice(r)
                                .iter()
                                .zip(xv.row_slice(r))
                                .map(|(g, v)| g * v)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *c, Tensor::matrix(xv.rows(), 1, dc));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(dy, xv, |g, v| if v > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            Op::Exp(x) => self.accumulate(grads, *x, zip_map(dy, y, |g, e| g * e)),
            Op::Log(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(dy, xv, |g, v| g / v));
            }
            Op::Sqrt(x) => self.accumulate(grads, *x, zip_map(dy, y, |g, s| g / (2.0 * s))),
            Op::Recip(x) => self.accumulate(grads, *x, zip_map(dy, y, |g, r| -g * r * r)),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip_map(dy, xv, |g, v| if v >= *lo && v <= *hi { g } else { 0.0 }),
                );
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].tracked {
                        let mut g = Vec::with_capacity(dy.rows() * w);
                        for r in 0..dy.rows() {
                            g.extend_from_slice(&dy.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(dy.rows(), w, g));
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start) => {
                let xv = self.value(*x);
                let mut g = vec![0.0; xv.len()];
                let (c, w) = (xv.cols(), dy.cols());
                for r in 0..xv.rows() {
                    g[r * c + start..r * c + start + w].copy_from_slice(dy.row_slice(r));
                }
                self.accumulate(grads, *x, Tensor::matrix(xv.rows(), c, g));
            }
            Op::BroadcastRows(x) => self.accumulate(grads, *x, col_sums(dy)),
            Op::ScatterRows(x, indices) => {
                let xv = self.value(*x);
                let mut g = Vec::with_capacity(xv.len());
                for &src in indices {
                    g.extend_from_slice(dy.row_slice(src));
                }
                self.accumulate(grads, *x, Tensor::matrix(xv.rows(), xv.cols(), g));
            }
            Op::SelectRows(take_a, a, b) => {
                let c = dy.cols();
                let mut ga = dy.clone();
                let mut gb = dy.clone();
                for (r, &pick) in take_a.iter().enumerate() {
                    let target = if pick { &mut gb } else { &mut ga };
                    target.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ZeroRows(x, keep) => {
                let c = dy.cols();
                let mut g = dy.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        g.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let g: Vec<f64> = (0..xv.len()).map(|i| dy.data()[i / c]).collect();
                self.accumulate(grads, *x, Tensor::matrix(xv.rows(), c, g));
            }
            Op::MaskedSoftmax(x) | Op::Softmax(x) => {
                // Closed entries have y = 0, so their gradient vanishes as well.
                let c = y.cols();
                let mut g = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row_slice(r), dy.row_slice(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(y.rows(), c, g));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let c = y.cols();
                let n = c as f64;
                if self.nodes[x.0].tracked {
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let xh = &normalized[r * c..(r + 1) * c];
                        let dr = dy.row_slice(r);
                        let dxh: Vec<f64> = dr.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = inv_std[r] / n * (n * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(y.rows(), c, dx));
                }
                let mut dg = vec![0.0; c];
                for r in 0..y.rows() {
                    for j in 0..c {
                        dg[j] += dy.get(r, j) * normalized[r * c + j];
                    }
                }
                self.accumulate(grads, *gain, Tensor::matrix(gv.rows(), gv.cols(), dg));
                let sv = self.value(*shift);
                let ds = col_sums(dy);
                self.accumulate(grads, *shift, Tensor::matrix(sv.rows(), sv.cols(), ds.into_data()));
            }
            Op::Pick(x, indices) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut g = vec![0.0; xv.len()];
                for (r, &j) in indices.iter().enumerate() {
                    g[r * c + j] = dy.data()[r];
                }
                self.accumulate(grads, *x, Tensor::matrix(xv.rows(), c, g));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), dy.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|g_tape − g_fd| / max(1, |g_fd|)` over all parameter entries.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compare tape gradients of the scalar built by `f` against central finite
/// differences for every entry of every parameter.
///
/// `f` receives a fresh tape and one trainable leaf per parameter and must
/// return a scalar node. It has to be a pure function of the parameter values.
pub fn grad_check<F>(mut f: F, params: &[Tensor]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let eval = |f: &mut F, values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                epoch: 0,
                batch: 0,
                value: v,
            })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            value: base,
        });
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let mut values = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for p in 0..values.len() {
        for i in 0..values[p].len() {
            let original = values[p].data()[i];
            values[p].data_mut()[i] = original + GRAD_CHECK_STEP;
            let up = eval(&mut f, &values)?;
            values[p].data_mut()[i] = original - GRAD_CHECK_STEP;
            let down = eval(&mut f, &values)?;
            values[p].data_mut()[i] = original;
            let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let err = (analytic[p].data()[i] - fd).abs() / fd.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
