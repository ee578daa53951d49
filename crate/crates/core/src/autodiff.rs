//! Reverse-mode automatic differentiation over dense row-major f64 matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. [`Graph::backward`]
//! walks the tape in reverse and can be called more than once on the same
//! graph (e.g. once per objective).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), cols, "ragged rows");
                r.iter().copied()
            })
            .collect();
        Tensor { rows: rows.len(), cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        Tensor { rows, cols, data }
    }
}

/// `c = op(a) · op(b) + beta · c`, where `op` optionally transposes.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, c: &mut Tensor, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2);
    assert_eq!((c.rows, c.cols), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
    // whose sizes were checked against (m, k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Row counts of independent sequences stacked in one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments(pub Vec<usize>);

impl Segments {
    pub fn single(len: usize) -> Self {
        Segments(vec![len])
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// `(start, len)` of every segment.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().scan(0, |start, &len| {
            let s = *start;
            *start += len;
            Some((s, len))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Ramp(Var),
    SmoothL1(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    TokenShift(Var, Segments),
    Wkv { decay: Var, keys: Var, values: Var, segments: Segments, rho: Vec<f64>, kappa: Vec<f64> },
    Ssim(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const NORM_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Structural-similarity loss `1 - SSIM(a, b)` using population moments.
pub fn ssim_value(a: &[f64], b: &[f64]) -> f64 {
    ssim_parts(a, b).loss
}

struct SsimParts {
    mu_a: f64,
    mu_b: f64,
    n1: f64,
    n2: f64,
    d1: f64,
    d2: f64,
    loss: f64,
}

fn ssim_parts(a: &[f64], b: &[f64]) -> SsimParts {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|x| (x - mu_a) * (x - mu_a)).sum::<f64>() / n;
    let var_b = b.iter().map(|x| (x - mu_b) * (x - mu_b)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
    let n1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let n2 = 2.0 * cov + SSIM_C2;
    let d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let d2 = var_a + var_b + SSIM_C2;
    SsimParts { mu_a, mu_b, n1, n2, d1, d2, loss: 1.0 - (n1 * n2) / (d1 * d2) }
}

/// Causal position-decayed softmax average, one channel per column.
///
/// `out[t] = sum_{i<=t} exp(w (t-i) + k[i]) v[i] / sum_{i<=t} exp(w (t-i) + k[i])`,
/// evaluated by a log-space recurrence. Returns `(out, rho, kappa)` where
/// `out[t] = rho[t] out[t-1] + kappa[t] v[t]`.
pub fn wkv_forward<F: num_traits::Float>(decay: &[F], keys: &[F], values: &[F], len: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = decay.len();
    let mut out = vec![F::zero(); len * d];
    let mut rho = vec![F::zero(); len * d];
    let mut kappa = vec![F::zero(); len * d];
    for c in 0..d {
        let w = decay[c];
        let mut log_b = F::neg_infinity();
        let mut prev = F::zero();
        for t in 0..len {
            let i = t * d + c;
            let k = keys[i];
            let carried = w + log_b;
            let m = if carried > k { carried } else { k };
            let new_log_b = m + ((carried - m).exp() + (k - m).exp()).ln();
            let r = if t == 0 { F::zero() } else { (carried - new_log_b).exp() };
            let kp = (k - new_log_b).exp();
            prev = r * prev + kp * values[i];
            out[i] = prev;
            rho[i] = r;
            kappa[i] = kp;
            log_b = new_log_b;
        }
    }
    (out, rho, kappa)
}

/// Adjoints of [`wkv_forward`] for one segment: returns `(d_decay, d_keys, d_values)`.
pub fn wkv_backward(
    decay_len: usize,
    values: &[f64],
    out: &[f64],
    rho: &[f64],
    kappa: &[f64],
    grad: &[f64],
    len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = decay_len;
    let mut dw = vec![0.0; d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    for c in 0..d {
        let mut s_next = 0.0;
        let mut r_next = 0.0;
        let mut rho_next = 0.0;
        for t in (0..len).rev() {
            let i = t * d + c;
            let s = grad[i] + rho_next * s_next;
            let r = grad[i] * out[i] + rho_next * r_next;
            dv[i] = kappa[i] * s;
            dk[i] = kappa[i] * (values[i] * s - r);
            s_next = s;
            r_next = r;
            rho_next = rho[i];
        }
        let (mut a, mut b) = (0.0, 0.0);
        for t in 0..len {
            let i = t * d + c;
            if t > 0 {
                a = rho[i] * (a + out[i - d]);
                b = rho[i] * (b + 1.0);
            }
            dw[c] += grad[i] * (a - out[i] * b);
        }
    }
    (dw, dk, dv)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.input(Tensor::filled(rows, cols, value))
    }

    /// Bind a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.val(x).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Multiply every entry of `x` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let k = self.val(s).item();
        let value = self.val(x).map(|v| v * k);
        self.push(value, Op::MulScalar(x, s))
    }

    /// Add a 1×C row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.val(x), self.val(row));
        assert_eq!((rv.rows, rv.cols), (1, xv.cols), "add_row shape");
        let mut value = xv.clone();
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&rv.data).for_each(|(a, b)| *a += b);
        }
        self.push(value, Op::AddRow(x, row))
    }

    /// Multiply every row of `x` elementwise by a 1×C row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.val(x), self.val(row));
        assert_eq!((rv.rows, rv.cols), (1, xv.cols), "mul_row shape");
        let mut value = xv.clone();
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&rv.data).for_each(|(a, b)| *a *= b);
        }
        self.push(value, Op::MulRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).matmul(self.val(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x · w + b` with `w` of shape in×out and `b` of shape 1×out.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.val(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
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

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Clip to [0, 1].
    pub fn ramp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.clamp(0.0, 1.0), Op::Ramp(x))
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, smooth_l1, Op::SmoothL1(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let mut value = xv.clone();
        for r in 0..xv.rows {
            let s = softmax(xv.row(r));
            value.row_mut(r).copy_from_slice(&s);
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let mut value = xv.clone();
        for r in 0..xv.rows {
            let lse = log_sum_exp(xv.row(r));
            value.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(value, Op::LogSoftmaxRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let n = (xv.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows(x, norms))
    }

    /// Rows `table[idx[i]]` stacked; an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.val(table);
        let mut value = Tensor::zeros(idx.len(), tv.cols);
        for (i, &j) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tv.row(j));
        }
        self.push(value, Op::GatherRows(table, idx.to_vec()))
    }

    /// Column `idx[r]` of every row `r`, as an N×1 column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.val(x);
        assert_eq!(idx.len(), xv.rows);
        let value = Tensor::column(idx.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect());
        self.push(value, Op::Pick(x, idx.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a 1×C row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let mut value = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            value.data.iter_mut().zip(xv.row(r)).for_each(|(a, b)| *a += b);
        }
        self.push(value, Op::SumRows(x))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.val(x).rows as f64;
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.val(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.val(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.val(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.val(x);
        let mut value = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(x, start))
    }

    /// Previous row within each segment; zero at segment starts.
    pub fn token_shift(&mut self, x: Var, segments: &Segments) -> Var {
        let xv = self.val(x);
        assert_eq!(segments.total(), xv.rows, "segments do not cover the rows");
        let mut value = Tensor::zeros(xv.rows, xv.cols);
        for (start, len) in segments.spans() {
            for t in 1..len {
                value.row_mut(start + t).copy_from_slice(xv.row(start + t - 1));
            }
        }
        self.push(value, Op::TokenShift(x, segments.clone()))
    }

    /// Causal WKV attention within each segment. `decay` is 1×D (should be ≤ 0).
    pub fn wkv(&mut self, decay: Var, keys: Var, values: Var, segments: &Segments) -> Result<Var> {
        let (w, k, v) = (self.val(decay), self.val(keys), self.val(values));
        if k.shape() != v.shape() {
            return Err(Error::LengthMismatch(format!("keys {:?} vs values {:?}", k.shape(), v.shape())));
        }
        if w.shape() != (1, k.cols) || segments.total() != k.rows {
            return Err(Error::ShapeMismatch("wkv decay or segment layout".into()));
        }
        let d = k.cols;
        let mut out = Tensor::zeros(k.rows, d);
        let mut rho = vec![0.0; k.rows * d];
        let mut kappa = vec![0.0; k.rows * d];
        for (start, len) in segments.spans() {
            let range = start * d..(start + len) * d;
            let (o, r, kp) = wkv_forward(&w.data, &k.data[range.clone()], &v.data[range.clone()], len);
            out.data[range.clone()].copy_from_slice(&o);
            rho[range.clone()].copy_from_slice(&r);
            kappa[range].copy_from_slice(&kp);
        }
        Ok(self.push(out, Op::Wkv { decay, keys, values, segments: segments.clone(), rho, kappa }))
    }

    /// `1 - SSIM(a, b)` over two equal-length columns.
    pub fn ssim_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.is_empty() || bv.is_empty() {
            return Err(Error::EmptyScope);
        }
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch(format!("ssim {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let value = Tensor::scalar(ssim_value(&av.data, &bv.data));
        Ok(self.push(value, Op::Ssim(a, b)))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or_else(|| Error::GraphNotRecorded(format!("node {} not on this tape", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::ShapeMismatch(format!("loss must be scalar, got {:?}", node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let v = |x: Var| &self.nodes[x.0].value;
        let mut acc = |x: Var, t: Tensor| match &mut grads[x.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(v(*b), |g, y| g * y));
                acc(*b, g.zip_map(v(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = v(*b);
                acc(*a, g.zip_map(bv, |g, d| g / d));
                let t = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).zip(&bv.data).map(|((g, q), d)| -g * q / d).collect(),
                };
                acc(*b, t);
            }
            Op::Scale(x, s) => acc(*x, g.scaled(*s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, s) => {
                let k = v(*s).item();
                let dot: f64 = g.data.iter().zip(&v(*x).data).map(|(a, b)| a * b).sum();
                acc(*x, g.scaled(k));
                acc(*s, Tensor::scalar(dot));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let mut r = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    r.data.iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += b);
                }
                acc(*row, r);
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (v(*x), v(*row));
                let mut dx = g.clone();
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        dx.data[i * g.cols + c] *= rv.data[c];
                        dr.data[c] += g.data[i * g.cols + c] * xv.data[i * g.cols + c];
                    }
                }
                acc(*x, dx);
                acc(*row, dr);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let mut da = Tensor::zeros(av.rows, av.cols);
                gemm(g, false, bv, true, &mut da, 0.0);
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                gemm(av, true, g, false, &mut db, 0.0);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Gelu(x) => acc(*x, g.zip_map(v(*x), |g, x| g * gelu_grad(x))),
            Op::Exp(x) => acc(*x, g.zip_map(y, |g, e| g * e)),
            Op::Log(x) => acc(*x, g.zip_map(v(*x), |g, x| g / x)),
            Op::Sqrt(x) => acc(*x, g.zip_map(y, |g, s| g * 0.5 / s)),
            Op::ClampMin(x, floor) => acc(*x, g.zip_map(v(*x), |g, x| if x > *floor { g } else { 0.0 })),
            Op::Ramp(x) => acc(*x, g.zip_map(v(*x), |g, x| if x > 0.0 && x < 1.0 { g } else { 0.0 })),
            Op::SmoothL1(x) => acc(*x, g.zip_map(v(*x), |g, x| g * if x.abs() < 1.0 { x } else { x.signum() })),
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..g.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    dx.row_mut(r).iter_mut().zip(y.row(r)).for_each(|(d, s)| *d = s * (*d - dot));
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..g.rows {
                    let total: f64 = g.row(r).iter().sum();
                    dx.row_mut(r).iter_mut().zip(y.row(r)).for_each(|(d, l)| *d -= l.exp() * total);
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows(x, norms) => {
                let mut dx = g.clone();
                for r in 0..g.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    let n = norms[r];
                    dx.row_mut(r).iter_mut().zip(y.row(r)).for_each(|(d, u)| *d = (*d - u * dot) / n);
                }
                acc(*x, dx);
            }
            Op::GatherRows(table, idx) => {
                let tv = v(*table);
                let mut dt = Tensor::zeros(tv.rows, tv.cols);
                for (i, &j) in idx.iter().enumerate() {
                    dt.row_mut(j).iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += b);
                }
                acc(*table, dt);
            }
            Op::Pick(x, idx) => {
                let xv = v(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &c) in idx.iter().enumerate() {
                    dx.set(r, c, g.data[r]);
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                let xv = v(*x);
                acc(*x, Tensor::filled(xv.rows, xv.cols, g.item()));
            }
            Op::SumRows(x) => {
                let xv = v(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.row_mut(r).copy_from_slice(&g.data);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = v(p);
                    let mut dp = Tensor::zeros(pv.rows, pv.cols);
                    for r in 0..pv.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pv.cols]);
                    }
                    off += pv.cols;
                    acc(p, dp);
                }
            }
            Op::SliceCols(x, start) => {
                let xv = v(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::TokenShift(x, segments) => {
                let mut dx = Tensor::zeros(g.rows, g.cols);
                for (start, len) in segments.spans() {
                    for t in 1..len {
                        dx.row_mut(start + t - 1).copy_from_slice(g.row(start + t));
                    }
                }
                acc(*x, dx);
            }
            Op::Wkv { decay, keys, values, segments, rho, kappa } => {
                let d = g.cols;
                let vv = v(*values);
                let mut dw = Tensor::zeros(1, d);
                let mut dk = Tensor::zeros(g.rows, d);
                let mut dv = Tensor::zeros(g.rows, d);
                for (start, len) in segments.spans() {
                    let range = start * d..(start + len) * d;
                    let (w_, k_, v_) = wkv_backward(
                        d,
                        &vv.data[range.clone()],
                        &y.data[range.clone()],
                        &rho[range.clone()],
                        &kappa[range.clone()],
                        &g.data[range.clone()],
                        len,
                    );
                    dw.data.iter_mut().zip(&w_).for_each(|(a, b)| *a += b);
                    dk.data[range.clone()].copy_from_slice(&k_);
                    dv.data[range].copy_from_slice(&v_);
                }
                acc(*decay, dw);
                acc(*keys, dk);
                acc(*values, dv);
            }
            Op::Ssim(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let p = ssim_parts(&av.data, &bv.data);
                let n = av.len() as f64;
                let s = 1.0 - p.loss;
                let denom = p.d1 * p.d2;
                // d(loss) = -dS; S = n1 n2 / (d1 d2)
                let grad_of = |x: &[f64], other: &[f64], mu_x: f64, mu_o: f64| -> Tensor {
                    let data = x
                        .iter()
                        .zip(other)
                        .map(|(&xi, &oi)| {
                            let dn1 = 2.0 * mu_o / n;
                            let dn2 = 2.0 * (oi - mu_o) / n;
                            let dd1 = 2.0 * mu_x / n;
                            let dd2 = 2.0 * (xi - mu_x) / n;
                            let ds = (dn1 * p.n2 + p.n1 * dn2) / denom - s * (dd1 / p.d1 + dd2 / p.d2);
                            -g.item() * ds
                        })
                        .collect();
                    Tensor { rows: av.rows, cols: av.cols, data }
                };
                acc(*a, grad_of(&av.data, &bv.data, p.mu_a, p.mu_b));
                acc(*b, grad_of(&bv.data, &av.data, p.mu_b, p.mu_a));
            }
        }
    }
}

/// Adjoints of every node reached from the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store` (zero where unused).
    pub fn for_params(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for (id, var) in &graph.bound {
            if let Some(g) = self.wrt(*var) {
                out[id.0] = g.clone();
            }
        }
        out
    }
}

/// Flatten a gradient list into one vector, in parameter order.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_squared_norm() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, -2.0, 3.5]));
        let sq = g.mul(x, x);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data, vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_on_foreign_node_fails() {
        let mut other = Graph::new();
        for _ in 0..5 {
            other.input(Tensor::scalar(1.0));
        }
        let far = Var(4);
        let g = Graph::new();
        assert!(matches!(g.backward(far), Err(Error::GraphNotRecorded(_))));
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.input(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.matmul(a, b);
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data, vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b).unwrap().data, vec![4.0, 6.0]);
    }

    #[test]
    fn wkv_single_step_returns_value() {
        let (out, _, _) = wkv_forward(&[-0.3, 0.2], &[1.0, -4.0], &[7.0, -2.0], 1);
        assert_eq!(out, vec![7.0, -2.0]);
    }

    #[test]
    fn repeated_backward_is_stable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![0.3, -0.1]));
        let s = g.sigmoid(x);
        let l = g.sum(s);
        let first = g.backward(l).unwrap().wrt(x).unwrap().clone();
        let second = g.backward(l).unwrap().wrt(x).unwrap().clone();
        assert_eq!(first, second);
    }
}
