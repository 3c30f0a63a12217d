//! Dense 64-bit linear algebra with hand-derived backward passes.
//!
//! Every differentiable operation here comes as a forward function plus a
//! matching `*_backward` that maps an upstream gradient onto its inputs.
//! [`grad_check`] compares those against central finite differences.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("from_vec", format!("{rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, cols, data)
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.random_range(-bound..=bound);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn scaled(&self, k: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(k);
        m
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        self.add_scaled(other, 1.0);
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column sums as a 1×cols matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut s = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (acc, v) in s.data.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        s
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "hcat",
                format!("{} rows vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut out = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            out.extend_from_slice(self.row(r));
            out.extend_from_slice(other.row(r));
        }
        Matrix::from_vec(self.rows, cols, out)
    }

    /// Splits columns at `at`, the inverse of [`Matrix::hcat`].
    pub fn split_cols(&self, at: usize) -> (Matrix, Matrix) {
        assert!(at >= 1 && at < self.cols, "split point out of range");
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows, "permutation length mismatch");
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite entry")))
    }
}

/// `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Inner product with four independent partial sums, which keeps the
/// reduction from being bound by floating-point add latency.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let split = n - n % 4;
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        let x: &[f64; 4] = x.try_into().unwrap();
        let y: &[f64; 4] = y.try_into().unwrap();
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_a_bt",
            format!("{}x{} by ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `Aᵀ · B` without materializing the transpose.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_at_b",
            format!("({}x{})ᵀ by {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let bk = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bkj) in out_row.iter_mut().zip(bk) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// Gradients of `A · B` given the upstream gradient `g`: `(G·Bᵀ, Aᵀ·G)`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, g: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul_a_bt(g, b)?, matmul_at_b(a, g)?))
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(a: &Matrix) -> Result<Matrix> {
    check_finite("row_softmax", a)?;
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Softmax Jacobian-vector product: `dX_ij = Y_ij (G_ij − Σ_k G_ik Y_ik)`.
pub fn row_softmax_backward(y: &Matrix, g: &Matrix) -> Matrix {
    assert_eq!(y.shape(), g.shape(), "softmax backward shape mismatch");
    let mut out = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, gr) = (y.row(r), g.row(r));
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    out
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through `relu`, given the pre-activation input.
pub fn relu_backward(pre: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for (o, p) in out.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, Matrix::filled(1, 1, value))
    }

    /// Value of a 1×1 parameter.
    #[inline]
    pub fn get(&self) -> f64 {
        self.value.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }
}

/// Anything that owns an ordered collection of [`Param`]s.
///
/// The visiting order is fixed; optimizer state, checkpoints and gradient
/// checks all rely on it.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(p.value.as_slice()));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(p.grad.as_slice()));
        out
    }

    /// Adds `k * grads` (flat, in visiting order) into the accumulated gradients.
    fn accumulate_grads(&mut self, grads: &[f64], k: f64) {
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            for (g, v) in p.grad.as_mut_slice().iter_mut().zip(&grads[offset..offset + n]) {
                *g += k * v;
            }
            offset += n;
        });
        assert_eq!(offset, grads.len(), "flat gradient length mismatch");
    }
}

impl ParamSet for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

impl ParamSet for Vec<Param> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(f)
    }
}

/// Shared per-point affine map (a 1×1 convolution over points).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    /// Fixed at zero and hidden from [`ParamSet`] when `has_bias` is false.
    pub bias: Param,
    pub has_bias: bool,
}

impl Linear {
    /// Uniform `±1/√d_in` initialization, the usual default for 1×1 convolutions.
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), Matrix::uniform(d_in, d_out, bound, rng)),
            bias: Param::new(format!("{name}.bias"), Matrix::uniform(1, d_out, bound, rng)),
            has_bias: true,
        }
    }

    /// Projection without a bias term, for inputs whose offset cancels
    /// downstream (e.g. attention keys under a row-wise softmax).
    pub fn unbiased<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), Matrix::uniform(d_in, d_out, bound, rng)),
            bias: Param::new(format!("{name}.bias"), Matrix::zeros(1, d_out)),
            has_bias: false,
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Matrix::zeros(d_in, d_out)),
            bias: Param::new(format!("{name}.bias"), Matrix::zeros(1, d_out)),
            has_bias: true,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_project(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Matrix, g: &Matrix) -> Result<Matrix> {
        let (gx, gw, gb) = linear_project_backward(x, &self.weight.value, g)?;
        self.weight.grad.add_assign(&gw);
        if self.has_bias {
            self.bias.grad.add_assign(&gb);
        }
        Ok(gx)
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if self.has_bias {
            f(&self.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if self.has_bias {
            f(&mut self.bias);
        }
    }
}

/// `out[i] = X[i]·W + b` for every row.
pub fn linear_project(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows != 1 || b.cols != w.cols {
        return Err(Error::shape(
            "linear_project",
            format!("bias {}x{} for weight {}x{}", b.rows, b.cols, w.rows, w.cols),
        ));
    }
    let mut out = matmul(x, w).map_err(|_| {
        Error::shape(
            "linear_project",
            format!("input {}x{} by weight {}x{}", x.rows, x.cols, w.rows, w.cols),
        )
    })?;
    for r in 0..out.rows {
        for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Returns `(dX, dW, db)`.
pub fn linear_project_backward(x: &Matrix, w: &Matrix, g: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let gx = matmul_a_bt(g, w)?;
    let gw = matmul_at_b(x, g)?;
    Ok((gx, gw, g.column_sums()))
}

/// First/second moment accumulators for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper<P: ParamSet + ?Sized>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |p| first.push(Matrix::zeros(p.value.rows, p.value.cols)));
        let second = first.clone();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first,
            second,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut slots = 0;
    params.visit(&mut |_| slots += 1);
    if slots != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, state built for {}", slots, state.first.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let mut idx = 0;
    let mut shape_err = None;
    let (first, second) = (&mut state.first, &mut state.second);
    params.visit_mut(&mut |p| {
        let (m, v) = (&mut first[idx], &mut second[idx]);
        idx += 1;
        if m.shape() != p.value.shape() {
            shape_err = Some(p.name.clone());
            return;
        }
        let values = p.value.as_mut_slice();
        let grads = p.grad.as_mut_slice();
        for (((x, g), mi), vi) in values
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = b1 * *mi + (1.0 - b1) * *g;
            *vi = b2 * *vi + (1.0 - b2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
            *g = 0.0;
        }
    });
    match shape_err {
        Some(name) => Err(Error::shape("adam_step", format!("state mismatch for {name}"))),
        None => Ok(()),
    }
}

/// One compared scalar in a gradient check.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Analytic gradient of the named parameter's entries.
    pub fn analytic_for(&self, name: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.name == name)
            .map(|e| e.analytic)
            .collect()
    }
}

fn set_flat<P: ParamSet + ?Sized>(params: &mut P, k: usize, v: f64) {
    let mut offset = 0;
    params.visit_mut(&mut |p| {
        let n = p.len();
        if k >= offset && k < offset + n {
            p.value.as_mut_slice()[k - offset] = v;
        }
        offset += n;
    });
}

/// Compares the analytic gradient of `loss` with central differences.
///
/// `loss(params, true)` must accumulate gradients into `params`;
/// `loss(params, false)` only evaluates. The relative error per scalar is
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<P, F>(params: &mut P, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    P: ParamSet + ?Sized,
    F: FnMut(&mut P, bool) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    params.zero_grad();
    let base = loss(params, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric("gradient check: non-finite loss".into()));
    }
    let analytic = params.flat_grads();
    let values = params.flat_values();
    let mut names = Vec::with_capacity(values.len());
    let mut index_in_param = Vec::with_capacity(values.len());
    params.visit(&mut |p| {
        for i in 0..p.len() {
            names.push(p.name.clone());
            index_in_param.push(i);
        }
    });
    params.zero_grad();

    let mut entries = Vec::with_capacity(values.len());
    let mut max_rel_err = 0.0f64;
    for k in 0..values.len() {
        let x0 = values[k];
        set_flat(params, k, x0 + eps);
        let up = loss(params, false)?;
        set_flat(params, k, x0 - eps);
        let down = loss(params, false)?;
        set_flat(params, k, x0);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient check: non-finite loss perturbing {}[{}]",
                names[k], index_in_param[k]
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_rel_err = max_rel_err.max(rel_err);
        entries.push(GradEntry {
            name: names[k].clone(),
            index: index_in_param[k],
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err,
        entries,
    })
}
