//! Dense numerical kernel used by every model in the crate.
//!
//! Everything here is `f64` and strictly sequential, so repeated calls with
//! the same inputs are bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec: input length");
        assert_eq!(out.len(), self.rows, "matvec: output length");
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        out
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows, "matvec_t: input length");
        assert_eq!(out.len(), self.cols, "matvec_t: output length");
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(y, &mut out);
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows, "outer: row factor length");
        assert_eq!(b.len(), self.cols, "outer: col factor length");
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a += scale · b`
#[inline]
pub fn axpy(scale: f64, b: &[f64], a: &mut [f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, &y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes the entries of `grad` whose pre-activation was not positive.
pub fn relu_backward(pre_activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(pre_activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-shifted softmax. Panics on an empty input.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    assert!(!scores.is_empty(), "softmax of an empty vector");
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `W x + b`
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), w.rows(), "affine: bias length");
    let mut out = b.to_vec();
    w.matvec_acc(x, &mut out);
    out
}

/// Neumaier-compensated sum; order-dependent only in the last ulp.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Xavier/Glorot uniform: entries i.i.d. in `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn init_params(rows: usize, cols: usize, seed: u64) -> Matrix {
    assert!(
        rows > 0 && cols > 0,
        "init_params: dimensions must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(rows, cols, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_config(len, AdamConfig::default())
    }

    pub fn with_config(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    #[inline]
    fn update_coord(&mut self, idx: usize, g: f64, lr: f64, bc1: f64, bc2: f64) -> f64 {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.m[idx] = beta1 * self.m[idx] + (1.0 - beta1) * g;
        self.v[idx] = beta2 * self.v[idx] + (1.0 - beta2) * g * g;
        let m_hat = self.m[idx] / bc1;
        let v_hat = self.v[idx] / bc2;
        lr * m_hat / (v_hat.sqrt() + eps)
    }
}

fn check_finite(block: &str, grads: &[f64]) -> Result<()> {
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NasError::Training(format!(
            "non-finite gradient in parameter block `{block}` at index {pos}"
        )));
    }
    Ok(())
}

/// One bias-corrected Adam update of a dense block.
pub fn adam_step(
    block: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    assert_eq!(
        params.len(),
        grads.len(),
        "adam: gradient shape for `{block}`"
    );
    assert_eq!(
        params.len(),
        state.m.len(),
        "adam: state shape for `{block}`"
    );
    check_finite(block, grads)?;
    state.t += 1;
    let (bc1, bc2) = state.corrections();
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        *p -= state.update_coord(i, g, lr, bc1, bc2);
    }
    Ok(())
}

/// Lazy Adam over a row-major table: only the rows present in `rows` have
/// their moments and values touched. The step counter is shared by the table.
pub fn adam_step_rows<'a>(
    block: &str,
    params: &mut [f64],
    row_len: usize,
    rows: impl IntoIterator<Item = (usize, &'a [f64])> + Clone,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    assert_eq!(
        params.len(),
        state.m.len(),
        "adam: state shape for `{block}`"
    );
    for (_, g) in rows.clone() {
        check_finite(block, g)?;
    }
    state.t += 1;
    let (bc1, bc2) = state.corrections();
    for (r, g) in rows {
        assert_eq!(g.len(), row_len, "adam: row gradient length for `{block}`");
        for (c, &gc) in g.iter().enumerate() {
            let idx = r * row_len + c;
            params[idx] -= state.update_coord(idx, gc, lr, bc1, bc2);
        }
    }
    Ok(())
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` around `params`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "grad_check: shape mismatch");
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = loss(&theta);
        theta[i] = orig - epsilon;
        let minus = loss(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
