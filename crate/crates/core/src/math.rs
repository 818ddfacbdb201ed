//! Numeric primitives shared by the Q-network, the index, and the
//! environment.
//!
//! Parameters and embeddings are stored as `f32`; every reduction (dot
//! products, norms, means) accumulates in `f64` so that scores are stable
//! under permutation of the inputs. The `*_f64` kernels carry full-precision
//! activations through the network forward/backward passes, where `f32`
//! round-off would otherwise drown small gradients.

use rand::Rng;

/// Errors from shape or domain violations in the numeric layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MathError {
    /// An operation that divides by a vector norm received (numerically)
    /// zero input.
    ZeroVector,
    /// Two buffers that must agree elementwise had different lengths.
    LengthMismatch { expected: usize, got: usize },
}

impl std::fmt::Display for MathError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MathError::ZeroVector => write!(f, "cannot normalize a zero vector"),
            MathError::LengthMismatch { expected, got } => {
                write!(f, "length mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for MathError {}

/// A dense row-major tensor of `f32` parameters.
///
/// `shape` is `[rows, cols]` for matrices and `[len]` for vectors; `data`
/// always holds the product of the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| (normal(rng) * std as f64) as f32).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (or the length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (1 for a 1-D one).
    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Borrow row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }
}

/// One standard normal draw via Box-Muller over the generator's uniforms,
/// so seeded runs stay reproducible across platforms.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Guard the log against u1 == 0.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inner product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm accumulated in `f64`.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Scale `x` to unit Euclidean norm. Zero (or denormal-tiny) input is an
/// error rather than a silent NaN.
pub fn l2_normalize(x: &[f32]) -> Result<Vec<f32>, MathError> {
    let norm = l2_norm(x);
    if norm <= f64::MIN_POSITIVE {
        return Err(MathError::ZeroVector);
    }
    Ok(x.iter().map(|&v| (v as f64 / norm) as f32).collect())
}

pub fn l2_normalize_in_place(x: &mut [f32]) -> Result<(), MathError> {
    let norm = l2_norm(x);
    if norm <= f64::MIN_POSITIVE {
        return Err(MathError::ZeroVector);
    }
    for v in x.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Ok(())
}

/// Unit-normalize in `f64`, returning the unit vector and the original norm
/// (the norm is needed by [`l2_normalize_bwd`]).
pub fn l2_normalize_f64(x: &[f64]) -> Result<(Vec<f64>, f64), MathError> {
    let norm = dot_f64(x, x).sqrt();
    if norm <= f64::MIN_POSITIVE {
        return Err(MathError::ZeroVector);
    }
    Ok((x.iter().map(|&v| v / norm).collect(), norm))
}

/// Backward pass of `a = x / ‖x‖`: given the unit output `a`, the input norm,
/// and `d_a`, returns `d_x = (d_a − a (a·d_a)) / ‖x‖`.
pub fn l2_normalize_bwd(a: &[f64], norm: f64, d_a: &[f64]) -> Vec<f64> {
    let proj = dot_f64(a, d_a);
    a.iter().zip(d_a).map(|(&ai, &di)| (di - ai * proj) / norm).collect()
}

/// Numerically stable softmax (shift by the max, accumulate in `f64`).
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let p = softmax_f64(&x.iter().map(|&v| v as f64).collect::<Vec<_>>());
    p.into_iter().map(|v| v as f32).collect()
}

pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
    debug_assert!(!x.is_empty());
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Backward pass of softmax: given the probabilities `p` and the gradient
/// `d_p` at the output, returns the gradient at the logits,
/// `d_l = p ⊙ (d_p − p·d_p)`.
pub fn softmax_bwd(p: &[f64], d_p: &[f64]) -> Vec<f64> {
    let inner = dot_f64(p, d_p);
    p.iter().zip(d_p).map(|(&pi, &di)| pi * (di - inner)).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the whole slice with learned gain and bias:
/// `y = gain ⊙ (x − mean) / sqrt(var + 1e-5) + bias` (biased variance).
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Result<Vec<f32>, MathError> {
    check_len(gain.len(), x.len())?;
    check_len(bias.len(), x.len())?;
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let gf: Vec<f64> = gain.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
    let (y, _) = layer_norm_fwd(&xf, &gf, &bf);
    Ok(y.into_iter().map(|v| v as f32).collect())
}

/// Values cached by [`layer_norm_fwd`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// The standardized input `(x − mean) / sqrt(var + eps)`.
    pub x_hat: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_fwd(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = x_hat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    (y, LayerNormCache { x_hat, inv_std })
}

/// Backward pass of layer norm. Returns `d_x` and accumulates the gain/bias
/// gradients into `d_gain`/`d_bias`.
pub fn layer_norm_bwd(
    cache: &LayerNormCache,
    gain: &[f64],
    d_y: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let n = cache.x_hat.len() as f64;
    let mut d_xhat = vec![0.0; cache.x_hat.len()];
    for i in 0..cache.x_hat.len() {
        d_gain[i] += d_y[i] * cache.x_hat[i];
        d_bias[i] += d_y[i];
        d_xhat[i] = d_y[i] * gain[i];
    }
    let mean_dxhat = d_xhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat =
        d_xhat.iter().zip(&cache.x_hat).map(|(&d, &xh)| d * xh).sum::<f64>() / n;
    cache
        .x_hat
        .iter()
        .zip(&d_xhat)
        .map(|(&xh, &d)| cache.inv_std * (d - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

/// Exact (erf-based) GELU: `x · Φ(x)`.
pub fn gelu(x: f32) -> f32 {
    gelu_f64(x as f64) as f32
}

pub fn gelu_f64(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of GELU: `Φ(x) + x · φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Huber loss with knee δ = 1: quadratic inside the unit interval, linear
/// outside, continuous (with its derivative) at the knee.
pub fn huber(residual: f32) -> f32 {
    huber_f64(residual as f64) as f32
}

pub fn huber_f64(residual: f64) -> f64 {
    let a = residual.abs();
    if a <= 1.0 {
        0.5 * residual * residual
    } else {
        a - 0.5
    }
}

/// Derivative of the Huber loss with respect to the residual.
pub fn huber_grad(residual: f64) -> f64 {
    residual.clamp(-1.0, 1.0)
}

/// Adam moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction, applied in place.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), MathError> {
    check_len(grad.len(), param.len())?;
    check_len(state.m.len(), param.len())?;
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = state.beta1 * state.m[i] as f64 + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.v[i] as f64 + (1.0 - state.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
    }
    Ok(())
}

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic and a numerical gradient entry, with a
/// floor so that exactly-zero pairs compare equal.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// `y += W x` for a row-major `[rows, cols]` tensor, `f64` activations.
pub fn mat_vec_accum(w: &Tensor, x: &[f64], y: &mut [f64]) {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv as f64 * xv;
        }
        y[r] += acc;
    }
}

pub fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; w.rows()];
    mat_vec_accum(w, x, &mut y);
    y
}

/// `y += Wᵀ d` — propagates a gradient back through `W x`.
pub fn mat_tvec_accum(w: &Tensor, d: &[f64], y: &mut [f64]) {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        let dv = d[r];
        for (yv, wv) in y.iter_mut().zip(row) {
            *yv += *wv as f64 * dv;
        }
    }
}

pub fn mat_tvec(w: &Tensor, d: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; w.cols()];
    mat_tvec_accum(w, d, &mut y);
    y
}

/// Accumulate the outer product `d ⊗ x` into the gradient buffer of a
/// `[d.len(), x.len()]` weight.
pub fn accum_outer(grad: &mut [f64], d: &[f64], x: &[f64]) {
    debug_assert_eq!(grad.len(), d.len() * x.len());
    for (r, &dv) in d.iter().enumerate() {
        let row = &mut grad[r * x.len()..(r + 1) * x.len()];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += dv * xv;
        }
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

fn check_len(got: usize, expected: usize) -> Result<(), MathError> {
    if got != expected {
        Err(MathError::LengthMismatch { expected, got })
    } else {
        Ok(())
    }
}
