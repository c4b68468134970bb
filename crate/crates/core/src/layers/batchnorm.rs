//! Batch normalization over the (batch, height, width) dimensions, one
//! statistic pair per channel.
//!
//! Train mode normalizes with the mini-batch mean and population variance,
//! applies the learned scale γ and shift β, and folds the batch statistics
//! into running estimates by exponential moving average
//! (running ← 0.9·running + 0.1·batch). Infer mode normalizes with the
//! running estimates and is an error until they have been fed at least once.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// EMA momentum for the running statistics.
const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// False until the first train-mode forward (or model load); guards the
    /// "uninitialized statistics" inference error.
    pub initialized: bool,
}

impl<T: Real> BatchNormParams<T> {
    /// Fresh parameters: γ=1, β=0, running mean 0, running variance 1.
    pub fn new(channels: usize, epsilon: T) -> Self {
        assert!(epsilon > T::zero(), "epsilon must be positive");
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let mut out = x.zeros_like();
    batchnorm_forward_slices(&x.data, x.c, p, mode, &mut out.data)?;
    Ok(out)
}

/// Gradients of the train-mode forward map, including the dependence of the
/// batch mean and variance on `x`. Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward<T: Real>(
    x: &Tensor4<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if grad_out.data.len() != x.data.len() || grad_out.c != x.c {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "grad_out is {}x{}x{}x{}, expected {}x{}x{}x{}",
                grad_out.b, grad_out.h, grad_out.w, grad_out.c, x.b, x.h, x.w, x.c
            ),
        ));
    }
    let mut grad_x = x.zeros_like();
    let mut grad_gamma = vec![T::zero(); p.channels()];
    let mut grad_beta = vec![T::zero(); p.channels()];
    batchnorm_backward_slices(&x.data, x.c, p, &grad_out.data, &mut grad_x.data, &mut grad_gamma, &mut grad_beta)?;
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Per-channel mean and population variance of `x` (flattened over everything
/// but the channel dimension), accumulated in f64.
fn channel_stats<T: Real>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    for px in x.chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let v = v.as_f64();
            sum[ch] += v;
            sum_sq[ch] += v * v;
        }
    }
    let m = (x.len() / c) as f64;
    for ch in 0..c {
        sum[ch] /= m;
        sum_sq[ch] = (sum_sq[ch] / m - sum[ch] * sum[ch]).max(0.0);
    }
    (sum, sum_sq)
}

pub(crate) fn batchnorm_forward_slices<T: Real>(
    x: &[T],
    c: usize,
    p: &mut BatchNormParams<T>,
    mode: Mode,
    out: &mut [T],
) -> Result<()> {
    if c != p.channels() {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("input has {c} channels, params have {}", p.channels()),
        ));
    }
    debug_assert_eq!(x.len() % c, 0);
    debug_assert_eq!(out.len(), x.len());

    if mode == Mode::Infer {
        return batchnorm_infer_slices(x, c, p, out);
    }
    let (mean, var) = channel_stats(x, c);
    normalize(x, c, p, &mean, &var, out);
    for ch in 0..c {
        let rm = MOMENTUM * p.running_mean[ch].as_f64() + (1.0 - MOMENTUM) * mean[ch];
        let rv = MOMENTUM * p.running_var[ch].as_f64() + (1.0 - MOMENTUM) * var[ch];
        p.running_mean[ch] = T::from_f64(rm);
        p.running_var[ch] = T::from_f64(rv);
    }
    p.initialized = true;
    Ok(())
}

/// Infer-mode normalization with the stored running statistics; never mutates
/// the parameters, so a model can be shared across threads during inference.
pub(crate) fn batchnorm_infer_slices<T: Real>(
    x: &[T],
    c: usize,
    p: &BatchNormParams<T>,
    out: &mut [T],
) -> Result<()> {
    if c != p.channels() {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("input has {c} channels, params have {}", p.channels()),
        ));
    }
    if !p.initialized {
        return Err(Error::UninitializedStatistics);
    }
    let mean: Vec<f64> = p.running_mean.iter().map(|v| v.as_f64()).collect();
    let var: Vec<f64> = p.running_var.iter().map(|v| v.as_f64()).collect();
    normalize(x, c, p, &mean, &var, out);
    Ok(())
}

/// out = (x − μ)·(γ/√(σ²+ε)) + β; subtracting μ first keeps the
/// zero-variance case exact (constant input → β exactly).
fn normalize<T: Real>(x: &[T], c: usize, p: &BatchNormParams<T>, mean: &[f64], var: &[f64], out: &mut [T]) {
    let eps = p.epsilon.as_f64();
    let mut mu = Vec::with_capacity(c);
    let mut scale = Vec::with_capacity(c);
    for ch in 0..c {
        mu.push(T::from_f64(mean[ch]));
        scale.push(T::from_f64(p.gamma[ch].as_f64() / (var[ch] + eps).sqrt()));
    }
    for (opix, xpix) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            opix[ch] = (xpix[ch] - mu[ch]).mul_add(scale[ch], p.beta[ch]);
        }
    }
}

pub(crate) fn batchnorm_backward_slices<T: Real>(
    x: &[T],
    c: usize,
    p: &BatchNormParams<T>,
    grad_out: &[T],
    grad_x: &mut [T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Result<()> {
    if c != p.channels() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("input has {c} channels, params have {}", p.channels()),
        ));
    }
    let (mean, var) = channel_stats(x, c);
    let eps = p.epsilon.as_f64();
    let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let m = (x.len() / c) as f64;

    // s1[ch] = Σ grad_out; s2[ch] = Σ grad_out · x̂
    let mut s1 = vec![0.0f64; c];
    let mut s2 = vec![0.0f64; c];
    for (gpix, xpix) in grad_out.chunks_exact(c).zip(x.chunks_exact(c)) {
        for ch in 0..c {
            let g = gpix[ch].as_f64();
            let xhat = (xpix[ch].as_f64() - mean[ch]) * istd[ch];
            s1[ch] += g;
            s2[ch] += g * xhat;
        }
    }
    for ch in 0..c {
        grad_beta[ch] = T::from_f64(s1[ch]);
        grad_gamma[ch] = T::from_f64(s2[ch]);
    }

    // dx = γ·istd · (dout − Σdout/M − x̂·Σ(dout·x̂)/M)
    let gscale: Vec<f64> = (0..c).map(|ch| p.gamma[ch].as_f64() * istd[ch]).collect();
    for ((gxpix, gpix), xpix) in grad_x
        .chunks_exact_mut(c)
        .zip(grad_out.chunks_exact(c))
        .zip(x.chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (xpix[ch].as_f64() - mean[ch]) * istd[ch];
            let d = gpix[ch].as_f64() - s1[ch] / m - xhat * s2[ch] / m;
            gxpix[ch] = T::from_f64(gscale[ch] * d);
        }
    }
    Ok(())
}
