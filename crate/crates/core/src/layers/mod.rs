//! Forward and backward passes for every primitive the network needs:
//! 2D convolution, batch normalization, ReLU, 2×2 max-pooling, 2×2 stride-2
//! transpose convolution, sigmoid, and softmax.
//!
//! All kernels are deterministic: per-output-scalar accumulation order is
//! fixed (bias first, then kernel taps in (kh, kw, in-channel) order), so
//! results are bit-identical run to run and match the naive test oracles
//! exactly. Terms are combined with `mul_add`, which compiles to a single
//! fused multiply-add instruction.

mod activations;
mod batchnorm;
mod conv;
mod pool;
mod tconv;

pub use activations::{relu, relu_backward, relu_backward_inplace, relu_inplace, sigmoid, sigmoid_inplace, softmax_lastdim, softmax_lastdim_inplace};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormParams};
pub use conv::{conv2d_backward, conv2d_forward};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};
pub use tconv::{tconv2_backward, tconv2_forward};

pub(crate) use batchnorm::batchnorm_infer_slices;
pub(crate) use conv::{conv2d_backward_slices, conv2d_forward_slice};
pub(crate) use pool::{maxpool2_backward_slice, maxpool2_slice};
pub(crate) use tconv::{tconv2_backward_slices, tconv2_forward_slice};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Whether batch normalization uses batch statistics (and updates its running
/// estimates) or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Weights and bias of a (transpose) convolution layer.
///
/// `kernel` is indexed `(kh, kw, in_channel, out_channel)`, flattened in that
/// order, so the out-channel run for one tap is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(
        kernel: Vec<T>,
        bias: Vec<T>,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let expect = kernel_size * kernel_size * in_channels * out_channels;
        if kernel.len() != expect {
            return Err(Error::shape(
                "ConvParams::new",
                format!("kernel length {} != n·n·m·c = {expect}", kernel.len()),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(
                "ConvParams::new",
                format!("bias length {} != out_channels {out_channels}", bias.len()),
            ));
        }
        Ok(ConvParams { kernel, bias, kernel_size, in_channels, out_channels })
    }

    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvParams {
            kernel: vec![T::zero(); kernel_size * kernel_size * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
            kernel_size,
            in_channels,
            out_channels,
        }
    }

    /// Flat index of kernel element `(kh, kw, in_channel ci, out_channel co)`.
    #[inline(always)]
    pub fn kidx(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        ((kh * self.kernel_size + kw) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}
