//! Network assembly: declarative layer specifications for the four preset
//! architectures, He-style parameter initialization, whole-network forward and
//! backward passes over mini-batches, trainable-parameter counting, and
//! bit-exact model serialization.
//!
//! All four presets are encoder/decoder ("hourglass") fully convolutional
//! networks: every max-pooling halving is undone by a matching 2×2 stride-2
//! transpose convolution, so the output resolution equals the input
//! resolution. Convolution blocks are convolution + batch normalization +
//! ReLU; transpose convolutions are bare; the terminal 1×1 convolution has no
//! batch normalization and ends in sigmoid (1 output channel) or softmax
//! (3 output channels).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_forward, batchnorm_infer_slices, conv2d_backward_slices, conv2d_forward_slice,
    maxpool2_backward_slice, maxpool2_slice, relu_backward_inplace, relu_inplace, sigmoid_inplace,
    softmax_lastdim_inplace, tconv2_backward_slices, tconv2_forward_slice, BatchNormParams,
    ConvParams, Mode, PoolIndices,
};
use crate::rng::{substream, Stream};
use crate::tensor::{Real, Tensor4};

/// Batch-norm epsilon shared by every preset.
pub const BN_EPSILON: f64 = 1e-5;

/// Identifier of one of the four preset architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchId {
    Arch1,
    Arch2,
    Arch3,
    MangoTreeNet,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [ArchId::Arch1, ArchId::Arch2, ArchId::Arch3, ArchId::MangoTreeNet];

    /// Stable numeric id used in the model file format.
    pub fn id(self) -> u8 {
        match self {
            ArchId::Arch1 => 1,
            ArchId::Arch2 => 2,
            ArchId::Arch3 => 3,
            ArchId::MangoTreeNet => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<ArchId> {
        Self::ALL.into_iter().find(|a| a.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchId::Arch1 => "arch1",
            ArchId::Arch2 => "arch2",
            ArchId::Arch3 => "arch3",
            ArchId::MangoTreeNet => "mango_tree_net",
        }
    }

    pub fn parse(s: &str) -> Option<ArchId> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    TConv,
    TerminalConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    None,
}

/// One layer of a network specification. `out_channels` is ignored for
/// max-pooling (channel count passes through unchanged).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub out_channels: usize,
    pub has_batchnorm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(kernel_size: usize, out_channels: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel_size,
            out_channels,
            has_batchnorm: true,
            activation: Activation::Relu,
        }
    }

    pub fn maxpool() -> LayerSpec {
        LayerSpec {
            kind: LayerKind::MaxPool,
            kernel_size: 2,
            out_channels: 0,
            has_batchnorm: false,
            activation: Activation::None,
        }
    }

    pub fn tconv(out_channels: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::TConv,
            kernel_size: 2,
            out_channels,
            has_batchnorm: false,
            activation: Activation::None,
        }
    }

    pub fn terminal(num_classes: u8) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::TerminalConv,
            kernel_size: 1,
            out_channels: if num_classes == 2 { 1 } else { 3 },
            has_batchnorm: false,
            activation: if num_classes == 2 { Activation::Sigmoid } else { Activation::Softmax },
        }
    }
}

/// A named architecture: ordered layers plus the class count that fixes the
/// terminal head (1-channel sigmoid for 2 classes, 3-channel softmax for 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: ArchId,
    pub layers: Vec<LayerSpec>,
    pub num_classes: u8,
}

impl NetworkSpec {
    /// Build the named preset. Only `mango_tree_net` has a 3-class head; the
    /// three smaller presets end in a single sigmoid channel.
    pub fn build(name: ArchId, num_classes: u8) -> Result<NetworkSpec> {
        if num_classes != 2 && num_classes != 3 {
            return Err(Error::invalid(
                "NetworkSpec::build",
                format!("num_classes must be 2 or 3, got {num_classes}"),
            ));
        }
        if num_classes == 3 && name != ArchId::MangoTreeNet {
            return Err(Error::invalid(
                "NetworkSpec::build",
                format!("{name} has a single-channel head; only mango_tree_net supports 3 classes"),
            ));
        }
        use LayerSpec as L;
        let layers = match name {
            ArchId::Arch1 => vec![
                L::conv(3, 8),
                L::conv(5, 8),
                L::maxpool(),
                L::conv(7, 16),
                L::maxpool(),
                L::conv(5, 32),
                L::tconv(32),
                L::tconv(16),
                L::terminal(num_classes),
            ],
            ArchId::Arch2 => vec![
                L::conv(3, 8),
                L::conv(5, 8),
                L::maxpool(),
                L::conv(7, 16),
                L::maxpool(),
                L::conv(5, 32),
                L::tconv(32),
                L::conv(7, 16),
                L::tconv(16),
                L::conv(5, 8),
                L::conv(3, 8),
                L::terminal(num_classes),
            ],
            ArchId::Arch3 => vec![
                L::conv(3, 16),
                L::conv(5, 16),
                L::maxpool(),
                L::conv(7, 32),
                L::maxpool(),
                L::conv(5, 64),
                L::tconv(64),
                L::conv(7, 32),
                L::tconv(32),
                L::conv(5, 16),
                L::conv(3, 16),
                L::terminal(num_classes),
            ],
            ArchId::MangoTreeNet => vec![
                L::conv(3, 16),
                L::conv(5, 16),
                L::maxpool(),
                L::conv(7, 32),
                L::maxpool(),
                L::conv(5, 64),
                L::maxpool(),
                L::conv(5, 128),
                L::tconv(128),
                L::conv(5, 64),
                L::tconv(64),
                L::conv(7, 32),
                L::tconv(32),
                L::conv(5, 16),
                L::conv(3, 16),
                L::terminal(num_classes),
            ],
        };
        let spec = NetworkSpec { name, layers, num_classes };
        debug_assert_eq!(
            spec.layers.iter().filter(|l| l.kind == LayerKind::MaxPool).count(),
            spec.layers.iter().filter(|l| l.kind == LayerKind::TConv).count(),
            "pool/tconv imbalance would change the output resolution"
        );
        Ok(spec)
    }

    /// Variant with batch normalization disabled on every convolution block
    /// (for the no-batch-norm training experiment).
    pub fn without_batchnorm(mut self) -> NetworkSpec {
        for l in &mut self.layers {
            l.has_batchnorm = false;
        }
        self
    }

    pub fn num_pools(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::MaxPool).count()
    }

    /// `(in_channels, out_channels)` per layer, starting from 3 RGB channels.
    pub fn channel_plan(&self) -> Vec<(usize, usize)> {
        let mut cin = 3usize;
        self.layers
            .iter()
            .map(|l| {
                let cout = if l.kind == LayerKind::MaxPool { cin } else { l.out_channels };
                let pair = (cin, cout);
                cin = cout;
                pair
            })
            .collect()
    }

    /// Trainable parameters: convolution weights + biases, plus γ and β for
    /// every batch-normalized block. Running statistics are not trainable and
    /// are excluded.
    pub fn count_params(&self) -> usize {
        self.channel_plan()
            .iter()
            .zip(&self.layers)
            .map(|(&(cin, cout), l)| match l.kind {
                LayerKind::MaxPool => 0,
                _ => {
                    let mut p = l.kernel_size * l.kernel_size * cin * cout + cout;
                    if l.has_batchnorm {
                        p += 2 * cout;
                    }
                    p
                }
            })
            .sum()
    }
}

/// Per-layer parameters of an instantiated model.
#[derive(Clone, Debug)]
pub enum LayerParams<T: Real> {
    Conv { conv: ConvParams<T>, bn: Option<BatchNormParams<T>> },
    MaxPool,
    TConv(ConvParams<T>),
    TerminalConv(ConvParams<T>),
}

/// A network specification bound to concrete parameter tensors.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams<T>>,
    pub rng_seed: u64,
}

/// Draw parameters for `spec`: weights from a zero-mean Gaussian with
/// variance 2/fan_in (fan_in = n·n·in_channels), biases 0, γ=1, β=0.
/// Each layer draws from its own named RNG substream, so the result is a pure
/// function of `(spec, seed)`.
pub fn init_params<T: Real>(spec: &NetworkSpec, seed: u64) -> Model<T> {
    let plan = spec.channel_plan();
    let layers = spec
        .layers
        .iter()
        .zip(&plan)
        .enumerate()
        .map(|(i, (l, &(cin, cout)))| {
            if l.kind == LayerKind::MaxPool {
                return LayerParams::MaxPool;
            }
            let mut rng = substream(seed, Stream::Init, i as u64);
            let fan_in = (l.kernel_size * l.kernel_size * cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                .expect("standard deviation is positive and finite");
            let kernel: Vec<T> = (0..l.kernel_size * l.kernel_size * cin * cout)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            let conv = ConvParams::new(kernel, vec![T::zero(); cout], l.kernel_size, cin, cout)
                .expect("kernel and bias lengths are constructed to match");
            match l.kind {
                LayerKind::Conv => LayerParams::Conv {
                    conv,
                    bn: l.has_batchnorm.then(|| BatchNormParams::new(cout, T::from_f64(BN_EPSILON))),
                },
                LayerKind::TConv => LayerParams::TConv(conv),
                LayerKind::TerminalConv => LayerParams::TerminalConv(conv),
                LayerKind::MaxPool => unreachable!("handled above"),
            }
        })
        .collect();
    Model { spec: spec.clone(), layers, rng_seed: seed }
}

/// Activations recorded during a train-mode forward pass, in the exact form
/// the backward pass consumes.
#[derive(Debug)]
pub struct ForwardCache<T: Real> {
    mode: Mode,
    /// `inputs[i]` is the input tensor of layer `i`. The post-activation
    /// output of a convolution block is the next layer's input, so ReLU
    /// derivatives are recovered from `inputs[i + 1]` without extra storage.
    inputs: Vec<Tensor4<T>>,
    /// Convolution output before batch normalization, for blocks that have it.
    pre_norm: Vec<Option<Tensor4<T>>>,
    /// Per-example argmax codes for each max-pooling layer.
    pool_idx: Vec<Option<Vec<PoolIndices>>>,
}

/// Per-layer parameter gradients; arrays are empty where the layer has no
/// such parameter (e.g. γ/β without batch norm, everything for max-pooling).
#[derive(Clone, Debug)]
pub struct LayerGrads<T: Real> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerGrads<T> {
    fn empty() -> Self {
        LayerGrads { kernel: Vec::new(), bias: Vec::new(), gamma: Vec::new(), beta: Vec::new() }
    }
}

/// Gradients for every parameter of a model, congruent with `Model::layers`.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> Model<T> {
    pub fn count_params(&self) -> usize {
        self.spec.count_params()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c != 3 {
            return Err(Error::shape(
                "Model::forward",
                format!("input has {} channels, expected 3 (RGB)", x.c),
            ));
        }
        let div = 1usize << self.spec.num_pools();
        if x.h % div != 0 || x.w % div != 0 {
            return Err(Error::shape(
                "Model::forward",
                format!(
                    "input {}x{} must have height and width divisible by {div} ({} pooling stages)",
                    x.h,
                    x.w,
                    self.spec.num_pools()
                ),
            ));
        }
        if x.b == 0 {
            return Err(Error::shape("Model::forward", "empty batch".to_string()));
        }
        Ok(())
    }

    /// Run the network over a mini-batch. Train mode updates batch-norm
    /// running statistics and returns a cache for `backward`; infer mode
    /// requires initialized statistics (train at least once or load a model)
    /// and records nothing.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            mode,
            inputs: Vec::with_capacity(n_layers),
            pre_norm: vec![None; n_layers],
            pool_idx: vec![None; n_layers],
        };
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let out = match layer {
                LayerParams::Conv { conv, bn } => {
                    let mut out = conv_forward_batch(&cur, conv);
                    if let Some(bn) = bn {
                        let pre = out;
                        out = batchnorm_forward(&pre, bn, mode)?;
                        cache.pre_norm[i] = Some(pre);
                    }
                    relu_inplace(&mut out.data);
                    out
                }
                LayerParams::MaxPool => {
                    let (out, idx) = maxpool_forward_batch(&cur)?;
                    cache.pool_idx[i] = Some(idx);
                    out
                }
                LayerParams::TConv(conv) => tconv_forward_batch(&cur, conv),
                LayerParams::TerminalConv(conv) => {
                    let mut out = conv_forward_batch(&cur, conv);
                    match self.spec.layers[i].activation {
                        Activation::Sigmoid => sigmoid_inplace(&mut out.data),
                        Activation::Softmax => softmax_lastdim_inplace(&mut out.data, out.c),
                        Activation::Relu => relu_inplace(&mut out.data),
                        Activation::None => {}
                    }
                    out
                }
            };
            cache.inputs.push(cur);
            cur = out;
        }
        Ok((cur, cache))
    }

    /// Inference without mutation: the model may be shared across threads.
    /// Batch normalization uses the stored running statistics.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerParams::Conv { conv, bn } => {
                    let mut out = conv_forward_batch(&cur, conv);
                    if let Some(bn) = bn {
                        let mut norm = out.zeros_like();
                        batchnorm_infer_slices(&out.data, out.c, bn, &mut norm.data)?;
                        out = norm;
                    }
                    relu_inplace(&mut out.data);
                    out
                }
                LayerParams::MaxPool => maxpool_forward_batch(&cur)?.0,
                LayerParams::TConv(conv) => tconv_forward_batch(&cur, conv),
                LayerParams::TerminalConv(conv) => {
                    let mut out = conv_forward_batch(&cur, conv);
                    match self.spec.layers[i].activation {
                        Activation::Sigmoid => sigmoid_inplace(&mut out.data),
                        Activation::Softmax => softmax_lastdim_inplace(&mut out.data, out.c),
                        Activation::Relu => relu_inplace(&mut out.data),
                        Activation::None => {}
                    }
                    out
                }
            };
        }
        Ok(cur)
    }

    /// Backpropagate `grad_out` — the loss gradient with respect to the
    /// terminal convolution's **pre-activation** scores — through the cached
    /// forward pass. Returns gradients congruent with the parameter set.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor4<T>) -> Result<Gradients<T>> {
        if cache.mode != Mode::Train {
            return Err(Error::invalid(
                "Model::backward",
                "cache must come from a train-mode forward pass".to_string(),
            ));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape(
                "Model::backward",
                format!(
                    "cache has {} layers, model has {}",
                    cache.inputs.len(),
                    self.layers.len()
                ),
            ));
        }
        let mut grads: Vec<LayerGrads<T>> = (0..self.layers.len()).map(|_| LayerGrads::empty()).collect();
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            grad = match layer {
                LayerParams::TerminalConv(conv) | LayerParams::TConv(conv) => {
                    let transpose = matches!(layer, LayerParams::TConv(_));
                    let (gx, gk, gb) = if transpose {
                        tconv_backward_batch(x, conv, &grad)
                    } else {
                        conv_backward_batch(x, conv, &grad)
                    };
                    grads[i].kernel = gk;
                    grads[i].bias = gb;
                    gx
                }
                LayerParams::MaxPool => {
                    let idx = cache.pool_idx[i].as_ref().ok_or_else(|| {
                        Error::invalid("Model::backward", format!("missing pool cache at layer {i}"))
                    })?;
                    maxpool_backward_batch(idx, &grad)
                }
                LayerParams::Conv { conv, bn } => {
                    // Post-activation output of this block is the next layer's
                    // input; its zero set equals the pre-activation's.
                    relu_backward_inplace(&cache.inputs[i + 1].data, &mut grad.data);
                    if let Some(bn) = bn {
                        let pre = cache.pre_norm[i].as_ref().ok_or_else(|| {
                            Error::invalid(
                                "Model::backward",
                                format!("missing pre-norm cache at layer {i}"),
                            )
                        })?;
                        let (gx, ggamma, gbeta) = crate::layers::batchnorm_backward(pre, bn, &grad)?;
                        grads[i].gamma = ggamma;
                        grads[i].beta = gbeta;
                        grad = gx;
                    }
                    let (gx, gk, gb) = conv_backward_batch(x, conv, &grad);
                    grads[i].kernel = gk;
                    grads[i].bias = gb;
                    gx
                }
            };
        }
        Ok(Gradients { layers: grads })
    }
}

fn conv_forward_batch<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Tensor4<T> {
    debug_assert_eq!(x.c, p.in_channels, "layer wiring fixes channel counts");
    let mut out = Tensor4::zeros(x.b, x.h, x.w, p.out_channels);
    let in_len = x.example_len();
    let out_len = out.example_len();
    out.data
        .par_chunks_exact_mut(out_len)
        .zip(x.data.par_chunks_exact(in_len))
        .for_each(|(o, xi)| conv2d_forward_slice(xi, x.h, x.w, p, o));
    out
}

fn tconv_forward_batch<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Tensor4<T> {
    debug_assert_eq!(x.c, p.in_channels, "layer wiring fixes channel counts");
    let mut out = Tensor4::zeros(x.b, 2 * x.h, 2 * x.w, p.out_channels);
    let in_len = x.example_len();
    let out_len = out.example_len();
    out.data
        .par_chunks_exact_mut(out_len)
        .zip(x.data.par_chunks_exact(in_len))
        .for_each(|(o, xi)| tconv2_forward_slice(xi, x.h, x.w, p, o));
    out
}

fn maxpool_forward_batch<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<PoolIndices>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("input {}x{} must have even height and width", x.h, x.w),
        ));
    }
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.b, ho, wo, x.c);
    let in_len = x.example_len();
    let out_len = out.example_len();
    let idx: Vec<PoolIndices> = (0..x.b)
        .map(|b| {
            let mut codes = vec![0u8; ho * wo * x.c];
            maxpool2_slice(
                &x.data[b * in_len..(b + 1) * in_len],
                x.h,
                x.w,
                x.c,
                &mut out.data[b * out_len..(b + 1) * out_len],
                &mut codes,
            );
            PoolIndices { h_out: ho, w_out: wo, c: x.c, codes }
        })
        .collect();
    Ok((out, idx))
}

fn maxpool_backward_batch<T: Real>(idx: &[PoolIndices], grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut grad_x = Tensor4::zeros(grad_out.b, 2 * grad_out.h, 2 * grad_out.w, grad_out.c);
    let in_len = grad_x.example_len();
    let out_len = grad_out.example_len();
    for (b, pi) in idx.iter().enumerate() {
        maxpool2_backward_slice(
            &pi.codes,
            pi.h_out,
            pi.w_out,
            pi.c,
            &grad_out.data[b * out_len..(b + 1) * out_len],
            &mut grad_x.data[b * in_len..(b + 1) * in_len],
        );
    }
    grad_x
}

/// Per-example backward kernels run in parallel; the per-example weight
/// gradients are then reduced in ascending example order, so the result does
/// not depend on the worker count.
fn conv_backward_batch<T: Real>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let mut grad_x = x.zeros_like();
    let in_len = x.example_len();
    let out_len = grad_out.example_len();
    let per_example: Vec<(Vec<T>, Vec<T>)> = grad_x
        .data
        .par_chunks_exact_mut(in_len)
        .zip(x.data.par_chunks_exact(in_len).zip(grad_out.data.par_chunks_exact(out_len)))
        .map(|(gx, (xi, go))| {
            let mut gk = vec![T::zero(); p.kernel.len()];
            let mut gb = vec![T::zero(); p.out_channels];
            conv2d_backward_slices(xi, x.h, x.w, p, go, gx, &mut gk, &mut gb);
            (gk, gb)
        })
        .collect();
    let (gk, gb) = reduce_weight_grads(per_example, p);
    (grad_x, gk, gb)
}

fn tconv_backward_batch<T: Real>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let mut grad_x = x.zeros_like();
    let in_len = x.example_len();
    let out_len = grad_out.example_len();
    let per_example: Vec<(Vec<T>, Vec<T>)> = grad_x
        .data
        .par_chunks_exact_mut(in_len)
        .zip(x.data.par_chunks_exact(in_len).zip(grad_out.data.par_chunks_exact(out_len)))
        .map(|(gx, (xi, go))| {
            let mut gk = vec![T::zero(); p.kernel.len()];
            let mut gb = vec![T::zero(); p.out_channels];
            tconv2_backward_slices(xi, x.h, x.w, p, go, gx, &mut gk, &mut gb);
            (gk, gb)
        })
        .collect();
    let (gk, gb) = reduce_weight_grads(per_example, p);
    (grad_x, gk, gb)
}

fn reduce_weight_grads<T: Real>(
    per_example: Vec<(Vec<T>, Vec<T>)>,
    p: &ConvParams<T>,
) -> (Vec<T>, Vec<T>) {
    let mut gk = vec![T::zero(); p.kernel.len()];
    let mut gb = vec![T::zero(); p.out_channels];
    for (ek, eb) in per_example {
        for (a, v) in gk.iter_mut().zip(ek) {
            *a += v;
        }
        for (a, v) in gb.iter_mut().zip(eb) {
            *a += v;
        }
    }
    (gk, gb)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MTNW";
const FORMAT_VERSION: u32 = 1;

/// Layer-kind tags in the model file. Tag 5 marks a convolution block whose
/// batch normalization was disabled by configuration; the standard presets
/// only ever use 1–4.
const TAG_CONV: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_TCONV: u8 = 3;
const TAG_TERMINAL: u8 = 4;
const TAG_CONV_NO_BN: u8 = 5;

impl Model<f32> {
    /// Write the model in the little-endian `MTNW` format: header (magic,
    /// format version, architecture id, class count, layer count), then per
    /// parameterized layer a kind tag, four u32 shape dims and the raw f32
    /// arrays — kernel, bias, and for batch-normalized blocks γ, β,
    /// running_mean, running_var. Running statistics make a loaded model
    /// self-contained for inference, so `load` marks them initialized; save
    /// after at least one training step for an exact round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[self.spec.name.id(), self.spec.num_classes]).map_err(io)?;
        w.write_all(&(self.layers.len() as u16).to_le_bytes()).map_err(io)?;
        let plan = self.spec.channel_plan();
        for (layer, &(cin, cout)) in self.layers.iter().zip(&plan) {
            match layer {
                LayerParams::MaxPool => {
                    w.write_all(&[TAG_MAXPOOL]).map_err(io)?;
                    write_dims(&mut w, [2, 2, 0, 0]).map_err(io)?;
                }
                LayerParams::Conv { conv, bn } => {
                    let tag = if bn.is_some() { TAG_CONV } else { TAG_CONV_NO_BN };
                    w.write_all(&[tag]).map_err(io)?;
                    write_dims(&mut w, [conv.kernel_size as u32, conv.kernel_size as u32, cin as u32, cout as u32])
                        .map_err(io)?;
                    write_f32s(&mut w, &conv.kernel).map_err(io)?;
                    write_f32s(&mut w, &conv.bias).map_err(io)?;
                    if let Some(bn) = bn {
                        write_f32s(&mut w, &bn.gamma).map_err(io)?;
                        write_f32s(&mut w, &bn.beta).map_err(io)?;
                        write_f32s(&mut w, &bn.running_mean).map_err(io)?;
                        write_f32s(&mut w, &bn.running_var).map_err(io)?;
                    }
                }
                LayerParams::TConv(conv) | LayerParams::TerminalConv(conv) => {
                    let tag = if matches!(layer, LayerParams::TConv(_)) { TAG_TCONV } else { TAG_TERMINAL };
                    w.write_all(&[tag]).map_err(io)?;
                    write_dims(&mut w, [conv.kernel_size as u32, conv.kernel_size as u32, cin as u32, cout as u32])
                        .map_err(io)?;
                    write_f32s(&mut w, &conv.kernel).map_err(io)?;
                    write_f32s(&mut w, &conv.bias).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    /// Read a model written by `save`. When `expected` names an architecture,
    /// a file holding a different one is rejected.
    pub fn load(path: &Path, expected: Option<ArchId>) -> Result<Model<f32>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { inner: BufReader::new(file), offset: 0 };
        let magic = r.bytes::<4>("magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "magic".to_string(),
                offset: 0,
                detail: format!("expected {MAGIC:?}, found {magic:?}"),
            });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "format version".to_string(),
                offset: 4,
                detail: format!("expected {FORMAT_VERSION}, found {version}"),
            });
        }
        let arch_byte = r.bytes::<1>("architecture id")?[0];
        let name = ArchId::from_id(arch_byte).ok_or_else(|| Error::Format {
            what: "architecture id".to_string(),
            offset: 8,
            detail: format!("unknown architecture id {arch_byte}"),
        })?;
        let num_classes = r.bytes::<1>("class count")?[0];
        let n_layers = u16::from_le_bytes(r.bytes::<2>("layer count")?) as usize;
        if let Some(want) = expected {
            if want != name {
                return Err(Error::invalid(
                    "Model::load",
                    format!("file holds {name}, expected {want}"),
                ));
            }
        }

        let mut spec = NetworkSpec::build(name, num_classes)?;
        if n_layers != spec.layers.len() {
            return Err(Error::Format {
                what: "layer count".to_string(),
                offset: 10,
                detail: format!("{name} has {} layers, file claims {n_layers}", spec.layers.len()),
            });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let tag_offset = r.offset;
            let tag = r.bytes::<1>("layer tag")?[0];
            let dims = [
                r.u32("shape dim")?,
                r.u32("shape dim")?,
                r.u32("shape dim")?,
                r.u32("shape dim")?,
            ];
            let l = &mut spec.layers[i];
            let expect_tag = match l.kind {
                LayerKind::Conv => {
                    if tag == TAG_CONV_NO_BN {
                        l.has_batchnorm = false;
                    }
                    if l.has_batchnorm { TAG_CONV } else { TAG_CONV_NO_BN }
                }
                LayerKind::MaxPool => TAG_MAXPOOL,
                LayerKind::TConv => TAG_TCONV,
                LayerKind::TerminalConv => TAG_TERMINAL,
            };
            if tag != expect_tag {
                return Err(Error::Format {
                    what: format!("layer {i} tag"),
                    offset: tag_offset,
                    detail: format!("expected tag {expect_tag} for {name}, found {tag}"),
                });
            }
            if l.kind == LayerKind::MaxPool {
                layers.push(LayerParams::MaxPool);
                continue;
            }
            let (n, cin, cout) = (dims[0] as usize, dims[2] as usize, dims[3] as usize);
            if dims[1] as usize != n || n != l.kernel_size {
                return Err(Error::Format {
                    what: format!("layer {i} kernel size"),
                    offset: tag_offset,
                    detail: format!("expected {0}x{0}, found {1}x{2}", l.kernel_size, dims[0], dims[1]),
                });
            }
            let kernel = r.f32s(n * n * cin * cout, "kernel")?;
            let bias = r.f32s(cout, "bias")?;
            let conv = ConvParams::new(kernel, bias, n, cin, cout)?;
            layers.push(match l.kind {
                LayerKind::Conv => {
                    let bn = if l.has_batchnorm {
                        let mut bn = BatchNormParams::new(cout, BN_EPSILON as f32);
                        bn.gamma = r.f32s(cout, "gamma")?;
                        bn.beta = r.f32s(cout, "beta")?;
                        bn.running_mean = r.f32s(cout, "running_mean")?;
                        bn.running_var = r.f32s(cout, "running_var")?;
                        bn.initialized = true;
                        Some(bn)
                    } else {
                        None
                    };
                    LayerParams::Conv { conv, bn }
                }
                LayerKind::TConv => LayerParams::TConv(conv),
                LayerKind::TerminalConv => LayerParams::TerminalConv(conv),
                LayerKind::MaxPool => unreachable!("handled above"),
            });
        }
        let model = Model { spec, layers, rng_seed: 0 };
        validate_loaded(&model)?;
        Ok(model)
    }
}

/// Cross-check the loaded parameter shapes against the named architecture.
fn validate_loaded(m: &Model<f32>) -> Result<()> {
    let plan = m.spec.channel_plan();
    for (i, (layer, &(cin, cout))) in m.layers.iter().zip(&plan).enumerate() {
        let conv = match layer {
            LayerParams::MaxPool => continue,
            LayerParams::Conv { conv, .. } => conv,
            LayerParams::TConv(conv) | LayerParams::TerminalConv(conv) => conv,
        };
        if conv.in_channels != cin || conv.out_channels != cout {
            return Err(Error::Format {
                what: format!("layer {i} channels"),
                offset: 0,
                detail: format!(
                    "file has {}→{}, {} expects {cin}→{cout}",
                    conv.in_channels, conv.out_channels, m.spec.name
                ),
            });
        }
    }
    Ok(())
}

fn write_dims<W: Write>(w: &mut W, dims: [u32; 4]) -> std::io::Result<()> {
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> std::io::Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            what: what.to_string(),
            offset: self.offset,
            detail: format!("read failed: {e}"),
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let mut buf = vec![0u8; 4 * n];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            what: what.to_string(),
            offset: start,
            detail: format!("expected {n} f32 values: {e}"),
        })?;
        self.offset += 4 * n;
        Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }
}
