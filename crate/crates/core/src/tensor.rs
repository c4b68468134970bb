//! Dense real-valued arrays with the indexing, padding, and reduction
//! primitives every layer needs.
//!
//! Memory order is fixed and canonical everywhere in the crate:
//! [`Tensor3`] stores row-major by height, then width, then channel, i.e.
//! `data[(y*w + x)*c + ch]`; [`Tensor4`] puts the batch dimension outermost,
//! `data[((b*h + y)*w + x)*c + ch]`. Serialization and the brute-force test
//! oracles both rely on this order.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type for all numeric kernels. Training instantiates `f32`; the
/// gradient-check and brute-force oracles instantiate `f64`.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Default
    + Debug
    + Display
    + LowerExp
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Single feature map stack: `h × w` pixels with `c` channels, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T: Real> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        assert!(h >= 1 && w >= 1 && c >= 1, "Tensor3 dims must be >= 1, got {h}x{w}x{c}");
        Tensor3 { h, w, c, data: vec![T::zero(); h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if h < 1 || w < 1 || c < 1 {
            return Err(Error::invalid("Tensor3::from_vec", format!("dims must be >= 1, got {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(
                "Tensor3::from_vec",
                format!("data length {} != h*w*c = {}", data.len(), h * w * c),
            ));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    #[inline(always)]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(y, x, ch)]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    /// Contiguous channel slice at one pixel.
    #[inline(always)]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    /// Same shape, zeros everywhere.
    pub fn zeros_like(&self) -> Self {
        Tensor3::zeros(self.h, self.w, self.c)
    }

    /// Copy surrounded by a zero border of `pad_h` rows and `pad_w` cols on
    /// each side.
    pub fn zero_pad(&self, pad_h: usize, pad_w: usize) -> Self {
        let mut out = Tensor3::zeros(self.h + 2 * pad_h, self.w + 2 * pad_w, self.c);
        let row_len = self.w * self.c;
        for y in 0..self.h {
            let src = y * row_len;
            let dst = ((y + pad_h) * out.w + pad_w) * self.c;
            out.data[dst..dst + row_len].copy_from_slice(&self.data[src..src + row_len]);
        }
        out
    }

    /// Interior crop starting at (`off_h`, `off_w`) of size `h × w`; the
    /// inverse of [`zero_pad`](Self::zero_pad).
    pub fn crop(&self, off_h: usize, off_w: usize, h: usize, w: usize) -> Result<Self> {
        if off_h + h > self.h || off_w + w > self.w {
            return Err(Error::shape(
                "Tensor3::crop",
                format!(
                    "crop {h}x{w} at ({off_h},{off_w}) exceeds tensor {}x{}",
                    self.h, self.w
                ),
            ));
        }
        let mut out = Tensor3::zeros(h, w, self.c);
        let row_len = w * self.c;
        for y in 0..h {
            let src = ((y + off_h) * self.w + off_w) * self.c;
            let dst = y * row_len;
            out.data[dst..dst + row_len].copy_from_slice(&self.data[src..src + row_len]);
        }
        Ok(out)
    }
}

/// Mini-batch of feature map stacks; batch dimension outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Real> {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        assert!(b >= 1 && h >= 1 && w >= 1 && c >= 1, "Tensor4 dims must be >= 1, got {b}x{h}x{w}x{c}");
        Tensor4 { b, h, w, c, data: vec![T::zero(); b * h * w * c] }
    }

    pub fn from_vec(b: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if b < 1 || h < 1 || w < 1 || c < 1 {
            return Err(Error::invalid("Tensor4::from_vec", format!("dims must be >= 1, got {b}x{h}x{w}x{c}")));
        }
        if data.len() != b * h * w * c {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("data length {} != b*h*w*c = {}", data.len(), b * h * w * c),
            ));
        }
        Ok(Tensor4 { b, h, w, c, data })
    }

    /// Stack single-example tensors (all the same shape) into a batch.
    pub fn from_examples(examples: &[Tensor3<T>]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("Tensor4::from_examples", "empty example list"))?;
        let (h, w, c) = (first.h, first.w, first.c);
        let mut data = Vec::with_capacity(examples.len() * h * w * c);
        for (i, ex) in examples.iter().enumerate() {
            if ex.h != h || ex.w != w || ex.c != c {
                return Err(Error::shape(
                    "Tensor4::from_examples",
                    format!("example {i} is {}x{}x{}, expected {h}x{w}x{c}", ex.h, ex.w, ex.c),
                ));
            }
            data.extend_from_slice(&ex.data);
        }
        Ok(Tensor4 { b: examples.len(), h, w, c, data })
    }

    #[inline(always)]
    pub fn idx(&self, b: usize, y: usize, x: usize, ch: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline(always)]
    pub fn get(&self, b: usize, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(b, y, x, ch)]
    }

    /// Example stride in scalars.
    #[inline(always)]
    pub fn example_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Borrow one example's data.
    #[inline(always)]
    pub fn example(&self, b: usize) -> &[T] {
        let n = self.example_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Copy one example out as a `Tensor3`.
    pub fn example_tensor(&self, b: usize) -> Tensor3<T> {
        Tensor3 { h: self.h, w: self.w, c: self.c, data: self.example(b).to_vec() }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor4::zeros(self.b, self.h, self.w, self.c)
    }
}

/// Per-channel mean and population variance over the batch, height, and width
/// dimensions (the reduction batch normalization needs). Accumulates in `f64`
/// regardless of `T` so the `f32` training path stays numerically stable.
pub fn reduce_mean_var<T: Real>(t: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let c = t.c;
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    for px in t.data.chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let v = v.as_f64();
            sum[ch] += v;
            sum_sq[ch] += v * v;
        }
    }
    let m = (t.b * t.h * t.w) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let mu = sum[ch] / m;
        // E[p^2] - mean^2; clamp tiny negative results of cancellation to 0.
        let v = (sum_sq[ch] / m - mu * mu).max(0.0);
        mean.push(T::from_f64(mu));
        var.push(T::from_f64(v));
    }
    (mean, var)
}
