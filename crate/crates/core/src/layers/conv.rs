//! Stride-1 2D convolution with zero "same" padding of (n−1)/2.
//!
//! Each output pixel is the sum over input channels of the dot product of the
//! n×n window with that channel's weight matrix, plus the output channel's
//! bias. Accumulation order per output scalar is fixed: bias first, then taps
//! in ascending (kh, kw, in-channel) order — out-of-bounds taps are skipped,
//! which is arithmetically identical to multiplying by the zero padding.
//!
//! The hot loop processes output channels in register-sized blocks so the
//! accumulators live in vector registers; the per-scalar order is the same in
//! every path.

use super::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

/// Output channels per accumulator block (two AVX2 vectors of f32).
pub(crate) const BLK: usize = 16;
/// Smaller block for channel counts in [8, 16).
pub(crate) const BLK_S: usize = 8;

pub fn conv2d_forward<T: Real>(x: &Tensor3<T>, p: &ConvParams<T>) -> Result<Tensor3<T>> {
    check_conv_args("conv2d_forward", x, p)?;
    let mut out = Tensor3::zeros(x.h, x.w, p.out_channels);
    conv2d_forward_slice(&x.data, x.h, x.w, p, &mut out.data);
    Ok(out)
}

/// Gradients of the forward map: returns (grad_x, grad_kernel, grad_bias).
pub fn conv2d_backward<T: Real>(
    x: &Tensor3<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor3<T>,
) -> Result<(Tensor3<T>, Vec<T>, Vec<T>)> {
    check_conv_args("conv2d_backward", x, p)?;
    if grad_out.h != x.h || grad_out.w != x.w || grad_out.c != p.out_channels {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out is {}x{}x{}, expected {}x{}x{}",
                grad_out.h, grad_out.w, grad_out.c, x.h, x.w, p.out_channels
            ),
        ));
    }
    let mut grad_x = x.zeros_like();
    let mut grad_kernel = vec![T::zero(); p.kernel.len()];
    let mut grad_bias = vec![T::zero(); p.out_channels];
    conv2d_backward_slices(
        &x.data,
        x.h,
        x.w,
        p,
        &grad_out.data,
        &mut grad_x.data,
        &mut grad_kernel,
        &mut grad_bias,
    );
    Ok((grad_x, grad_kernel, grad_bias))
}

fn check_conv_args<T: Real>(op: &'static str, x: &Tensor3<T>, p: &ConvParams<T>) -> Result<()> {
    if x.c != p.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {}", x.c, p.in_channels),
        ));
    }
    if p.kernel_size % 2 == 0 {
        return Err(Error::invalid(
            op,
            format!("kernel size {} must be odd for same-padding convolution", p.kernel_size),
        ));
    }
    Ok(())
}

/// Forward kernel on raw slices; `out` must hold `h·w·out_channels` scalars.
///
/// Interior pixels (full horizontal kernel extent) go through a 4-pixel ×
/// 16-channel register-blocked micro-kernel; borders and channel remainders
/// fall back to a single-pixel path. Every path adds terms in the same
/// per-scalar order, so the result is identical to the naive oracle.
pub(crate) fn conv2d_forward_slice<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    p: &ConvParams<T>,
    out: &mut [T],
) {
    let n = p.kernel_size;
    let pad = (n - 1) / 2;
    let (cin, cout) = (p.in_channels, p.out_channels);
    debug_assert_eq!(x.len(), h * w * cin);
    debug_assert_eq!(out.len(), h * w * cout);

    // interior columns where ox..ox+3 all see the full kx range:
    // ox >= pad and ox + 3 <= w - 1 - pad
    let quad_lo = pad;
    let quad_end = w.saturating_sub(pad + 3); // exclusive upper bound on ox

    for oy in 0..h {
        let ky_lo = pad.saturating_sub(oy);
        let ky_hi = n.min(h + pad - oy);
        let mut ox = 0;
        while ox < w {
            if ox >= quad_lo && ox < quad_end && cout >= BLK_S {
                let mut co = 0;
                while co + BLK <= cout {
                    conv_quad_block::<T, BLK>(x, w, cin, cout, p, oy, ox, pad, ky_lo, ky_hi, co, out);
                    co += BLK;
                }
                while co + BLK_S <= cout {
                    conv_quad_block::<T, BLK_S>(x, w, cin, cout, p, oy, ox, pad, ky_lo, ky_hi, co, out);
                    co += BLK_S;
                }
                for co in co..cout {
                    for px in 0..4 {
                        conv_pixel_scalar(x, w, cin, cout, p, oy, ox + px, pad, ky_lo, ky_hi, co, out);
                    }
                }
                ox += 4;
            } else {
                let kx_lo = pad.saturating_sub(ox);
                let kx_hi = n.min(w + pad - ox);
                let opix = (oy * w + ox) * cout;
                let mut co = 0;
                while co + BLK <= cout {
                    conv_pixel_block::<T, BLK>(x, w, cin, cout, p, oy, ox, pad, ky_lo, ky_hi, kx_lo, kx_hi, co, &mut out[opix + co..opix + co + BLK]);
                    co += BLK;
                }
                while co + BLK_S <= cout {
                    conv_pixel_block::<T, BLK_S>(x, w, cin, cout, p, oy, ox, pad, ky_lo, ky_hi, kx_lo, kx_hi, co, &mut out[opix + co..opix + co + BLK_S]);
                    co += BLK_S;
                }
                for co in co..cout {
                    conv_pixel_scalar(x, w, cin, cout, p, oy, ox, pad, ky_lo, ky_hi, co, out);
                }
                ox += 1;
            }
        }
    }
}

/// Four adjacent interior output pixels, `B` consecutive output channels.
/// The weight row is loaded once per (tap, in-channel) and reused for all
/// four pixels; accumulators stay in registers.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_quad_block<T: Real, const B: usize>(
    x: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    p: &ConvParams<T>,
    oy: usize,
    ox: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    co: usize,
    out: &mut [T],
) {
    let n = p.kernel_size;
    let mut a0 = [T::zero(); B];
    let mut a1 = [T::zero(); B];
    let mut a2 = [T::zero(); B];
    let mut a3 = [T::zero(); B];
    a0.copy_from_slice(&p.bias[co..co + B]);
    a1.copy_from_slice(&p.bias[co..co + B]);
    a2.copy_from_slice(&p.bias[co..co + B]);
    a3.copy_from_slice(&p.bias[co..co + B]);
    for ky in ky_lo..ky_hi {
        let iy = oy + ky - pad;
        for kx in 0..n {
            let xbase = (iy * w + ox + kx - pad) * cin;
            let xquad = &x[xbase..xbase + 3 * cin + cin];
            let wtap = &p.kernel[(ky * n + kx) * cin * cout + co..];
            for ci in 0..cin {
                let wrow = &wtap[ci * cout..][..B];
                let x0 = xquad[ci];
                let x1 = xquad[cin + ci];
                let x2 = xquad[2 * cin + ci];
                let x3 = xquad[3 * cin + ci];
                for k in 0..B {
                    let wv = wrow[k];
                    a0[k] = wv.mul_add(x0, a0[k]);
                    a1[k] = wv.mul_add(x1, a1[k]);
                    a2[k] = wv.mul_add(x2, a2[k]);
                    a3[k] = wv.mul_add(x3, a3[k]);
                }
            }
        }
    }
    let opix = (oy * w + ox) * cout + co;
    out[opix..opix + B].copy_from_slice(&a0);
    out[opix + cout..opix + cout + B].copy_from_slice(&a1);
    out[opix + 2 * cout..opix + 2 * cout + B].copy_from_slice(&a2);
    out[opix + 3 * cout..opix + 3 * cout + B].copy_from_slice(&a3);
}

/// One output pixel, `B` consecutive output channels starting at `co`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_pixel_block<T: Real, const B: usize>(
    x: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    p: &ConvParams<T>,
    oy: usize,
    ox: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    kx_lo: usize,
    kx_hi: usize,
    co: usize,
    out: &mut [T],
) {
    let n = p.kernel_size;
    let mut acc = [T::zero(); B];
    acc.copy_from_slice(&p.bias[co..co + B]);
    for ky in ky_lo..ky_hi {
        let iy = oy + ky - pad;
        for kx in kx_lo..kx_hi {
            let ix = ox + kx - pad;
            let xpix = &x[(iy * w + ix) * cin..][..cin];
            let wbase = (ky * n + kx) * cin * cout + co;
            for (ci, &xv) in xpix.iter().enumerate() {
                let wrow = &p.kernel[wbase + ci * cout..][..B];
                for k in 0..B {
                    acc[k] = wrow[k].mul_add(xv, acc[k]);
                }
            }
        }
    }
    out.copy_from_slice(&acc);
}

/// One output pixel, one output channel (remainder path).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_pixel_scalar<T: Real>(
    x: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    p: &ConvParams<T>,
    oy: usize,
    ox: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    co: usize,
    out: &mut [T],
) {
    let n = p.kernel_size;
    let kx_lo = pad.saturating_sub(ox);
    let kx_hi = n.min(w + pad - ox);
    let mut acc = p.bias[co];
    for ky in ky_lo..ky_hi {
        let iy = oy + ky - pad;
        for kx in kx_lo..kx_hi {
            let ix = ox + kx - pad;
            let xpix = &x[(iy * w + ix) * cin..][..cin];
            let wbase = (ky * n + kx) * cin * cout + co;
            for (ci, &xv) in xpix.iter().enumerate() {
                acc = p.kernel[wbase + ci * cout].mul_add(xv, acc);
            }
        }
    }
    out[(oy * w + ox) * cout + co] = acc;
}

/// Backward kernel on raw slices. Adds nothing to its outputs' prior contents
/// — the caller passes zeroed buffers (or accumulates across examples by
/// summing per-example results).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_slices<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    p: &ConvParams<T>,
    grad_out: &[T],
    grad_x: &mut [T],
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let n = p.kernel_size;
    let pad = (n - 1) / 2;
    let (cin, cout) = (p.in_channels, p.out_channels);

    // grad_bias[co] = Σ_pixels grad_out[.., co]
    for gpix in grad_out.chunks_exact(cout) {
        for (gb, &g) in grad_bias.iter_mut().zip(gpix) {
            *gb += g;
        }
    }

    // grad_kernel[kh,kw,ci,co] = Σ_pixels x[iy,ix,ci] · grad_out[oy,ox,co].
    // Per tap, a 4×B tile (4 in-channels × B out-channels) accumulates in
    // registers across the whole pixel sweep, then lands in grad_kernel once.
    for ky in 0..n {
        for kx in 0..n {
            let oy_lo = pad.saturating_sub(ky);
            let oy_hi = h.min((h + pad).saturating_sub(ky));
            let ox_lo = pad.saturating_sub(kx);
            let ox_hi = w.min((w + pad).saturating_sub(kx));
            let gk_tap = &mut grad_kernel[(ky * n + kx) * cin * cout..][..cin * cout];
            let mut co = 0;
            while co + BLK <= cout {
                gradk_tap_block::<T, BLK>(x, grad_out, w, cin, cout, ky, kx, pad, oy_lo, oy_hi, ox_lo, ox_hi, co, gk_tap);
                co += BLK;
            }
            while co + BLK_S <= cout {
                gradk_tap_block::<T, BLK_S>(x, grad_out, w, cin, cout, ky, kx, pad, oy_lo, oy_hi, ox_lo, ox_hi, co, gk_tap);
                co += BLK_S;
            }
            for co in co..cout {
                for ci in 0..cin {
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        for ox in ox_lo..ox_hi {
                            let ix = ox + kx - pad;
                            let xv = x[(iy * w + ix) * cin + ci];
                            let g = grad_out[(oy * w + ox) * cout + co];
                            acc = g.mul_add(xv, acc);
                        }
                    }
                    gk_tap[ci * cout + co] += acc;
                }
            }
        }
    }

    // grad_x[iy,ix,ci] = Σ_{kh,kw,co} grad_out[iy−kh+pad, ix−kw+pad, co] · K[kh,kw,ci,co].
    // Transposing the kernel tap to (co, ci) makes the inner run over ci
    // contiguous, mirroring the forward loop structure.
    let mut kt = vec![T::zero(); p.kernel.len()];
    for tap in 0..n * n {
        let src = &p.kernel[tap * cin * cout..][..cin * cout];
        let dst = &mut kt[tap * cin * cout..][..cin * cout];
        for ci in 0..cin {
            for co in 0..cout {
                dst[co * cin + ci] = src[ci * cout + co];
            }
        }
    }
    let quad_lo = pad;
    let quad_end = w.saturating_sub(pad + 3);
    for iy in 0..h {
        // valid kh: output row oy = iy − kh + pad must lie in [0, h)
        let ky_lo = (iy + pad + 1).saturating_sub(h);
        let ky_hi = n.min(iy + pad + 1);
        let mut ix = 0;
        while ix < w {
            if ix >= quad_lo && ix < quad_end && cin >= BLK_S {
                let mut ci = 0;
                while ci + BLK <= cin {
                    gradx_quad_block::<T, BLK>(grad_out, w, cin, cout, &kt, n, iy, ix, pad, ky_lo, ky_hi, ci, grad_x);
                    ci += BLK;
                }
                while ci + BLK_S <= cin {
                    gradx_quad_block::<T, BLK_S>(grad_out, w, cin, cout, &kt, n, iy, ix, pad, ky_lo, ky_hi, ci, grad_x);
                    ci += BLK_S;
                }
                for ci in ci..cin {
                    for px in 0..4 {
                        gradx_pixel_scalar(grad_out, w, cin, cout, &kt, n, iy, ix + px, pad, ky_lo, ky_hi, ci, grad_x);
                    }
                }
                ix += 4;
            } else {
                let kx_lo = (ix + pad + 1).saturating_sub(w);
                let kx_hi = n.min(ix + pad + 1);
                let gx_base = (iy * w + ix) * cin;
                let mut ci = 0;
                while ci + BLK <= cin {
                    gradx_pixel_block::<T, BLK>(grad_out, w, cin, cout, &kt, n, iy, ix, pad, ky_lo, ky_hi, kx_lo, kx_hi, ci, &mut grad_x[gx_base + ci..gx_base + ci + BLK]);
                    ci += BLK;
                }
                while ci + BLK_S <= cin {
                    gradx_pixel_block::<T, BLK_S>(grad_out, w, cin, cout, &kt, n, iy, ix, pad, ky_lo, ky_hi, kx_lo, kx_hi, ci, &mut grad_x[gx_base + ci..gx_base + ci + BLK_S]);
                    ci += BLK_S;
                }
                for ci in ci..cin {
                    gradx_pixel_scalar(grad_out, w, cin, cout, &kt, n, iy, ix, pad, ky_lo, ky_hi, ci, grad_x);
                }
                ix += 1;
            }
        }
    }
}

/// Per-tap grad_kernel tile: `4 × B` register accumulators swept over every
/// contributing pixel pair, added to `gk_tap` once at the end.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gradk_tap_block<T: Real, const B: usize>(
    x: &[T],
    grad_out: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    oy_lo: usize,
    oy_hi: usize,
    ox_lo: usize,
    ox_hi: usize,
    co: usize,
    gk_tap: &mut [T],
) {
    let mut ci = 0;
    while ci + 4 <= cin {
        let mut a0 = [T::zero(); B];
        let mut a1 = [T::zero(); B];
        let mut a2 = [T::zero(); B];
        let mut a3 = [T::zero(); B];
        for oy in oy_lo..oy_hi {
            let iy = oy + ky - pad;
            for ox in ox_lo..ox_hi {
                let ix = ox + kx - pad;
                let xp = &x[(iy * w + ix) * cin + ci..][..4];
                let g = &grad_out[(oy * w + ox) * cout + co..][..B];
                let (x0, x1, x2, x3) = (xp[0], xp[1], xp[2], xp[3]);
                for k in 0..B {
                    let gv = g[k];
                    a0[k] = gv.mul_add(x0, a0[k]);
                    a1[k] = gv.mul_add(x1, a1[k]);
                    a2[k] = gv.mul_add(x2, a2[k]);
                    a3[k] = gv.mul_add(x3, a3[k]);
                }
            }
        }
        for (j, row) in [a0, a1, a2, a3].iter().enumerate() {
            let gk_row = &mut gk_tap[(ci + j) * cout + co..][..B];
            for k in 0..B {
                gk_row[k] += row[k];
            }
        }
        ci += 4;
    }
    while ci < cin {
        let mut acc = [T::zero(); B];
        for oy in oy_lo..oy_hi {
            let iy = oy + ky - pad;
            for ox in ox_lo..ox_hi {
                let ix = ox + kx - pad;
                let xv = x[(iy * w + ix) * cin + ci];
                let g = &grad_out[(oy * w + ox) * cout + co..][..B];
                for k in 0..B {
                    acc[k] = g[k].mul_add(xv, acc[k]);
                }
            }
        }
        let gk_row = &mut gk_tap[ci * cout + co..][..B];
        for k in 0..B {
            gk_row[k] += acc[k];
        }
        ci += 1;
    }
}

/// Four adjacent interior input pixels, `B` consecutive channels of grad_x.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gradx_quad_block<T: Real, const B: usize>(
    grad_out: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    kt: &[T],
    n: usize,
    iy: usize,
    ix: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    ci: usize,
    grad_x: &mut [T],
) {
    let mut a0 = [T::zero(); B];
    let mut a1 = [T::zero(); B];
    let mut a2 = [T::zero(); B];
    let mut a3 = [T::zero(); B];
    for ky in ky_lo..ky_hi {
        let oy = iy + pad - ky;
        for kx in 0..n {
            let ox = ix + pad - kx;
            let gbase = (oy * w + ox) * cout;
            let gquad = &grad_out[gbase..gbase + 3 * cout + cout];
            let kt_tap = &kt[(ky * n + kx) * cin * cout + ci..];
            for co in 0..cout {
                let krow = &kt_tap[co * cin..][..B];
                let g0 = gquad[co];
                let g1 = gquad[cout + co];
                let g2 = gquad[2 * cout + co];
                let g3 = gquad[3 * cout + co];
                for k in 0..B {
                    let kv = krow[k];
                    a0[k] = kv.mul_add(g0, a0[k]);
                    a1[k] = kv.mul_add(g1, a1[k]);
                    a2[k] = kv.mul_add(g2, a2[k]);
                    a3[k] = kv.mul_add(g3, a3[k]);
                }
            }
        }
    }
    let base = (iy * w + ix) * cin + ci;
    grad_x[base..base + B].copy_from_slice(&a0);
    grad_x[base + cin..base + cin + B].copy_from_slice(&a1);
    grad_x[base + 2 * cin..base + 2 * cin + B].copy_from_slice(&a2);
    grad_x[base + 3 * cin..base + 3 * cin + B].copy_from_slice(&a3);
}

/// One grad_x pixel, one channel (remainder path).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gradx_pixel_scalar<T: Real>(
    grad_out: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    kt: &[T],
    n: usize,
    iy: usize,
    ix: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    ci: usize,
    grad_x: &mut [T],
) {
    let kx_lo = (ix + pad + 1).saturating_sub(w);
    let kx_hi = n.min(ix + pad + 1);
    let mut acc = T::zero();
    for ky in ky_lo..ky_hi {
        let oy = iy + pad - ky;
        for kx in kx_lo..kx_hi {
            let ox = ix + pad - kx;
            let gpix = &grad_out[(oy * w + ox) * cout..][..cout];
            let kt_tap = &kt[(ky * n + kx) * cin * cout..];
            for (co, &g) in gpix.iter().enumerate() {
                acc = kt_tap[co * cin + ci].mul_add(g, acc);
            }
        }
    }
    grad_x[(iy * w + ix) * cin + ci] = acc;
}

/// One input pixel, `B` consecutive input channels of grad_x.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gradx_pixel_block<T: Real, const B: usize>(
    grad_out: &[T],
    w: usize,
    cin: usize,
    cout: usize,
    kt: &[T],
    n: usize,
    iy: usize,
    ix: usize,
    pad: usize,
    ky_lo: usize,
    ky_hi: usize,
    kx_lo: usize,
    kx_hi: usize,
    ci: usize,
    out: &mut [T],
) {
    let mut acc = [T::zero(); B];
    for ky in ky_lo..ky_hi {
        let oy = iy + pad - ky;
        for kx in kx_lo..kx_hi {
            let ox = ix + pad - kx;
            let gpix = &grad_out[(oy * w + ox) * cout..][..cout];
            let kt_tap = &kt[(ky * n + kx) * cin * cout + ci..];
            for (co, &g) in gpix.iter().enumerate() {
                let krow = &kt_tap[co * cin..][..B];
                for k in 0..B {
                    acc[k] = krow[k].mul_add(g, acc[k]);
                }
            }
        }
    }
    out.copy_from_slice(&acc);
}
