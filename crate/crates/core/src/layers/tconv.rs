//! 2×2 stride-2 transpose convolution (the upsampling counterpart of max
//! pooling). Each input pixel scales the 2×2 weight matrix and the product is
//! placed at stride-2 offsets; with stride = kernel size the placements tile
//! the output exactly, so no two input pixels overlap. Per-input-channel
//! products are summed per output channel and the bias is added once per
//! output pixel.

use super::conv::{BLK, BLK_S};
use super::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

pub fn tconv2_forward<T: Real>(x: &Tensor3<T>, p: &ConvParams<T>) -> Result<Tensor3<T>> {
    check_tconv_args("tconv2_forward", x, p)?;
    let mut out = Tensor3::zeros(2 * x.h, 2 * x.w, p.out_channels);
    tconv2_forward_slice(&x.data, x.h, x.w, p, &mut out.data);
    Ok(out)
}

pub fn tconv2_backward<T: Real>(
    x: &Tensor3<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor3<T>,
) -> Result<(Tensor3<T>, Vec<T>, Vec<T>)> {
    check_tconv_args("tconv2_backward", x, p)?;
    if grad_out.h != 2 * x.h || grad_out.w != 2 * x.w || grad_out.c != p.out_channels {
        return Err(Error::shape(
            "tconv2_backward",
            format!(
                "grad_out is {}x{}x{}, expected {}x{}x{}",
                grad_out.h, grad_out.w, grad_out.c, 2 * x.h, 2 * x.w, p.out_channels
            ),
        ));
    }
    let mut grad_x = x.zeros_like();
    let mut grad_kernel = vec![T::zero(); p.kernel.len()];
    let mut grad_bias = vec![T::zero(); p.out_channels];
    tconv2_backward_slices(&x.data, x.h, x.w, p, &grad_out.data, &mut grad_x.data, &mut grad_kernel, &mut grad_bias);
    Ok((grad_x, grad_kernel, grad_bias))
}

fn check_tconv_args<T: Real>(op: &'static str, x: &Tensor3<T>, p: &ConvParams<T>) -> Result<()> {
    if x.c != p.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {}", x.c, p.in_channels),
        ));
    }
    if p.kernel_size != 2 {
        return Err(Error::invalid(
            op,
            format!("transpose convolution requires kernel size 2, got {}", p.kernel_size),
        ));
    }
    Ok(())
}

/// Forward kernel on raw slices; `out` must hold `2h·2w·out_channels` scalars.
/// Per output scalar the order is: bias, then input channels ascending.
pub(crate) fn tconv2_forward_slice<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    p: &ConvParams<T>,
    out: &mut [T],
) {
    let (cin, cout) = (p.in_channels, p.out_channels);
    let w2 = 2 * w;
    for iy in 0..h {
        for ix in 0..w {
            let xpix = &x[(iy * w + ix) * cin..][..cin];
            for ky in 0..2 {
                for kx in 0..2 {
                    let opix = ((2 * iy + ky) * w2 + 2 * ix + kx) * cout;
                    let opix = &mut out[opix..opix + cout];
                    opix.copy_from_slice(&p.bias);
                    let wbase = (ky * 2 + kx) * cin * cout;
                    for (ci, &xv) in xpix.iter().enumerate() {
                        let wrow = &p.kernel[wbase + ci * cout..][..cout];
                        for (o, &wv) in opix.iter_mut().zip(wrow) {
                            *o = wv.mul_add(xv, *o);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv2_backward_slices<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    p: &ConvParams<T>,
    grad_out: &[T],
    grad_x: &mut [T],
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let (cin, cout) = (p.in_channels, p.out_channels);
    let w2 = 2 * w;

    for gpix in grad_out.chunks_exact(cout) {
        for (gb, &g) in grad_bias.iter_mut().zip(gpix) {
            *gb += g;
        }
    }

    // grad_kernel[ky,kx,ci,co] = Σ_{iy,ix} x[iy,ix,ci] · grad_out[2iy+ky, 2ix+kx, co].
    // Per tap, a 4×B register tile sweeps all pixels before touching memory.
    for ky in 0..2 {
        for kx in 0..2 {
            let gk_tap = &mut grad_kernel[(ky * 2 + kx) * cin * cout..][..cin * cout];
            let mut co = 0;
            while co + BLK <= cout {
                tconv_gradk_tap_block::<T, BLK>(x, grad_out, h, w, cin, cout, ky, kx, co, gk_tap);
                co += BLK;
            }
            while co + BLK_S <= cout {
                tconv_gradk_tap_block::<T, BLK_S>(x, grad_out, h, w, cin, cout, ky, kx, co, gk_tap);
                co += BLK_S;
            }
            for co in co..cout {
                for ci in 0..cin {
                    let mut acc = T::zero();
                    for iy in 0..h {
                        for ix in 0..w {
                            let xv = x[(iy * w + ix) * cin + ci];
                            let g = grad_out[((2 * iy + ky) * w2 + 2 * ix + kx) * cout + co];
                            acc = g.mul_add(xv, acc);
                        }
                    }
                    gk_tap[ci * cout + co] += acc;
                }
            }
        }
    }

    // grad_x[iy,ix,ci] = Σ_{ky,kx,co} grad_out[2iy+ky, 2ix+kx, co] · K[ky,kx,ci,co].
    // Transposed kernel taps make the inner run over ci contiguous.
    let mut kt = vec![T::zero(); p.kernel.len()];
    for tap in 0..4 {
        let src = &p.kernel[tap * cin * cout..][..cin * cout];
        let dst = &mut kt[tap * cin * cout..][..cin * cout];
        for ci in 0..cin {
            for co in 0..cout {
                dst[co * cin + ci] = src[ci * cout + co];
            }
        }
    }
    for iy in 0..h {
        for ix in 0..w {
            let gx_base = (iy * w + ix) * cin;
            let mut ci = 0;
            while ci + BLK <= cin {
                tconv_gradx_pixel_block::<T, BLK>(grad_out, w2, cin, cout, &kt, iy, ix, ci, &mut grad_x[gx_base + ci..gx_base + ci + BLK]);
                ci += BLK;
            }
            while ci + BLK_S <= cin {
                tconv_gradx_pixel_block::<T, BLK_S>(grad_out, w2, cin, cout, &kt, iy, ix, ci, &mut grad_x[gx_base + ci..gx_base + ci + BLK_S]);
                ci += BLK_S;
            }
            for ci in ci..cin {
                let mut acc = T::zero();
                for ky in 0..2 {
                    for kx in 0..2 {
                        let gpix = &grad_out[((2 * iy + ky) * w2 + 2 * ix + kx) * cout..][..cout];
                        let kt_tap = &kt[(ky * 2 + kx) * cin * cout..];
                        for (co, &g) in gpix.iter().enumerate() {
                            acc = kt_tap[co * cin + ci].mul_add(g, acc);
                        }
                    }
                }
                grad_x[gx_base + ci] = acc;
            }
        }
    }
}

/// Per-tap grad_kernel tile for the stride-2 transpose convolution:
/// `4 × B` register accumulators swept over every input pixel.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tconv_gradk_tap_block<T: Real, const B: usize>(
    x: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ky: usize,
    kx: usize,
    co: usize,
    gk_tap: &mut [T],
) {
    let w2 = 2 * w;
    let mut ci = 0;
    while ci + 4 <= cin {
        let mut a0 = [T::zero(); B];
        let mut a1 = [T::zero(); B];
        let mut a2 = [T::zero(); B];
        let mut a3 = [T::zero(); B];
        for iy in 0..h {
            for ix in 0..w {
                let xp = &x[(iy * w + ix) * cin + ci..][..4];
                let g = &grad_out[((2 * iy + ky) * w2 + 2 * ix + kx) * cout + co..][..B];
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
        for iy in 0..h {
            for ix in 0..w {
                let xv = x[(iy * w + ix) * cin + ci];
                let g = &grad_out[((2 * iy + ky) * w2 + 2 * ix + kx) * cout + co..][..B];
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

/// One grad_x pixel, `B` consecutive input channels; all four output taps
/// of the stride-2 placement are always valid.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tconv_gradx_pixel_block<T: Real, const B: usize>(
    grad_out: &[T],
    w2: usize,
    cin: usize,
    cout: usize,
    kt: &[T],
    iy: usize,
    ix: usize,
    ci: usize,
    out: &mut [T],
) {
    let mut acc = [T::zero(); B];
    for ky in 0..2 {
        for kx in 0..2 {
            let gpix = &grad_out[((2 * iy + ky) * w2 + 2 * ix + kx) * cout..][..cout];
            let kt_tap = &kt[(ky * 2 + kx) * cin * cout + ci..];
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    /// Scatter-add brute-force oracle: bias-filled output, then each input
    /// pixel's scaled kernel added at its stride-2 offset, input channels in
    /// ascending order, fused multiply-add.
    fn tconv_oracle(x: &Tensor3<f32>, p: &ConvParams<f32>) -> Tensor3<f32> {
        let mut out = Tensor3::zeros(2 * x.h, 2 * x.w, p.out_channels);
        for oy in 0..out.h {
            for ox in 0..out.w {
                for co in 0..p.out_channels {
                    out.set(oy, ox, co, p.bias[co]);
                }
            }
        }
        for iy in 0..x.h {
            for ix in 0..x.w {
                for ci in 0..x.c {
                    let xv = x.get(iy, ix, ci);
                    for ky in 0..2 {
                        for kx in 0..2 {
                            for co in 0..p.out_channels {
                                let old = out.get(2 * iy + ky, 2 * ix + kx, co);
                                out.set(2 * iy + ky, 2 * ix + kx, co, p.kernel[p.kidx(ky, kx, ci, co)].mul_add(xv, old));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_pixel_places_scaled_kernel() {
        let x = Tensor3::from_vec(1, 1, 1, vec![5.0f32]).unwrap();
        let p = ConvParams::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0], 2, 1, 1).unwrap();
        let y = tconv2_forward(&x, &p).unwrap();
        assert_eq!(y.data, vec![5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn stride_two_blocks_are_disjoint() {
        let x = Tensor3::from_vec(1, 2, 1, vec![2.0f32, 3.0]).unwrap();
        let p = ConvParams::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0], 2, 1, 1).unwrap();
        let y = tconv2_forward(&x, &p).unwrap();
        assert_eq!((y.h, y.w), (2, 4));
        // row-major: [2*K00, 2*K01, 3*K00, 3*K01], [2*K10, 2*K11, 3*K10, 3*K11]
        assert_eq!(y.data, vec![2.0, 4.0, 3.0, 6.0, 6.0, 8.0, 9.0, 12.0]);
    }

    #[test]
    fn matches_scatter_add_oracle_exactly() {
        for seed in 0..25u64 {
            let mut rng = substream(seed, Stream::Init, 4);
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let cin = rng.gen_range(1..5);
            let cout = rng.gen_range(1..5);
            let x = Tensor3::from_vec(h, w, cin, (0..h * w * cin).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let p = ConvParams::new(
                (0..4 * cin * cout).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                (0..cout).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                2, cin, cout,
            ).unwrap();
            let got = tconv2_forward(&x, &p).unwrap();
            let want = tconv_oracle(&x, &p);
            assert_eq!(got.data, want.data, "seed {seed}");
        }
    }

    #[test]
    fn kernel_size_other_than_two_is_error() {
        let x = Tensor3::<f32>::zeros(2, 2, 1);
        assert!(tconv2_forward(&x, &ConvParams::zeros(3, 1, 1)).is_err());
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let x = Tensor3::<f32>::zeros(2, 2, 2);
        let p = ConvParams::<f32>::zeros(2, 2, 3);
        let g = Tensor3::zeros(4, 4, 3);
        let (gx, gk, gb) = tconv2_backward(&x, &p, &g).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        assert!(gk.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_pixel_is_dot_product() {
        // 1×1 input: grad_x = <K, grad_block>
        let x = Tensor3::from_vec(1, 1, 1, vec![2.0f32]).unwrap();
        let p = ConvParams::new(vec![1.0, 2.0, 3.0, 4.0], vec![0.0], 2, 1, 1).unwrap();
        let g = Tensor3::from_vec(2, 2, 1, vec![10.0f32, 20.0, 30.0, 40.0]).unwrap();
        let (gx, gk, gb) = tconv2_backward(&x, &p, &g).unwrap();
        assert_eq!(gx.data, vec![10.0 + 40.0 + 90.0 + 160.0]);
        assert_eq!(gk, vec![20.0, 40.0, 60.0, 80.0]);
        assert_eq!(gb, vec![100.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = substream(77, Stream::Init, 5);
        let (h, w, cin, cout) = (3, 4, 2, 3);
        let x = Tensor3::<f64>::from_vec(h, w, cin, (0..h * w * cin).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = ConvParams::<f64>::new(
            (0..4 * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            2, cin, cout,
        ).unwrap();
        let r: Vec<f64> = (0..4 * h * w * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &Tensor3<f64>, p: &ConvParams<f64>| -> f64 {
            tconv2_forward(x, p).unwrap().data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let grad_out = Tensor3::from_vec(2 * h, 2 * w, cout, r.clone()).unwrap();
        let (gx, gk, gb) = tconv2_backward(&x, &p, &grad_out).unwrap();

        let step = 1e-3;
        let check = |analytic: f64, fd: f64, what: &str| {
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "{what}: analytic {analytic} vs fd {fd}");
        };
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += step;
            let mut xm = x.clone();
            xm.data[i] -= step;
            check(gx.data[i], (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * step), "grad_x");
        }
        for i in 0..p.kernel.len() {
            let mut pp = p.clone();
            pp.kernel[i] += step;
            let mut pm = p.clone();
            pm.kernel[i] -= step;
            check(gk[i], (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * step), "grad_kernel");
        }
        for i in 0..p.bias.len() {
            let mut pp = p.clone();
            pp.bias[i] += step;
            let mut pm = p.clone();
            pm.bias[i] -= step;
            check(gb[i], (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * step), "grad_bias");
        }
    }

    #[test]
    fn linear_over_one_hot_basis() {
        // tconv output for a sum of one-hot inputs equals the sum of outputs
        // minus the duplicated bias contribution.
        let mut rng = substream(13, Stream::Init, 6);
        let p = ConvParams::<f64>::new(
            (0..4 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![0.0, 0.0],
            2, 2, 2,
        ).unwrap();
        let h = 2;
        let w = 2;
        let x = Tensor3::<f64>::from_vec(h, w, 2, (0..h * w * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let full = tconv2_forward(&x, &p).unwrap();
        let mut acc = Tensor3::<f64>::zeros(2 * h, 2 * w, 2);
        for i in 0..x.data.len() {
            let mut basis = x.zeros_like();
            basis.data[i] = x.data[i];
            let part = tconv2_forward(&basis, &p).unwrap();
            for (a, b) in acc.data.iter_mut().zip(&part.data) {
                *a += b;
            }
        }
        for (a, b) in acc.data.iter().zip(&full.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
