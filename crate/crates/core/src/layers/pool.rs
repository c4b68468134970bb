//! 2×2 max pooling with stride 2. The forward pass records the argmax of each
//! window so the backward pass can route gradients; ties break toward the
//! first maximal element in row-major window order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

/// Argmax positions for one pooled map: one code per (output pixel, channel),
/// encoding the in-window offset as `dy*2 + dx` (0..4).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub h_out: usize,
    pub w_out: usize,
    pub c: usize,
    pub(crate) codes: Vec<u8>,
}

impl PoolIndices {
    /// Absolute input coordinates (row, col) of the max for output pixel
    /// (`y`, `x`), channel `ch`.
    pub fn argmax(&self, y: usize, x: usize, ch: usize) -> (usize, usize) {
        let code = self.codes[(y * self.w_out + x) * self.c + ch];
        (2 * y + (code >> 1) as usize, 2 * x + (code & 1) as usize)
    }
}

pub fn maxpool2<T: Real>(x: &Tensor3<T>) -> Result<(Tensor3<T>, PoolIndices)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("input {}x{} must have even height and width", x.h, x.w),
        ));
    }
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor3::zeros(ho, wo, x.c);
    let mut codes = vec![0u8; ho * wo * x.c];
    maxpool2_slice(&x.data, x.h, x.w, x.c, &mut out.data, &mut codes);
    Ok((out, PoolIndices { h_out: ho, w_out: wo, c: x.c, codes }))
}

/// Routes each output gradient to its argmax position; all other input
/// positions receive zero.
pub fn maxpool2_backward<T: Real>(
    indices: &PoolIndices,
    grad_out: &Tensor3<T>,
) -> Result<Tensor3<T>> {
    if grad_out.h != indices.h_out || grad_out.w != indices.w_out || grad_out.c != indices.c {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "grad_out is {}x{}x{}, indices expect {}x{}x{}",
                grad_out.h, grad_out.w, grad_out.c, indices.h_out, indices.w_out, indices.c
            ),
        ));
    }
    let mut grad_x = Tensor3::zeros(indices.h_out * 2, indices.w_out * 2, indices.c);
    maxpool2_backward_slice(&indices.codes, indices.h_out, indices.w_out, indices.c, &grad_out.data, &mut grad_x.data);
    Ok(grad_x)
}

pub(crate) fn maxpool2_slice<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [T],
    codes: &mut [u8],
) {
    let wo = w / 2;
    for oy in 0..h / 2 {
        for ox in 0..wo {
            let base = (oy * wo + ox) * c;
            for ch in 0..c {
                let mut best = x[((2 * oy) * w + 2 * ox) * c + ch];
                let mut best_code = 0u8;
                // row-major scan of the remaining window elements; strictly
                // greater replaces, so ties keep the first occurrence
                for code in 1u8..4 {
                    let dy = (code >> 1) as usize;
                    let dx = (code & 1) as usize;
                    let v = x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    if v > best {
                        best = v;
                        best_code = code;
                    }
                }
                out[base + ch] = best;
                codes[base + ch] = best_code;
            }
        }
    }
}

pub(crate) fn maxpool2_backward_slice<T: Real>(
    codes: &[u8],
    ho: usize,
    wo: usize,
    c: usize,
    grad_out: &[T],
    grad_x: &mut [T],
) {
    let w = wo * 2;
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * c;
            for ch in 0..c {
                let code = codes[base + ch];
                let iy = 2 * oy + (code >> 1) as usize;
                let ix = 2 * ox + (code & 1) as usize;
                grad_x[(iy * w + ix) * c + ch] += grad_out[base + ch];
            }
        }
    }
}
