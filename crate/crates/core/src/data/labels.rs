//! Ground-truth codec. Annotated images use exactly three colors — green
//! crowns, white boundary bands, black background — and decode into the three
//! label views used downstream: a binary crown mask, one-hot planes, and a
//! 3-class index map.

use crate::data::RgbImage;
use crate::detection::SegmentationMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

pub const COLOR_MANGO: [u8; 3] = [0, 255, 0];
pub const COLOR_BOUNDARY: [u8; 3] = [255, 255, 255];
pub const COLOR_BACKGROUND: [u8; 3] = [0, 0, 0];

/// Binary per-pixel crown labels: 1 = mango, 0 = background. The 2-class
/// view folds boundary pixels into the background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn zeros(h: usize, w: usize) -> ClassMap {
        ClassMap { h, w, data: vec![0; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Single-channel 0/1 target tensor for the sigmoid loss.
    pub fn to_label_tensor<T: Real>(&self) -> Tensor3<T> {
        let mut t = Tensor3::zeros(self.h, self.w, 1);
        for (dst, &v) in t.data.iter_mut().zip(&self.data) {
            *dst = T::from_f64(f64::from(v));
        }
        t
    }
}

/// Three stacked 0/1 planes per pixel, ordered (mango, boundary, background);
/// exactly one plane is hot at every pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotLabel {
    pub h: usize,
    pub w: usize,
    /// `(y*w + x)*3 + plane`, planes in (mango, boundary, background) order.
    pub data: Vec<u8>,
}

impl OneHotLabel {
    pub fn plane(&self, y: usize, x: usize, plane: usize) -> u8 {
        assert!(plane < 3, "plane index {plane} out of range");
        self.data[(y * self.w + x) * 3 + plane]
    }

    /// Three-channel one-hot target tensor for the weighted softmax loss.
    pub fn to_label_tensor<T: Real>(&self) -> Tensor3<T> {
        let mut t = Tensor3::zeros(self.h, self.w, 3);
        for (dst, &v) in t.data.iter_mut().zip(&self.data) {
            *dst = T::from_f64(f64::from(v));
        }
        t
    }
}

/// Decode an annotated image into all three label views. Rejects the first
/// pixel whose color is not one of the three canonical values.
pub fn decode_ground_truth(gt: &RgbImage) -> Result<(ClassMap, OneHotLabel, SegmentationMap)> {
    let (h, w) = (gt.h, gt.w);
    let mut class = ClassMap::zeros(h, w);
    let mut one_hot = OneHotLabel { h, w, data: vec![0; h * w * 3] };
    let mut seg = SegmentationMap::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let px = gt.pixel(y, x);
            let (plane, code, binary) = match px {
                p if p == COLOR_MANGO => (0usize, 1u8, 1u8),
                p if p == COLOR_BOUNDARY => (1, 2, 0),
                p if p == COLOR_BACKGROUND => (2, 0, 0),
                p => {
                    return Err(Error::BadGroundTruthColor {
                        row: y,
                        col: x,
                        r: p[0],
                        g: p[1],
                        b: p[2],
                    })
                }
            };
            class.data[y * w + x] = binary;
            one_hot.data[(y * w + x) * 3 + plane] = 1;
            seg.data[y * w + x] = code;
        }
    }
    Ok((class, one_hot, seg))
}

/// Paint the canonical colors back from a 3-class index map; inverse of
/// `decode_ground_truth` on valid images.
pub fn encode_ground_truth(seg: &SegmentationMap) -> RgbImage {
    assert!(seg.num_classes == 3, "encoding needs a 3-class map, got {}-class", seg.num_classes);
    let mut gt = RgbImage::filled(seg.h, seg.w, COLOR_BACKGROUND);
    for y in 0..seg.h {
        for x in 0..seg.w {
            let color = match seg.data[y * seg.w + x] {
                0 => COLOR_BACKGROUND,
                1 => COLOR_MANGO,
                2 => COLOR_BOUNDARY,
                c => unreachable!("class index {c} violates the SegmentationMap invariant"),
            };
            gt.set_pixel(y, x, color);
        }
    }
    gt
}
