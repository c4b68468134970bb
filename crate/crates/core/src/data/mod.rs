//! Dataset plumbing: raster image types, ground-truth encoding/decoding,
//! patch extraction with dihedral augmentation, the synthetic orchard
//! generator, and the on-disk formats (netpbm images, manifests, box CSVs).

pub mod labels;
pub mod netpbm;
pub mod patches;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3, Tensor4};
use crate::training::TrainSet;

pub use labels::{
    decode_ground_truth, encode_ground_truth, ClassMap, OneHotLabel, COLOR_BACKGROUND,
    COLOR_BOUNDARY, COLOR_MANGO,
};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use patches::{apply_dihedral, augment, crop_patches, Dihedral};
pub use synth::{synth_scene, SceneSpec};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(h: usize, w: usize, color: [u8; 3]) -> RgbImage {
        RgbImage {
            h,
            w,
            data: color.repeat(h * w),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.w + x) * 3;
        &self.data[i..i + 3]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, color: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Copy a `ch`×`cw` window whose top-left corner is (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> RgbImage {
        assert!(
            y0 + ch <= self.h && x0 + cw <= self.w,
            "crop {ch}x{cw}+{y0}+{x0} exceeds image {}x{}",
            self.h,
            self.w
        );
        let mut out = RgbImage::filled(ch, cw, [0, 0, 0]);
        for y in 0..ch {
            let src = ((y0 + y) * self.w + x0) * 3;
            let dst = y * cw * 3;
            out.data[dst..dst + cw * 3].copy_from_slice(&self.data[src..src + cw * 3]);
        }
        out
    }

    /// Network input tensor: channels scaled to [0, 1] by 1/255.
    pub fn to_input_tensor<T: Real>(&self) -> Tensor3<T> {
        let mut t = Tensor3::zeros(self.h, self.w, 3);
        for (dst, &v) in t.data.iter_mut().zip(&self.data) {
            *dst = T::from_f64(f64::from(v) / 255.0);
        }
        t
    }
}

/// 8-bit single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    /// Probability heat map scaled to 0–255 (0.0 → 0, 1.0 → 255); `channel`
    /// selects the plane to render.
    pub fn from_probabilities<T: Real>(probs: &Tensor3<T>, channel: usize) -> GrayImage {
        assert!(
            channel < probs.c,
            "channel {channel} out of range for {}-channel map",
            probs.c
        );
        let mut data = Vec::with_capacity(probs.h * probs.w);
        for px in 0..probs.h * probs.w {
            let p = probs.data[px * probs.c + channel].as_f64().clamp(0.0, 1.0);
            data.push((p * 255.0).round() as u8);
        }
        GrayImage {
            h: probs.h,
            w: probs.w,
            data,
        }
    }
}

/// Inclusive axis-aligned pixel box around one crown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnotationBox {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl AnnotationBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.ymin..=self.ymax).contains(&y) && (self.xmin..=self.xmax).contains(&x)
    }

    /// Pixel area of the inclusive box.
    pub fn area(&self) -> usize {
        (self.xmax - self.xmin + 1) * (self.ymax - self.ymin + 1)
    }
}

/// Write a dataset manifest: one `image<TAB>ground_truth` path pair per line.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (img, gt) in entries {
        text.push_str(&format!("{img}\t{gt}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let Some((img, gt)) = line.split_once('\t') else {
                return Err(Error::Format {
                    what: path.display().to_string(),
                    offset,
                    detail: "manifest line needs two tab-separated paths".into(),
                });
            };
            out.push((img.to_string(), gt.to_string()));
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub const BOXES_CSV_HEADER: &str = "image_id,xmin,ymin,xmax,ymax";

/// Annotation boxes as CSV with an `image_id,xmin,ymin,xmax,ymax` header.
pub fn write_boxes_csv(path: &Path, rows: &[(String, AnnotationBox)]) -> Result<()> {
    let mut text = String::from(BOXES_CSV_HEADER);
    text.push('\n');
    for (id, b) in rows {
        text.push_str(&format!("{id},{},{},{},{}\n", b.xmin, b.ymin, b.xmax, b.ymax));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads boxes from CSV. Accepts the annotation header or the detections
/// header (trailing `pixel_count` column, ignored here), so `detect` output
/// can be scored directly against annotation ground truth.
pub fn read_boxes_csv(path: &Path) -> Result<Vec<(String, AnnotationBox)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = || path.display().to_string();
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut ncols = 5usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            ncols = match line.trim() {
                h if h == BOXES_CSV_HEADER => 5,
                h if h == crate::detection::DETECTIONS_CSV_HEADER => 6,
                _ => {
                    return Err(Error::Format {
                        what: what(),
                        offset,
                        detail: format!(
                            "expected header {BOXES_CSV_HEADER:?} or {:?}",
                            crate::detection::DETECTIONS_CSV_HEADER
                        ),
                    });
                }
            };
        } else if !line.trim().is_empty() {
            let fields: Vec<&str> = line.split(',').collect();
            let parsed: Option<(String, Vec<usize>)> =
                (fields.len() == ncols).then(|| ()).and_then(|()| {
                    let nums: Option<Vec<usize>> =
                        fields[1..5].iter().map(|f| f.trim().parse().ok()).collect();
                    Some((fields[0].to_string(), nums?))
                });
            let Some((id, n)) = parsed else {
                return Err(Error::Format {
                    what: what(),
                    offset,
                    detail: format!("bad box row {line:?}"),
                });
            };
            let b = AnnotationBox { xmin: n[0], ymin: n[1], xmax: n[2], ymax: n[3] };
            if b.xmin > b.xmax || b.ymin > b.ymax {
                return Err(Error::Format {
                    what: what(),
                    offset,
                    detail: format!("inverted box {b:?}"),
                });
            }
            out.push((id, b));
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Assemble a training set from (image, annotated ground truth) scene pairs:
/// square `patch`-sized tiling, 8-fold dihedral augmentation, inputs scaled
/// to [0, 1], labels decoded per task (single 0/1 channel for 2-class,
/// one-hot planes for 3-class).
pub fn build_training_set<T: Real>(
    scenes: &[(RgbImage, RgbImage)],
    num_classes: u8,
    patch: usize,
) -> Result<TrainSet<T>> {
    if num_classes != 2 && num_classes != 3 {
        return Err(Error::invalid("build_training_set", "num_classes must be 2 or 3"));
    }
    let mut images: Vec<Tensor3<T>> = Vec::new();
    let mut label_tensors: Vec<Tensor3<T>> = Vec::new();
    for (img, gt) in scenes {
        for (p, l) in crop_patches(img, gt, patch)? {
            for (ap, al) in augment(&p, &l)? {
                let (class, one_hot, _) = decode_ground_truth(&al)?;
                images.push(ap.to_input_tensor());
                label_tensors.push(if num_classes == 2 {
                    class.to_label_tensor()
                } else {
                    one_hot.to_label_tensor()
                });
            }
        }
    }
    TrainSet::new(
        Tensor4::from_examples(&images)?,
        Tensor4::from_examples(&label_tensors)?,
    )
}
