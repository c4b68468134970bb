//! From probability maps to crown detections: thresholding / per-pixel
//! argmax, boundary suppression, 8-connected component labeling, size
//! filtering, and tight bounding boxes.

use std::fmt;
use std::path::Path;

use crate::data::{AnnotationBox, GrayImage};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{Real, Tensor3, Tensor4};

/// Probability threshold for the 2-class pipeline; a pixel is mango only if
/// its probability strictly exceeds this.
pub const DETECT_THRESHOLD: f64 = 0.6;
/// Components smaller than this many pixels are discarded.
pub const MIN_COMPONENT_SIZE: usize = 600;

/// Per-pixel class indices. 2-class maps use {0 = background, 1 = mango};
/// 3-class maps add {2 = boundary}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub h: usize,
    pub w: usize,
    pub num_classes: u8,
    pub data: Vec<u8>,
}

impl SegmentationMap {
    pub fn zeros(h: usize, w: usize, num_classes: u8) -> SegmentationMap {
        assert!(
            num_classes == 2 || num_classes == 3,
            "segmentation maps hold 2 or 3 classes, not {num_classes}"
        );
        SegmentationMap { h, w, num_classes, data: vec![0; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        assert!(
            v < self.num_classes,
            "class index {v} out of range for a {}-class map",
            self.num_classes
        );
        self.data[y * self.w + x] = v;
    }

    /// Class indices as a writable single-channel raster.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage { h: self.h, w: self.w, data: self.data.clone() }
    }
}

/// Binarize a single-channel probability map: 1 iff probability > `tau`
/// (strict), else 0.
pub fn threshold_map<T: Real>(probs: &Tensor3<T>, tau: f64) -> SegmentationMap {
    assert!(probs.c == 1, "threshold_map needs a single channel, got {}", probs.c);
    let mut out = SegmentationMap::zeros(probs.h, probs.w, 2);
    for (dst, &p) in out.data.iter_mut().zip(&probs.data) {
        *dst = u8::from(p.as_f64() > tau);
    }
    out
}

/// Per-pixel argmax over 3 class-probability planes ordered by class index
/// (background, mango, boundary). Ties break toward the lowest index.
pub fn argmax_map<T: Real>(probs: &Tensor3<T>) -> SegmentationMap {
    assert!(probs.c == 3, "argmax_map needs 3 channels, got {}", probs.c);
    let mut out = SegmentationMap::zeros(probs.h, probs.w, 3);
    for (dst, px) in out.data.iter_mut().zip(probs.data.chunks_exact(3)) {
        let mut best = 0usize;
        for k in 1..3 {
            if px[k].as_f64() > px[best].as_f64() {
                best = k;
            }
        }
        *dst = best as u8;
    }
    out
}

/// Reorder the network's output planes (mango, boundary, background) into
/// class-index order (background, mango, boundary) for `argmax_map`.
pub fn net_to_code_order<T: Real>(probs: &Tensor3<T>) -> Tensor3<T> {
    assert!(probs.c == 3, "expected 3 network output planes, got {}", probs.c);
    let mut out = Tensor3::zeros(probs.h, probs.w, 3);
    for (dst, src) in out.data.chunks_exact_mut(3).zip(probs.data.chunks_exact(3)) {
        dst[0] = src[2]; // background
        dst[1] = src[0]; // mango
        dst[2] = src[1]; // boundary
    }
    out
}

/// Relabel boundary pixels as background, leaving mango untouched; the result
/// is binary.
pub fn suppress_boundary(m: &SegmentationMap) -> SegmentationMap {
    assert!(m.num_classes == 3, "suppress_boundary expects a 3-class map");
    let mut out = SegmentationMap::zeros(m.h, m.w, 2);
    for (dst, &v) in out.data.iter_mut().zip(&m.data) {
        *dst = u8::from(v == 1);
    }
    out
}

/// Component labels per pixel: 0 for background, 1..=count for the maximal
/// 8-connected sets of 1-pixels, numbered by each component's first pixel in
/// row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabels {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

/// Label maximal 8-connected components of the 1-pixels with a two-pass
/// union-find sweep.
pub fn connected_components(m: &SegmentationMap) -> ComponentLabels {
    assert!(m.num_classes == 2, "component labeling expects a binary map");
    let (h, w) = (m.h, m.w);
    let mut provisional = vec![0u32; h * w];
    // parent[0] is a dummy so provisional label 0 can mean "background".
    let mut parent: Vec<u32> = vec![0];

    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    for y in 0..h {
        for x in 0..w {
            if m.data[y * w + x] == 0 {
                continue;
            }
            // Previously scanned 8-neighbors: W, NW, N, NE.
            let mut adjacent = [0u32; 4];
            let mut n_adj = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    adjacent[n_adj] = l;
                    n_adj += 1;
                }
            };
            if x > 0 {
                push(provisional[y * w + x - 1]);
            }
            if y > 0 {
                if x > 0 {
                    push(provisional[(y - 1) * w + x - 1]);
                }
                push(provisional[(y - 1) * w + x]);
                if x + 1 < w {
                    push(provisional[(y - 1) * w + x + 1]);
                }
            }
            let label = if n_adj == 0 {
                let fresh = parent.len() as u32;
                parent.push(fresh);
                fresh
            } else {
                let mut root = find(&mut parent, adjacent[0]);
                for &other in &adjacent[1..n_adj] {
                    let r = find(&mut parent, other);
                    if r != root {
                        // Union toward the smaller root so earlier labels win.
                        let (lo, hi) = if r < root { (r, root) } else { (root, r) };
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                root
            };
            provisional[y * w + x] = label;
        }
    }

    // Final labels numbered by first appearance of each root in row-major order.
    let mut final_of_root: Vec<u32> = vec![0; parent.len()];
    let mut count = 0u32;
    let mut labels = vec![0u32; h * w];
    for (i, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if final_of_root[root] == 0 {
            count += 1;
            final_of_root[root] = count;
        }
        labels[i] = final_of_root[root];
    }
    ComponentLabels { h, w, labels, count: count as usize }
}

/// One retained connected object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    /// Component label from the pre-filter labeling.
    pub id: u32,
    pub pixel_count: usize,
    pub bbox: AnnotationBox,
}

/// Detections surviving the size filter, in component-label order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

pub const DETECTIONS_CSV_HEADER: &str = "image_id,xmin,ymin,xmax,ymax,pixel_count";

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn boxes(&self) -> Vec<AnnotationBox> {
        self.detections.iter().map(|d| d.bbox).collect()
    }

    /// CSV rows under an `image_id,xmin,ymin,xmax,ymax,pixel_count` header.
    pub fn to_csv(&self, image_id: &str) -> String {
        let mut out = String::from(DETECTIONS_CSV_HEADER);
        out.push('\n');
        for d in &self.detections {
            out.push_str(&format!(
                "{image_id},{},{},{},{},{}\n",
                d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax, d.pixel_count
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path, image_id: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(image_id)).map_err(|e| Error::io(path, e))
    }
}

/// Drop components smaller than `min_size` pixels (strict) and wrap each
/// survivor in its tight inclusive bounding box.
pub fn filter_and_boxes(labels: &ComponentLabels, min_size: usize) -> DetectionSet {
    let mut counts = vec![0usize; labels.count + 1];
    let mut boxes: Vec<Option<AnnotationBox>> = vec![None; labels.count + 1];
    for y in 0..labels.h {
        for x in 0..labels.w {
            let l = labels.labels[y * labels.w + x] as usize;
            if l == 0 {
                continue;
            }
            counts[l] += 1;
            match &mut boxes[l] {
                slot @ None => *slot = Some(AnnotationBox { xmin: x, ymin: y, xmax: x, ymax: y }),
                Some(b) => {
                    b.xmin = b.xmin.min(x);
                    b.xmax = b.xmax.max(x);
                    b.ymin = b.ymin.min(y);
                    b.ymax = b.ymax.max(y);
                }
            }
        }
    }
    let detections = (1..=labels.count)
        .filter(|&l| counts[l] >= min_size)
        .map(|l| Detection {
            id: l as u32,
            pixel_count: counts[l],
            bbox: boxes[l].expect("labeled component has at least one pixel"),
        })
        .collect();
    DetectionSet { detections }
}

/// Which trained head the detection pipeline expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectMode {
    TwoClass,
    ThreeClass,
}

impl DetectMode {
    pub fn num_classes(self) -> u8 {
        match self {
            DetectMode::TwoClass => 2,
            DetectMode::ThreeClass => 3,
        }
    }

    pub fn parse(s: &str) -> Result<DetectMode> {
        match s {
            "2" | "two" | "two_class" => Ok(DetectMode::TwoClass),
            "3" | "three" | "three_class" => Ok(DetectMode::ThreeClass),
            other => Err(Error::invalid(
                "DetectMode::parse",
                format!("unknown mode {other:?}; use two_class or three_class"),
            )),
        }
    }
}

impl fmt::Display for DetectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectMode::TwoClass => "two_class",
            DetectMode::ThreeClass => "three_class",
        })
    }
}

/// Full detection pipeline on one image. Two-class: sigmoid probabilities →
/// threshold 0.6 → components → size filter. Three-class: softmax
/// probabilities → argmax → boundary suppression → components → size filter.
pub fn detect<T: Real>(model: &Model<T>, image: &Tensor3<T>, mode: DetectMode) -> Result<DetectionSet> {
    if model.spec.num_classes != mode.num_classes() {
        return Err(Error::invalid(
            "detect",
            format!(
                "{mode} detection needs a {}-class model, got {}-class",
                mode.num_classes(),
                model.spec.num_classes
            ),
        ));
    }
    let batch = Tensor4::from_examples(std::slice::from_ref(image))?;
    let probs = model.infer(&batch)?;
    let probs = probs.example_tensor(0);
    let binary = match mode {
        DetectMode::TwoClass => threshold_map(&probs, DETECT_THRESHOLD),
        DetectMode::ThreeClass => suppress_boundary(&argmax_map(&net_to_code_order(&probs))),
    };
    Ok(filter_and_boxes(&connected_components(&binary), MIN_COMPONENT_SIZE))
}
