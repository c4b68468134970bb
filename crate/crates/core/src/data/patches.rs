//! Patch extraction and 8-fold dihedral augmentation. Labels travel with
//! their images as annotated RGB ground truth, so both sides of every pair go
//! through identical geometry.

use crate::data::RgbImage;
use crate::error::{Error, Result};

/// Tile `image` and its congruent `label` into non-overlapping `patch`×`patch`
/// squares from the top-left corner; right/bottom remainders narrower than a
/// patch are discarded.
pub fn crop_patches(
    image: &RgbImage,
    label: &RgbImage,
    patch: usize,
) -> Result<Vec<(RgbImage, RgbImage)>> {
    if image.h != label.h || image.w != label.w {
        return Err(Error::shape(
            "crop_patches",
            format!("image {}x{} vs label {}x{}", image.h, image.w, label.h, label.w),
        ));
    }
    if patch == 0 || image.h < patch || image.w < patch {
        return Err(Error::invalid(
            "crop_patches",
            format!("image {}x{} cannot host a {patch}x{patch} patch", image.h, image.w),
        ));
    }
    let rows = image.h / patch;
    let cols = image.w / patch;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((
                image.crop(r * patch, c * patch, patch, patch),
                label.crop(r * patch, c * patch, patch, patch),
            ));
        }
    }
    Ok(out)
}

/// The eight symmetries of the square: the identity, three quarter-turn
/// rotations, the main-diagonal transpose, and the three rotations of the
/// transpose (equivalently, the four reflections).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Transpose,
    TransposeRot90,
    TransposeRot180,
    TransposeRot270,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Transpose,
        Dihedral::TransposeRot90,
        Dihedral::TransposeRot180,
        Dihedral::TransposeRot270,
    ];

    /// Destination of source pixel (y, x) in an n×n image. Rotations are
    /// clockwise; the transpose mirrors about the main diagonal and is
    /// applied before any rotation.
    fn map(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (y, x) = match self {
            Dihedral::Identity | Dihedral::Rot90 | Dihedral::Rot180 | Dihedral::Rot270 => (y, x),
            _ => (x, y),
        };
        match self {
            Dihedral::Identity | Dihedral::Transpose => (y, x),
            Dihedral::Rot90 | Dihedral::TransposeRot90 => (x, n - 1 - y),
            Dihedral::Rot180 | Dihedral::TransposeRot180 => (n - 1 - y, n - 1 - x),
            Dihedral::Rot270 | Dihedral::TransposeRot270 => (n - 1 - x, y),
        }
    }
}

/// Apply one square symmetry to an image. The image must be square.
pub fn apply_dihedral(image: &RgbImage, t: Dihedral) -> RgbImage {
    assert!(
        image.h == image.w,
        "dihedral transforms need a square image, got {}x{}",
        image.h,
        image.w
    );
    let n = image.h;
    let mut out = RgbImage::filled(n, n, [0, 0, 0]);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = t.map(y, x, n);
            out.set_pixel(dy, dx, image.pixel(y, x).try_into().expect("3-byte pixel"));
        }
    }
    out
}

/// All 8 dihedral images of a (patch, label) pair, labels transformed
/// identically, identity first.
pub fn augment(patch: &RgbImage, label: &RgbImage) -> Result<Vec<(RgbImage, RgbImage)>> {
    if patch.h != patch.w {
        return Err(Error::invalid(
            "augment",
            format!("patch must be square, got {}x{}", patch.h, patch.w),
        ));
    }
    if label.h != patch.h || label.w != patch.w {
        return Err(Error::shape(
            "augment",
            format!("patch {}x{} vs label {}x{}", patch.h, patch.w, label.h, label.w),
        ));
    }
    Ok(Dihedral::ALL
        .iter()
        .map(|&t| (apply_dihedral(patch, t), apply_dihedral(label, t)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn solid(h: usize, w: usize, v: u8) -> RgbImage {
        RgbImage::filled(h, w, [v, v, v])
    }

    #[test]
    fn grid_counts_match_the_tiling_rule() {
        let cases = [
            (480, 960, 8),   // 2×4 grid
            (1080, 1920, 32), // 4×8; 120-px bottom remainder dropped
            (240, 240, 1),
        ];
        for (h, w, expect) in cases {
            let img = solid(h, w, 7);
            let got = crop_patches(&img, &img, 240).unwrap().len();
            assert_eq!(got, expect, "{h}x{w} should tile into {expect} patches");
        }
    }

    #[test]
    fn the_single_patch_of_an_exact_fit_is_the_input() {
        let mut img = solid(240, 240, 0);
        img.set_pixel(100, 200, [9, 8, 7]);
        let patches = crop_patches(&img, &img, 240).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].0, img);
        assert_eq!(patches[0].1, img);
    }

    #[test]
    fn patches_cover_disjoint_regions_in_row_major_order() {
        // 2×2 grid of 2-px patches with a distinct value per cell.
        let mut img = solid(4, 4, 0);
        for y in 0..4 {
            for x in 0..4 {
                let cell = (y / 2) * 2 + x / 2;
                img.set_pixel(y, x, [cell as u8, 0, 0]);
            }
        }
        let patches = crop_patches(&img, &img, 2).unwrap();
        assert_eq!(patches.len(), 4);
        for (i, (p, _)) in patches.iter().enumerate() {
            assert!(
                p.data.chunks_exact(3).all(|px| px[0] == i as u8),
                "patch {i} should hold only its own cell value"
            );
        }
    }

    #[test]
    fn undersized_images_are_rejected() {
        let img = solid(239, 500, 0);
        assert!(crop_patches(&img, &img, 240).is_err());
    }

    #[test]
    fn augmenting_a_constant_patch_gives_eight_identical_copies() {
        let img = solid(8, 8, 42);
        let got = augment(&img, &img).unwrap();
        assert_eq!(got.len(), 8);
        for (p, l) in &got {
            assert_eq!(*p, img);
            assert_eq!(*l, img);
        }
    }

    #[test]
    fn corner_marker_lands_where_each_transform_sends_it() {
        let n = 5;
        let mut img = solid(n, n, 0);
        img.set_pixel(0, 0, [255, 0, 0]); // top-left marker
        let find = |im: &RgbImage| -> (usize, usize) {
            for y in 0..n {
                for x in 0..n {
                    if im.pixel(y, x)[0] == 255 {
                        return (y, x);
                    }
                }
            }
            panic!("marker vanished");
        };
        // (transform, expected marker position) — clockwise rotations.
        let expect = [
            (Dihedral::Identity, (0, 0)),
            (Dihedral::Rot90, (0, n - 1)),
            (Dihedral::Rot180, (n - 1, n - 1)),
            (Dihedral::Rot270, (n - 1, 0)),
            (Dihedral::Transpose, (0, 0)),
            (Dihedral::TransposeRot90, (0, n - 1)),
            (Dihedral::TransposeRot180, (n - 1, n - 1)),
            (Dihedral::TransposeRot270, (n - 1, 0)),
        ];
        for (t, pos) in expect {
            assert_eq!(find(&apply_dihedral(&img, t)), pos, "marker after {t:?}");
        }
        // A second, off-axis marker distinguishes all 8 transforms.
        img.set_pixel(1, 2, [0, 255, 0]);
        let mut images: Vec<Vec<u8>> = Dihedral::ALL
            .iter()
            .map(|&t| apply_dihedral(&img, t).data)
            .collect();
        images.sort();
        images.dedup();
        assert_eq!(images.len(), 8, "all eight orientations must be distinct");
    }

    #[test]
    fn transpose_is_an_involution_and_rotations_compose() {
        let mut rng = substream(3, Stream::Synth, 7);
        let n = 6;
        let data: Vec<u8> = (0..n * n * 3).map(|_| rng.gen()).collect();
        let img = RgbImage { h: n, w: n, data };
        let tt = apply_dihedral(&apply_dihedral(&img, Dihedral::Transpose), Dihedral::Transpose);
        assert_eq!(tt, img, "transpose twice recovers the original");
        let r4 = (0..4).fold(img.clone(), |acc, _| apply_dihedral(&acc, Dihedral::Rot90));
        assert_eq!(r4, img, "four quarter turns recover the original");
    }

    #[test]
    fn augmentation_preserves_per_class_pixel_counts() {
        let mut rng = substream(4, Stream::Synth, 8);
        let n = 9;
        let palette = [[0, 0, 0], [0, 255, 0], [255, 255, 255]];
        let data: Vec<u8> = (0..n * n)
            .flat_map(|_| palette[rng.gen_range(0..3)])
            .collect();
        let label = RgbImage { h: n, w: n, data };
        let count = |im: &RgbImage, color: [u8; 3]| {
            im.data.chunks_exact(3).filter(|px| **px == color).count()
        };
        let baseline: Vec<usize> = palette.iter().map(|&c| count(&label, c)).collect();
        for (_, l) in augment(&label, &label).unwrap() {
            let got: Vec<usize> = palette.iter().map(|&c| count(&l, c)).collect();
            assert_eq!(got, baseline, "class pixel counts are transform-invariant");
        }
    }
}
