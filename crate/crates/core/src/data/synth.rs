//! Deterministic synthetic orchard scenes: textured green crown ellipses on
//! noisy soil, optional overlapping crown pairs whose ground truth separates
//! them with a white boundary ribbon along their equidistance curve, and
//! olive distractor vegetation that belongs to the background class. Every
//! scene is a pure function of its `SceneSpec`.
//!
//! Overlapping crowns render as one continuous canopy: no seam line, no
//! darkened valley. The only traces of the hidden boundary are each crown's
//! slight color tint and the phase change of the texture noise, both buried
//! under correlated clump noise. A plain foreground/background segmenter
//! gains almost nothing from those few pixels, while the boundary-weighted
//! three-class loss makes them worth learning — which is the premise the
//! touching-crown separation experiments rest on.

use rand::Rng;

use crate::data::labels::{COLOR_BACKGROUND, COLOR_BOUNDARY, COLOR_MANGO};
use crate::data::{AnnotationBox, RgbImage};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Everything that determines a scene. Total crowns rendered =
/// `crowns + 2·overlap_pairs`; the paired ones touch, the rest are isolated.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Crowns placed in isolation (never touching anything).
    pub crowns: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Pairs of crowns rendered in contact, separated in ground truth by a
    /// white boundary band.
    pub overlap_pairs: usize,
    /// Non-mango vegetation blobs; labeled background in ground truth.
    pub distractors: usize,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.radius_min < 4.0 {
            return Err(Error::invalid("synth_scene", "crown radii must be at least 4 px"));
        }
        if self.radius_max < self.radius_min {
            return Err(Error::invalid("synth_scene", "radius_max must be at least radius_min"));
        }
        // Worst-case pair bbox: two maximal crowns at minimal overlap, plus
        // the 2-px border margin on both sides.
        let axis = self.radius_max * AXIS_JITTER_MAX;
        let needed = 4.0 * axis - MIN_OVERLAP_FRAC * self.radius_min + 2.0 * MARGIN;
        let fits_pair = self.overlap_pairs == 0 || needed <= self.height.min(self.width) as f64;
        let fits_single = 2.0 * (axis + MARGIN) <= self.height.min(self.width) as f64;
        if (self.crowns > 0 && !fits_single) || !fits_pair {
            return Err(Error::invalid(
                "synth_scene",
                format!(
                    "crowns of radius {} cannot fit a {}x{} image",
                    self.radius_max, self.height, self.width
                ),
            ));
        }
        Ok(())
    }
}

const MARGIN: f64 = 2.0;
const AXIS_JITTER_MIN: f64 = 0.97;
const AXIS_JITTER_MAX: f64 = 1.03;
/// Pair overlap depth as a fraction of the smaller crown's radius. Deep
/// enough that the merged silhouette is a smooth peanut rather than two
/// kissing discs — a pinched waist would hand the boundary away for free.
const MIN_OVERLAP_FRAC: f64 = 0.35;
const MAX_OVERLAP_FRAC: f64 = 0.55;
/// Half-width of the white boundary ribbon, in units of the radial-margin
/// difference between the two partnered crowns. That difference changes by
/// at most 2 per pixel, so the ribbon is at least 3 px wide across the
/// equidistance curve, and widens into caps where the two crown outlines
/// cross — exactly where a thin band would otherwise leave the green masses
/// diagonally connected.
const BAND_HALF_DIFF: f64 = 3.0;
/// Extra ribbon half-width blended in within CAP_REACH px of the nearer
/// outline. A segmenter rounds the ribbon's ends off by a pixel or two
/// (they look like ordinary rim), and an end rounded past the outline
/// re-bridges the pair; anchoring the ends wider absorbs that error.
const CAP_EXTRA: f64 = 3.0;
const CAP_REACH: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Axis-aligned ellipse with a per-crown color tint; `partner` links the two
/// halves of an overlapping pair.
#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    a: f64, // semi-axis along x
    b: f64, // semi-axis along y
    tint: [f64; 3],
    partner: Option<usize>,
}

impl Blob {
    /// Squared normalized ellipse coordinate: ≤ 1 inside.
    fn ellipse(&self, y: f64, x: f64) -> f64 {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.ellipse(y, x) <= 1.0
    }

    /// Approximate signed distance to the outline in pixels, negative inside;
    /// radial scaling is exact for circles and near-exact for the mild axis
    /// jitter used here.
    fn margin(&self, y: f64, x: f64) -> f64 {
        (self.ellipse(y, x).sqrt() - 1.0) * 0.5 * (self.a + self.b)
    }

    fn max_axis(&self) -> f64 {
        self.a.max(self.b)
    }

    fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.cx - self.a >= MARGIN
            && self.cx + self.a <= w as f64 - 1.0 - MARGIN
            && self.cy - self.b >= MARGIN
            && self.cy + self.b <= h as f64 - 1.0 - MARGIN
    }
}

/// Render one scene: the RGB image, its annotated ground truth, and one
/// annotation box per crown (in placement order, pairs first).
pub fn synth_scene(spec: &SceneSpec) -> Result<(RgbImage, RgbImage, Vec<AnnotationBox>)> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Stream::Synth, 0);
    let noise_seed: u64 = rng.gen();
    let (h, w) = (spec.height, spec.width);

    let mut crowns: Vec<Blob> = Vec::with_capacity(spec.crowns + 2 * spec.overlap_pairs);
    let clear_of = |blob: &Blob, others: &[Blob], gap: f64, skip: Option<usize>| {
        others.iter().enumerate().all(|(i, o)| {
            if skip == Some(i) {
                return true;
            }
            let d = ((blob.cx - o.cx).powi(2) + (blob.cy - o.cy).powi(2)).sqrt();
            d >= blob.max_axis() + o.max_axis() + gap
        })
    };

    for _ in 0..spec.overlap_pairs {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let r1 = rng.gen_range(spec.radius_min..=spec.radius_max);
            let a1 = r1 * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX);
            let b1 = r1 * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX);
            let r2 = rng.gen_range(spec.radius_min..=spec.radius_max);
            let a2 = r2 * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX);
            let b2 = r2 * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX);
            let depth = rng.gen_range(MIN_OVERLAP_FRAC..=MAX_OVERLAP_FRAC) * r1.min(r2);
            let horizontal = rng.gen_bool(0.5);
            let cy1 = rng.gen_range(0.0..h as f64);
            let cx1 = rng.gen_range(0.0..w as f64);
            let (cy2, cx2) = if horizontal {
                (cy1, cx1 + a1 + a2 - depth)
            } else {
                (cy1 + b1 + b2 - depth, cx1)
            };
            let first = Blob { cy: cy1, cx: cx1, a: a1, b: b1, tint: [0.0; 3], partner: None };
            let second = Blob { cy: cy2, cx: cx2, a: a2, b: b2, tint: [0.0; 3], partner: None };
            let ok = first.in_bounds(h, w)
                && second.in_bounds(h, w)
                && clear_of(&first, &crowns, 6.0, None)
                && clear_of(&second, &crowns, 6.0, None);
            ok.then_some((first, second))
        });
        let Some((mut first, mut second)) = placed else {
            return Err(Error::ScenePacking { what: "overlap pair", attempts: PLACEMENT_ATTEMPTS });
        };
        let i = crowns.len();
        first.partner = Some(i + 1);
        second.partner = Some(i);
        // Partnered crowns share a base tint with only a small per-crown
        // delta — adjacent trees look alike, so the color step across the
        // hidden boundary stays a fraction of the clump-noise amplitude.
        let base = sample_tint(&mut rng, 12.0);
        let (d1, d2) = (sample_tint(&mut rng, 4.0), sample_tint(&mut rng, 4.0));
        first.tint = std::array::from_fn(|k| base[k] + d1[k]);
        second.tint = std::array::from_fn(|k| base[k] + d2[k]);
        crowns.push(first);
        crowns.push(second);
    }

    for _ in 0..spec.crowns {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let r = rng.gen_range(spec.radius_min..=spec.radius_max);
            let blob = Blob {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                a: r * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX),
                b: r * rng.gen_range(AXIS_JITTER_MIN..=AXIS_JITTER_MAX),
                tint: [0.0; 3],
                partner: None,
            };
            (blob.in_bounds(h, w) && clear_of(&blob, &crowns, 6.0, None)).then_some(blob)
        });
        let Some(mut blob) = placed else {
            return Err(Error::ScenePacking { what: "crown", attempts: PLACEMENT_ATTEMPTS });
        };
        blob.tint = sample_tint(&mut rng, 12.0);
        crowns.push(blob);
    }

    let mut distractors: Vec<Blob> = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let r = rng.gen_range(6.0..=14.0);
            let blob = Blob {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                a: r * rng.gen_range(0.9..=1.1),
                b: r * rng.gen_range(0.9..=1.1),
                tint: [0.0; 3],
                partner: None,
            };
            (blob.in_bounds(h, w) && clear_of(&blob, &crowns, 4.0, None)).then_some(blob)
        });
        let Some(mut blob) = placed else {
            return Err(Error::ScenePacking { what: "distractor", attempts: PLACEMENT_ATTEMPTS });
        };
        blob.tint = sample_tint(&mut rng, 15.0);
        distractors.push(blob);
    }

    // Ground truth and annotation boxes in one pass. Within a pair's
    // footprint, a pixel turns white when its radial margins to the two
    // partnered crowns differ by at most the ribbon half-width: a ribbon
    // along the equidistance curve that spans the overlap lens and caps the
    // corners where the outlines cross, leaving the pair's green masses
    // 8-disconnected. The half-width grows near the outline crossings (where
    // both margins approach zero) so the ribbon's ends stay anchored to the
    // rim. White pixels credit no box; a green pixel inside both masks
    // credits its nearer crown, so a pair's boxes meet at the ribbon instead
    // of interpenetrating.
    let mut gt = RgbImage::filled(h, w, COLOR_BACKGROUND);
    let mut boxes: Vec<Option<AnnotationBox>> = vec![None; crowns.len()];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let mut members: [usize; 2] = [usize::MAX; 2];
            let mut n_members = 0usize;
            for (i, c) in crowns.iter().enumerate() {
                if c.contains(yf, xf) {
                    if n_members < 2 {
                        members[n_members] = i;
                    }
                    n_members += 1;
                }
            }
            if n_members == 0 {
                continue;
            }
            let mut white = false;
            for &i in &members[..n_members.min(2)] {
                let Some(p) = crowns[i].partner else { continue };
                let (mi, mp) = (crowns[i].margin(yf, xf), crowns[p].margin(yf, xf));
                let prox = mi.abs().min(mp.abs());
                let half = BAND_HALF_DIFF + CAP_EXTRA * (1.0 - prox / CAP_REACH).max(0.0);
                if (mi - mp).abs() <= half {
                    white = true;
                }
            }
            if white {
                gt.set_pixel(y, x, COLOR_BOUNDARY);
            } else {
                gt.set_pixel(y, x, COLOR_MANGO);
                let owner = if n_members == 1 {
                    members[0]
                } else {
                    let (i, j) = (members[0], members[1]);
                    if crowns[i].margin(yf, xf) <= crowns[j].margin(yf, xf) { i } else { j }
                };
                grow_box(&mut boxes[owner], y, x);
            }
        }
    }
    let boxes: Vec<AnnotationBox> = boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            b.unwrap_or_else(|| {
                unreachable!("crown {i} rendered no green pixels; overlap depth keeps crowns visible")
            })
        })
        .collect();

    // RGB rendering: layered clump noise plus a gentle interior shading that
    // steepens only toward the outer rim. Overlapping crowns hand each pixel
    // to the nearer crown (same rule as the ground truth), so a pair reads
    // as one continuous canopy whose only seam traces are the tint step and
    // the texture phase change at the hidden equidistance curve.
    let mut img = RgbImage::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let crown = crowns
                .iter()
                .filter(|c| c.contains(yf, xf))
                .map(|c| (c, c.margin(yf, xf)))
                .min_by(|l, r| l.1.total_cmp(&r.1));
            let px = if let Some((c, _)) = crown {
                shade([40.0, 140.0, 50.0], c.tint, c.ellipse(yf, xf), 20.0, noise_seed, y, x)
            } else if let Some((d, e)) = distractors
                .iter()
                .filter(|d| d.contains(yf, xf))
                .map(|d| (d, d.ellipse(yf, xf)))
                .min_by(|l, r| l.1.total_cmp(&r.1))
            {
                shade([100.0, 110.0, 40.0], d.tint, e, 15.0, noise_seed, y, x)
            } else {
                shade([120.0, 85.0, 55.0], [0.0; 3], 0.0, 18.0, noise_seed, y, x)
            };
            img.set_pixel(y, x, px);
        }
    }
    Ok((img, gt, boxes))
}

fn sample_tint(rng: &mut impl Rng, span: f64) -> [f64; 3] {
    [
        rng.gen_range(-span..=span),
        rng.gen_range(-span..=span),
        rng.gen_range(-span..=span),
    ]
}

fn grow_box(slot: &mut Option<AnnotationBox>, y: usize, x: usize) {
    match slot {
        None => {
            *slot = Some(AnnotationBox { xmin: x, ymin: y, xmax: x, ymax: y });
        }
        Some(b) => {
            b.xmin = b.xmin.min(x);
            b.xmax = b.xmax.max(x);
            b.ymin = b.ymin.min(y);
            b.ymax = b.ymax.max(y);
        }
    }
}

/// Base color, per-blob tint, rim darkening by squared normalized ellipse
/// coordinate `e` (0 center → 1 rim; squaring keeps the interior nearly
/// flat), and per-channel texture noise of amplitude `noise`.
fn shade(
    base: [f64; 3],
    tint: [f64; 3],
    e: f64,
    noise: f64,
    seed: u64,
    y: usize,
    x: usize,
) -> [u8; 3] {
    let e = e.clamp(0.0, 1.0);
    let dim = 1.0 - 0.25 * e * e;
    std::array::from_fn(|k| {
        let n = texture_noise(seed, y, x, k as u64);
        (base[k] * dim + tint[k] + n * noise).round().clamp(0.0, 255.0) as u8
    })
}

/// Layered texture in roughly [−1, 1]: two octaves of bilinear value noise
/// (7- and 3-px cells, reading as foliage clumps) over a pixel-level
/// residual. The correlated clumps are what buries the faint per-crown tint
/// step so it cannot be read off any single pixel.
fn texture_noise(seed: u64, y: usize, x: usize, k: u64) -> f64 {
    0.5 * lattice_noise(seed ^ 0x517C_C1B7_2722_0A95, y, x, k, 7)
        + 0.3 * lattice_noise(seed ^ 0x6C62_272E_07BB_0142, y, x, k, 3)
        + 0.2 * hash_noise(seed, y, x, k)
}

/// Bilinear interpolation of `hash_noise` sampled on a `cell`-pixel lattice.
fn lattice_noise(seed: u64, y: usize, x: usize, k: u64, cell: usize) -> f64 {
    let (gy, gx) = (y / cell, x / cell);
    let fy = (y - gy * cell) as f64 / cell as f64;
    let fx = (x - gx * cell) as f64 / cell as f64;
    let corner = |dy: usize, dx: usize| hash_noise(seed, gy + dy, gx + dx, k);
    let top = corner(0, 0) * (1.0 - fx) + corner(0, 1) * fx;
    let bottom = corner(1, 0) * (1.0 - fx) + corner(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Deterministic value noise in [−1, 1): a splitmix64-style finalizer over
/// the pixel coordinates and channel index.
fn hash_noise(seed: u64, y: usize, x: usize, k: u64) -> f64 {
    let mut z = seed
        ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (x as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ k.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}
