//! Polar position targets relative to a section centroid, and rigid
//! alignment between sections.
//!
//! Coordinates are image coordinates: `x` grows to the right, `y` grows
//! downwards. Angles are in degrees, measured with `atan2(y - c_y, x - c_x)`,
//! so a positive rotation appears clockwise on screen.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOREGROUND_THRESHOLD: f32 = 0.85;

/// Centroid, normalising radius and alignment angle of one section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionGeometry {
    pub centroid: (f64, f64),
    pub r_max: f64,
    pub alignment_angle: f64,
    pub section_id: u32,
}

/// Normalised polar position of a patch's top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPosition {
    pub corner: (usize, usize),
    pub r0: f64,
    /// Degrees in `[0, 360)`.
    pub theta0: f64,
}

/// Rec. 601 luma for 3-channel `(c, h, w)` images; single channel passes through.
pub fn luminance(img: &Array3<f32>) -> Array2<f32> {
    match img.dim().0 {
        1 => img.index_axis(Axis(0), 0).to_owned(),
        _ => {
            let r = img.index_axis(Axis(0), 0);
            let g = img.index_axis(Axis(0), 1);
            let b = img.index_axis(Axis(0), 2);
            ndarray::Zip::from(&r)
                .and(&g)
                .and(&b)
                .map_collect(|&r, &g, &b| 0.299 * r + 0.587 * g + 0.114 * b)
        }
    }
}

fn foreground_pixels(lum: &Array2<f32>, threshold: f32) -> impl Iterator<Item = (f64, f64)> + '_ {
    lum.indexed_iter()
        .filter(move |(_, &v)| v < threshold)
        .map(|((y, x), _)| (x as f64, y as f64))
}

/// Mean pixel coordinate of pixels whose luminance lies below `threshold`.
pub fn compute_centroid(section: &Array3<f32>, threshold: f32) -> Result<(f64, f64)> {
    centroid_of(&luminance(section), threshold)
}

fn centroid_of(lum: &Array2<f32>, threshold: f32) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in foreground_pixels(lum, threshold) {
        sx += x;
        sy += y;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoForeground(threshold));
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Largest distance from `centroid` to any foreground pixel.
pub fn max_radius(section: &Array3<f32>, centroid: (f64, f64), threshold: f32) -> Result<f64> {
    let lum = luminance(section);
    let r = foreground_pixels(&lum, threshold)
        .map(|(x, y)| (x - centroid.0).hypot(y - centroid.1))
        .fold(f64::NEG_INFINITY, f64::max);
    if r == f64::NEG_INFINITY {
        return Err(Error::NoForeground(threshold));
    }
    if r <= 0.0 {
        return Err(Error::Degenerate("single foreground pixel gives zero radius".into()));
    }
    Ok(r)
}

/// Measures centroid and `r_max` from the image; `alignment_angle` comes from
/// registration against a reference section.
pub fn section_geometry(
    section: &Array3<f32>,
    threshold: f32,
    alignment_angle: f64,
    section_id: u32,
) -> Result<SectionGeometry> {
    let centroid = compute_centroid(section, threshold)?;
    let r_max = max_radius(section, centroid, threshold)?;
    Ok(SectionGeometry {
        centroid,
        r_max,
        alignment_angle,
        section_id,
    })
}

pub fn radial_distance(corner: (f64, f64), geom: &SectionGeometry) -> f64 {
    (geom.centroid.0 - corner.0).hypot(geom.centroid.1 - corner.1) / geom.r_max
}

/// Reduces an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid rounds tiny negative inputs up to exactly 360.
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Angle of the centroid-to-corner vector plus the alignment angle.
pub fn radial_angle(corner: (f64, f64), geom: &SectionGeometry) -> Result<f64> {
    let dx = corner.0 - geom.centroid.0;
    let dy = corner.1 - geom.centroid.1;
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    Ok(wrap_degrees(dy.atan2(dx).to_degrees() + geom.alignment_angle))
}

/// Position targets for a corner. A corner on the centroid gets `theta0 = 0`.
pub fn patch_position(corner: (usize, usize), geom: &SectionGeometry) -> PatchPosition {
    let c = (corner.0 as f64, corner.1 as f64);
    PatchPosition {
        corner,
        r0: radial_distance(c, geom),
        theta0: radial_angle(c, geom).unwrap_or(0.0),
    }
}

/// Rotates a single-channel image by `degrees` about `center` with bilinear
/// sampling; pixels sourced from outside the frame take `fill`.
pub fn rotate_about(img: &Array2<f32>, center: (f64, f64), degrees: f64, fill: f32) -> Array2<f32> {
    let (h, w) = img.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        // Inverse map: rotate the destination point by -degrees.
        let dx = x as f64 - center.0;
        let dy = y as f64 - center.1;
        let sx = c * dx + s * dy + center.0;
        let sy = -s * dx + c * dy + center.1;
        bilinear(img, sx, sy, fill)
    })
}

fn bilinear(img: &Array2<f32>, x: f64, y: f64, fill: f32) -> f32 {
    let (h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            fill
        } else {
            img[[yi as usize, xi as usize]]
        }
    };
    let a = at(x0, y0);
    let b = at(x0 + 1.0, y0);
    let c = at(x0, y0 + 1.0);
    let d = at(x0 + 1.0, y0 + 1.0);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

const ALIGNMENT_CLOSING: usize = 6;
const ALIGNMENT_BLUR: usize = 2;

fn rank_filter(img: &Array2<f32>, radius: usize, take_max: bool) -> Array2<f32> {
    let mut out = img.clone();
    for axis in [Axis(0), Axis(1)] {
        let src = out.clone();
        for (mut dst, lane) in out.lanes_mut(axis).into_iter().zip(src.lanes(axis)) {
            let n = lane.len();
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                let it = (lo..=hi).map(|k| lane[k]);
                dst[i] = if take_max {
                    it.fold(f32::NEG_INFINITY, f32::max)
                } else {
                    it.fold(f32::INFINITY, f32::min)
                };
            }
        }
    }
    out
}

/// Square-window grey closing: removes dark features narrower than the window.
pub fn grey_closing(img: &Array2<f32>, radius: usize) -> Array2<f32> {
    rank_filter(&rank_filter(img, radius, true), radius, false)
}

/// Repeated separable box filter with edge clamping.
pub fn box_blur(img: &Array2<f32>, radius: usize, passes: usize) -> Array2<f32> {
    let mut out = img.clone();
    for _ in 0..passes {
        for axis in [Axis(0), Axis(1)] {
            let src = out.clone();
            for (mut dst, lane) in out.lanes_mut(axis).into_iter().zip(src.lanes(axis)) {
                let n = lane.len();
                let r = radius as isize;
                let mut acc: f32 = (-r..=r)
                    .map(|k| lane[k.clamp(0, n as isize - 1) as usize])
                    .sum();
                let norm = 1.0 / (2 * radius + 1) as f32;
                for i in 0..n as isize {
                    dst[i as usize] = acc * norm;
                    let add = (i + r + 1).clamp(0, n as isize - 1) as usize;
                    let sub = (i - r).clamp(0, n as isize - 1) as usize;
                    acc += lane[add] - lane[sub];
                }
            }
        }
    }
    out
}

fn ncc(a: &Array2<f32>, b: &Array2<f32>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let da = x as f64 - ma;
        let db = y as f64 - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Rotation angle in `{0, step, 2*step, ..} ∩ [0, search_range]` that, applied
/// to `moving` about its centroid, best matches `reference` by normalised
/// cross-correlation of luminance.
///
/// With this convention a section generated with misalignment `α` yields
/// `α`, and `θ + α` maps its angles back into the reference frame.
pub fn estimate_alignment_angle(
    reference: &Array3<f32>,
    moving: &Array3<f32>,
    search_range: f64,
    step: f64,
) -> Result<f64> {
    if reference.shape() != moving.shape() {
        return Err(Error::shape(reference.shape(), moving.shape()));
    }
    if !(step > 0.0) || !(search_range >= 0.0) {
        return Err(Error::config("step", "step must be positive and range non-negative"));
    }
    // Small dark texture elements differ between sections and produce
    // spurious peaks; a grey closing removes them before matching.
    let prep = |img: &Array3<f32>| {
        box_blur(&grey_closing(&luminance(img), ALIGNMENT_CLOSING), ALIGNMENT_BLUR, 1)
    };
    let lref = prep(reference);
    let lmov = prep(moving);
    let center = centroid_of(&lmov, DEFAULT_FOREGROUND_THRESHOLD)?;
    let fill = lmov[[0, 0]];
    let n = (search_range / step + 1e-9).floor() as usize;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=n {
        let angle = k as f64 * step;
        let rotated = rotate_about(&lmov, center, angle, fill);
        let score = ncc(&rotated, &lref)
            .ok_or_else(|| Error::Degenerate("constant image in alignment".into()))?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((angle, score));
        }
    }
    Ok(best.map(|(a, _)| a).unwrap_or(0.0))
}
