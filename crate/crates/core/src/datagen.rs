//! Synthetic density-banded sections, patch extraction and artifact
//! simulators.

use std::f64::consts::PI;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    luminance, patch_position, section_geometry, PatchPosition, SectionGeometry,
    DEFAULT_FOREGROUND_THRESHOLD,
};
use crate::imageio::{from_rgb8, quantize, to_rgb8};

pub const BACKGROUND_LABEL: u8 = 255;

const BACKGROUND_RGB: [f32; 3] = [0.96, 0.96, 0.96];
const TISSUE_RGB: [f32; 3] = [0.80, 0.70, 0.82];
const DOT_RGB: [f32; 3] = [0.33, 0.18, 0.42];
const TINT_AMPLITUDE: f32 = 0.06;
const SPOKE_AMPLITUDE: f32 = 0.03;
const SPOKES: f64 = 12.0;
const PIXEL_NOISE: f64 = 0.015;
pub const TEAR_VALUE: f32 = 0.97;
pub const BLACKDOT_VALUE: f32 = 0.02;

/// QF levels evaluated in the restoration tables.
pub const QF_TABLE_PRESET: [u8; 3] = [5, 10, 15];
/// QF levels named in the dataset protocol.
pub const QF_PROTOCOL_PRESET: [u8; 3] = [5, 15, 25];
pub const GAMMA_LEVELS: [f64; 3] = [1.2, 1.3, 1.4];

/// One radial band of the synthetic tissue disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub label: String,
    /// Expected dots per 1000 square pixels.
    pub density: f64,
    /// Inclusive range of dot radii in pixels.
    pub dot_radius: (f64, f64),
    /// Inner and outer radius as fractions of the disk radius.
    pub band: (f64, f64),
}

impl RegionSpec {
    /// Four equal-width bands, densest at the centre. Dot size grows as
    /// density falls so every band covers a similar fraction of tissue:
    /// mean colour alone says little about the band, texture does.
    pub fn default_bands() -> Vec<RegionSpec> {
        let bands = [
            ("very_dense", 90.0, (0.8, 1.0)),
            ("dense", 24.0, (1.6, 1.9)),
            ("medium", 8.0, (2.8, 3.2)),
            ("sparse", 3.0, (4.8, 5.5)),
        ];
        bands
            .iter()
            .enumerate()
            .map(|(i, &(label, density, dot_radius))| RegionSpec {
                label: label.to_string(),
                density,
                dot_radius,
                band: (i as f64 / 4.0, (i + 1) as f64 / 4.0),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSectionSpec {
    /// `(height, width)` in pixels.
    pub size: (usize, usize),
    /// Radius of the tissue disk in pixels.
    pub radius: f64,
    pub regions: Vec<RegionSpec>,
    pub seed: u64,
    /// Misalignment in degrees relative to the reference frame.
    pub rotation: f64,
    pub section_id: u32,
}

impl SyntheticSectionSpec {
    pub fn desk(seed: u64, rotation: f64, section_id: u32) -> Self {
        Self {
            size: (512, 512),
            radius: 240.0,
            regions: RegionSpec::default_bands(),
            seed,
            rotation,
            section_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h == 0 || w == 0 {
            return Err(Error::config("size", "must be positive"));
        }
        let max_r = (h.min(w) as f64 - 1.0) / 2.0;
        if !(self.radius > 0.0 && self.radius <= max_r) {
            return Err(Error::config(
                "radius",
                format!("must lie in (0, {max_r}] to fit the frame"),
            ));
        }
        if !self.rotation.is_finite() {
            return Err(Error::config("rotation", "must be finite"));
        }
        if self.regions.is_empty() || self.regions.len() >= BACKGROUND_LABEL as usize {
            return Err(Error::config("regions", "need between 1 and 254 regions"));
        }
        let mut edge = 0.0;
        for r in &self.regions {
            if !(r.density.is_finite() && r.density >= 0.0) {
                return Err(Error::config("regions.density", "must be finite and >= 0"));
            }
            let (lo, hi) = r.dot_radius;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config("regions.dot_radius", "need 0 < min <= max"));
            }
            if (r.band.0 - edge).abs() > 1e-12 || r.band.1 <= r.band.0 {
                return Err(Error::config(
                    "regions.band",
                    "bands must be ordered, contiguous and partition [0, 1]",
                ));
            }
            edge = r.band.1;
        }
        if (edge - 1.0).abs() > 1e-12 {
            return Err(Error::config("regions.band", "bands must end at 1"));
        }
        Ok(())
    }
}

/// Generated section with its aligned label map.
#[derive(Clone, Debug)]
pub struct SyntheticSection {
    pub image: Array3<f32>,
    /// Region index per pixel, [`BACKGROUND_LABEL`] outside the tissue.
    pub labels: Array2<u8>,
    pub geometry: SectionGeometry,
    /// Ground-truth misalignment used to render the section.
    pub rotation: f64,
    /// Number of dots placed in each region.
    pub dot_counts: Vec<usize>,
}

fn band_of(regions: &[RegionSpec], u: f64) -> usize {
    regions
        .iter()
        .position(|r| u < r.band.1)
        .unwrap_or(regions.len() - 1)
}

/// Renders a section. Content is drawn directly in the rotated frame, which
/// is equivalent to rendering upright and rotating by `-rotation` afterwards.
/// The stored alignment angle is the ground-truth `rotation`.
pub fn generate_section(spec: &SyntheticSectionSpec) -> Result<SyntheticSection> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let alpha = spec.rotation.to_radians();

    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut labels = Array2::from_elem((h, w), BACKGROUND_LABEL);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d = dx.hypot(dy);
            let mut rgb = if d <= spec.radius {
                labels[[y, x]] = band_of(&spec.regions, d / spec.radius) as u8;
                let phi = dy.atan2(dx) + alpha;
                let mut c = TISSUE_RGB;
                c[0] += TINT_AMPLITUDE * phi.cos() as f32;
                c[2] += TINT_AMPLITUDE * phi.sin() as f32;
                let spoke = SPOKE_AMPLITUDE * (SPOKES * phi).cos() as f32;
                c.iter_mut().for_each(|v| *v += spoke);
                c
            } else {
                BACKGROUND_RGB
            };
            for v in rgb.iter_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
            for c in 0..3 {
                image[[c, y, x]] = rgb[c];
            }
        }
    }

    let mut dot_counts = Vec::with_capacity(spec.regions.len());
    for region in &spec.regions {
        let r_in = region.band.0 * spec.radius;
        let r_out = region.band.1 * spec.radius;
        let area = PI * (r_out * r_out - r_in * r_in);
        let lambda = region.density * area / 1000.0;
        let n = if lambda > 0.0 {
            Poisson::new(lambda).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..n {
            let rho = rng.random_range(r_in * r_in..r_out * r_out).sqrt();
            let phi_ref = rng.random_range(0.0..2.0 * PI);
            let (lo, hi) = region.dot_radius;
            let radius = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04f32..0.04));
            let phi = phi_ref - alpha;
            let px = cx + rho * phi.cos();
            let py = cy + rho * phi.sin();
            stamp_dot(&mut image, (px, py), radius, jitter, (cx, cy), spec.radius);
        }
        dot_counts.push(n);
    }

    let image = quantize(&image);
    let geometry = section_geometry(
        &image,
        DEFAULT_FOREGROUND_THRESHOLD,
        spec.rotation,
        spec.section_id,
    )?;
    Ok(SyntheticSection {
        image,
        labels,
        geometry,
        rotation: spec.rotation,
        dot_counts,
    })
}

fn stamp_dot(
    image: &mut Array3<f32>,
    center: (f64, f64),
    radius: f64,
    jitter: [f32; 3],
    disk_center: (f64, f64),
    disk_radius: f64,
) {
    let (_, h, w) = image.dim();
    let reach = radius + 1.0;
    let x0 = (center.0 - reach).floor().max(0.0) as usize;
    let y0 = (center.1 - reach).floor().max(0.0) as usize;
    let x1 = ((center.0 + reach).ceil() as usize).min(w - 1);
    let y1 = ((center.1 + reach).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (xf, yf) = (x as f64, y as f64);
            if (xf - disk_center.0).hypot(yf - disk_center.1) > disk_radius {
                continue;
            }
            let cover = (radius + 0.5 - (xf - center.0).hypot(yf - center.1)).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                for c in 0..3 {
                    let v = &mut image[[c, y, x]];
                    *v = *v * (1.0 - cover) + (DOT_RGB[c] + jitter[c]) * cover;
                }
            }
        }
    }
}

/// A patch with its position targets and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    /// `(3, h, w)` in `[0, 1]`.
    pub image: Array3<f32>,
    pub position: PatchPosition,
    pub region: usize,
    pub section_id: u32,
}

impl PatchRecord {
    pub fn corner(&self) -> (usize, usize) {
        self.position.corner
    }
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub records: Vec<PatchRecord>,
    pub tiled: usize,
    pub rejected: usize,
}

/// Raster tiling that keeps windows lying entirely inside a single region.
pub fn extract_patches(
    section: &Array3<f32>,
    labels: &Array2<u8>,
    geom: &SectionGeometry,
    patch_shape: (usize, usize),
    stride: usize,
) -> Result<Extraction> {
    let (_, h, w) = section.dim();
    let (ph, pw) = patch_shape;
    if labels.dim() != (h, w) {
        return Err(Error::shape(&[h, w], labels.shape()));
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::config("patch", format!("{ph}x{pw} does not fit {h}x{w}")));
    }
    let mut records = Vec::new();
    let mut tiled = 0;
    for y in (0..=h - ph).step_by(stride) {
        for x in (0..=w - pw).step_by(stride) {
            tiled += 1;
            let window = labels.slice(s![y..y + ph, x..x + pw]);
            let first = window[[0, 0]];
            if first == BACKGROUND_LABEL || window.iter().any(|&l| l != first) {
                continue;
            }
            records.push(PatchRecord {
                image: section.slice(s![.., y..y + ph, x..x + pw]).to_owned(),
                position: patch_position((x, y), geom),
                region: first as usize,
                section_id: geom.section_id,
            });
        }
    }
    let rejected = tiled - records.len();
    Ok(Extraction {
        records,
        tiled,
        rejected,
    })
}

/// Sections with even id are for training, odd ids for validation.
pub fn is_training_section(section_id: u32) -> bool {
    section_id.is_multiple_of(2)
}

fn tissue_mask(img: &Array3<f32>) -> Array2<bool> {
    luminance(img).mapv(|v| v < DEFAULT_FOREGROUND_THRESHOLD)
}

/// Whitens a random star-shaped blob covering about `area_fraction` of the
/// tissue. Returns the artifact image and the mask of whitened pixels.
pub fn simulate_tear<R: Rng + ?Sized>(
    img: &Array3<f32>,
    area_fraction: f64,
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<bool>)> {
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(Error::config("area_fraction", "must lie in (0, 1)"));
    }
    let tissue = tissue_mask(img);
    let (h, w) = tissue.dim();
    let tissue_px: Vec<(usize, usize)> = tissue
        .indexed_iter()
        .filter(|(_, &t)| t)
        .map(|((y, x), _)| (x, y))
        .collect();
    let mut out = img.clone();
    let mut mask = Array2::from_elem((h, w), false);
    if tissue_px.is_empty() {
        return Ok((out, mask));
    }
    let r0 = (area_fraction * tissue_px.len() as f64 / PI).sqrt();
    let harmonics: Vec<(f64, f64)> = (2..=4)
        .map(|_| (rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let radius_at = |phi: f64| {
        r0 * (1.0
            + harmonics
                .iter()
                .enumerate()
                .map(|(k, &(a, p))| a * ((k + 2) as f64 * phi + p).cos())
                .sum::<f64>())
    };
    // Prefer a centre whose surrounding ring lies in tissue.
    let inside = |x: f64, y: f64| {
        x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && tissue[[y as usize, x as usize]]
    };
    let mut center = tissue_px[0];
    for _ in 0..64 {
        let cand = tissue_px[rng.random_range(0..tissue_px.len())];
        center = cand;
        let ring_ok = (0..32).all(|k| {
            let phi = k as f64 * PI / 16.0;
            let rr = 1.2 * r0 + 1.0;
            inside(cand.0 as f64 + rr * phi.cos(), cand.1 as f64 + rr * phi.sin())
        });
        if ring_ok {
            break;
        }
    }
    let (cx, cy) = (center.0 as f64, center.1 as f64);
    for ((y, x), m) in mask.indexed_iter_mut() {
        if !tissue[[y, x]] {
            continue;
        }
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let d = dx.hypot(dy);
        if d < radius_at(dy.atan2(dx)) {
            *m = true;
            for c in 0..out.dim().0 {
                out[[c, y, x]] = TEAR_VALUE;
            }
        }
    }
    Ok((out, mask))
}

/// Round trip through a baseline JPEG encoder at quality `qf`.
pub fn simulate_jpeg(img: &Array3<f32>, qf: u8) -> Result<Array3<f32>> {
    if !(1..=100).contains(&qf) {
        return Err(Error::config("qf", "must lie in [1, 100]"));
    }
    let rgb = to_rgb8(img)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, qf).encode_image(&rgb)?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(from_rgb8(&decoded))
}

pub fn adjust_gamma(img: &Array3<f32>, gamma: f64) -> Result<Array3<f32>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config("gamma", "must be positive"));
    }
    let g = gamma as f32;
    Ok(img.mapv(|v| v.max(0.0).powf(g)))
}

/// Pastes `dot_count` non-overlapping opaque dark disks.
pub fn simulate_blackdot<R: Rng + ?Sized>(
    img: &Array3<f32>,
    dot_count: usize,
    dot_radius: f64,
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<bool>)> {
    let (_, h, w) = img.dim();
    let mut out = img.clone();
    let mut mask = Array2::from_elem((h, w), false);
    if dot_count == 0 {
        return Ok((out, mask));
    }
    if !(dot_radius > 0.0) || 2.0 * dot_radius + 1.0 > h.min(w) as f64 {
        return Err(Error::config("dot_radius", "dots do not fit in the image"));
    }
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(dot_count);
    let mut attempts = 0;
    while centers.len() < dot_count {
        attempts += 1;
        if attempts > 1000 * dot_count {
            return Err(Error::Degenerate(format!(
                "could not place {dot_count} disjoint dots of radius {dot_radius}"
            )));
        }
        let c = (
            rng.random_range(dot_radius..=w as f64 - 1.0 - dot_radius),
            rng.random_range(dot_radius..=h as f64 - 1.0 - dot_radius),
        );
        if centers
            .iter()
            .all(|o| (o.0 - c.0).hypot(o.1 - c.1) >= 2.0 * dot_radius + 1.0)
        {
            centers.push(c);
        }
    }
    for ((y, x), m) in mask.indexed_iter_mut() {
        let hit = centers
            .iter()
            .any(|c| (x as f64 - c.0).hypot(y as f64 - c.1) <= dot_radius);
        if hit {
            *m = true;
            for c in 0..out.dim().0 {
                out[[c, y, x]] = BLACKDOT_VALUE;
            }
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::radial_distance;

    fn small_spec(density: f64) -> SyntheticSectionSpec {
        SyntheticSectionSpec {
            size: (128, 128),
            radius: 60.0,
            regions: vec![RegionSpec {
                label: "only".into(),
                density,
                dot_radius: (1.5, 2.5),
                band: (0.0, 1.0),
            }],
            seed: 3,
            rotation: 0.0,
            section_id: 0,
        }
    }

    #[test]
    fn rejects_bands_that_do_not_partition() {
        let mut spec = SyntheticSectionSpec::desk(0, 0.0, 0);
        spec.regions[1].band.0 = 0.3;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSectionSpec::desk(0, 0.0, 0);
        spec.regions.pop();
        assert!(spec.validate().is_err());
        assert!(SyntheticSectionSpec::desk(0, 0.0, 0).validate().is_ok());
    }

    #[test]
    fn zero_density_places_no_dots() {
        let s = generate_section(&small_spec(0.0)).unwrap();
        assert_eq!(s.dot_counts, vec![0]);
        let lum = luminance(&s.image);
        assert!(lum.iter().all(|&v| v > 0.6));
    }

    #[test]
    fn dot_count_matches_poisson_expectation() {
        let spec = small_spec(10.0);
        let expected = 10.0 * PI * 60.0 * 60.0 / 1000.0;
        let s = generate_section(&spec).unwrap();
        let n = s.dot_counts[0] as f64;
        assert!((n - expected).abs() <= 3.0 * expected.sqrt(), "{n} vs {expected}");
    }

    #[test]
    fn same_seed_gives_identical_sections() {
        let a = generate_section(&small_spec(8.0)).unwrap();
        let b = generate_section(&small_spec(8.0)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn section_is_quantised_and_geometry_is_centred() {
        let s = generate_section(&SyntheticSectionSpec::desk(1, 0.0, 0)).unwrap();
        assert!(s.image.iter().all(|&v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-4));
        let (cx, cy) = s.geometry.centroid;
        assert!((cx - 255.5).abs() < 1.0 && (cy - 255.5).abs() < 1.0);
        assert!((s.geometry.r_max - 240.0).abs() < 2.0);
    }

    #[test]
    fn extraction_accounting_and_purity() {
        let s = generate_section(&SyntheticSectionSpec::desk(2, 5.0, 4)).unwrap();
        let ex = extract_patches(&s.image, &s.labels, &s.geometry, (32, 32), 16).unwrap();
        let per_axis = (512 - 32) / 16 + 1;
        assert_eq!(ex.tiled, per_axis * per_axis);
        assert_eq!(ex.records.len() + ex.rejected, ex.tiled);
        for r in &ex.records {
            let (x, y) = r.corner();
            let win = s.labels.slice(s![y..y + 32, x..x + 32]);
            assert!(win.iter().all(|&l| l as usize == r.region));
            assert_eq!(r.position, patch_position((x, y), &s.geometry));
            assert!((0.0..=1.0).contains(&r.position.r0));
            assert_eq!(r.section_id, 4);
        }
        // Every band contributes patches; outer (larger) bands contribute more.
        let mut counts = [0usize; 4];
        for r in &ex.records {
            counts[r.region] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!(counts[1] <= counts[2] && counts[2] <= counts[3], "{counts:?}");
    }

    #[test]
    fn straddling_patch_is_rejected() {
        let img = Array3::from_elem((3, 8, 8), 0.5);
        let labels = Array2::from_shape_fn((8, 8), |(_, x)| if x < 4 { 0 } else { 1 });
        let g = SectionGeometry {
            centroid: (3.5, 3.5),
            r_max: 5.0,
            alignment_angle: 0.0,
            section_id: 0,
        };
        let ex = extract_patches(&img, &labels, &g, (4, 4), 2).unwrap();
        assert_eq!(ex.tiled, 9);
        assert!(ex.records.iter().all(|r| r.corner().0 == 0 || r.corner().0 == 4));
        assert_eq!(ex.records.len(), 6);
    }

    #[test]
    fn patch_at_centroid_has_zero_radius() {
        let img = Array3::from_elem((3, 8, 8), 0.5);
        let labels = Array2::zeros((8, 8));
        let g = SectionGeometry {
            centroid: (4.0, 4.0),
            r_max: 6.0,
            alignment_angle: 0.0,
            section_id: 0,
        };
        let ex = extract_patches(&img, &labels, &g, (4, 4), 4).unwrap();
        let at_c = ex.records.iter().find(|r| r.corner() == (4, 4)).unwrap();
        assert_eq!(at_c.position.r0, 0.0);
        assert_eq!(radial_distance((4.0, 4.0), &g), 0.0);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let img = Array3::zeros((3, 8, 8));
        let labels = Array2::zeros((8, 8));
        let g = SectionGeometry {
            centroid: (4.0, 4.0),
            r_max: 6.0,
            alignment_angle: 0.0,
            section_id: 0,
        };
        assert!(extract_patches(&img, &labels, &g, (9, 4), 1).is_err());
    }

    fn tissue_patch() -> Array3<f32> {
        let s = generate_section(&small_spec(8.0)).unwrap();
        s.image.slice(s![.., 48..80, 48..80]).to_owned()
    }

    #[test]
    fn tear_whitens_only_masked_pixels() {
        let p = tissue_patch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, mask) = simulate_tear(&p, 0.2, &mut rng).unwrap();
        let lum = luminance(&out);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((0.1..0.3).contains(&frac), "fraction {frac}");
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                assert!(lum[[y, x]] >= 0.95);
            } else {
                for c in 0..3 {
                    assert_eq!(out[[c, y, x]], p[[c, y, x]]);
                }
            }
        }
    }

    #[test]
    fn tiny_tear_is_nearly_empty() {
        let p = tissue_patch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, mask) = simulate_tear(&p, 1e-6, &mut rng).unwrap();
        let n = mask.iter().filter(|&&m| m).count();
        assert!((n as f64) < 0.01 * mask.len() as f64);
    }

    #[test]
    fn jpeg_quality_is_monotone() {
        let p = tissue_patch();
        let mse = |a: &Array3<f32>| {
            a.iter().zip(p.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / p.len() as f64
        };
        let psnr = |a: &Array3<f32>| 10.0 * (1.0 / mse(a)).log10();
        let q100 = simulate_jpeg(&p, 100).unwrap();
        let q5 = simulate_jpeg(&p, 5).unwrap();
        let q15 = simulate_jpeg(&p, 15).unwrap();
        assert_eq!(q5.dim(), p.dim());
        assert!(psnr(&q100) > 35.0, "{}", psnr(&q100));
        assert!(psnr(&q5) < psnr(&q15));
        assert!(simulate_jpeg(&p, 0).is_err());
    }

    #[test]
    fn gamma_arithmetic() {
        let p = Array3::from_elem((3, 2, 2), 0.5);
        assert_eq!(adjust_gamma(&p, 1.0).unwrap(), p);
        assert!(adjust_gamma(&p, 2.0).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(adjust_gamma(&p, 0.0).is_err());
    }

    #[test]
    fn blackdot_masks_disk_area() {
        let p = tissue_patch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (same, empty) = simulate_blackdot(&p, 0, 3.0, &mut rng).unwrap();
        assert_eq!(same, p);
        assert!(empty.iter().all(|&m| !m));

        let r = 3.0;
        let (out, mask) = simulate_blackdot(&p, 3, r, &mut rng).unwrap();
        let area = mask.iter().filter(|&&m| m).count() as f64;
        let expected = 3.0 * PI * r * r;
        assert!((area - expected).abs() <= 3.0 * 2.0 * PI * r, "{area} vs {expected}");
        let lum = luminance(&out);
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                assert!(lum[[y, x]] <= 0.05);
            } else {
                assert_eq!(out[[0, y, x]], p[[0, y, x]]);
            }
        }
    }

    #[test]
    fn simulators_are_deterministic() {
        let p = tissue_patch();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                simulate_tear(&p, 0.1, &mut rng).unwrap(),
                simulate_blackdot(&p, 2, 2.0, &mut rng).unwrap(),
            )
        };
        assert_eq!(run(5), run(5));
    }
}
