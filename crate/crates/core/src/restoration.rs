//! Inference-time restoration: mask-constrained tear inpainting over a
//! window grid, and blind JPEG recovery by partial noising.

use ndarray::{s, Array2, Array3, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{luminance, DEFAULT_FOREGROUND_THRESHOLD};
use crate::imageio::{from_model_range, to_model_range};
use crate::networks::{LatentCode, ModelBundle};
use crate::schedule::{forward_noise, gaussian_like, posterior_step_to, NoiseSchedule};

/// Default number of strided reverse steps for tear inpainting.
pub const TEAR_STEPS: usize = 50;
/// Luminance at or above which tissue pixels count as torn.
pub const DEFAULT_WHITENESS_THRESHOLD: f32 = 0.9;
/// `(qf, t_prime, n_steps)` rows used for blind JPEG recovery.
pub const JPEG_TABLE: [(u8, usize, usize); 3] = [(5, 20, 50), (10, 20, 40), (15, 10, 40)];

/// Pixels to regenerate (`true`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactMask(pub Array2<bool>);

impl ArtifactMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self(Array2::from_elem((h, w), false))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&v| v)
    }

    pub fn window(&self, y: usize, x: usize, h: usize, w: usize) -> Self {
        Self(self.0.slice(s![y..y + h, x..x + w]).to_owned())
    }

    fn check(&self, img: &Array3<f32>) -> Result<()> {
        let (_, h, w) = img.dim();
        if self.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[self.dim().0, self.dim().1]));
        }
        Ok(())
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, no repeats.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Pixels inside (or on) a convex polygon given as `(x, y)` vertices.
fn fill_convex(hull: &[(f64, f64)], h: usize, w: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((h, w), false);
    match hull.len() {
        0 => return out,
        1 | 2 => {
            for &(x, y) in hull {
                out[[y as usize, x as usize]] = true;
            }
            return out;
        }
        _ => {}
    }
    // Scanline: intersect each row with every edge, fill between extremes.
    for y in 0..h {
        let yf = y as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..hull.len() {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            if (a.1 - yf) * (b.1 - yf) > 0.0 {
                continue;
            }
            if a.1 == b.1 {
                lo = lo.min(a.0.min(b.0));
                hi = hi.max(a.0.max(b.0));
            } else {
                let x = a.0 + (yf - a.1) * (b.0 - a.0) / (b.1 - a.1);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo <= hi {
            let x0 = lo.ceil().max(0.0) as usize;
            let x1 = (hi.floor() as isize).min(w as isize - 1);
            for x in x0 as isize..=x1 {
                out[[y, x as usize]] = true;
            }
        }
    }
    out
}

fn morph(m: &Array2<bool>, radius: usize, dilate: bool) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(radius)..=(y + radius).min(h - 1);
        let mut hit = !dilate;
        'outer: for yy in ys {
            for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                if m[[yy, xx]] == dilate {
                    hit = dilate;
                    break 'outer;
                }
            }
        }
        hit
    })
}

/// Binary closing with a `(2 radius + 1)` square kernel.
pub fn binary_closing(m: &Array2<bool>, radius: usize) -> Array2<bool> {
    morph(&morph(m, radius, true), radius, false)
}

/// Bright pixels inside the convex hull of the tissue, closed with a 3x3 kernel.
pub fn detect_tear_mask(section: &Array3<f32>, whiteness_threshold: f32) -> ArtifactMask {
    let lum = luminance(section);
    let (h, w) = lum.dim();
    let tissue: Vec<(f64, f64)> = lum
        .indexed_iter()
        .filter(|(_, &v)| v < DEFAULT_FOREGROUND_THRESHOLD)
        .map(|((y, x), _)| (x as f64, y as f64))
        .collect();
    let hull = fill_convex(&convex_hull(tissue), h, w);
    let bright = Zip::from(&lum).and(&hull).map_collect(|&v, &inside| inside && v >= whiteness_threshold);
    let closed = binary_closing(&bright, 1);
    ArtifactMask(Zip::from(&closed).and(&hull).map_collect(|&c, &inside| c && inside))
}

/// Mean of the encodings of two neighbouring patches (images in `[0, 1]`).
pub fn interpolate_condition(
    top: &Array3<f32>,
    topleft: &Array3<f32>,
    bundle: &ModelBundle<f32>,
) -> Result<LatentCode<f32>> {
    let a = bundle.encode(&to_model_range(top))?;
    let b = bundle.encode(&to_model_range(topleft))?;
    Ok(LatentCode::mean_of(&a, &b))
}

/// Mask-constrained reverse diffusion on one model-range image. Known
/// pixels are re-noised to each step's level; the output keeps them exactly.
pub fn inpaint_window<R: Rng + ?Sized>(
    x: &Array3<f32>,
    mask: &ArtifactMask,
    z_cond: &LatentCode<f32>,
    bundle: &ModelBundle<f32>,
    schedule: &NoiseSchedule,
    n_steps: usize,
    rng: &mut R,
) -> Result<Array3<f32>> {
    mask.check(x)?;
    if n_steps > schedule.steps() {
        return Err(Error::config("n_steps", format!("{n_steps} exceeds T = {}", schedule.steps())));
    }
    let compose = |known: &Array3<f32>, gen: &Array3<f32>| {
        let mut out = known.clone();
        for ((c, y, xx), o) in out.indexed_iter_mut() {
            if mask.0[[y, xx]] {
                *o = gen[[c, y, xx]];
            }
        }
        out
    };
    let ts = schedule.strided_timesteps(schedule.steps(), n_steps)?;
    let mut x_t: Array3<f32> = gaussian_like(x.raw_dim(), rng);
    let mut x0_hat = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        x0_hat = bundle.denoise(&x_t, t, z_cond)?.mapv(|v| v.clamp(-1.0, 1.0));
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        if t_prev == 0 {
            break;
        }
        let gen = posterior_step_to(&x_t, &x0_hat, t, t_prev, schedule)?;
        let known = forward_noise(x, t_prev, gaussian_like(x.raw_dim(), rng), schedule)?.x_t;
        x_t = compose(&known, &gen);
    }
    Ok(compose(x, &x0_hat))
}

/// Where a window's conditioning latent came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    /// Mask empty; copied through.
    Skipped,
    /// Top and top-left neighbours.
    TopPair,
    /// Left and top-right neighbours.
    SidePair,
    /// One available neighbour, by window index.
    Single(usize),
    /// No usable neighbour: the damaged window encodes itself.
    SelfEncoded,
}

/// Non-overlapping raster grid of model-sized windows over an ROI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreWindowPlan {
    /// `(y, x)` of the ROI in section pixels.
    pub roi_origin: (usize, usize),
    /// `(row, col)` per window, raster order.
    pub grid: Vec<(usize, usize)>,
    /// `(h, w)`.
    pub window_shape: (usize, usize),
    /// `[top, top_left]` window indices, `None` when off-grid.
    pub neighbor_map: Vec<[Option<usize>; 2]>,
    pub rows: usize,
    pub cols: usize,
}

impl RestoreWindowPlan {
    pub fn new(roi_origin: (usize, usize), roi_shape: (usize, usize), window_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = roi_shape;
        let (wh, ww) = window_shape;
        if wh == 0 || ww == 0 {
            return Err(Error::config("window_shape", "must be non-zero"));
        }
        if h < wh || w < ww {
            return Err(Error::config("roi", format!("{h}x{w} is smaller than one {wh}x{ww} window")));
        }
        if h % wh != 0 || w % ww != 0 {
            return Err(Error::config("roi", format!("{h}x{w} is not a multiple of the {wh}x{ww} window")));
        }
        let (rows, cols) = (h / wh, w / ww);
        let grid: Vec<_> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        let neighbor_map = grid
            .iter()
            .map(|&(r, c)| {
                let top = (r > 0).then(|| (r - 1) * cols + c);
                let top_left = (r > 0 && c > 0).then(|| (r - 1) * cols + c - 1);
                [top, top_left]
            })
            .collect();
        Ok(Self {
            roi_origin,
            grid,
            window_shape,
            neighbor_map,
            rows,
            cols,
        })
    }

    pub fn index(&self, r: usize, c: usize) -> Option<usize> {
        (r < self.rows && c < self.cols).then(|| r * self.cols + c)
    }

    /// Pixel offset of a window inside the ROI.
    pub fn offset(&self, idx: usize) -> (usize, usize) {
        let (r, c) = self.grid[idx];
        (r * self.window_shape.0, c * self.window_shape.1)
    }

    fn left(&self, idx: usize) -> Option<usize> {
        let (r, c) = self.grid[idx];
        c.checked_sub(1).and_then(|c| self.index(r, c))
    }

    fn top_right(&self, idx: usize) -> Option<usize> {
        let (r, c) = self.grid[idx];
        r.checked_sub(1).and_then(|r| self.index(r, c + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub grid: (usize, usize),
    pub masked_pixels: usize,
    pub source: ConditionSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TearRestoreReport {
    pub plan: RestoreWindowPlan,
    pub n_steps: usize,
    pub seed: u64,
    pub windows: Vec<WindowRecord>,
}

/// Inpaints every damaged window of an ROI (image in `[0, 1]`) in raster
/// order. Conditioning neighbours are read from the working image, so a
/// neighbour restored earlier contributes its restored content.
pub fn restore_tear_roi(
    roi: &Array3<f32>,
    mask: &ArtifactMask,
    bundle: &ModelBundle<f32>,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<(Array3<f32>, TearRestoreReport)> {
    mask.check(roi)?;
    let (_, h, w) = roi.dim();
    let shape = (bundle.config.height, bundle.config.width);
    let plan = RestoreWindowPlan::new((0, 0), (h, w), shape)?;
    let (wh, ww) = shape;
    let mut work = roi.clone();
    let mut pending: Vec<bool> = (0..plan.grid.len())
        .map(|i| {
            let (y, x) = plan.offset(i);
            mask.window(y, x, wh, ww).any()
        })
        .collect();
    let mut windows = Vec::with_capacity(plan.grid.len());
    for idx in 0..plan.grid.len() {
        let (y, x) = plan.offset(idx);
        let wmask = mask.window(y, x, wh, ww);
        let masked_pixels = wmask.count();
        if !pending[idx] {
            windows.push(WindowRecord {
                index: idx,
                grid: plan.grid[idx],
                masked_pixels,
                source: ConditionSource::Skipped,
            });
            continue;
        }
        let patch = |i: usize, work: &Array3<f32>| {
            let (py, px) = plan.offset(i);
            work.slice(s![.., py..py + wh, px..px + ww]).to_owned()
        };
        let usable = |i: Option<usize>| i.filter(|&i| !pending[i]);
        let [top, top_left] = plan.neighbor_map[idx];
        let (z, source) = match (
            usable(top),
            usable(top_left),
            usable(plan.left(idx)),
            usable(plan.top_right(idx)),
        ) {
            (Some(a), Some(b), _, _) => (
                interpolate_condition(&patch(a, &work), &patch(b, &work), bundle)?,
                ConditionSource::TopPair,
            ),
            (_, _, Some(a), Some(b)) => (
                interpolate_condition(&patch(a, &work), &patch(b, &work), bundle)?,
                ConditionSource::SidePair,
            ),
            (a, b, c, d) => match a.or(b).or(c).or(d) {
                Some(i) => (
                    bundle.encode(&to_model_range(&patch(i, &work)))?,
                    ConditionSource::Single(i),
                ),
                None => (
                    bundle.encode(&to_model_range(&patch(idx, &work)))?,
                    ConditionSource::SelfEncoded,
                ),
            },
        };
        log::debug!("window {idx} at {:?}: {source:?}", plan.grid[idx]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let input = to_model_range(&patch(idx, &work));
        let restored = from_model_range(&inpaint_window(&input, &wmask, &z, bundle, schedule, n_steps, &mut rng)?);
        // Only masked pixels change; known ones keep their exact input values.
        let mut view = work.slice_mut(s![.., y..y + wh, x..x + ww]);
        Zip::indexed(&mut view).and(&restored).for_each(|(_, yy, xx), v, &r| {
            if wmask.0[[yy, xx]] {
                *v = r;
            }
        });
        pending[idx] = false;
        windows.push(WindowRecord {
            index: idx,
            grid: plan.grid[idx],
            masked_pixels,
            source,
        });
    }
    Ok((
        work,
        TearRestoreReport {
            plan,
            n_steps,
            seed,
            windows,
        },
    ))
}

/// Noise level and step count for blind JPEG recovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegRestoreConfig {
    pub qf: u8,
    pub t_prime: usize,
    pub n_steps: usize,
}

impl JpegRestoreConfig {
    /// Row for `qf`; an unlisted value takes the nearest row, with a warning.
    pub fn for_qf(qf: u8) -> Self {
        let &(row_qf, t_prime, n_steps) = JPEG_TABLE
            .iter()
            .min_by_key(|(q, _, _)| (*q as i16 - qf as i16).abs())
            .expect("table is non-empty");
        if row_qf != qf {
            log::warn!("no restoration row for QF {qf}; using the QF {row_qf} row");
        }
        Self { qf, t_prime, n_steps }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_prime > schedule.steps() {
            return Err(Error::config("t_prime", format!("{} exceeds T = {}", self.t_prime, schedule.steps())));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Blind recovery of a batch of compressed images `(n, c, h, w)` in `[0, 1]`.
/// Each image is encoded, noised to `t_prime` and walked back to 0 along
/// the strided deterministic posterior. `t_prime = 0` returns the input.
pub fn restore_jpeg_batch<R: Rng + ?Sized>(
    x_compr: &Array4<f32>,
    cfg: &JpegRestoreConfig,
    bundle: &ModelBundle<f32>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array4<f32>> {
    cfg.validate(schedule)?;
    if cfg.t_prime == 0 {
        return Ok(x_compr.clone());
    }
    let n = x_compr.dim().0;
    let x = x_compr.mapv(|v| 2.0 * v - 1.0);
    let z = bundle.encode_batch(&x)?;
    let mut x_t = forward_noise(&x, cfg.t_prime, gaussian_like(x.raw_dim(), rng), schedule)?.x_t;
    let ts = schedule.strided_timesteps(cfg.t_prime, cfg.n_steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let x0_hat = bundle.denoise_batch(&x_t, &vec![t; n], &z)?.mapv(|v| v.clamp(-1.0, 1.0));
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x_t = if t_prev == 0 {
            x0_hat
        } else {
            posterior_step_to(&x_t, &x0_hat, t, t_prev, schedule)?
        };
    }
    Ok(x_t.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}

/// Single-image form of [`restore_jpeg_batch`].
pub fn restore_jpeg<R: Rng + ?Sized>(
    x_compr: &Array3<f32>,
    cfg: &JpegRestoreConfig,
    bundle: &ModelBundle<f32>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array3<f32>> {
    let batch = x_compr.clone().insert_axis(Axis(0));
    Ok(restore_jpeg_batch(&batch, cfg, bundle, schedule, rng)?.index_axis_move(Axis(0), 0))
}
