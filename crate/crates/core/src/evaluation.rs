//! Downstream probes on latents and image-quality metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::datagen::PatchRecord;
use crate::geometry::{luminance, PatchPosition};
use crate::imageio::to_model_range;
use crate::networks::ModelBundle;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Luminance below which a pixel counts as part of a cell-like blob.
pub const DEFAULT_BLOB_THRESHOLD: f32 = 0.5;
pub const MIN_BLOB_AREA: usize = 3;

/// A latent with its region label and position.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledLatent {
    pub z: Vec<f64>,
    pub region: usize,
    pub position: PatchPosition,
}

/// Stacks latents into an `(n, d)` matrix.
pub fn latent_matrix(latents: &[LabeledLatent]) -> Result<Array2<f64>> {
    let d = latents.first().ok_or(Error::Empty("latents"))?.z.len();
    let mut m = Array2::zeros((latents.len(), d));
    for (i, l) in latents.iter().enumerate() {
        if l.z.len() != d {
            return Err(Error::shape(&[d], &[l.z.len()]));
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&l.z[..]));
    }
    Ok(m)
}

/// One-vs-rest linear classifier trained with squared hinge loss and L2
/// regularisation, solved by dual coordinate descent. The bias is learned
/// as the weight of a constant unit feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub classes: Vec<usize>,
    /// `(k, d)` weights, one row per class.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

const SVM_TOL: f64 = 1e-4;
const SVM_MAX_EPOCHS: usize = 2000;

fn fit_binary(x: &Array2<f64>, y: &[f64], c: f64, rng: &mut ChaCha8Rng) -> (Array1<f64>, f64) {
    let (n, d) = x.dim();
    let diag = 0.5 / c;
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let q: Vec<f64> = (0..n).map(|i| x.row(i).dot(&x.row(i)) + 1.0 + diag).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..SVM_MAX_EPOCHS {
        order.shuffle(rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (w.dot(&xi) + b) - 1.0 + diag * alpha[i];
            let pg = if alpha[i] == 0.0 { g.min(0.0) } else { g };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).max(0.0);
                let step = (alpha[i] - old) * y[i];
                w.scaled_add(step, &xi);
                b += step;
            }
        }
        if pg_max - pg_min < SVM_TOL {
            break;
        }
    }
    (w, b)
}

impl LinearClassifier {
    /// `x` is `(n, d)`; labels are arbitrary class ids.
    pub fn fit(x: &Array2<f64>, labels: &[usize], c: f64, seed: u64) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::shape(&[labels.len()], &[x.nrows()]));
        }
        if !(c > 0.0) {
            return Err(Error::config("c", "regularisation strength must be positive"));
        }
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Degenerate("classifier needs at least two classes".into()));
        }
        for &k in &classes {
            if labels.iter().filter(|&&l| l == k).count() < 2 {
                return Err(Error::Degenerate(format!("class {k} has fewer than 2 samples")));
            }
        }
        let d = x.ncols();
        let mut weights = Array2::zeros((classes.len(), d));
        let mut bias = Array1::zeros(classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (j, &k) in classes.iter().enumerate() {
            let y: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            let (w, b) = fit_binary(x, &y, c, &mut rng);
            weights.row_mut(j).assign(&w);
            bias[j] = b;
        }
        Ok(Self {
            classes,
            weights,
            bias,
        })
    }

    pub fn decision(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.decision(x)
            .rows()
            .into_iter()
            .map(|r| {
                let j = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0;
                self.classes[j]
            })
            .collect()
    }
}

/// Maximum-margin classifier over region labels with `C = 1`.
pub fn fit_linear_classifier(train: &[LabeledLatent], seed: u64) -> Result<LinearClassifier> {
    let x = latent_matrix(train)?;
    let labels: Vec<usize> = train.iter().map(|l| l.region).collect();
    LinearClassifier::fit(&x, &labels, 1.0, seed)
}

/// Ordinary least squares with intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub coef: Array1<f64>,
    pub intercept: f64,
}

impl LinearRegressor {
    pub fn fit(x: &Array2<f64>, y: &[f64]) -> Result<Self> {
        let (n, d) = x.dim();
        if n != y.len() {
            return Err(Error::shape(&[n], &[y.len()]));
        }
        if n < 2 {
            return Err(Error::Degenerate("regression needs at least 2 samples".into()));
        }
        if x.rows().into_iter().all(|r| r == x.row(0)) {
            return Err(Error::Degenerate("all latents are identical".into()));
        }
        // Centre to decouple the intercept, then solve by SVD.
        let mean = x.mean_axis(Axis(0)).unwrap();
        let ym = y.iter().sum::<f64>() / n as f64;
        let a = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
        let b = DVector::from_iterator(n, y.iter().map(|v| v - ym));
        let svd = a.svd(true, true);
        let tol = svd.singular_values.max() * 1e-12 * n.max(d) as f64;
        let sol = svd
            .solve(&b, tol)
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        let coef = Array1::from_iter(sol.iter().copied());
        let intercept = ym - coef.dot(&mean);
        Ok(Self { coef, intercept })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array1<f64> {
        x.dot(&self.coef) + self.intercept
    }
}

pub fn fit_linear_regressor(latents: &[Vec<f64>], targets: &[f64]) -> Result<LinearRegressor> {
    let d = latents.first().ok_or(Error::Empty("latents"))?.len();
    let x = Array2::from_shape_fn((latents.len(), d), |(i, j)| latents[i][j]);
    LinearRegressor::fit(&x, targets)
}

pub fn mean_squared_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<usize>,
    /// `confusion[i][j]`: truth `classes[i]`, prediction `classes[j]`.
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub accuracy: f64,
    pub kappa: f64,
    /// Classes never predicted; their precision is reported as 0.
    pub undefined_precision: Vec<usize>,
}

pub fn classification_metrics(pred: &[usize], truth: &[usize]) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let pos = |c: usize| classes.binary_search(&c).unwrap();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[pos(t)][pos(p)] += 1;
    }
    let n = pred.len() as f64;
    let row: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let diag: Vec<usize> = (0..k).map(|i| confusion[i][i]).collect();
    let mut undefined_precision = Vec::new();
    let precision = (0..k)
        .map(|i| {
            if col[i] == 0 {
                undefined_precision.push(classes[i]);
                0.0
            } else {
                diag[i] as f64 / col[i] as f64
            }
        })
        .collect();
    let recall = (0..k)
        .map(|i| if row[i] == 0 { 0.0 } else { diag[i] as f64 / row[i] as f64 })
        .collect();
    let p_o = diag.iter().sum::<usize>() as f64 / n;
    let p_e: f64 = (0..k).map(|i| (row[i] as f64 / n) * (col[i] as f64 / n)).sum();
    let kappa = if p_e >= 1.0 {
        if p_o >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(ClassificationReport {
        classes,
        confusion,
        precision,
        recall,
        accuracy: p_o,
        kappa,
        undefined_precision,
    })
}

fn mean_cov(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let c = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let cov = (c.transpose() * &c) / (n as f64 - 1.0);
    (DVector::from_iterator(d, mean.iter().copied()), cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr((AB)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}) for PSD A, B.
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&v| v.max(EIGEN_FLOOR).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two sample sets (rows are samples).
pub fn frechet_feature_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Degenerate("each set needs at least 2 samples".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(&[a.ncols()], &[b.ncols()]));
    }
    // Floating-point addition commutes, so averaging both orderings is exactly symmetric.
    Ok(0.5 * (frechet_one_way(a, b) + frechet_one_way(b, a)))
}

fn frechet_one_way(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_term = (&ma - &mb).norm_squared();
    (mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb)).max(0.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let tmp = Array2::from_shape_fn((h, ow), |(y, x)| (0..n).map(|i| k[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..n).map(|i| k[i] * tmp[[y + i, x]]).sum::<f64>())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>, range: f64) -> f64 {
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&(x * x), &k);
    let syy = filter_valid(&(y * y), &k);
    let sxy = filter_valid(&(x * y), &k);
    let mut total = 0.0;
    for (((&a, &b), (&xx, &yy)), &xy) in mx.iter().zip(&my).zip(sxx.iter().zip(&syy)).zip(&sxy) {
        let vx = xx - a * a;
        let vy = yy - b * b;
        let cov = xy - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// PSNR (capped at [`PSNR_CAP_DB`] for identical inputs) and mean SSIM over
/// channels with an 11x11 Gaussian window, sigma 1.5, on the valid region.
pub fn image_fidelity(x: &Array3<f32>, y: &Array3<f32>, data_range: f64) -> Result<(f64, f64)> {
    if x.shape() != y.shape() {
        return Err(Error::shape(x.shape(), y.shape()));
    }
    let (c, h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config("image", "SSIM needs at least 11x11 pixels"));
    }
    let mse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    let psnr = if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
    };
    let ssim = (0..c)
        .map(|ch| {
            let a = x.index_axis(Axis(0), ch).mapv(|v| v as f64);
            let b = y.index_axis(Axis(0), ch).mapv(|v| v as f64);
            ssim_plane(&a, &b, data_range)
        })
        .sum::<f64>()
        / c as f64;
    Ok((psnr, ssim))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobStats {
    pub count: usize,
    pub occupancy: f64,
}

/// Dark-pixel components (8-connected, at least [`MIN_BLOB_AREA`] pixels)
/// and the fraction of dark pixels.
pub fn blob_stats(img: &Array3<f32>, threshold: f32) -> BlobStats {
    let fg = luminance(img).mapv(|v| v < threshold);
    let (h, w) = fg.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !fg[[y0, x0]] || seen[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            stack.push((y0, x0));
            let mut area = 0;
            while let Some((y, x)) = stack.pop() {
                area += 1;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if fg[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if area >= MIN_BLOB_AREA {
                count += 1;
            }
        }
    }
    let occupancy = fg.iter().filter(|&&v| v).count() as f64 / (h * w) as f64;
    BlobStats { count, occupancy }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Zero-variance input; the statistic is a convention, not an estimate.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TestResult {
                statistic: 0.0,
                p_value: 1.0,
                degenerate: true,
            }
        } else {
            TestResult {
                statistic: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0).unwrap();
    Ok(TestResult {
        statistic: t,
        p_value: (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0),
        degenerate: false,
    })
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney U) test with the tie-corrected
/// normal approximation. The statistic is the z score.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("rank-sum test needs at least 2 samples per group".into()));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for rank in &mut ranks[i..=j] {
            *rank = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all.iter().zip(&ranks).filter(|(v, _)| v.1).map(|(_, r)| r).sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let z = (u - mu) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(TestResult {
        statistic: z,
        p_value: (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0),
        degenerate: false,
    })
}

/// Per-region spread ellipse in the projected plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEllipse {
    pub region: usize,
    pub count: usize,
    pub center: [f64; 2],
    /// Unit principal axes, major first.
    pub axes: [[f64; 2]; 2],
    /// Two standard deviations along each axis.
    pub radii: [f64; 2],
    /// Fewer than three points: the ellipse is not meaningful.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `(n, 2)` coordinates.
    pub coords: Array2<f64>,
    /// `(2, d)` principal directions.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    pub ellipses: Vec<RegionEllipse>,
}

/// Top-2 principal-direction projection of pooled latents, plus 2-sigma
/// ellipses from each region's projected covariance. Component signs are
/// fixed so the largest-magnitude entry is positive.
pub fn project_latents_2d(latents: &[LabeledLatent]) -> Result<Projection> {
    let x = latent_matrix(latents)?;
    let (n, d) = x.dim();
    if d < 2 {
        return Err(Error::Degenerate("projection needs at least 2 latent dimensions".into()));
    }
    if n < 2 {
        return Err(Error::Degenerate("projection needs at least 2 latents".into()));
    }
    let (mean, cov) = mean_cov(&x);
    let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut components = Array2::zeros((2, d));
    for (row, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let big = v.iter().fold(0.0f64, |m, &e| if e.abs() > m.abs() { e } else { m });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = s * v[j];
        }
    }
    let mean = Array1::from_iter(mean.iter().copied());
    let coords = (&x - &mean).dot(&components.t());

    let mut regions: Vec<usize> = latents.iter().map(|l| l.region).collect();
    regions.sort_unstable();
    regions.dedup();
    let ellipses = regions
        .into_iter()
        .map(|region| {
            let pts: Vec<[f64; 2]> = latents
                .iter()
                .zip(coords.rows())
                .filter(|(l, _)| l.region == region)
                .map(|(_, r)| [r[0], r[1]])
                .collect();
            ellipse(region, &pts)
        })
        .collect();
    Ok(Projection {
        coords,
        components,
        mean,
        ellipses,
    })
}

fn ellipse(region: usize, pts: &[[f64; 2]]) -> RegionEllipse {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let degenerate = pts.len() < 3;
    if pts.len() < 2 {
        return RegionEllipse {
            region,
            count: pts.len(),
            center: [cx, cy],
            axes: [[1.0, 0.0], [0.0, 1.0]],
            radii: [0.0, 0.0],
            degenerate,
        };
    }
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let cov = nalgebra::Matrix2::new(sxx, sxy, sxy, syy) / (n - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let axis = |k: usize| [eig.eigenvectors[(0, k)], eig.eigenvectors[(1, k)]];
    RegionEllipse {
        region,
        count: pts.len(),
        center: [cx, cy],
        axes: [axis(i), axis(j)],
        radii: [
            2.0 * eig.eigenvalues[i].max(0.0).sqrt(),
            2.0 * eig.eigenvalues[j].max(0.0).sqrt(),
        ],
        degenerate,
    }
}

/// Collected metrics for one evaluation run; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Option<Vec<f64>>,
    pub recall: Option<Vec<f64>>,
    pub accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub mse_r: Option<f64>,
    pub mse_theta: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub fcd: Option<f64>,
    pub cell_count_relerr: Option<f64>,
    pub cell_occupancy_relerr: Option<f64>,
}

impl MetricReport {
    pub fn with_classification(mut self, c: &ClassificationReport) -> Self {
        self.precision = Some(c.precision.clone());
        self.recall = Some(c.recall.clone());
        self.accuracy = Some(c.accuracy);
        self.kappa = Some(c.kappa);
        self
    }
}

/// Handcrafted texture descriptor of a patch: mean and spread of luminance,
/// blob count and occupancy, mean blob size and the mean per-channel values.
pub fn texture_features(img: &Array3<f32>) -> Vec<f64> {
    let lum = luminance(img);
    let n = lum.len() as f64;
    let mean = lum.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (lum.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let blobs = blob_stats(img, DEFAULT_BLOB_THRESHOLD);
    let mean_size = if blobs.count > 0 {
        blobs.occupancy * n / blobs.count as f64
    } else {
        0.0
    };
    let mut f = vec![mean, sd, blobs.count as f64, blobs.occupancy, mean_size];
    for c in 0..img.dim().0 {
        f.push(img.index_axis(Axis(0), c).iter().map(|&v| v as f64).sum::<f64>() / n);
    }
    let mut grad = 0.0;
    let (h, w) = lum.dim();
    for y in 0..h {
        for x in 1..w {
            grad += (lum[[y, x]] - lum[[y, x - 1]]).abs() as f64;
        }
    }
    f.push(grad / (h * (w - 1)) as f64);
    f
}

/// Latents for a set of patch records, encoded in batches.
pub fn encode_records(bundle: &ModelBundle<f32>, records: &[PatchRecord]) -> Result<Vec<LabeledLatent>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let (c, h, w) = chunk[0].image.dim();
        let mut x = Array4::zeros((chunk.len(), c, h, w));
        for (i, r) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&to_model_range(&r.image));
        }
        let z = bundle.encode_batch(&x)?;
        for (r, row) in chunk.iter().zip(z.rows()) {
            out.push(LabeledLatent {
                z: row.iter().map(|&v| v as f64).collect(),
                region: r.region,
                position: r.position,
            });
        }
    }
    Ok(out)
}

/// Indices giving every label the same count (the rarest label's), chosen
/// by a seeded shuffle and returned in ascending order.
pub fn balanced_indices(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per: Vec<Vec<usize>> = classes
        .iter()
        .map(|&k| (0..labels.len()).filter(|&i| labels[i] == k).collect())
        .collect();
    let m = per.iter().map(Vec::len).min().unwrap_or(0);
    let mut out: Vec<usize> = per
        .iter_mut()
        .flat_map(|idx| {
            idx.shuffle(&mut rng);
            idx[..m].to_vec()
        })
        .collect();
    out.sort_unstable();
    out
}

/// Per-dimension affine map fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Equalise region counts in both splits, so chance is one over the region count.
    pub balance: bool,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            balance: true,
            standardize: false,
            seed: 0,
        }
    }
}

fn select(latents: &[LabeledLatent], balance: bool, seed: u64) -> Vec<LabeledLatent> {
    if !balance {
        return latents.to_vec();
    }
    let labels: Vec<usize> = latents.iter().map(|l| l.region).collect();
    balanced_indices(&labels, seed).into_iter().map(|i| latents[i].clone()).collect()
}

/// Region classifier fitted on `train`, scored on `test`.
pub fn classification_probe(
    train: &[LabeledLatent],
    test: &[LabeledLatent],
    opts: &ProbeOptions,
) -> Result<ClassificationReport> {
    let (tr, te) = (select(train, opts.balance, opts.seed), select(test, opts.balance, opts.seed ^ 1));
    let (mut xt, mut xv) = (latent_matrix(&tr)?, latent_matrix(&te)?);
    if opts.standardize {
        let s = Standardizer::fit(&xt);
        xt = s.apply(&xt);
        xv = s.apply(&xv);
    }
    let lt: Vec<usize> = tr.iter().map(|l| l.region).collect();
    let lv: Vec<usize> = te.iter().map(|l| l.region).collect();
    let clf = LinearClassifier::fit(&xt, &lt, 1.0, opts.seed)?;
    classification_metrics(&clf.predict(&xv), &lv)
}

/// Normalised regression targets: `r0` and `theta0 / 360`.
pub fn position_targets(latents: &[LabeledLatent]) -> (Vec<f64>, Vec<f64>) {
    latents
        .iter()
        .map(|l| (l.position.r0, l.position.theta0 / 360.0))
        .unzip()
}

/// Held-out MSE of `(r0, theta0 / 360)` from least-squares fits on the latents.
pub fn regression_probe(train: &[LabeledLatent], test: &[LabeledLatent]) -> Result<(f64, f64)> {
    let (xt, xv) = (latent_matrix(train)?, latent_matrix(test)?);
    let (rt, tt) = position_targets(train);
    let (rv, tv) = position_targets(test);
    let mse = |y: &[f64], truth: &[f64]| -> Result<f64> {
        let m = LinearRegressor::fit(&xt, y)?;
        Ok(mean_squared_error(m.predict(&xv).as_slice().expect("contiguous"), truth))
    };
    Ok((mse(&rt, &rv)?, mse(&tt, &tv)?))
}

/// Held-out MSE of the bundle's own position heads.
pub fn head_position_mse(bundle: &ModelBundle<f32>, test: &[LabeledLatent]) -> Result<(f64, f64)> {
    let z = latent_matrix(test)?.mapv(|v| v as f32);
    let out = bundle.regress_batch(&z)?;
    let (rv, tv) = position_targets(test);
    let pr: Vec<f64> = out.column(0).iter().map(|&v| v as f64).collect();
    let pt: Vec<f64> = out.column(1).iter().map(|&v| v as f64).collect();
    Ok((mean_squared_error(&pr, &rv), mean_squared_error(&pt, &tv)))
}
