//! Composite objective `λ1·L_mse + λ2·L_r + λ3·L_θ` and its optimisation.

use ndarray::{Array1, Array2, Array4, Axis, NdFloat, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PatchRecord;
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::nn::{Adam, Grads};
use crate::schedule::{gaussian_like, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of diffusion steps `T`.
    #[serde(alias = "T")]
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.001,
            lambda3: 0.001,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
            steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_r: f64,
    pub l_theta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_mse: f64, l_r: f64, l_theta: f64, cfg: &TrainConfig) -> Self {
        Self {
            l_mse,
            l_r,
            l_theta,
            total: cfg.lambda1 * l_mse + cfg.lambda2 * l_r + cfg.lambda3 * l_theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_mse.is_finite() && self.l_r.is_finite() && self.l_theta.is_finite() && self.total.is_finite()
    }
}

/// A batch in model range with normalised position targets.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub x0: Array4<F>,
    pub r0: Array1<F>,
    /// `theta0 / 360`.
    pub theta0: Array1<F>,
}

impl<F: NdFloat> Batch<F> {
    pub fn from_records(records: &[PatchRecord]) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("batch"))?;
        let (c, h, w) = first.image.dim();
        let mut x0 = Array4::zeros((records.len(), c, h, w));
        let mut r0 = Array1::zeros(records.len());
        let mut theta0 = Array1::zeros(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.image.dim() != (c, h, w) {
                return Err(Error::shape(&[c, h, w], rec.image.shape()));
            }
            let p = rec.position;
            if !(p.r0.is_finite() && (0.0..=1.0).contains(&p.r0)) {
                return Err(Error::config("r0", format!("record {i}: {} outside [0, 1]", p.r0)));
            }
            if !(p.theta0.is_finite() && (0.0..360.0).contains(&p.theta0)) {
                return Err(Error::config(
                    "theta0",
                    format!("record {i}: {} outside [0, 360)", p.theta0),
                ));
            }
            Zip::from(x0.index_axis_mut(Axis(0), i))
                .and(&rec.image)
                .for_each(|d, &s| *d = F::from(2.0 * s - 1.0).unwrap());
            r0[i] = F::from(p.r0).unwrap();
            theta0[i] = F::from(p.theta0 / 360.0).unwrap();
        }
        Ok(Self { x0, r0, theta0 })
    }

    pub fn len(&self) -> usize {
        self.x0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x0: self.x0.select(Axis(0), idx),
            r0: self.r0.select(Axis(0), idx),
            theta0: self.theta0.select(Axis(0), idx),
        }
    }
}

/// Timesteps and Gaussian noise for one batch, kept separate so a loss can be
/// re-evaluated on the same draw.
#[derive(Clone, Debug)]
pub struct NoiseDraw<F> {
    pub ts: Vec<usize>,
    pub eps: Array4<F>,
}

/// One timestep per example, uniform on `[1, steps]`.
pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=steps)).collect()
}

pub fn draw_noise<F: NdFloat, R: Rng + ?Sized>(
    shape: (usize, usize, usize, usize),
    steps: usize,
    rng: &mut R,
) -> NoiseDraw<F> {
    let ts = sample_timesteps(shape.0, steps, rng);
    let eps = gaussian_like(ndarray::Dim([shape.0, shape.1, shape.2, shape.3]), rng);
    NoiseDraw { ts, eps }
}

fn noisy_batch<F: NdFloat>(x0: &Array4<F>, draw: &NoiseDraw<F>, schedule: &NoiseSchedule) -> Array4<F> {
    let mut x_t = x0.clone();
    for (i, &t) in draw.ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let a = F::from(ab.sqrt()).unwrap();
        let b = F::from((1.0 - ab).sqrt()).unwrap();
        Zip::from(x_t.index_axis_mut(Axis(0), i))
            .and(draw.eps.index_axis(Axis(0), i))
            .for_each(|x, &e| *x = a * *x + b * e);
    }
    x_t
}

fn check_inputs<F: NdFloat>(
    bundle: &ModelBundle<F>,
    batch: &Batch<F>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if schedule.steps() != bundle.config.steps {
        return Err(Error::config(
            "steps",
            format!(
                "schedule has {} steps, model expects {}",
                schedule.steps(),
                bundle.config.steps
            ),
        ));
    }
    if draw.eps.shape() != batch.x0.shape() || draw.ts.len() != batch.len() {
        return Err(Error::shape(batch.x0.shape(), draw.eps.shape()));
    }
    for &t in &draw.ts {
        schedule.check_timestep(t)?;
    }
    Ok(())
}

fn mean_abs<F: NdFloat>(pred: &Array2<F>, target: &Array1<F>) -> f64 {
    let n = target.len() as f64;
    pred.column(0)
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p - t).abs().to_f64().unwrap())
        .sum::<f64>()
        / n
}

fn mean_sq<F: NdFloat>(a: &Array4<F>, b: &Array4<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Loss on a fixed noise draw, forward pass only.
pub fn evaluate_loss<F: NdFloat>(
    bundle: &ModelBundle<F>,
    batch: &Batch<F>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    check_inputs(bundle, batch, draw, schedule)?;
    let z = bundle.encode_batch(&batch.x0)?;
    let x_t = noisy_batch(&batch.x0, draw, schedule);
    let x0_hat = bundle.denoise_batch(&x_t, &draw.ts, &z)?;
    let r_p = bundle.radial_head.forward(&bundle.params, &z);
    let th_p = bundle.angular_head.forward(&bundle.params, &z);
    Ok(LossBreakdown::new(
        mean_sq(&x0_hat, &batch.x0),
        mean_abs(&r_p, &batch.r0),
        mean_abs(&th_p, &batch.theta0),
        cfg,
    ))
}

fn sign<F: NdFloat>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn abs_grad<F: NdFloat>(pred: &Array2<F>, target: &Array1<F>, weight: f64) -> Array2<F> {
    let scale = F::from(weight / target.len() as f64).unwrap();
    let mut d = Array2::zeros(pred.raw_dim());
    for (i, (&p, &t)) in pred.column(0).iter().zip(target.iter()).enumerate() {
        d[[i, 0]] = scale * sign(p - t);
    }
    d
}

/// Loss and gradient of the weighted total with respect to every parameter.
pub fn loss_and_grads<F: NdFloat>(
    bundle: &ModelBundle<F>,
    batch: &Batch<F>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Grads<F>)> {
    check_inputs(bundle, batch, draw, schedule)?;
    bundle.encode_batch(&batch.x0)?; // shape check only
    let p = &bundle.params;
    let (z, enc_cache) = bundle.encoder.forward_train(p, &batch.x0);
    let x_t = noisy_batch(&batch.x0, draw, schedule);
    let (x0_hat, den_cache) = bundle.denoiser.forward_train(p, &x_t, &draw.ts, &z);
    let r_p = bundle.radial_head.forward(p, &z);
    let th_p = bundle.angular_head.forward(p, &z);
    let loss = LossBreakdown::new(
        mean_sq(&x0_hat, &batch.x0),
        mean_abs(&r_p, &batch.r0),
        mean_abs(&th_p, &batch.theta0),
        cfg,
    );

    let mut g = p.zero_grads();
    let k = F::from(2.0 * cfg.lambda1 / x0_hat.len() as f64).unwrap();
    let mut dx = x0_hat;
    Zip::from(&mut dx).and(&batch.x0).for_each(|d, &x| *d = k * (*d - x));
    let mut dz = bundle.denoiser.backward(p, &den_cache, &dx, &z, &mut g);
    dz += &bundle
        .radial_head
        .backward(p, &z, &abs_grad(&r_p, &batch.r0, cfg.lambda2), &mut g);
    dz += &bundle
        .angular_head
        .backward(p, &z, &abs_grad(&th_p, &batch.theta0, cfg.lambda3), &mut g);
    bundle.encoder.backward(p, &enc_cache, &dz, &mut g);
    Ok((loss, g))
}

/// Samples timesteps and noise from `rng` and evaluates the loss on `records`.
pub fn compute_loss<R: Rng + ?Sized>(
    bundle: &ModelBundle<f32>,
    records: &[PatchRecord],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let batch = Batch::<f32>::from_records(records)?;
    let draw = draw_noise(batch.x0.dim(), schedule.steps(), rng);
    evaluate_loss(bundle, &batch, &draw, schedule, cfg)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    /// Mean loss terms per epoch, weighted by batch size.
    pub history: Vec<LossBreakdown>,
}

/// One line of the loss-history log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_r: f64,
    pub l_theta: f64,
    pub total: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, l: &LossBreakdown) -> Self {
        Self {
            epoch,
            l_mse: l.l_mse,
            l_r: l.l_r,
            l_theta: l.l_theta,
            total: l.total,
        }
    }
}

/// Adam on the composite loss. Shuffling, timesteps and noise all come from
/// one stream seeded by `cfg.seed`.
pub fn train(
    bundle: ModelBundle<f32>,
    dataset: &[PatchRecord],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(bundle, dataset, schedule, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut bundle: ModelBundle<f32>,
    dataset: &[PatchRecord],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.steps != bundle.config.steps || cfg.steps != schedule.steps() {
        return Err(Error::config(
            "steps",
            format!(
                "config {}, model {}, schedule {} must agree",
                cfg.steps,
                bundle.config.steps,
                schedule.steps()
            ),
        ));
    }
    let all = Batch::<f32>::from_records(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&bundle.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = all.select(idx);
            let draw = draw_noise(batch.x0.dim(), schedule.steps(), &mut rng);
            let (loss, grads) = loss_and_grads(&bundle, &batch, &draw, schedule, cfg)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss or gradient: {loss:?}"),
                });
            }
            adam.step(&mut bundle.params, &grads);
            let n = idx.len() as f64;
            sums[0] += loss.l_mse * n;
            sums[1] += loss.l_r * n;
            sums[2] += loss.l_theta * n;
        }
        let n = all.len() as f64;
        let mean = LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n, cfg);
        log::info!(
            "epoch {epoch}: total {:.5} mse {:.5} r {:.4} theta {:.4}",
            mean.total,
            mean.l_mse,
            mean.l_r,
            mean.l_theta
        );
        on_epoch(epoch, &mean);
        history.push(mean);
    }
    Ok(TrainOutcome { bundle, history })
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares analytic gradients of the total loss with central differences
/// `(L(p + h) - L(p - h)) / 2h` on `probes` randomly chosen scalars from the
/// parameters whose name passes `select`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<R: Rng + ?Sized>(
    bundle: &ModelBundle<f64>,
    batch: &Batch<f64>,
    draw: &NoiseDraw<f64>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    probes: usize,
    h: f64,
    floor: f64,
    select: impl Fn(&str) -> bool,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(bundle, batch, draw, schedule, cfg)?;
    let candidates: Vec<_> = bundle
        .params
        .ids()
        .filter(|&id| select(bundle.params.name(id)))
        .flat_map(|id| (0..bundle.params.get(id).len()).map(move |k| (id, k)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Empty("parameter selection"));
    }
    let mut probe = bundle.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for _ in 0..probes {
        let (id, k) = candidates[rng.random_range(0..candidates.len())];
        let original = bundle.params.get(id).as_slice().unwrap()[k];
        let mut eval = |v: f64| -> Result<f64> {
            probe.params.get_mut(id).as_slice_mut().unwrap()[k] = v;
            Ok(evaluate_loss(&probe, batch, draw, schedule, cfg)?.total)
        };
        let numeric = (eval(original + h)? - eval(original - h)?) / (2.0 * h);
        eval(original)?;
        let analytic = grads.get(id).as_slice().unwrap()[k];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = format!("{}[{k}]", bundle.params.name(id));
        }
    }
    Ok(report)
}
