//! Noise schedule arithmetic and the closed-form forward/reverse diffusion steps.
//!
//! Timesteps are 1-indexed: `t = 1` is the least noisy step and `t = T` the
//! noisiest. The cumulative product at "t = 0" is [`ALPHA_BAR_AT_ZERO`], which
//! boundary formulas use when a reverse step lands on the clean image.

use ndarray::{Array, Dimension, NdFloat, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal fraction before any noise has been added.
pub const ALPHA_BAR_AT_ZERO: f64 = 1.0;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config("beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::config("beta_end", "must lie in (0, 1)"));
        }
        if beta_start > beta_end {
            return Err(Error::config("beta_start", "must not exceed beta_end"));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("T", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("betas", format!("{b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("betas", "must be nondecreasing"));
        }
        let alphas_bar = betas
            .iter()
            .scan(ALPHA_BAR_AT_ZERO, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn standard() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product at timestep `t`; `t = 0` gives [`ALPHA_BAR_AT_ZERO`].
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            ALPHA_BAR_AT_ZERO
        } else {
            self.alphas_bar[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Descending, evenly strided timesteps over `[1, top]` that always include
    /// both `top` and `1`. Asking for more steps than `top` yields every
    /// timestep once.
    pub fn strided_timesteps(&self, top: usize, n_steps: usize) -> Result<Vec<usize>> {
        self.check_timestep(top)?;
        if n_steps == 0 {
            return Err(Error::config("n_steps", "must be at least 1"));
        }
        let n = n_steps.min(top);
        if n == 1 {
            return Ok(vec![top]);
        }
        let mut ts: Vec<usize> = (0..n)
            .map(|i| {
                let frac = (n - 1 - i) as f64 / (n - 1) as f64;
                1 + ((top - 1) as f64 * frac).round() as usize
            })
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::standard()
    }
}

/// An image after `t` forward diffusion steps, with the noise draw that produced it.
#[derive(Clone, Debug)]
pub struct NoisyState<F, D: Dimension> {
    pub x_t: Array<F, D>,
    pub t: usize,
    pub epsilon: Option<Array<F, D>>,
}

fn same_shape<F, D: Dimension>(a: &Array<F, D>, b: &Array<F, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn cast<F: NdFloat>(v: f64) -> F {
    F::from(v).expect("finite f64 converts")
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
///
/// `t = 0` is accepted as the noise-free endpoint and returns `x0` unchanged.
pub fn forward_noise<F: NdFloat, D: Dimension>(
    x0: &Array<F, D>,
    t: usize,
    noise: Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<NoisyState<F, D>> {
    if t != 0 {
        schedule.check_timestep(t)?;
    }
    same_shape(x0, &noise)?;
    let ab = schedule.alpha_bar(t);
    let signal: F = cast(ab.sqrt());
    let spread: F = cast((1.0 - ab).sqrt());
    let mut x_t = x0.clone();
    Zip::from(&mut x_t)
        .and(&noise)
        .for_each(|x, &e| *x = signal * *x + spread * e);
    Ok(NoisyState {
        x_t,
        t,
        epsilon: Some(noise),
    })
}

/// Zero-variance posterior mean stepping from `t` to `t - 1`.
pub fn posterior_step<F: NdFloat, D: Dimension>(
    x_t: &Array<F, D>,
    x0_hat: &Array<F, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    if t == 1 {
        return Err(Error::config(
            "t",
            "t = 1 is the terminal step; use terminal_step",
        ));
    }
    posterior_step_to(x_t, x0_hat, t, t - 1, schedule)
}

/// Posterior mean jumping from `t` to an earlier timestep `t_prev`, as used
/// when sampling on a strided sub-sequence. `t_prev = 0` yields `x0_hat`.
pub fn posterior_step_to<F: NdFloat, D: Dimension>(
    x_t: &Array<F, D>,
    x0_hat: &Array<F, D>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    schedule.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::config("t_prev", format!("{t_prev} is not before {t}")));
    }
    same_shape(x_t, x0_hat)?;
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sqrt_ab_t: F = cast(ab_t.sqrt());
    let sqrt_ab_prev: F = cast(ab_prev.sqrt());
    let residual_gain: F = cast((1.0 - ab_prev).sqrt() / (1.0 - ab_t).sqrt());
    let mut out = x0_hat.clone();
    Zip::from(&mut out).and(x_t).for_each(|o, &xt| {
        let x0 = *o;
        *o = sqrt_ab_prev * x0 + residual_gain * (xt - sqrt_ab_t * x0);
    });
    Ok(out)
}

/// The `t = 1` reverse step: a zero-variance Gaussian centred on the
/// denoiser's prediction, i.e. the prediction itself.
pub fn terminal_step<F: NdFloat, D: Dimension>(
    x1: &Array<F, D>,
    x0_hat_at_1: &Array<F, D>,
) -> Result<Array<F, D>> {
    same_shape(x1, x0_hat_at_1)?;
    Ok(x0_hat_at_1.clone())
}

/// Standard-normal array of the given shape.
pub fn gaussian_like<F: NdFloat, D: Dimension, R: Rng + ?Sized>(
    shape: D,
    rng: &mut R,
) -> Array<F, D> {
    Array::from_shape_simple_fn(shape, || {
        let v: f64 = rng.sample(StandardNormal);
        cast(v)
    })
}
