//! Diffusion mathematics: noise schedules, the closed-form forward process,
//! the two-branch training loss, and the reverse sampler step.
//!
//! Schedules are always computed and stored in `f64`; tensor operations are
//! generic over the element type. Step indices use the convention `t = 0` is
//! clean data (`alpha_bar(0) = 1`) and `t in [1, T]` indexes the noising
//! chain, so `alpha_bar(t)` reads the cumulative product at array position
//! `t - 1`.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Precomputed constants of a noising chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from raw betas (each in `(0, 1)`, non-decreasing).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        let mut prev = 0.0;
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            if b < prev {
                return Err(Error::config(format!("beta[{i}] = {b} decreases")));
            }
            prev = b;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(NoiseSchedule {
            steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
        })
    }

    /// Linear beta schedule inclusive of both endpoints.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::config(format!(
                "invalid beta endpoints ({beta_1}, {beta_t}): need 0 < beta_1 <= beta_T < 1"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_1]
        } else {
            (0..steps)
                .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        NoiseSchedule::from_betas(beta)
    }

    /// The canonical default: `T = 1000` linear from `1e-4` to `0.02`.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid default")
    }

    /// Cumulative signal retention at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sqrt_alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.sqrt_alpha_bar[t - 1]
        }
    }

    pub fn sqrt_one_minus_alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sqrt_one_minus_alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::contract(format!(
                "step index {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Closed-form forward noising: `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(
    z0: &ArrayD<T>,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::contract(format!(
            "q_sample shape mismatch: {:?} vs {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let a = T::from_f64(sched.sqrt_alpha_bar_at(t));
    let b = T::from_f64(sched.sqrt_one_minus_alpha_bar_at(t));
    Ok(ndarray::Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// Invert the closed form given a noise estimate:
/// `z0 = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_z0_from_eps<T: Scalar>(
    z_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    sched.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::contract("predict_z0 shape mismatch".to_string()));
    }
    let a = T::from_f64(1.0 / sched.sqrt_alpha_bar_at(t));
    let b = T::from_f64(sched.sqrt_one_minus_alpha_bar_at(t));
    Ok(ndarray::Zip::from(z_t)
        .and(eps_hat)
        .map_collect(|&z, &e| (z - b * e) * a))
}

/// Two-branch reconstruction loss: mean-squared error of the latent branch
/// plus mean-squared error of the noise branch.
pub fn diffusion_loss<T: Scalar>(
    z_hat: &ArrayD<T>,
    z: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    eps: &ArrayD<T>,
) -> Result<T> {
    if z_hat.shape() != z.shape() || eps_hat.shape() != eps.shape() || z_hat.shape() != eps_hat.shape()
    {
        return Err(Error::contract("diffusion_loss shape mismatch".to_string()));
    }
    let n = T::from_f64(z.len() as f64);
    let mse = |a: &ArrayD<T>, b: &ArrayD<T>| -> T {
        let mut s = T::zero();
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = x - y;
            s = s + d * d;
        }
        s / n
    };
    Ok(mse(z_hat, z) + mse(eps_hat, eps))
}

/// One reverse step of the eta-parameterized sampler consuming both branches.
///
/// The predicted clean latent is fused from the direct branch output and the
/// noise-branch inversion, `lambda * z0_hat + (1 - lambda) * z0_from_eps`,
/// then the update is
/// `z_prev = sqrt(abar_prev) z0_fused + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma * noise`
/// with `sigma = eta * sqrt((1 - abar_prev)/(1 - abar_t)) * sqrt(1 - abar_t/abar_prev)`.
/// At `t_prev = 0` the update returns the fused clean estimate exactly.
#[allow(clippy::too_many_arguments)]
pub fn sampler_step<T: Scalar>(
    z_t: &ArrayD<T>,
    z0_hat: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    lambda: f64,
    sched: &NoiseSchedule,
    noise: Option<&ArrayD<T>>,
) -> Result<ArrayD<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::contract(format!(
            "sampler_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract("eta and lambda must lie in [0, 1]".to_string()));
    }

    let z0_from_eps = predict_z0_from_eps(z_t, eps_hat, t, sched)?;
    let lam = T::from_f64(lambda);
    let one_m_lam = T::from_f64(1.0 - lambda);
    let z0_fused = ndarray::Zip::from(z0_hat)
        .and(&z0_from_eps)
        .map_collect(|&a, &b| lam * a + one_m_lam * b);

    let ab_t = sched.alpha_bar_at(t);
    let ab_prev = sched.alpha_bar_at(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let a = T::from_f64(ab_prev.sqrt());
    let b = T::from_f64(dir_coeff);
    let mut out = ndarray::Zip::from(&z0_fused)
        .and(eps_hat)
        .map_collect(|&z0, &e| a * z0 + b * e);
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::contract("sampler_step with eta > 0 needs a noise tensor".to_string())
        })?;
        if noise.shape() != out.shape() {
            return Err(Error::contract("sampler noise shape mismatch".to_string()));
        }
        let s = T::from_f64(sigma);
        ndarray::Zip::from(&mut out).and(noise).for_each(|o, &n| *o = *o + s * n);
    }
    Ok(out)
}

/// Uniform-stride descending step pairs `(t, t_prev)` covering `[T .. 0]`.
///
/// For `steps = 4` over `T = 1000` this yields
/// `(1000, 750), (750, 500), (500, 250), (250, 0)`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > total {
        return Err(Error::config(format!(
            "sampling steps {steps} outside [1, {total}]"
        )));
    }
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| (total as f64 * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts.windows(2).map(|w| (w[0], w[1])).collect())
}
