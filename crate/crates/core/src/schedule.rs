//! Forward-noising mathematics: β schedules, cumulative ᾱ products and the
//! closed-form and single-step noising maps.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `ᾱ_t = ∏_{i=1}^{t} (1 − β_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of a linear β schedule; this is what run configs serialize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// An image noised to timestep `t`, together with the exact Gaussian draw
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedImage {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// Endpoint-inclusive linear β schedule. A single-step schedule is
/// `[beta_start]`.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * (i as f64) / ((steps - 1) as f64))
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn noising_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

pub fn alpha_bar(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.alpha_bar(t)
}

/// Closed-form noising `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`. No clamping.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisedImage> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let (signal, noise) = schedule.noising_coefficients(t)?;
    Ok(NoisedImage {
        x_t: x0.zip_map(eps, |x, e| signal * x + noise * e),
        t,
        eps: eps.clone(),
    })
}

/// One Markov step `x_t = √(1 − β_t) · x_{t−1} + √β_t · eps`.
pub fn forward_step(x_prev: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisedImage> {
    if x_prev.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x_prev.shape()
        )));
    }
    let beta = schedule.beta(t)?;
    let (keep, noise) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(NoisedImage {
        x_t: x_prev.zip_map(eps, |x, e| keep * x + noise * e),
        t,
        eps: eps.clone(),
    })
}
