//! Discrete variance schedules and the forward (noising) process.
//!
//! Steps are indexed `1..=T`; step `T` is the fully noised end. Step `0`
//! denotes clean data and has `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(repr: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(repr.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidRange("num_steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let last = (num_steps - 1) as f64;
            // Written as a two-sided lerp so both endpoints are exact.
            (0..num_steps)
                .map(|i| {
                    let f = i as f64 / last;
                    beta_start * (1.0 - f) + beta_end * f
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidRange(format!(
                "beta at step {} is {b}, must lie in (0, 1)",
                i + 1
            )));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.num_steps() {
            Err(Error::StepOutOfRange {
                t,
                min,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of `1 - beta` up to step `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// One forward transition `q(x_t | x_{t-1})` driven by the given noise.
    pub fn forward_step(&self, x_prev: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        forward_step_with_beta(self.beta(t)?, x_prev, noise)
    }

    /// Closed-form marginal `q(x_t | x_0)` driven by the given noise.
    pub fn forward_marginal(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), noise.len())?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }
}

/// `sqrt(1 - beta) * x_prev + sqrt(beta) * noise` for an explicit beta.
pub fn forward_step_with_beta(beta: f64, x_prev: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_prev.len(), noise.len())?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidRange(format!("beta {beta} outside [0, 1]")));
    }
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(x_prev
        .iter()
        .zip(noise)
        .map(|(x, n)| a * x + b * n)
        .collect())
}
