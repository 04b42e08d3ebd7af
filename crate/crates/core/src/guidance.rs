//! Noise-combination rules.
//!
//! Every combiner takes one or two noise predictions and returns the guided
//! prediction together with the discrepancy it acted on and the correction it
//! added on top of the anchor prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{add_scaled, norm, scale, sub};
use crate::oracle::{Condition, Denoiser};

pub const DEFAULT_W: f64 = 6.0;
pub const DEFAULT_LAMBDA: f64 = 30.0;
pub const DEFAULT_EPS_STAB: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "CFG")]
    Cfg,
    #[serde(rename = "NP")]
    Np,
    #[serde(rename = "SDN")]
    Sdn,
    #[serde(rename = "TDD_ONLY")]
    TddOnly,
    #[serde(rename = "SDG")]
    Sdg,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Cfg,
        Strategy::Np,
        Strategy::Sdn,
        Strategy::TddOnly,
        Strategy::Sdg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cfg => "CFG",
            Strategy::Np => "NP",
            Strategy::Sdn => "SDN",
            Strategy::TddOnly => "TDD_ONLY",
            Strategy::Sdg => "SDG",
        }
    }

    /// Whether the strategy evolves separate positive and negative latents.
    pub fn is_decoupled(self) -> bool {
        matches!(self, Strategy::TddOnly | Strategy::Sdg)
    }

    pub fn needs_negative(self) -> bool {
        !matches!(self, Strategy::Cfg)
    }

    /// Whether the correction is direction-normalized with scale lambda.
    pub fn is_normalized(self) -> bool {
        matches!(self, Strategy::Sdn | Strategy::Sdg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidGuidance(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub strategy: Strategy,
    /// CFG / negative-prompting strength.
    #[serde(default = "default_w")]
    pub w: f64,
    /// Scale of the normalized correction.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Stability constant added to the discrepancy norm.
    #[serde(default = "default_eps_stab")]
    pub eps_stab: f64,
}

fn default_w() -> f64 {
    DEFAULT_W
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_eps_stab() -> f64 {
    DEFAULT_EPS_STAB
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::new(Strategy::Sdg)
    }
}

impl GuidanceConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            w: DEFAULT_W,
            lambda: DEFAULT_LAMBDA,
            eps_stab: DEFAULT_EPS_STAB,
        }
    }

    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_stab > 0.0 && self.eps_stab.is_finite()) {
            return Err(Error::InvalidGuidance(format!(
                "eps_stab must be positive and finite, got {}",
                self.eps_stab
            )));
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(Error::InvalidGuidance(format!(
                "w must be finite and >= 0, got {}",
                self.w
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidGuidance(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Output of a two-prediction combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct Guided {
    pub eps: Vec<f64>,
    /// `eps_pos - eps_neg`.
    pub delta: Vec<f64>,
    /// `eps - eps_pos`.
    pub correction: Vec<f64>,
}

/// Classifier-free guidance: `u + w (c - u)`.
///
/// Evaluated as `(1 - w) u + w c` so both endpoints `w = 0` and `w = 1` are
/// reproduced bit-exactly.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_cond.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| (1.0 - w) * u + w * c)
        .collect())
}

fn linear_push(eps_pos: &[f64], eps_neg: &[f64], w: f64) -> Result<Guided> {
    if !(w > 0.0) {
        return Err(Error::NonPositive {
            name: "w",
            value: w,
        });
    }
    let delta = sub(eps_pos, eps_neg)?;
    let correction = scale(&delta, w);
    let eps = add_scaled(eps_pos, 1.0, &correction)?;
    Ok(Guided {
        eps,
        delta,
        correction,
    })
}

/// Negative prompting anchored on the positive prediction:
/// `p + w (p - n)` with `w > 0`.
pub fn np_combine(eps_pos: &[f64], eps_neg: &[f64], w: f64) -> Result<Guided> {
    linear_push(eps_pos, eps_neg, w)
}

fn normalized_push(eps_pos: &[f64], eps_neg: &[f64], lambda: f64, eps_stab: f64) -> Result<Guided> {
    check_dim(eps_pos.len(), eps_neg.len())?;
    if !(eps_stab > 0.0) {
        return Err(Error::NonPositive {
            name: "eps_stab",
            value: eps_stab,
        });
    }
    let delta = sub(eps_pos, eps_neg)?;
    let correction = scale(&delta, lambda / (norm(&delta) + eps_stab));
    let eps = add_scaled(eps_pos, 1.0, &correction)?;
    Ok(Guided {
        eps,
        delta,
        correction,
    })
}

/// Synchronized directional normalization on a shared latent:
/// `p + lambda (p - n) / (|p - n| + eps_stab)`.
///
/// The correction has norm `lambda |d| / (|d| + eps_stab)`, so it is close to
/// `lambda` for any non-negligible discrepancy and vanishes as `d -> 0`.
pub fn sdn_combine(eps_pos: &[f64], eps_neg: &[f64], lambda: f64, eps_stab: f64) -> Result<Guided> {
    normalized_push(eps_pos, eps_neg, lambda, eps_stab)
}

/// The same normalized rule applied across decoupled branch predictions.
pub fn sdg_combine(
    eps_plus: &[f64],
    eps_minus: &[f64],
    lambda: f64,
    eps_stab: f64,
) -> Result<Guided> {
    normalized_push(eps_plus, eps_minus, lambda, eps_stab)
}

/// Decoupled-branch ablation without normalization: `e+ + w (e+ - e-)`.
pub fn tdd_only_combine(eps_plus: &[f64], eps_minus: &[f64], w: f64) -> Result<Guided> {
    linear_push(eps_plus, eps_minus, w)
}

/// Per-branch CFG-guided prediction evaluated on the branch's own latent:
/// `c + w (c - u)` where `c` is conditioned on `cond` and `u` on the null
/// condition. `w = 0` returns the plain conditional prediction.
pub fn branch_guided_eps<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Condition,
    x: &[f64],
    t: usize,
    w: f64,
) -> Result<Vec<f64>> {
    if cond.is_null() {
        return Err(Error::InvalidCondition(
            "branch prediction needs a subset condition".into(),
        ));
    }
    let eps_cond = denoiser.predict_noise(x, cond, t)?;
    if w == 0.0 {
        return Ok(eps_cond);
    }
    let eps_uncond = denoiser.predict_noise(x, &Condition::Null, t)?;
    let diff = sub(&eps_cond, &eps_uncond)?;
    add_scaled(&eps_cond, w, &diff)
}
