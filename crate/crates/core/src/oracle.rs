//! Exact conditional noise prediction for Gaussian-mixture data.
//!
//! Under the forward process a diagonal Gaussian mixture stays a diagonal
//! Gaussian mixture, so the Bayes-optimal noise prediction is available in
//! closed form: `eps*(x, t) = -sqrt(1 - alpha_bar_t) * grad log p_t(x | c)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    /// Per-coordinate variance.
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self { mean, var }
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let n = mean.len();
        Self {
            mean,
            var: vec![var; n],
        }
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let quad: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi + (vi.ln() + LN_2PI))
            .sum();
        -0.5 * quad
    }
}

/// The analytic data distribution: a weighted mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldRepr", into = "WorldRepr")]
pub struct GmmWorld {
    components: Vec<DiagGaussian>,
    weights: Vec<f64>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct WorldRepr {
    components: Vec<DiagGaussian>,
    weights: Vec<f64>,
}

impl TryFrom<WorldRepr> for GmmWorld {
    type Error = Error;

    fn try_from(r: WorldRepr) -> Result<Self> {
        GmmWorld::new(r.components, r.weights)
    }
}

impl From<GmmWorld> for WorldRepr {
    fn from(w: GmmWorld) -> Self {
        WorldRepr {
            components: w.components,
            weights: w.weights,
        }
    }
}

impl GmmWorld {
    pub fn new(components: Vec<DiagGaussian>, weights: Vec<f64>) -> Result<Self> {
        let dim = validate_mixture(&components, &weights)?;
        Ok(Self {
            components,
            weights,
            dim,
        })
    }

    /// Two unit-variance wells at (-3, 0) and (+3, 0) with equal weights.
    pub fn two_well() -> Self {
        Self::new(
            vec![
                DiagGaussian::isotropic(vec![-3.0, 0.0], 1.0),
                DiagGaussian::isotropic(vec![3.0, 0.0], 1.0),
            ],
            vec![0.5, 0.5],
        )
        .expect("two-well world is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Posterior component responsibilities under the clean (t = 0) data density.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(responsibilities(&self.components, &self.weights, x))
    }

    /// Index of the component with the largest clean-data responsibility.
    /// Ties resolve to the lowest index.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        let r = self.responsibilities(x)?;
        Ok(argmax(&r))
    }
}

fn validate_mixture(components: &[DiagGaussian], weights: &[f64]) -> Result<usize> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidWorld("mixture has no components".into()))?;
    let dim = first.mean.len();
    if dim == 0 {
        return Err(Error::InvalidWorld(
            "data dimension must be positive".into(),
        ));
    }
    if weights.len() != components.len() {
        return Err(Error::InvalidWorld(format!(
            "{} weights for {} components",
            weights.len(),
            components.len()
        )));
    }
    for (k, c) in components.iter().enumerate() {
        if c.mean.len() != dim || c.var.len() != dim {
            return Err(Error::InvalidWorld(format!(
                "component {k} has mean/var dimensions {}/{}, expected {dim}",
                c.mean.len(),
                c.var.len()
            )));
        }
        if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidWorld(format!(
                "component {k} has a non-positive variance"
            )));
        }
        if c.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidWorld(format!(
                "component {k} has a non-finite mean"
            )));
        }
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidWorld("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidWorld(format!(
            "weights sum to {total}, not 1"
        )));
    }
    Ok(dim)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_joint(components: &[DiagGaussian], weights: &[f64], x: &[f64]) -> Vec<f64> {
    components
        .iter()
        .zip(weights)
        .map(|(c, w)| {
            if *w > 0.0 {
                w.ln() + c.log_pdf(x)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn responsibilities(components: &[DiagGaussian], weights: &[f64], x: &[f64]) -> Vec<f64> {
    let lj = log_joint(components, weights, x);
    let lse = log_sum_exp(&lj);
    lj.iter().map(|l| (l - lse).exp()).collect()
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Sorted, deduplicated, non-empty set of component indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ComponentSet(Vec<usize>);

impl ComponentSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::EmptySubset);
        }
        Ok(Self(v))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }
}

impl TryFrom<Vec<usize>> for ComponentSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        ComponentSet::new(v)
    }
}

impl From<ComponentSet> for Vec<usize> {
    fn from(s: ComponentSet) -> Self {
        s.0
    }
}

/// Conditioning signal: the unconditional (null) prompt or a prompt that
/// selects a subset of mixture components.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Null,
    Subset(ComponentSet),
}

impl Condition {
    pub fn subset(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        Ok(Condition::Subset(ComponentSet::new(indices)?))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// A conditional data mixture pushed through the forward process to step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedMixture {
    pub components: Vec<DiagGaussian>,
    pub weights: Vec<f64>,
    pub t: usize,
}

pub fn noised_mixture(
    world: &GmmWorld,
    cond: &Condition,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<NoisedMixture> {
    let ab = schedule.alpha_bar(t)?;
    let (selected, raw_weights): (Vec<&DiagGaussian>, Vec<f64>) = match cond {
        Condition::Null => (world.components.iter().collect(), world.weights.clone()),
        Condition::Subset(set) => {
            if let Some(bad) = set.indices().iter().find(|k| **k >= world.num_components()) {
                return Err(Error::InvalidCondition(format!(
                    "component index {bad} out of range for {} components",
                    world.num_components()
                )));
            }
            set.indices()
                .iter()
                .map(|k| (&world.components[*k], world.weights[*k]))
                .unzip()
        }
    };
    let total: f64 = raw_weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidCondition(
            "selected components carry zero total weight".into(),
        ));
    }
    let sa = ab.sqrt();
    let components = selected
        .into_iter()
        .map(|c| DiagGaussian {
            mean: c.mean.iter().map(|m| sa * m).collect(),
            var: c.var.iter().map(|v| ab * v + (1.0 - ab)).collect(),
        })
        .collect();
    Ok(NoisedMixture {
        components,
        weights: raw_weights.iter().map(|w| w / total).collect(),
        t,
    })
}

impl NoisedMixture {
    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(responsibilities(&self.components, &self.weights, x))
    }

    /// Log-density and its gradient (the score) at `x`.
    pub fn log_density_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let lj = log_joint(&self.components, &self.weights, x);
        let lse = log_sum_exp(&lj);
        let mut score = vec![0.0; x.len()];
        for (c, l) in self.components.iter().zip(&lj) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (i, s) in score.iter_mut().enumerate() {
                *s += r * (c.mean[i] - x[i]) / c.var[i];
            }
        }
        Ok((lse, score))
    }
}

/// Bayes-optimal noise prediction for the conditional noised mixture.
pub fn epsilon_oracle(
    world: &GmmWorld,
    cond: &Condition,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            min: 1,
            max: schedule.num_steps(),
        });
    }
    let mixture = noised_mixture(world, cond, schedule, t)?;
    let (_, score) = mixture.log_density_and_score(x)?;
    let k = -(1.0 - schedule.alpha_bar(t)?).sqrt();
    Ok(score.into_iter().map(|s| k * s).collect())
}

/// Anything that predicts the additive noise in `x_t` given a condition.
///
/// The sampler and diagnostics only talk to this trait, so a learned
/// stand-in can replace the analytic oracle.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    fn predict_noise(&self, x: &[f64], cond: &Condition, t: usize) -> Result<Vec<f64>>;
}

/// [`Denoiser`] backed by [`epsilon_oracle`].
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    world: GmmWorld,
    schedule: NoiseSchedule,
}

impl MixtureOracle {
    pub fn new(world: GmmWorld, schedule: NoiseSchedule) -> Self {
        Self { world, schedule }
    }

    pub fn world(&self) -> &GmmWorld {
        &self.world
    }
}

impl Denoiser for MixtureOracle {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x: &[f64], cond: &Condition, t: usize) -> Result<Vec<f64>> {
        epsilon_oracle(&self.world, cond, &self.schedule, x, t)
    }
}
