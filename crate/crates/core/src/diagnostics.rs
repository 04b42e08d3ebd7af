//! Diagnostics for the two negative-prompting failure mechanisms: a
//! discrepancy that is small early in sampling, and negative predictions
//! evaluated on a latent already shaped by the positive condition. Also the
//! denoiser Jacobian spectrum and outcome-mode statistics.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::{GuidanceConfig, Strategy};
use crate::linalg::{dot, norm, scale, sub, Matrix};
use crate::oracle::{Condition, Denoiser, GmmWorld};
use crate::sampler::{run_dual_branch, run_single_branch, SamplerOptions, Trajectory};

/// Largest dimension [`jacobian_fd`] will build densely.
pub const MAX_FD_DIM: usize = 16;

/// `(t, value)` pairs, `t` descending from `T`.
pub type Series = Vec<(usize, f64)>;

/// `|Delta_t|` for each recorded step.
pub fn delta_norm_curve(traj: &Trajectory) -> Result<Series> {
    traj.records
        .iter()
        .map(|r| {
            r.delta
                .as_ref()
                .map(|d| (r.t, norm(d)))
                .ok_or(Error::NoNegativeBranch)
        })
        .collect()
}

/// Central finite-difference Jacobian of the noise prediction with respect
/// to its input: `J[i][j] ~ d eps_i / d x_j`.
pub fn jacobian_fd<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Condition,
    x: &[f64],
    t: usize,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::NonPositive {
            name: "h",
            value: h,
        });
    }
    let n = x.len();
    check_dim(denoiser.dim(), n)?;
    if n > MAX_FD_DIM {
        return Err(Error::InvalidRange(format!(
            "dense finite differences limited to dimension {MAX_FD_DIM}, got {n}"
        )));
    }
    let mut jac = Matrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + h;
        let up = denoiser.predict_noise(&probe, cond, t)?;
        probe[j] = x[j] - h;
        let down = denoiser.predict_noise(&probe, cond, t)?;
        probe[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    /// Unit norm, sign fixed so the largest-magnitude entry is positive.
    pub vector: Vec<f64>,
    /// `|J v - value v|`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn canonical_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair (largest `|lambda|`) by power iteration on `J^T J`,
/// with the sign of the eigenvalue recovered from the Rayleigh quotient.
///
/// Stops once `|J v - lambda v| <= tol |lambda|`. Running out of iterations is
/// not an error: the pair is returned with `converged = false`. When the
/// top singular value is shared by `+lambda` and `-lambda` no eigenvector is
/// singled out and the result will not converge.
pub fn leading_eigen(jac: &Matrix, iters: usize, tol: f64) -> Result<EigenPair> {
    if !jac.is_square() {
        return Err(Error::NotSquare {
            rows: jac.rows(),
            cols: jac.cols(),
        });
    }
    let n = jac.rows();
    if n == 0 {
        return Err(Error::InvalidRange("empty matrix".into()));
    }
    let gram = jac.transpose().matmul(jac)?;

    // Fixed generic start so repeated calls agree.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let start_norm = norm(&v);
    v = scale(&v, 1.0 / start_norm);

    let mut pair = EigenPair {
        value: 0.0,
        vector: v.clone(),
        residual: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    for k in 1..=iters.max(1) {
        let next = gram.mul_vec(&v)?;
        let len = norm(&next);
        if len == 0.0 {
            // J v = 0: v is an eigenvector for eigenvalue zero.
            pair = EigenPair {
                value: 0.0,
                vector: v,
                residual: 0.0,
                iterations: k,
                converged: true,
            };
            break;
        }
        v = scale(&next, 1.0 / len);
        let jv = jac.mul_vec(&v)?;
        let value = dot(&v, &jv);
        let residual = norm(&sub(&jv, &scale(&v, value))?);
        let converged = residual <= tol * value.abs();
        pair = EigenPair {
            value,
            vector: v.clone(),
            residual,
            iterations: k,
            converged,
        };
        if converged {
            break;
        }
    }
    canonical_sign(&mut pair.vector);
    Ok(pair)
}

/// Suppression along the leading direction: `-w <v, Delta>`.
pub fn suppression_projection(v: &[f64], delta: &[f64], w: f64) -> Result<f64> {
    check_dim(v.len(), delta.len())?;
    let len = norm(v);
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitVector(len));
    }
    Ok(-w * dot(v, delta))
}

/// Angle in radians between `v` and `Delta`; `None` when either vanishes.
pub fn suppression_angle(v: &[f64], delta: &[f64]) -> Result<Option<f64>> {
    check_dim(v.len(), delta.len())?;
    let denom = norm(v) * norm(delta);
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot(v, delta) / denom).clamp(-1.0, 1.0).acos()))
}

/// A named group of mixture components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub name: String,
    pub components: Vec<usize>,
}

impl LabelSet {
    pub fn new(name: impl Into<String>, components: impl IntoIterator<Item = usize>) -> Self {
        Self {
            name: name.into(),
            components: components.into_iter().collect(),
        }
    }
}

pub(crate) fn check_partition(labels: &[LabelSet], num_components: usize) -> Result<Vec<usize>> {
    let mut owner = vec![usize::MAX; num_components];
    for (li, set) in labels.iter().enumerate() {
        for &k in &set.components {
            if k >= num_components {
                return Err(Error::InvalidPartition(format!(
                    "label `{}` names component {k}, world has {num_components}",
                    set.name
                )));
            }
            if owner[k] != usize::MAX {
                return Err(Error::InvalidPartition(format!(
                    "component {k} appears in more than one label set"
                )));
            }
            owner[k] = li;
        }
    }
    if let Some(k) = owner.iter().position(|o| *o == usize::MAX) {
        return Err(Error::InvalidPartition(format!(
            "component {k} is not covered by any label set"
        )));
    }
    let mut names: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidPartition("duplicate label names".into()));
    }
    Ok(owner)
}

/// Fraction of samples whose most responsible clean-data component falls in
/// each label set.
pub fn mode_mass(
    samples: &[Vec<f64>],
    world: &GmmWorld,
    labels: &[LabelSet],
) -> Result<BTreeMap<String, f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let owner = check_partition(labels, world.num_components())?;
    let mut counts = vec![0usize; labels.len()];
    for x in samples {
        counts[owner[world.assign(x)?]] += 1;
    }
    let n = samples.len() as f64;
    Ok(labels
        .iter()
        .zip(counts)
        .map(|(l, c)| (l.name.clone(), c as f64 / n))
        .collect())
}

/// Mean of the first and last `fraction` of a series (at least one entry each).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyLate {
    pub early: f64,
    pub late: f64,
    pub window: usize,
}

impl EarlyLate {
    pub fn of(series: &[(usize, f64)], fraction: f64) -> Option<Self> {
        if series.is_empty() {
            return None;
        }
        let n = series.len();
        let window = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let mean = |s: &[(usize, f64)]| s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64;
        Some(Self {
            early: mean(&series[..window]),
            late: mean(&series[n - window..]),
            window,
        })
    }

    /// `early / late`, undefined when the late mean is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.late != 0.0).then(|| self.early / self.late)
    }
}

/// Seed-averaged gap between the negative prediction on the shared latent and
/// on the decoupled counterfactual latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub shared_strategy: Strategy,
    pub seeds: Vec<u64>,
    pub gaps: Series,
}

impl BiasReport {
    /// Early window starts right after `t = T`, where the gap is zero by
    /// construction.
    pub fn early_late(&self, fraction: f64) -> Option<EarlyLate> {
        let tail = self.gaps.get(1..)?;
        let n = self.gaps.len();
        let window = ((n as f64 * fraction).round() as usize).clamp(1, tail.len().max(1));
        if tail.is_empty() {
            return None;
        }
        let mean = |s: &[(usize, f64)]| s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64;
        Some(EarlyLate {
            early: mean(&tail[..window]),
            late: mean(&tail[tail.len() - window..]),
            window,
        })
    }
}

/// Shared-latent counterpart used as the reference trajectory.
fn shared_counterpart(strategy: Strategy) -> Strategy {
    match strategy {
        Strategy::Sdn | Strategy::Sdg => Strategy::Sdn,
        _ => Strategy::Np,
    }
}

/// At each step, `|eps(x_shared, p-) - eps(x_minus, p-)|` averaged over
/// seeds, where `x_shared` follows single-branch guidance and `x_minus` is a
/// counterfactual latent evolved from the same noise with the plain `p-`
/// prediction (no branch CFG), so identical conditions give a zero gap.
pub fn trajectory_bias_probe<D: Denoiser + ?Sized>(
    denoiser: &D,
    p_plus: &Condition,
    p_minus: &Condition,
    config: &GuidanceConfig,
    seeds: &[u64],
    opts: SamplerOptions,
) -> Result<BiasReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidRange(
            "bias probe needs at least one seed".into(),
        ));
    }
    let shared_strategy = shared_counterpart(config.strategy);
    let shared_cfg = config.with_strategy(shared_strategy);
    let dual_cfg = GuidanceConfig {
        w: 0.0,
        ..config.with_strategy(Strategy::Sdg)
    };
    let steps = denoiser.schedule().num_steps();
    let mut sums = vec![0.0; steps];

    for &seed in seeds {
        let shared = run_single_branch(denoiser, p_plus, Some(p_minus), &shared_cfg, seed, opts)?;
        let dual = run_dual_branch(denoiser, p_plus, p_minus, &dual_cfg, seed, opts)?;
        for (k, sum) in sums.iter_mut().enumerate() {
            let t = steps - k;
            let on_shared = denoiser.predict_noise(&shared.states[k], p_minus, t)?;
            let on_own = denoiser.predict_noise(&dual.minus.states[k], p_minus, t)?;
            *sum += norm(&sub(&on_shared, &on_own)?);
        }
    }
    let n = seeds.len() as f64;
    Ok(BiasReport {
        shared_strategy,
        seeds: seeds.to_vec(),
        gaps: sums
            .into_iter()
            .enumerate()
            .map(|(k, s)| (steps - k, s / n))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSample {
    pub t: usize,
    pub value: f64,
    pub vector: Vec<f64>,
    pub converged: bool,
    /// Angle between the leading direction and `Delta_t`, radians.
    pub angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub delta_norms: Series,
    pub leading_eigs: Vec<EigenSample>,
    pub suppression_proj: Series,
    pub mode_masses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub fd_step: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            max_iters: 10_000,
            tol: 1e-9,
        }
    }
}

/// Per-step discrepancy norms, leading Jacobian eigenpairs of the positive
/// prediction, and suppression projections for a recorded trajectory.
pub fn analyze_trajectory<D: Denoiser + ?Sized>(
    denoiser: &D,
    traj: &Trajectory,
    p_plus: &Condition,
    spectral: &SpectralOptions,
) -> Result<DiagnosticsReport> {
    let delta_norms = delta_norm_curve(traj)?;
    let mut leading_eigs = Vec::with_capacity(traj.records.len());
    let mut suppression_proj = Vec::with_capacity(traj.records.len());
    for (k, rec) in traj.records.iter().enumerate() {
        let delta = rec.delta.as_ref().ok_or(Error::NoNegativeBranch)?;
        let jac = jacobian_fd(denoiser, p_plus, &traj.states[k], rec.t, spectral.fd_step)?;
        let pair = leading_eigen(&jac, spectral.max_iters, spectral.tol)?;
        suppression_proj.push((
            rec.t,
            suppression_projection(&pair.vector, delta, traj.config.w)?,
        ));
        leading_eigs.push(EigenSample {
            t: rec.t,
            angle: suppression_angle(&pair.vector, delta)?,
            value: pair.value,
            vector: pair.vector,
            converged: pair.converged,
        });
    }
    Ok(DiagnosticsReport {
        delta_norms,
        leading_eigs,
        suppression_proj,
        mode_masses: BTreeMap::new(),
    })
}
