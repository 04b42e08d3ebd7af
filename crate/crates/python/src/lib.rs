//! Python bindings for the sdglab core: schedules, mixture worlds, guidance
//! rules, the two samplers, and the prompt-pipeline parser.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sdglab_core::diagnostics::{self, LabelSet};
use sdglab_core::linalg::Matrix;
use sdglab_core::oracle::DiagGaussian;
use sdglab_core::par::{self, ParTemplate};
use sdglab_core::sampler::{self, SamplerOptions};
use sdglab_core::{guidance, Condition, Denoiser, GuidanceConfig, Strategy};

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn condition(components: Option<Vec<usize>>) -> PyResult<Condition> {
    match components {
        None => Ok(Condition::Null),
        Some(c) => Condition::subset(c).map_err(py_err),
    }
}

#[pyclass(name = "NoiseSchedule", module = "sdglab", frozen)]
struct PySchedule(sdglab_core::NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (num_steps=50, beta_start=0.002, beta_end=0.4))]
    fn new(num_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        sdglab_core::NoiseSchedule::linear(num_steps, beta_start, beta_end)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.0.num_steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.0.alpha_bar(t).map_err(py_err)
    }

    fn forward_step(&self, x_prev: Vec<f64>, t: usize, noise: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward_step(&x_prev, t, &noise).map_err(py_err)
    }

    fn forward_marginal(&self, x0: Vec<f64>, t: usize, noise: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward_marginal(&x0, t, &noise).map_err(py_err)
    }
}

#[pyclass(name = "GmmWorld", module = "sdglab", frozen)]
struct PyWorld(sdglab_core::GmmWorld);

#[pymethods]
impl PyWorld {
    /// Diagonal components given as parallel lists of means and variances.
    #[new]
    fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        if means.len() != variances.len() {
            return Err(PyValueError::new_err(
                "means and variances differ in length",
            ));
        }
        let comps = means
            .into_iter()
            .zip(variances)
            .map(|(m, v)| DiagGaussian::new(m, v))
            .collect();
        sdglab_core::GmmWorld::new(comps, weights)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn two_well() -> Self {
        Self(sdglab_core::GmmWorld::two_well())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn num_components(&self) -> usize {
        self.0.num_components()
    }

    fn responsibilities(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.responsibilities(&x).map_err(py_err)
    }

    fn assign(&self, x: Vec<f64>) -> PyResult<usize> {
        self.0.assign(&x).map_err(py_err)
    }
}

#[pyclass(name = "MixtureOracle", module = "sdglab", frozen)]
struct PyOracle(sdglab_core::MixtureOracle);

#[pymethods]
impl PyOracle {
    #[new]
    fn new(world: &PyWorld, schedule: &PySchedule) -> Self {
        Self(sdglab_core::MixtureOracle::new(
            world.0.clone(),
            schedule.0.clone(),
        ))
    }

    /// Noise prediction at `x`, step `t`; `components=None` is unconditional.
    #[pyo3(signature = (x, t, components=None))]
    fn predict_noise(
        &self,
        x: Vec<f64>,
        t: usize,
        components: Option<Vec<usize>>,
    ) -> PyResult<Vec<f64>> {
        self.0
            .predict_noise(&x, &condition(components)?, t)
            .map_err(py_err)
    }

    #[pyo3(signature = (x, t, components=None, h=1e-4))]
    fn jacobian(
        &self,
        x: Vec<f64>,
        t: usize,
        components: Option<Vec<usize>>,
        h: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let j =
            diagnostics::jacobian_fd(&self.0, &condition(components)?, &x, t, h).map_err(py_err)?;
        Ok(matrix_rows(&j))
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[pyclass(name = "Trajectory", module = "sdglab", frozen)]
struct PyTrajectory(sdglab_core::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    /// `x_T` first, `x_0` last.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.0.states.clone()
    }

    #[getter]
    fn final_state(&self) -> Vec<f64> {
        self.0.final_state().to_vec()
    }

    /// `(t, |Delta_t|)` pairs; empty for plain CFG.
    fn delta_norms(&self) -> Vec<(usize, f64)> {
        diagnostics::delta_norm_curve(&self.0).unwrap_or_default()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.records.len()
    }
}

fn guidance_config(
    strategy: &str,
    w: f64,
    lambda_: f64,
    eps_stab: f64,
) -> PyResult<GuidanceConfig> {
    let strategy: Strategy = strategy.parse().map_err(py_err)?;
    let cfg = GuidanceConfig {
        strategy,
        w,
        lambda: lambda_,
        eps_stab,
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Single-latent sampling with CFG, NP or SDN.
#[pyfunction]
#[pyo3(signature = (oracle, p_plus, p_neg=None, strategy="NP", seed=0, w=6.0, lambda_=30.0, eps_stab=1e-8, deterministic=true))]
#[allow(clippy::too_many_arguments)]
fn run_single(
    py: Python<'_>,
    oracle: &PyOracle,
    p_plus: Vec<usize>,
    p_neg: Option<Vec<usize>>,
    strategy: &str,
    seed: u64,
    w: f64,
    lambda_: f64,
    eps_stab: f64,
    deterministic: bool,
) -> PyResult<PyTrajectory> {
    let cfg = guidance_config(strategy, w, lambda_, eps_stab)?;
    let plus = Condition::subset(p_plus).map_err(py_err)?;
    let neg = p_neg.map(Condition::subset).transpose().map_err(py_err)?;
    let opts = SamplerOptions { deterministic };
    py.detach(|| sampler::run_single_branch(&oracle.0, &plus, neg.as_ref(), &cfg, seed, opts))
        .map(PyTrajectory)
        .map_err(py_err)
}

/// Decoupled sampling with TDD_ONLY or SDG; returns `(plus, minus)`.
#[pyfunction]
#[pyo3(signature = (oracle, p_plus, p_minus, strategy="SDG", seed=0, w=6.0, lambda_=30.0, eps_stab=1e-8, deterministic=true))]
#[allow(clippy::too_many_arguments)]
fn run_dual(
    py: Python<'_>,
    oracle: &PyOracle,
    p_plus: Vec<usize>,
    p_minus: Vec<usize>,
    strategy: &str,
    seed: u64,
    w: f64,
    lambda_: f64,
    eps_stab: f64,
    deterministic: bool,
) -> PyResult<(PyTrajectory, PyTrajectory)> {
    let cfg = guidance_config(strategy, w, lambda_, eps_stab)?;
    let plus = Condition::subset(p_plus).map_err(py_err)?;
    let minus = Condition::subset(p_minus).map_err(py_err)?;
    let opts = SamplerOptions { deterministic };
    let dual = py
        .detach(|| sampler::run_dual_branch(&oracle.0, &plus, &minus, &cfg, seed, opts))
        .map_err(py_err)?;
    Ok((PyTrajectory(dual.plus), PyTrajectory(dual.minus)))
}

#[pyfunction]
fn cfg_combine(eps_uncond: Vec<f64>, eps_cond: Vec<f64>, w: f64) -> PyResult<Vec<f64>> {
    guidance::cfg_combine(&eps_uncond, &eps_cond, w).map_err(py_err)
}

#[pyfunction]
fn np_combine(eps_pos: Vec<f64>, eps_neg: Vec<f64>, w: f64) -> PyResult<Vec<f64>> {
    guidance::np_combine(&eps_pos, &eps_neg, w)
        .map(|g| g.eps)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eps_pos, eps_neg, lambda_=30.0, eps_stab=1e-8))]
fn sdn_combine(
    eps_pos: Vec<f64>,
    eps_neg: Vec<f64>,
    lambda_: f64,
    eps_stab: f64,
) -> PyResult<Vec<f64>> {
    guidance::sdn_combine(&eps_pos, &eps_neg, lambda_, eps_stab)
        .map(|g| g.eps)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eps_plus, eps_minus, lambda_=30.0, eps_stab=1e-8))]
fn sdg_combine(
    eps_plus: Vec<f64>,
    eps_minus: Vec<f64>,
    lambda_: f64,
    eps_stab: f64,
) -> PyResult<Vec<f64>> {
    guidance::sdg_combine(&eps_plus, &eps_minus, lambda_, eps_stab)
        .map(|g| g.eps)
        .map_err(py_err)
}

#[pyfunction]
fn tdd_only_combine(eps_plus: Vec<f64>, eps_minus: Vec<f64>, w: f64) -> PyResult<Vec<f64>> {
    guidance::tdd_only_combine(&eps_plus, &eps_minus, w)
        .map(|g| g.eps)
        .map_err(py_err)
}

/// Fraction of samples per label; `labels` maps names to component lists.
#[pyfunction]
fn mode_mass(
    samples: Vec<Vec<f64>>,
    world: &PyWorld,
    labels: std::collections::BTreeMap<String, Vec<usize>>,
) -> PyResult<std::collections::BTreeMap<String, f64>> {
    let sets: Vec<LabelSet> = labels
        .into_iter()
        .map(|(name, comps)| LabelSet::new(name, comps))
        .collect();
    diagnostics::mode_mass(&samples, &world.0, &sets).map_err(py_err)
}

/// `(value, vector, converged)` of the largest-magnitude eigenvalue.
#[pyfunction]
#[pyo3(signature = (matrix, max_iters=10_000, tol=1e-9))]
fn leading_eigen(
    matrix: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> PyResult<(f64, Vec<f64>, bool)> {
    let m = Matrix::from_rows(&matrix).map_err(py_err)?;
    let pair = diagnostics::leading_eigen(&m, max_iters, tol).map_err(py_err)?;
    Ok((pair.value, pair.vector, pair.converged))
}

/// Chat messages for one caption as `(role, content)` pairs.
#[pyfunction]
fn build_instruction(prompt: &str) -> PyResult<Vec<(String, String)>> {
    par::build_instruction(&ParTemplate::default(), prompt)
        .map(|msgs| msgs.into_iter().map(|m| (m.role, m.content)).collect())
        .map_err(py_err)
}

/// Parse a model reply into `(analysis, counterfactual)`; the analysis is a
/// dict keyed by subfield.
#[pyfunction]
fn parse_response(text: &str) -> PyResult<(std::collections::BTreeMap<String, String>, String)> {
    let parsed = par::parse_response(text, &ParTemplate::default()).map_err(py_err)?;
    let a = parsed.analysis;
    let analysis = [
        ("entities", a.entities),
        ("environment", a.environment),
        ("interactions", a.interactions),
        ("temporal_evolution", a.temporal_evolution),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok((analysis, parsed.counterfactual))
}

#[pymodule]
fn sdglab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(run_single, m)?)?;
    m.add_function(wrap_pyfunction!(run_dual, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(np_combine, m)?)?;
    m.add_function(wrap_pyfunction!(sdn_combine, m)?)?;
    m.add_function(wrap_pyfunction!(sdg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(tdd_only_combine, m)?)?;
    m.add_function(wrap_pyfunction!(mode_mass, m)?)?;
    m.add_function(wrap_pyfunction!(leading_eigen, m)?)?;
    m.add_function(wrap_pyfunction!(build_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    Ok(())
}
