//! Reverse-process samplers.
//!
//! Every step applies `x_{t-1} = a_t x_t + b_t eps_hat_t + sigma_t z_t` with
//! DDPM posterior-mean coefficients. Single-branch runs share one latent
//! between the positive and negative predictions; dual-branch runs evolve a
//! positive and a counterfactual latent side by side from the same initial
//! noise and the same per-step noise stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    branch_guided_eps, cfg_combine, np_combine, sdg_combine, sdn_combine, tdd_only_combine,
    GuidanceConfig, Guided, Strategy,
};
use crate::linalg::sub;
use crate::oracle::{Condition, Denoiser};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerStepCoeffs {
    /// Coefficient on `x_t`.
    pub a: f64,
    /// Coefficient on the guided noise prediction.
    pub b: f64,
    /// Scale of the injected Gaussian noise; zero in deterministic mode.
    pub sigma: f64,
}

/// `a = 1/sqrt(1 - beta)`, `b = -beta / (sqrt(1 - beta) sqrt(1 - alpha_bar))`,
/// `sigma = sqrt(beta)` (or 0 when `deterministic`).
pub fn ancestral_coeffs(
    schedule: &NoiseSchedule,
    t: usize,
    deterministic: bool,
) -> Result<SamplerStepCoeffs> {
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let keep = (1.0 - beta).sqrt();
    Ok(SamplerStepCoeffs {
        a: 1.0 / keep,
        b: -beta / (keep * (1.0 - ab).sqrt()),
        sigma: if deterministic { 0.0 } else { beta.sqrt() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Drop the stochastic term (sigma = 0). Default.
    pub deterministic: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub eps_pos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_neg: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Guided prediction minus `eps_pos`.
    pub correction: Vec<f64>,
    pub x_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub config: GuidanceConfig,
    /// `x_T, x_{T-1}, ..., x_0`.
    pub states: Vec<Vec<f64>>,
    /// One record per step, `t = T` first.
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    /// Latent the step-`t` prediction was evaluated on.
    pub fn state_at(&self, t: usize) -> Option<&[f64]> {
        let steps = self.records.len();
        (1..=steps)
            .contains(&t)
            .then(|| self.states[steps - t].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrajectory {
    pub plus: Trajectory,
    pub minus: Trajectory,
    pub shared_seed: u64,
}

/// Per-run noise source. Draws `x_T` first, then one vector per stochastic step.
struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
}

impl NoiseStream {
    fn new(seed: u64, dim: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim,
        }
    }

    fn draw(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect()
    }
}

/// Initial latent `x_T` used by every run with this seed.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    NoiseStream::new(seed, dim).draw()
}

fn update(x: &[f64], eps: &[f64], c: &SamplerStepCoeffs, z: Option<&[f64]>) -> Vec<f64> {
    match z {
        Some(z) => x
            .iter()
            .zip(eps)
            .zip(z)
            .map(|((x, e), z)| c.a * x + c.b * e + c.sigma * z)
            .collect(),
        None => x.iter().zip(eps).map(|(x, e)| c.a * x + c.b * e).collect(),
    }
}

/// Noise for step `t`; none at the final step, following the usual DDPM loop.
fn step_noise(stream: &mut NoiseStream, t: usize, opts: SamplerOptions) -> Option<Vec<f64>> {
    (!opts.deterministic && t > 1).then(|| stream.draw())
}

/// Sample on one shared latent with CFG, negative prompting, or SDN.
pub fn run_single_branch<D: Denoiser + ?Sized>(
    denoiser: &D,
    p_plus: &Condition,
    p_neg: Option<&Condition>,
    config: &GuidanceConfig,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Trajectory> {
    config.validate()?;
    let neg = match (config.strategy, p_neg) {
        (Strategy::Cfg, _) => None,
        (Strategy::Np | Strategy::Sdn, Some(n)) => Some(n),
        (Strategy::Np | Strategy::Sdn, None) => {
            return Err(Error::MissingNegativeCondition(config.strategy.to_string()))
        }
        (s, _) => {
            return Err(Error::UnsupportedStrategy {
                strategy: s.to_string(),
                runner: "run_single_branch",
            })
        }
    };

    let schedule = denoiser.schedule();
    let steps = schedule.num_steps();
    let mut stream = NoiseStream::new(seed, denoiser.dim());
    let mut x = stream.draw();
    let mut states = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps);
    states.push(x.clone());

    for t in (1..=steps).rev() {
        let coeffs = ancestral_coeffs(schedule, t, opts.deterministic)?;
        let eps_pos = denoiser.predict_noise(&x, p_plus, t)?;
        let (guided, eps_neg, delta) = match neg {
            None => {
                let eps_uncond = denoiser.predict_noise(&x, &Condition::Null, t)?;
                (cfg_combine(&eps_uncond, &eps_pos, config.w)?, None, None)
            }
            Some(n) => {
                let eps_neg = denoiser.predict_noise(&x, n, t)?;
                let Guided { eps, delta, .. } = if config.strategy == Strategy::Np {
                    np_combine(&eps_pos, &eps_neg, config.w)?
                } else {
                    sdn_combine(&eps_pos, &eps_neg, config.lambda, config.eps_stab)?
                };
                (eps, Some(eps_neg), Some(delta))
            }
        };
        let z = step_noise(&mut stream, t, opts);
        x = update(&x, &guided, &coeffs, z.as_deref());
        records.push(StepRecord {
            t,
            correction: sub(&guided, &eps_pos)?,
            eps_pos,
            eps_neg,
            delta,
            x_after: x.clone(),
        });
        states.push(x.clone());
    }

    Ok(Trajectory {
        seed,
        config: *config,
        states,
        records,
    })
}

/// Sample with trajectory-decoupled denoising (TDD-only or SDG).
///
/// The counterfactual branch advances with its own CFG-guided prediction and
/// never reads `p_plus` or the positive latent.
pub fn run_dual_branch<D: Denoiser + ?Sized>(
    denoiser: &D,
    p_plus: &Condition,
    p_minus: &Condition,
    config: &GuidanceConfig,
    seed: u64,
    opts: SamplerOptions,
) -> Result<DualTrajectory> {
    config.validate()?;
    if !config.strategy.is_decoupled() {
        return Err(Error::UnsupportedStrategy {
            strategy: config.strategy.to_string(),
            runner: "run_dual_branch",
        });
    }

    let schedule = denoiser.schedule();
    let steps = schedule.num_steps();
    let mut stream = NoiseStream::new(seed, denoiser.dim());
    let x_init = stream.draw();
    let (mut x_plus, mut x_minus) = (x_init.clone(), x_init);
    let mut plus_states = vec![x_plus.clone()];
    let mut minus_states = vec![x_minus.clone()];
    let mut plus_records = Vec::with_capacity(steps);
    let mut minus_records = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let coeffs = ancestral_coeffs(schedule, t, opts.deterministic)?;
        let eps_minus = branch_guided_eps(denoiser, p_minus, &x_minus, t, config.w)?;
        let eps_plus = branch_guided_eps(denoiser, p_plus, &x_plus, t, config.w)?;
        let guided = match config.strategy {
            Strategy::Sdg => sdg_combine(&eps_plus, &eps_minus, config.lambda, config.eps_stab)?,
            _ => tdd_only_combine(&eps_plus, &eps_minus, config.w)?,
        };
        let z = step_noise(&mut stream, t, opts);
        x_minus = update(&x_minus, &eps_minus, &coeffs, z.as_deref());
        x_plus = update(&x_plus, &guided.eps, &coeffs, z.as_deref());

        minus_records.push(StepRecord {
            t,
            correction: vec![0.0; eps_minus.len()],
            eps_pos: eps_minus.clone(),
            eps_neg: None,
            delta: None,
            x_after: x_minus.clone(),
        });
        plus_records.push(StepRecord {
            t,
            eps_pos: eps_plus,
            eps_neg: Some(eps_minus),
            delta: Some(guided.delta),
            correction: guided.correction,
            x_after: x_plus.clone(),
        });
        plus_states.push(x_plus.clone());
        minus_states.push(x_minus.clone());
    }

    Ok(DualTrajectory {
        plus: Trajectory {
            seed,
            config: *config,
            states: plus_states,
            records: plus_records,
        },
        minus: Trajectory {
            seed,
            config: *config,
            states: minus_states,
            records: minus_records,
        },
        shared_seed: seed,
    })
}

/// Dispatch on the configured strategy. Decoupled strategies return the
/// positive branch.
pub fn run<D: Denoiser + ?Sized>(
    denoiser: &D,
    p_plus: &Condition,
    p_neg: Option<&Condition>,
    config: &GuidanceConfig,
    seed: u64,
    opts: SamplerOptions,
) -> Result<Trajectory> {
    if config.strategy.is_decoupled() {
        let neg =
            p_neg.ok_or_else(|| Error::MissingNegativeCondition(config.strategy.to_string()))?;
        Ok(run_dual_branch(denoiser, p_plus, neg, config, seed, opts)?.plus)
    } else {
        run_single_branch(denoiser, p_plus, p_neg, config, seed, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::oracle::{GmmWorld, MixtureOracle};

    fn oracle() -> MixtureOracle {
        MixtureOracle::new(
            GmmWorld::two_well(),
            NoiseSchedule::linear(30, 0.002, 0.3).unwrap(),
        )
    }

    fn both() -> Condition {
        Condition::subset([0, 1]).unwrap()
    }

    fn cf() -> Condition {
        Condition::subset([1]).unwrap()
    }

    #[test]
    fn coeff_arithmetic() {
        // beta_1 = 0.19 gives alpha_bar_1 = 0.81.
        let s = NoiseSchedule::from_betas(vec![0.19, 0.2]).unwrap();
        let c = ancestral_coeffs(&s, 1, false).unwrap();
        assert!((c.a - 1.0 / 0.9).abs() < 1e-12);
        assert!((c.b - (-0.19 / (0.9 * 0.19f64.sqrt()))).abs() < 1e-12);
        assert!((c.b + 0.48432).abs() < 1e-5);
        assert!((c.sigma - 0.19f64.sqrt()).abs() < 1e-15);
        assert_eq!(ancestral_coeffs(&s, 1, true).unwrap().sigma, 0.0);
        assert!(ancestral_coeffs(&s, 3, true).is_err());
    }

    #[test]
    fn np_with_identical_conditions_is_plain_conditional_sampling() {
        let o = oracle();
        let np = GuidanceConfig::new(Strategy::Np);
        let a = run_single_branch(
            &o,
            &both(),
            Some(&both()),
            &np,
            3,
            SamplerOptions::default(),
        )
        .unwrap();
        // CFG at w = 1 samples with the conditional prediction alone.
        let cfg1 = GuidanceConfig {
            w: 1.0,
            ..GuidanceConfig::new(Strategy::Cfg)
        };
        let b = run_single_branch(&o, &both(), None, &cfg1, 3, SamplerOptions::default()).unwrap();
        assert_eq!(a.states, b.states);
        for r in &a.records {
            assert!(r.delta.as_ref().unwrap().iter().all(|d| *d == 0.0));
            assert!(r.correction.iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn cfg_w1_matches_hand_rolled_conditional_loop() {
        let o = oracle();
        let cond = cf();
        let cfg1 = GuidanceConfig {
            w: 1.0,
            ..GuidanceConfig::new(Strategy::Cfg)
        };
        let traj =
            run_single_branch(&o, &cond, None, &cfg1, 11, SamplerOptions::default()).unwrap();
        let mut x = initial_noise(11, 2);
        for t in (1..=30).rev() {
            let c = ancestral_coeffs(o.schedule(), t, true).unwrap();
            let e = o.predict_noise(&x, &cond, t).unwrap();
            x = x.iter().zip(&e).map(|(x, e)| c.a * x + c.b * e).collect();
        }
        assert_eq!(traj.final_state(), x.as_slice());
    }

    #[test]
    fn seeds_change_initial_noise() {
        let o = oracle();
        let cfg = GuidanceConfig::new(Strategy::Cfg);
        let a = run_single_branch(&o, &both(), None, &cfg, 1, SamplerOptions::default()).unwrap();
        let b = run_single_branch(&o, &both(), None, &cfg, 2, SamplerOptions::default()).unwrap();
        assert_ne!(a.initial(), b.initial());
        assert_eq!(a.states.len(), 31);
        assert_eq!(a.records.len(), 30);
        assert_eq!(a.records[0].t, 30);
        assert_eq!(a.state_at(30).unwrap(), a.initial());
    }

    #[test]
    fn missing_negative_and_wrong_runner() {
        let o = oracle();
        let opts = SamplerOptions::default();
        assert!(matches!(
            run_single_branch(
                &o,
                &both(),
                None,
                &GuidanceConfig::new(Strategy::Np),
                0,
                opts
            ),
            Err(Error::MissingNegativeCondition(_))
        ));
        assert!(matches!(
            run_single_branch(
                &o,
                &both(),
                Some(&cf()),
                &GuidanceConfig::new(Strategy::Sdg),
                0,
                opts
            ),
            Err(Error::UnsupportedStrategy { .. })
        ));
        assert!(matches!(
            run_dual_branch(
                &o,
                &both(),
                &cf(),
                &GuidanceConfig::new(Strategy::Np),
                0,
                opts
            ),
            Err(Error::UnsupportedStrategy { .. })
        ));
    }

    #[test]
    fn dual_branch_collapse_when_conditions_match() {
        let o = oracle();
        for deterministic in [true, false] {
            let d = run_dual_branch(
                &o,
                &cf(),
                &cf(),
                &GuidanceConfig::new(Strategy::Sdg),
                5,
                SamplerOptions { deterministic },
            )
            .unwrap();
            assert_eq!(d.plus.states, d.minus.states);
            for r in &d.plus.records {
                assert!(r.correction.iter().all(|c| *c == 0.0));
            }
        }
    }

    #[test]
    fn dual_branch_minus_ignores_plus_condition() {
        let o = oracle();
        let cfg = GuidanceConfig::new(Strategy::Sdg);
        let opts = SamplerOptions {
            deterministic: false,
        };
        let a = run_dual_branch(&o, &both(), &cf(), &cfg, 9, opts).unwrap();
        let b =
            run_dual_branch(&o, &Condition::subset([0]).unwrap(), &cf(), &cfg, 9, opts).unwrap();
        assert_eq!(a.minus.states, b.minus.states);
        assert_eq!(a.plus.states[0], a.minus.states[0]);
        assert_ne!(a.plus.states, b.plus.states);
    }

    #[test]
    fn record_consistency() {
        let o = oracle();
        for strategy in [
            Strategy::Np,
            Strategy::Sdn,
            Strategy::TddOnly,
            Strategy::Sdg,
        ] {
            let cfg = GuidanceConfig::new(strategy);
            let traj = run(&o, &both(), Some(&cf()), &cfg, 4, SamplerOptions::default()).unwrap();
            for r in &traj.records {
                let delta = r.delta.as_ref().unwrap();
                assert_eq!(
                    delta,
                    &sub(&r.eps_pos, r.eps_neg.as_ref().unwrap()).unwrap()
                );
                if strategy.is_normalized() {
                    let d = norm(delta);
                    let expected = cfg.lambda * d / (d + cfg.eps_stab);
                    assert!((norm(&r.correction) - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn replay_is_identical() {
        let o = oracle();
        let opts = SamplerOptions {
            deterministic: false,
        };
        let cfg = GuidanceConfig::new(Strategy::Sdn);
        let a = run_single_branch(&o, &both(), Some(&cf()), &cfg, 21, opts).unwrap();
        let b = run_single_branch(&o, &both(), Some(&cf()), &cfg, 21, opts).unwrap();
        assert_eq!(a, b);
    }
}
