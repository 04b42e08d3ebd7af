use sdglab_core::oracle::DiagGaussian;
use sdglab_core::sampler::{
    ancestral_coeffs, initial_noise, run, run_dual_branch, run_single_branch, SamplerOptions,
};
use sdglab_core::{Condition, GmmWorld, GuidanceConfig, MixtureOracle, NoiseSchedule, Strategy};

fn oracle() -> MixtureOracle {
    let world = GmmWorld::new(
        vec![
            DiagGaussian::isotropic(vec![-3.0, 0.0], 1.0),
            DiagGaussian::isotropic(vec![3.0, 0.0], 1.0),
            DiagGaussian::isotropic(vec![0.0, 4.0], 0.5),
        ],
        vec![0.4, 0.4, 0.2],
    )
    .unwrap();
    MixtureOracle::new(world, NoiseSchedule::linear(40, 0.002, 0.35).unwrap())
}

fn c(ix: &[usize]) -> Condition {
    Condition::subset(ix.iter().copied()).unwrap()
}

#[test]
fn minus_branch_ignores_positive_condition() {
    let o = oracle();
    let pairs = [
        (c(&[0]), c(&[1]), c(&[2])),
        (c(&[0, 1]), c(&[2]), c(&[1])),
        (c(&[1, 2]), c(&[0, 2]), c(&[0])),
    ];
    for strategy in [Strategy::Sdg, Strategy::TddOnly] {
        for deterministic in [true, false] {
            let opts = SamplerOptions { deterministic };
            let cfg = GuidanceConfig::new(strategy);
            for (p_a, p_b, neg) in &pairs {
                for seed in 0..10 {
                    let a = run_dual_branch(&o, p_a, neg, &cfg, seed, opts).unwrap();
                    let b = run_dual_branch(&o, p_b, neg, &cfg, seed, opts).unwrap();
                    assert_eq!(a.minus.states, b.minus.states);
                    assert_ne!(a.plus.states, b.plus.states);
                }
            }
        }
    }
}

#[test]
fn all_runs_start_from_the_seeded_noise() {
    let o = oracle();
    let opts = SamplerOptions::default();
    for s in Strategy::ALL {
        let t = run(
            &o,
            &c(&[0]),
            Some(&c(&[1])),
            &GuidanceConfig::new(s),
            9,
            opts,
        )
        .unwrap();
        assert_eq!(t.initial(), initial_noise(9, 2).as_slice());
        assert_eq!(t.states.len(), 41);
        assert_eq!(t.records.len(), 40);
        assert_eq!(t.records[0].t, 40);
        assert_eq!(t.records.last().unwrap().t, 1);
        for (k, r) in t.records.iter().enumerate() {
            assert_eq!(r.x_after, t.states[k + 1]);
        }
    }
}

#[test]
fn reruns_are_identical() {
    let o = oracle();
    for deterministic in [true, false] {
        let opts = SamplerOptions { deterministic };
        for s in Strategy::ALL {
            let cfg = GuidanceConfig::new(s);
            let a = run(&o, &c(&[0, 1]), Some(&c(&[1])), &cfg, 3, opts).unwrap();
            let b = run(&o, &c(&[0, 1]), Some(&c(&[1])), &cfg, 3, opts).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn strategies_reject_wrong_runner_and_missing_negative() {
    let o = oracle();
    let opts = SamplerOptions::default();
    let p = c(&[0]);
    assert!(run_single_branch(&o, &p, None, &GuidanceConfig::new(Strategy::Np), 0, opts).is_err());
    assert!(run_single_branch(
        &o,
        &p,
        Some(&p),
        &GuidanceConfig::new(Strategy::Sdg),
        0,
        opts
    )
    .is_err());
    assert!(run_dual_branch(&o, &p, &p, &GuidanceConfig::new(Strategy::Sdn), 0, opts).is_err());
    assert!(run_dual_branch(
        &o,
        &p,
        &Condition::Null,
        &GuidanceConfig::new(Strategy::Sdg),
        0,
        opts
    )
    .is_err());
    assert!(run(
        &o,
        &p,
        None,
        &GuidanceConfig::new(Strategy::TddOnly),
        0,
        opts
    )
    .is_err());
    // CFG has no negative branch and ignores one if given.
    let with = run(
        &o,
        &p,
        Some(&c(&[1])),
        &GuidanceConfig::new(Strategy::Cfg),
        0,
        opts,
    )
    .unwrap();
    let without = run(&o, &p, None, &GuidanceConfig::new(Strategy::Cfg), 0, opts).unwrap();
    assert_eq!(with, without);
}

#[test]
fn coefficients_match_reverse_mean_formula() {
    let s = NoiseSchedule::linear(10, 0.05, 0.3).unwrap();
    for t in 1..=10 {
        let beta = s.beta(t).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let k = ancestral_coeffs(&s, t, false).unwrap();
        // mean = (x - beta / sqrt(1 - ab) eps) / sqrt(1 - beta)
        let (x, eps) = (0.8, -1.3);
        let want = (x - beta / (1.0 - ab).sqrt() * eps) / (1.0 - beta).sqrt();
        assert!((k.a * x + k.b * eps - want).abs() < 1e-14);
        assert!((k.sigma - beta.sqrt()).abs() < 1e-15);
        assert_eq!(ancestral_coeffs(&s, t, true).unwrap().sigma, 0.0);
    }
}

/// Plain conditional sampling on a single Gaussian should reproduce its
/// moments; a check on the sampler arithmetic independent of guidance.
#[test]
fn stochastic_sampler_recovers_target_moments() {
    let world = GmmWorld::new(
        vec![DiagGaussian::new(vec![1.5, -2.0], vec![0.5, 2.0])],
        vec![1.0],
    )
    .unwrap();
    let o = MixtureOracle::new(world, NoiseSchedule::linear(200, 1e-4, 0.1).unwrap());
    let cfg = GuidanceConfig {
        w: 1.0,
        ..GuidanceConfig::new(Strategy::Cfg)
    };
    let opts = SamplerOptions {
        deterministic: false,
    };
    let n = 2000;
    let finals: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            run_single_branch(&o, &Condition::Null, None, &cfg, s, opts)
                .unwrap()
                .final_state()
                .to_vec()
        })
        .collect();
    for (i, (m, v)) in [(1.5, 0.5), (-2.0, 2.0)].into_iter().enumerate() {
        let mean = finals.iter().map(|x| x[i]).sum::<f64>() / n as f64;
        let var = finals.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (mean - m).abs() < 5.0 * (v / n as f64).sqrt() + 0.02,
            "mean {mean} vs {m}"
        );
        assert!((var / v - 1.0).abs() < 0.12, "var {var} vs {v}");
    }
}
