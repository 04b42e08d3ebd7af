use proptest::prelude::*;
use sdglab_core::guidance::{
    branch_guided_eps, cfg_combine, np_combine, sdg_combine, sdn_combine, tdd_only_combine,
};
use sdglab_core::{
    Condition, Denoiser, GmmWorld, GuidanceConfig, MixtureOracle, NoiseSchedule, Strategy,
};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rotate(v: &[f64], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn vec2() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2)
}

fn vecn(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn cfg_is_affine_in_w(u in vecn(4), c in vecn(4), w in -5.0f64..20.0) {
        let g = cfg_combine(&u, &c, w).unwrap();
        for i in 0..4 {
            let want = u[i] + w * (c[i] - u[i]);
            prop_assert!((g[i] - want).abs() <= 1e-10 * (1.0 + want.abs() + w.abs() * (c[i] - u[i]).abs()));
        }
        prop_assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.clone());
        prop_assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.clone());
    }

    #[test]
    fn np_and_tdd_collapse_without_discrepancy(p in vecn(3), w in 0.01f64..20.0) {
        prop_assert_eq!(np_combine(&p, &p, w).unwrap().eps, p.clone());
        prop_assert_eq!(tdd_only_combine(&p, &p, w).unwrap().eps, p.clone());
        prop_assert_eq!(sdn_combine(&p, &p, 30.0, 1e-8).unwrap().eps, p.clone());
    }

    #[test]
    fn normalized_correction_norm_identity(
        p in vecn(5),
        n in vecn(5),
        lambda in 0.0f64..100.0,
        eps in 1e-10f64..1.0,
    ) {
        for g in [sdn_combine(&p, &n, lambda, eps).unwrap(), sdg_combine(&p, &n, lambda, eps).unwrap()] {
            let d = norm(&g.delta);
            let want = lambda * d / (d + eps);
            let got = norm(&g.eps.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>());
            // The correction norm is exact up to rounding in eps - p.
            prop_assert!((norm(&g.correction) - want).abs() <= 1e-10 * (1.0 + want));
            prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want + norm(&p)));
        }
    }

    #[test]
    fn normalized_push_is_scale_invariant(p in vecn(3), n in vecn(3), k in 0.1f64..10.0) {
        // Scaling the discrepancy leaves the correction unchanged up to eps_stab.
        let eps = 1e-12;
        let a = sdn_combine(&p, &n, 30.0, eps).unwrap();
        prop_assume!(norm(&a.delta) > 1e-3);
        let n2: Vec<f64> = p.iter().zip(&n).map(|(pi, ni)| pi - k * (pi - ni)).collect();
        let b = sdn_combine(&p, &n2, 30.0, eps).unwrap();
        for (x, y) in a.correction.iter().zip(&b.correction) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn combiners_are_rotation_equivariant(p in vec2(), n in vec2(), theta in 0.0f64..6.3, w in 0.1f64..10.0) {
        let rp = rotate(&p, theta);
        let rn = rotate(&n, theta);
        let pairs = [
            (rotate(&np_combine(&p, &n, w).unwrap().eps, theta), np_combine(&rp, &rn, w).unwrap().eps),
            (rotate(&sdn_combine(&p, &n, 30.0, 1e-8).unwrap().eps, theta), sdn_combine(&rp, &rn, 30.0, 1e-8).unwrap().eps),
            (rotate(&cfg_combine(&n, &p, w).unwrap(), theta), cfg_combine(&rn, &rp, w).unwrap()),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn np_equals_cfg_with_negative_as_unconditional(p in vecn(3), n in vecn(3), w in 0.1f64..10.0) {
        // p + w (p - n) == cfg(n, p, 1 + w)
        let a = np_combine(&p, &n, w).unwrap().eps;
        let b = cfg_combine(&n, &p, 1.0 + w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn branch_prediction_matches_cfg_one_plus_w(
        x0 in -6.0f64..6.0, x1 in -4.0f64..4.0, t in 1usize..=50, w in 0.0f64..10.0,
    ) {
        let oracle = MixtureOracle::new(GmmWorld::two_well(), NoiseSchedule::linear(50, 0.002, 0.4).unwrap());
        let cond = Condition::subset([1]).unwrap();
        let x = [x0, x1];
        let got = branch_guided_eps(&oracle, &cond, &x, t, w).unwrap();
        let c = oracle.predict_noise(&x, &cond, t).unwrap();
        let u = oracle.predict_noise(&x, &Condition::Null, t).unwrap();
        let want = cfg_combine(&u, &c, 1.0 + w).unwrap();
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn config_json_defaults_and_names() {
    let cfg: GuidanceConfig = serde_json::from_str(r#"{"strategy":"TDD_ONLY"}"#).unwrap();
    assert_eq!(cfg.strategy, Strategy::TddOnly);
    assert_eq!((cfg.w, cfg.lambda, cfg.eps_stab), (6.0, 30.0, 1e-8));
    assert!(serde_json::from_str::<GuidanceConfig>(r#"{"strategy":"FOO"}"#).is_err());
    for s in Strategy::ALL {
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Strategy>(&text).unwrap(), s);
        assert_eq!(s.as_str().to_lowercase().parse::<Strategy>().unwrap(), s);
    }
}

#[test]
fn config_validation() {
    let mut cfg = GuidanceConfig::new(Strategy::Sdn);
    cfg.eps_stab = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = GuidanceConfig::new(Strategy::Np);
    cfg.w = -1.0;
    assert!(cfg.validate().is_err());
    GuidanceConfig::default().validate().unwrap();
}
