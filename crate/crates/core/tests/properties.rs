use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use proxbias::bias::{bias_or, bias_por_zw, bias_unadj};
use proxbias::draws;
use proxbias::moments::treatment_moments;
use proxbias::sweep::{equivalence_gap, Formulas};
use proxbias::LsemSpec;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_forms_match_population_solves(seed in any::<u64>(), which in 0..3u8) {
        let mut r = rng(seed);
        let s = match which {
            0 => draws::zw_spec(&mut r),
            1 => draws::ay_spec(&mut r),
            _ => draws::general_spec(&mut r, false),
        };
        let m = treatment_moments(&s, 40).unwrap();
        if let Ok(Some(gap)) = equivalence_gap(&s, &m, &Formulas::default()) {
            prop_assert!(gap < 1e-6, "gap {}", gap);
        }
    }

    #[test]
    fn outcome_scaling_is_linear(seed in any::<u64>(), c in -3.0..3.0f64) {
        let s = draws::zw_spec(&mut rng(seed));
        let m = treatment_moments(&s, 40).unwrap();
        let mut t = s.clone();
        t.gamma_u *= c;
        t.gamma_au *= c;
        t.gamma_a *= c;
        for f in [bias_por_zw, bias_or, bias_unadj] {
            if let (Ok(a), Ok(b)) = (f(&s, &m), f(&t, &m)) {
                prop_assert!((b - c * a).abs() < 1e-9 * (1.0 + a.abs()), "{} {}", a, b);
            }
        }
    }

    #[test]
    fn json_round_trip(seed in any::<u64>(), square in any::<bool>()) {
        let s = draws::general_spec(&mut rng(seed), square);
        let back: LsemSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn param_paths_round_trip(seed in any::<u64>(), v in -5.0..5.0f64) {
        let mut s = draws::general_spec(&mut rng(seed), false);
        let (p, m) = (s.dims.p, s.dims.m);
        for path in [format!("theta_u[{p},{m}]"), format!("mu_u[1,{m}]"), format!("gamma_u[{p}]"), "gamma_a".into()] {
            s.set_param(&path, v).unwrap();
            prop_assert_eq!(s.get_param(&path).unwrap(), v);
        }
        let past = format!("gamma_u[{}]", p + 1);
        prop_assert!(s.get_param(&past).is_err());
        prop_assert!(s.get_param("theta_u[0,1]").is_err());
    }

    #[test]
    fn moments_respect_positivity(seed in any::<u64>()) {
        let s = draws::general_spec(&mut rng(seed), true);
        let m = treatment_moments(&s, 40).unwrap();
        prop_assert!(m.e_a > 0.0 && m.e_a < 1.0);
        prop_assert!(m.positivity_holds());
    }
}
