use proxbias::bias::{bias_por_zw, zw_por, ZwCoefficients};
use proxbias::bridge::{inverse_probability_check, solve_treatment_bridge_base};
use proxbias::completeness::{self, certify};
use proxbias::estimators::{fit_or, fit_proximal_gmm, fit_unadj, population_gmm, population_or, population_unadj, BridgeForm};
use proxbias::lsem::sample;
use proxbias::moments::{treatment_moments, treatment_moments_mc};
use proxbias::{presets, Error};

fn in_pool<T: Send>(k: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap().install(f)
}

#[test]
fn samples_do_not_depend_on_thread_count() {
    let s = presets::spec("completeness").unwrap();
    let a = in_pool(1, || sample(&s, 70_000, 9).unwrap());
    let b = in_pool(5, || sample(&s, 70_000, 9).unwrap());
    assert_eq!(a, b);
    let c = sample(&s, 70_000, 10).unwrap();
    assert_ne!(a.y, c.y);
}

#[test]
fn finite_sample_fits_approach_population_values() {
    let s = presets::spec("section6").unwrap();
    let mom = treatment_moments(&s, 60).unwrap();
    let data = sample(&s, 400_000, 3).unwrap();
    let form = BridgeForm::Full;
    let cases = [
        ("por", fit_proximal_gmm(&data, form).unwrap(), population_gmm(&s, &mom, form, &form.instruments(s.dims)).unwrap().psi),
        ("or", fit_or(&data).unwrap(), population_or(&s, &mom).unwrap().psi),
        ("unadj", fit_unadj(&data).unwrap(), population_unadj(&s, &mom).unwrap().psi),
    ];
    for (name, fit, psi) in cases {
        assert!(fit.se_psi > 0.0);
        let z = (fit.psi_hat - psi) / fit.se_psi;
        assert!(z.abs() < 4.0, "{name}: estimate {} population {psi} z {z}", fit.psi_hat);
    }
}

#[test]
fn treatment_bridge_reweights_each_arm_to_one() {
    let s = presets::spec("base-case").unwrap();
    let q = solve_treatment_bridge_base(&s).unwrap();
    for (mean, se) in inverse_probability_check(&s, &q, 500_000, 21).unwrap() {
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
    }
}

#[test]
fn quadrature_agrees_with_simulation() {
    let s = presets::spec("completeness").unwrap();
    let quad = treatment_moments(&s, 60).unwrap();
    let mc = treatment_moments_mc(&s, 2_000_000, 4).unwrap();
    let tol = mc.est_error + quad.est_error;
    let (qa, ma) = (quad.e_ag(), mc.e_ag());
    let (qaa, maa) = (quad.e_agg(), mc.e_agg());
    assert!((quad.e_a - mc.e_a).abs() < tol);
    for i in 0..qa.len() {
        assert!((qa[i] - ma[i]).abs() < tol, "E[AG_{i}]");
        for j in 0..qa.len() {
            assert!((qaa[(i, j)] - maa[(i, j)]).abs() < tol, "E[AG_{i}G_{j}]");
        }
    }
    assert!(quad.positivity_holds() && mc.positivity_holds());
}

#[test]
fn single_precision_tracks_double() {
    let s = presets::spec("section6").unwrap();
    let mom = treatment_moments(&s, 60).unwrap();
    let c = ZwCoefficients {
        theta_u1: s.theta_u[(0, 0)] as f32,
        theta_u2: s.theta_u[(1, 0)] as f32,
        mu_u1: s.mu_u[(0, 0)] as f32,
        mu_u2: s.mu_u[(1, 0)] as f32,
        gamma_u1: s.gamma_u[0] as f32,
        gamma_au1: s.gamma_au[0] as f32,
    };
    let lo = zw_por(&c, &mom.cast::<f32>()).unwrap();
    let hi = bias_por_zw(&s, &mom).unwrap();
    assert!((lo as f64 - hi).abs() < 1e-5, "{lo} vs {hi}");
}

#[test]
fn completeness_counterexample_certifies() {
    let s = presets::spec("completeness").unwrap();
    let c = certify(&s, completeness::DEFAULT_ORDER).unwrap();
    assert!(c.passed);
    assert_eq!(c.rows.len(), 30);
    assert!(c.max_abs_conditional_mean < completeness::MEAN_TOLERANCE);
    assert!(c.max_abs_g > completeness::NONZERO_FLOOR);

    let mut wide = s.clone();
    wide.dims.m = 2;
    assert!(certify(&wide, 60).is_err());
    assert!(matches!(certify(&s, 10), Err(Error::Precondition(_))));
}
