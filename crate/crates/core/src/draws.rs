//! Random valid specs for the equivalence, sign and degeneracy batteries.
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::lsem::{Dimensions, LsemSpec};

fn magnitude<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn fill<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

fn intercepts<R: Rng>(rng: &mut R, s: &mut LsemSpec) {
    s.alpha0 = rng.random_range(-0.8..0.8);
    s.theta0 = vector(rng, s.dims.m, 1.0);
    s.mu0 = vector(rng, s.dims.n, 1.0);
    s.gamma0 = rng.random_range(-1.0..1.0);
    s.gamma_a = rng.random_range(-1.0..1.0);
    s.theta_a = vector(rng, s.dims.m, 1.5);
    s.noise_sd = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
}

fn two_confounders<R: Rng>(rng: &mut R) -> LsemSpec {
    let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 1, n: 1 });
    intercepts(rng, &mut s);
    s.alpha_u[0] = magnitude(rng, 0.1, 1.5);
    s.theta_u[(0, 0)] = magnitude(rng, 0.2, 2.0);
    s.mu_u[(0, 0)] = magnitude(rng, 0.2, 2.0);
    s.gamma_u[0] = rng.random_range(-2.0..2.0);
    s
}

/// U₂ loads on Z and W only.
pub fn zw_spec<R: Rng>(rng: &mut R) -> LsemSpec {
    let mut s = two_confounders(rng);
    s.theta_u[(1, 0)] = magnitude(rng, 0.1, 2.0);
    s.mu_u[(1, 0)] = magnitude(rng, 0.1, 2.0);
    s.gamma_au[0] = rng.random_range(-2.0..2.0);
    s
}

/// U₂ confounds A and Y without touching the proxies.
pub fn ay_spec<R: Rng>(rng: &mut R) -> LsemSpec {
    let mut s = two_confounders(rng);
    s.alpha_u[1] = magnitude(rng, 0.1, 1.5);
    s.gamma_u[1] = magnitude(rng, 0.1, 2.0);
    s.gamma_au[0] = rng.random_range(-2.0..2.0);
    s
}

/// ZW spec without effect modification where θ_{u1}μ_{u1} and θ_{u2}μ_{u2} share a sign or not.
pub fn sign_spec<R: Rng>(rng: &mut R, same_sign: bool) -> LsemSpec {
    let mut s = zw_spec(rng);
    s.gamma_au[0] = 0.0;
    let p1 = s.theta_u[(0, 0)] * s.mu_u[(0, 0)];
    let p2 = s.theta_u[(1, 0)] * s.mu_u[(1, 0)];
    if (p1 * p2 > 0.0) != same_sign {
        s.mu_u[(1, 0)] = -s.mu_u[(1, 0)];
    }
    s
}

/// m = n, no effect modification, at most three logistic directions so moments stay on quadrature.
/// Keeps p + q ≥ m so the proxies' cross-covariance can have full rank.
pub fn general_spec<R: Rng>(rng: &mut R, square: bool) -> LsemSpec {
    let (p, q, m) = if square {
        let p = rng.random_range(1..=3);
        (p, rng.random_range(0..=2), p)
    } else {
        let m = rng.random_range(1..=3);
        (rng.random_range(m..=4), rng.random_range(0..=2), m)
    };
    let mut s = LsemSpec::zeros(Dimensions { p, q, m, n: m });
    intercepts(rng, &mut s);
    s.theta_u = fill(rng, p, m, 1.5);
    s.mu_u = fill(rng, p, m, 1.5);
    s.theta_x = fill(rng, q, m, 1.0);
    s.mu_x = fill(rng, q, m, 1.0);
    s.gamma_u = vector(rng, p, 2.0);
    s.gamma_x = vector(rng, q, 1.0);
    if q > 0 {
        let l = fill(rng, q, q, 0.6);
        let cov = DMatrix::identity(q, q) + &l * l.transpose();
        s.sigma_x = DMatrix::from_fn(q, q, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt());
        s.rho = fill(rng, p, q, 0.5);
        while s.joint_cov().cholesky().is_none() {
            s.rho *= 0.5;
        }
    }
    let active = rng.random_range(1..=3.min(p + q));
    for i in sample(rng, p + q, active) {
        let a = magnitude(rng, 0.1, 1.2);
        if i < p {
            s.alpha_u[i] = a;
        } else {
            s.alpha_x[i - p] = a;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            for s in [zw_spec(&mut rng), ay_spec(&mut rng), general_spec(&mut rng, false), general_spec(&mut rng, true)] {
                assert!(s.validate().is_empty(), "{:?}", s.validate());
                assert!(s.alpha_g().iter().filter(|&&a| a != 0.0).count() <= 3);
            }
            for same in [true, false] {
                let s = sign_spec(&mut rng, same);
                let p = s.theta_u[(0, 0)] * s.mu_u[(0, 0)] * s.theta_u[(1, 0)] * s.mu_u[(1, 0)];
                assert_eq!(p > 0.0, same);
            }
        }
    }
}
