//! A nonzero g(U) whose conditional mean given (Z, A, X) vanishes, certified by quadrature.
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsem::{ensure_valid, LsemSpec};
use crate::quadrature::GaussHermite;

pub const DEFAULT_ORDER: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleG {
    pub spec: LsemSpec,
    pub alpha0: f64,
    pub alpha_u: [f64; 2],
    pub alpha_x: f64,
    pub theta_u: [f64; 2],
    pub rho: [f64; 2],
    /// U₁ and U₂ exchange roles when only θ_{u2} is nonzero.
    pub swapped: bool,
    /// Added to the constant of the cubic; zero for the genuine counterexample.
    pub cubic_shift: f64,
}

impl CounterexampleG {
    pub fn new(spec: &LsemSpec) -> Result<Self> {
        ensure_valid(spec)?;
        let d = spec.dims;
        if d.p != 2 || d.q > 1 || d.m != 1 {
            return Err(Error::Precondition(format!("counterexample needs p=2, q<=1, m=1, got {d:?}")));
        }
        if d.q == 1 && spec.sigma_x[(0, 0)] != 1.0 {
            return Err(Error::Precondition("counterexample assumes Var(X) = 1".into()));
        }
        let (t1, t2) = (spec.theta_u[(0, 0)], spec.theta_u[(1, 0)]);
        if t1 == 0.0 && t2 == 0.0 {
            return Err(Error::Precondition("theta_u must have a nonzero entry".into()));
        }
        let swapped = t1 == 0.0;
        let pick = |v: [f64; 2]| if swapped { [v[1], v[0]] } else { v };
        let rho = if d.q == 1 { [spec.rho[(0, 0)], spec.rho[(1, 0)]] } else { [0.0; 2] };
        Ok(CounterexampleG {
            spec: spec.clone(),
            alpha0: spec.alpha0,
            alpha_u: pick([spec.alpha_u[0], spec.alpha_u[1]]),
            alpha_x: if d.q == 1 { spec.alpha_x[0] } else { 0.0 },
            theta_u: pick([t1, t2]),
            rho: pick(rho),
            swapped,
            cubic_shift: 0.0,
        })
    }

    /// 3 + α_{u2}² + α_{u1}²θ_{u2}²/θ_{u1}² − 2α_{u1}α_{u2}θ_{u2}/θ_{u1}
    pub fn cubic_constant(&self) -> f64 {
        let [a1, a2] = self.alpha_u;
        let r = self.theta_u[1] / self.theta_u[0];
        3.0 + a2 * a2 + a1 * a1 * r * r - 2.0 * a1 * a2 * r + self.cubic_shift
    }

    fn internal(&self, u: [f64; 2]) -> [f64; 2] {
        if self.swapped {
            [u[1], u[0]]
        } else {
            u
        }
    }

    fn eta(&self, v: [f64; 2], x: f64) -> f64 {
        self.alpha0 + self.alpha_x * x + self.alpha_u[0] * v[0] + self.alpha_u[1] * v[1]
    }

    /// (sign, ln|g|) in internal coordinates.
    fn log_g(&self, v: [f64; 2], x: f64) -> (f64, f64) {
        let [r1, r2] = self.rho;
        let den = 1.0 - r1 * r1 - r2 * r2;
        let quad = (r2 * v[0] - r1 * v[1]).powi(2) - (v[1] - r2 * x).powi(2) - (v[0] - r1 * x).powi(2);
        let poly = v[1] * (v[1] * v[1] - self.cubic_constant());
        let eta = self.eta(v, x);
        // ln(2 + e^{−η} + e^{η}) = 2 ln(2 cosh(η/2))
        let cosh = 2.0 * ((0.5 * eta.abs()) + (1.0 + (-eta.abs()).exp()).ln());
        let log = poly.abs().ln() - 0.5 * v[1] * v[1] - quad / (2.0 * den) + cosh;
        (poly.signum(), log)
    }

    fn log_prior(&self, v: [f64; 2], x: f64) -> f64 {
        let [r1, r2] = self.rho;
        let den = 1.0 - r1 * r1 - r2 * r2;
        let quad = (r2 * v[0] - r1 * v[1]).powi(2) - (v[1] - r2 * x).powi(2) - (v[0] - r1 * x).powi(2);
        0.5 * quad / den
    }

    fn z_offset(&self, a: u8, x: f64) -> f64 {
        let s = &self.spec;
        let tx = if s.dims.q == 1 { s.theta_x[(0, 0)] } else { 0.0 };
        s.theta0[0] + s.theta_a[0] * f64::from(a) + tx * x
    }

    /// ln of the unnormalized density of U given (Z=z, A=a, X=x).
    fn log_density(&self, v: [f64; 2], z: f64, a: u8, x: f64) -> f64 {
        let sd = self.spec.noise_sd[0];
        let r = (z - self.z_offset(a, x) - self.theta_u[0] * v[0] - self.theta_u[1] * v[1]) / sd;
        let eta = self.eta(v, x);
        let signed = if a == 1 { eta } else { -eta };
        // ln σ(t) = −ln(1 + e^{−t})
        let log_pa = -((-signed).max(0.0) + (1.0 + (-signed.abs()).exp()).ln());
        self.log_prior(v, x) - 0.5 * r * r + log_pa
    }
}

pub fn g_value(ce: &CounterexampleG, u: [f64; 2], x: f64) -> f64 {
    let v = ce.internal(u);
    if v[1] == 0.0 {
        return 0.0;
    }
    let (sign, log) = ce.log_g(v, x);
    sign * log.exp()
}

/// Tensor rule under the Gaussian factor shared by g and the density: the ε₁ kernel times
/// exp(−u₂²/2). Against it the numerator integrand is a cubic times (1 + e^{±η}).
struct Reference {
    mean: Vector2<f64>,
    chol: Matrix2<f64>,
    prec: Matrix2<f64>,
}

impl Reference {
    fn new(ce: &CounterexampleG, z: f64, a: u8, x: f64) -> Self {
        let sd2 = ce.spec.noise_sd[0].powi(2);
        let t = Vector2::new(ce.theta_u[0], ce.theta_u[1]);
        let prec = t * t.transpose() / sd2 + Matrix2::new(0.0, 0.0, 0.0, 1.0);
        let cov = prec.try_inverse().expect("theta_u1 is nonzero");
        let mean = cov * t * ((z - ce.z_offset(a, x)) / sd2);
        let chol = cov.cholesky().expect("positive definite").l();
        Reference { mean, chol, prec }
    }

    fn log_density(&self, v: Vector2<f64>) -> f64 {
        let d = v - self.mean;
        -0.5 * (d.transpose() * self.prec * d)[(0, 0)]
    }
}

fn integrate(ce: &CounterexampleG, z: f64, a: u8, x: f64, order: usize) -> (f64, f64) {
    let gh = GaussHermite::<f64>::new(order);
    let rf = Reference::new(ce, z, a, x);
    let mut num = 0.0;
    let mut norm = 0.0;
    for (&s, &ws) in gh.nodes.iter().zip(&gh.weights) {
        for (&t, &wt) in gh.nodes.iter().zip(&gh.weights) {
            let v = rf.mean + rf.chol * Vector2::new(s, t);
            let vv = [v[0], v[1]];
            let base = ce.log_density(vv, z, a, x) - rf.log_density(v);
            let w = ws * wt;
            norm += w * base.exp();
            if v[1] != 0.0 {
                let (sign, lg) = ce.log_g(vv, x);
                num += w * sign * (lg + base).exp();
            }
        }
    }
    (num, norm)
}

/// E[g(U) | Z=z, A=a, X=x], normalized by the same quadrature.
pub fn conditional_mean_g(ce: &CounterexampleG, z: f64, a: u8, x: f64, order: usize) -> Result<f64> {
    if order < 40 {
        return Err(Error::Precondition(format!("completeness quadrature order {order} is below 40")));
    }
    let (num, norm) = integrate(ce, z, a, x, order);
    let (_, coarse) = integrate(ce, z, a, x, order / 2);
    let drift = (norm - coarse).abs() / norm;
    if !(drift <= 1e-6) {
        return Err(Error::QuadratureOrder {
            order,
            detail: format!("normalizing constant moves by {drift:e} between orders {} and {order}", order / 2),
        });
    }
    Ok(num / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationRow {
    pub z: f64,
    pub a: u8,
    pub x: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessCertificate {
    pub rows: Vec<CertificationRow>,
    pub max_abs_conditional_mean: f64,
    pub max_abs_g: f64,
    pub passed: bool,
}

pub const MEAN_TOLERANCE: f64 = 1e-6;
pub const NONZERO_FLOOR: f64 = 1e-2;

/// z ∈ {−2,…,2}, a ∈ {0,1}, x ∈ {−1,0,1} (x = 0 only without X), plus g on a unit grid.
pub fn certify(spec: &LsemSpec, order: usize) -> Result<CompletenessCertificate> {
    let ce = CounterexampleG::new(spec)?;
    let xs: &[f64] = if spec.dims.q == 1 { &[-1.0, 0.0, 1.0] } else { &[0.0] };
    let mut rows = Vec::new();
    for &z in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
        for a in [0u8, 1] {
            for &x in xs {
                rows.push(CertificationRow { z, a, x, value: conditional_mean_g(&ce, z, a, x, order)? });
            }
        }
    }
    let unit = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut max_g = 0.0f64;
    for &u1 in &unit {
        for &u2 in &unit {
            for &x in xs {
                max_g = max_g.max(g_value(&ce, [u1, u2], x).abs());
            }
        }
    }
    let max_mean = rows.iter().map(|r| r.value.abs()).fold(0.0, f64::max);
    Ok(CompletenessCertificate {
        rows,
        max_abs_conditional_mean: max_mean,
        max_abs_g: max_g,
        passed: max_mean < MEAN_TOLERANCE && max_g > NONZERO_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsem::Dimensions;
    use nalgebra::{DMatrix, DVector};

    fn spec(theta2: f64) -> LsemSpec {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 1, m: 1, n: 1 });
        s.alpha0 = 0.2;
        s.alpha_u = DVector::from_vec(vec![0.3, 0.4]);
        s.alpha_x[0] = -0.3;
        s.theta0[0] = 0.1;
        s.theta_a[0] = 1.0;
        s.theta_u = DMatrix::from_column_slice(2, 1, &[1.0, theta2]);
        s.theta_x[(0, 0)] = 0.5;
        s.rho = DMatrix::from_column_slice(2, 1, &[0.3, 0.2]);
        s
    }

    #[test]
    fn g_vanishes_at_polynomial_roots() {
        let ce = CounterexampleG::new(&spec(0.7)).unwrap();
        assert_eq!(g_value(&ce, [0.4, 0.0], 0.3), 0.0);
        let root = ce.cubic_constant().sqrt();
        assert!(g_value(&ce, [0.4, root], 0.3).abs() < 1e-12);
        assert!(g_value(&ce, [0.4, 0.8], 0.3).abs() > 1e-2);
    }

    #[test]
    fn conditional_mean_vanishes() {
        let ce = CounterexampleG::new(&spec(0.7)).unwrap();
        for (z, a, x) in [(-2.0, 0, -1.0), (0.5, 1, 0.0), (2.0, 1, 1.0)] {
            let v = conditional_mean_g(&ce, z, a, x, 60).unwrap();
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn shifted_cubic_is_detected() {
        let mut ce = CounterexampleG::new(&spec(0.7)).unwrap();
        ce.cubic_shift = 0.1;
        let worst = [(-2.0, 0u8), (0.0, 1), (2.0, 1)]
            .iter()
            .map(|&(z, a)| conditional_mean_g(&ce, z, a, 0.0, 60).unwrap().abs())
            .fold(0.0, f64::max);
        assert!(worst > 1e-3, "{worst}");
    }

    #[test]
    fn zero_second_loading_and_swapped_roles() {
        let ce = CounterexampleG::new(&spec(0.0)).unwrap();
        assert!(conditional_mean_g(&ce, 1.0, 1, 0.5, 60).unwrap().abs() < 1e-10);

        let mut s = spec(0.8);
        s.theta_u[(0, 0)] = 0.0;
        let ce = CounterexampleG::new(&s).unwrap();
        assert!(ce.swapped);
        assert!(conditional_mean_g(&ce, -1.0, 0, 1.0, 60).unwrap().abs() < 1e-10);
        assert_eq!(g_value(&ce, [0.0, 0.5], 0.0), 0.0);
    }

    #[test]
    fn without_observed_confounders() {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 1, n: 1 });
        s.alpha_u = DVector::from_vec(vec![0.5, -0.2]);
        s.theta_u = DMatrix::from_column_slice(2, 1, &[1.2, 0.6]);
        let cert = certify(&s, 60).unwrap();
        assert_eq!(cert.rows.len(), 10);
        assert!(cert.passed, "{cert:?}");
    }

    #[test]
    fn order_doubling_is_stable() {
        let ce = CounterexampleG::new(&spec(0.7)).unwrap();
        let a = conditional_mean_g(&ce, 1.0, 0, -1.0, 40).unwrap();
        let b = conditional_mean_g(&ce, 1.0, 0, -1.0, 80).unwrap();
        assert!((a - b).abs() < 1e-8);
        assert!(conditional_mean_g(&ce, 1.0, 0, -1.0, 20).is_err());
    }
}
