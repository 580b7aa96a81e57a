//! Closed-form asymptotic biases and the proximal-versus-unadjusted comparison.
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, pseudo_inverse, CONDITION_LIMIT};
use crate::lsem::{ensure_valid, LsemSpec};
use crate::moments::{r_factors, s_factors, SFactors, TreatmentMoments};
use crate::scalar::Real;

/// Distance from a vanishing denominator inside which a pole is reported.
pub const POLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setup {
    ZwViolation,
    AyViolation,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Intermediate {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub delta_por: f64,
    pub delta_or: Option<f64>,
    pub delta_unadj: f64,
    pub setup: Setup,
    pub intermediates: BTreeMap<String, Intermediate>,
}

// ---------------------------------------------------------------- scalar formulas

/// Loadings of the ZW setup, where U₂ drives only Z and W.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZwCoefficients<T> {
    pub theta_u1: T,
    pub theta_u2: T,
    pub mu_u1: T,
    pub mu_u2: T,
    pub gamma_u1: T,
    pub gamma_au1: T,
}

impl<T: Real> ZwCoefficients<T> {
    /// θ_{u2}μ_{u2}/θ_{u1}
    pub fn k(&self) -> T {
        self.theta_u2 * self.mu_u2 / self.theta_u1
    }

    /// θ_{u1}μ_{u1}/(θ_{u2}μ_{u2})
    pub fn r(&self) -> T {
        self.theta_u1 * self.mu_u1 / (self.theta_u2 * self.mu_u2)
    }
}

pub fn zw_por<T: Real>(c: &ZwCoefficients<T>, mom: &TreatmentMoments<T>) -> Result<T> {
    let s = s_factors(mom)?;
    let k = c.k();
    if k == T::zero() {
        return Ok(T::zero());
    }
    let (ea, one) = (mom.e_a, T::one());
    let d1 = c.mu_u1 + s.s1 * k;
    let d2 = c.mu_u1 + s.s2 * k;
    let tol = T::lit(POLE_TOLERANCE);
    for d in [d1, d2] {
        if d.abs() < tol {
            return Err(Error::Pole { denominator: d.to_f64().unwrap_or(0.0) });
        }
    }
    let pref = mom.e_au[0] / (ea * (one - ea));
    let treated = (one - ea) * s.s2 / d2;
    let bracket = treated * c.gamma_au1 + (ea * s.s1 / d1 + treated) * c.gamma_u1;
    Ok(pref * k * bracket)
}

/// Difference in arm means minus the ACE, for any number of confounders.
pub fn unadj<T: Real>(gamma_u: &[T], gamma_au: &[T], gamma_x: &[T], mom: &TreatmentMoments<T>) -> T {
    let ea = mom.e_a;
    let dot = |c: &[T], v: &[T]| c.iter().zip(v).fold(T::zero(), |s, (&c, &v)| s + c * v);
    (dot(gamma_u, &mom.e_au) + dot(gamma_x, &mom.e_ax)) / (ea * (T::one() - ea)) + dot(gamma_au, &mom.e_au) / ea
}

/// AY setup: per-arm residual of E[U₂|A] after projecting on U₁, scaled by γ_{u2}.
pub fn ay_por<T: Real>(gamma_u2: T, mom: &TreatmentMoments<T>) -> Result<T> {
    if mom.p() < 2 {
        return Err(Error::Precondition("the AY formula needs two confounders".into()));
    }
    let one = T::one();
    let (ea, a1, a2) = (mom.e_a, mom.e_au[0], mom.e_au[1]);
    let (a11, a12) = (mom.e_auu[0][0], mom.e_auu[0][1]);
    let d1 = (one - ea) * (one - a11) - a1 * a1;
    let d2 = ea * a11 - a1 * a1;
    if !(d1 > T::zero() && d2 > T::zero()) {
        return Err(Error::CorruptedMoments("arm variance denominators must be positive".into()));
    }
    let treated = a1 * (ea * a12 - a1 * a2) / (ea * d2);
    let control = a1 * ((one - ea) * a12 + a1 * a2) / ((one - ea) * d1);
    Ok(gamma_u2 * (a2 / (ea * (one - ea)) - treated + control))
}

/// f(r) = E[A]S₁/(r+S₁) + (1−E[A])S₂/(r+S₂), the ratio δ_POR/δ_unadj when γ_{au1} = 0.
pub fn ratio_f<T: Real>(r: T, ea: T, s: SFactors<T>) -> T {
    ea * s.s1 / (r + s.s1) + (T::one() - ea) * s.s2 / (r + s.s2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    PorDominates,
    UnadjDominates,
    Pole,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds<T> {
    /// f(r*) = 1 away from the origin.
    pub r_star: T,
    /// The two solutions of f(r) = −1, r_lower < r_upper.
    pub r_lower: T,
    pub r_upper: T,
    pub s_min: T,
    pub s_max: T,
}

pub fn thresholds<T: Real>(ea: T, s: SFactors<T>) -> Thresholds<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let b = (one + ea) * s.s1 + (two - ea) * s.s2;
    let disc = (b * b - T::lit(8.0) * s.s1 * s.s2).max(T::zero()).sqrt();
    Thresholds {
        r_star: -(one - ea) * s.s1 - ea * s.s2,
        r_lower: (-b - disc) / two,
        r_upper: (-b + disc) / two,
        s_min: s.s1.min(s.s2),
        s_max: s.s1.max(s.s2),
    }
}

/// Classifies r by interval. f is strictly decreasing between its poles −S₁, −S₂, so
/// |f(r)| < 1 exactly on r > 0, r < r_lower, and (r*, r_upper) between the poles.
/// Returns the verdict and the distance from r to the nearest boundary.
pub fn classify_ratio<T: Real>(r: T, ea: T, s: SFactors<T>) -> (Verdict, T) {
    let t = thresholds(ea, s);
    let tol = T::lit(POLE_TOLERANCE);
    let mut edges = vec![T::zero(), -t.s_min, -t.s_max, t.r_lower];
    let between = t.s_max - t.s_min > tol;
    if between {
        edges.push(t.r_star);
        edges.push(t.r_upper);
    }
    let margin = edges.iter().map(|&e| (r - e).abs()).fold(T::infinity(), T::min);
    if (r + t.s_min).abs() < tol || (r + t.s_max).abs() < tol {
        return (Verdict::Pole, margin);
    }
    let por = if r > T::zero() {
        true
    } else if r > -t.s_min {
        false
    } else if r > -t.s_max {
        between && r > t.r_star && r < t.r_upper
    } else {
        r < t.r_lower
    };
    (if por { Verdict::PorDominates } else { Verdict::UnadjDominates }, margin)
}

// ---------------------------------------------------------------- spec-level entry points

fn coeffs(spec: &LsemSpec) -> ZwCoefficients<f64> {
    ZwCoefficients {
        theta_u1: spec.theta_u[(0, 0)],
        theta_u2: spec.theta_u[(1, 0)],
        mu_u1: spec.mu_u[(0, 0)],
        mu_u2: spec.mu_u[(1, 0)],
        gamma_u1: spec.gamma_u[0],
        gamma_au1: spec.gamma_au[0],
    }
}

fn two_confounder_shape(spec: &LsemSpec) -> Result<()> {
    let d = spec.dims;
    if d.p != 2 || d.q != 0 || d.m != 1 || d.n != 1 {
        return Err(Error::Precondition(format!("expected p=2, q=0, m=n=1, got {d:?}")));
    }
    if spec.gamma_au[1] != 0.0 {
        return Err(Error::Precondition("U2 must not modify the treatment effect".into()));
    }
    Ok(())
}

fn check_moments(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<()> {
    if mom.p() != spec.dims.p || mom.q() != spec.dims.q {
        return Err(Error::Precondition("moments do not match the model dimensions".into()));
    }
    Ok(())
}

pub fn zw_shape(spec: &LsemSpec) -> Result<()> {
    two_confounder_shape(spec)?;
    if spec.alpha_u[1] != 0.0 || spec.gamma_u[1] != 0.0 {
        return Err(Error::Precondition("ZW setup needs alpha_u[2] = gamma_u[2] = 0".into()));
    }
    if spec.theta_u[(0, 0)] == 0.0 || spec.mu_u[(0, 0)] == 0.0 {
        return Err(Error::Precondition("ZW setup needs theta_u[1] and mu_u[1] nonzero".into()));
    }
    Ok(())
}

pub fn ay_shape(spec: &LsemSpec) -> Result<()> {
    two_confounder_shape(spec)?;
    if spec.theta_u[(1, 0)] != 0.0 || spec.mu_u[(1, 0)] != 0.0 {
        return Err(Error::Precondition("AY setup needs theta_u[2] = mu_u[2] = 0".into()));
    }
    Ok(())
}

pub fn bias_por_zw(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    zw_shape(spec)?;
    check_moments(spec, mom)?;
    zw_por(&coeffs(spec), mom)
}

pub fn bias_or_zw(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    zw_shape(spec)?;
    bias_or(spec, mom)
}

pub fn bias_unadj(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    check_moments(spec, mom)?;
    if !(mom.e_a > 0.0 && mom.e_a < 1.0) {
        return Err(Error::CorruptedMoments(format!("E[A] = {} outside (0, 1)", mom.e_a)));
    }
    Ok(unadj(spec.gamma_u.as_slice(), spec.gamma_au.as_slice(), spec.gamma_x.as_slice(), mom))
}

pub fn bias_por_ay(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    ay_shape(spec)?;
    check_moments(spec, mom)?;
    ay_por(spec.gamma_u[1], mom)
}

pub fn bias_or_ay(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    ay_shape(spec)?;
    bias_or(spec, mom)
}

/// Bias of the fully interacted outcome regression standardized over the marginal of (Z, W, X).
///
/// The interacted fit is a separate linear regression in each arm, so each arm contributes
/// E[Y|a] − β_aᵀ(E[L|a] − E[L]), with β_a the within-arm projection of Y on L = (Z, W, X).
pub fn bias_or(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    ensure_valid(spec)?;
    check_moments(spec, mom)?;
    let d = spec.dims;
    let k = d.p + d.q;
    let l = d.m + d.n + d.q;
    let ea = mom.e_a;
    let eag = mom.e_ag();
    let eagg = mom.e_agg();
    let sigma = spec.joint_cov();

    let mut h = DMatrix::zeros(k, l);
    h.view_mut((0, 0), (d.p, d.m)).copy_from(&spec.theta_u);
    h.view_mut((d.p, 0), (d.q, d.m)).copy_from(&spec.theta_x);
    h.view_mut((0, d.m), (d.p, d.n)).copy_from(&spec.mu_u);
    h.view_mut((d.p, d.m), (d.q, d.n)).copy_from(&spec.mu_x);
    h.view_mut((d.p, d.m + d.n), (d.q, d.q)).fill_with_identity();
    let mut noise = DMatrix::zeros(l, l);
    for j in 0..d.m {
        noise[(j, j)] = spec.noise_sd[0].powi(2);
    }
    for j in 0..d.n {
        noise[(d.m + j, d.m + j)] = spec.noise_sd[1].powi(2);
    }

    let mut bias = 0.0;
    for (arm, sign) in [(1.0, 1.0), (0.0, -1.0)] {
        let (mean, second) = if arm == 1.0 {
            (&eag / ea, &eagg / ea)
        } else {
            (-&eag / (1.0 - ea), (&sigma - &eagg) / (1.0 - ea))
        };
        let cov = &second - &mean * mean.transpose();
        let mut c = DVector::zeros(k);
        c.rows_mut(0, d.p).copy_from(&(&spec.gamma_u + &spec.gamma_au * arm));
        c.rows_mut(d.p, d.q).copy_from(&spec.gamma_x);

        let cov_l = h.transpose() * &cov * &h + &noise;
        let cov_ly = h.transpose() * &cov * &c;
        let condition = condition_number(&cov_l);
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::Singular { what: "within-arm regression design", condition });
        }
        let beta = cov_l.lu().solve(&cov_ly).ok_or(Error::Singular { what: "within-arm regression design", condition })?;
        let mut shift = h.transpose() * &mean;
        for j in 0..d.m {
            shift[j] += spec.theta_a[j] * (arm - ea);
        }
        bias += sign * (c.dot(&mean) - beta.dot(&shift));
    }
    Ok(bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralBias {
    pub delta: f64,
    /// p×m
    pub b: DMatrix<f64>,
    pub condition: f64,
    pub pseudo_inverse: bool,
}

/// Bias of the no-interaction proximal estimator in the multi-dimensional model.
pub fn bias_general_detail(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<GeneralBias> {
    ensure_valid(spec)?;
    check_moments(spec, mom)?;
    let d = spec.dims;
    if spec.gamma_au.iter().any(|&g| g != 0.0) {
        return Err(Error::Precondition("the general formula assumes gamma_au = 0".into()));
    }
    if d.m != d.n {
        return Err(Error::Precondition(format!("the general formula needs m = n, got m={} n={}", d.m, d.n)));
    }
    let ea = mom.e_a;
    let eau = DVector::from_column_slice(&mom.e_au);
    let eax = DVector::from_column_slice(&mom.e_ax);
    let (num, den, resid) = if d.q == 0 {
        (eau.clone(), ea * (1.0 - ea), DMatrix::identity(d.p, d.p))
    } else {
        let chol = spec.sigma_x.clone().cholesky().ok_or(Error::Singular { what: "sigma_x", condition: f64::INFINITY })?;
        let num = &eau - &spec.rho * chol.solve(&eax);
        let den = ea * (1.0 - ea) - eax.dot(&chol.solve(&eax));
        let resid = DMatrix::identity(d.p, d.p) - &spec.rho * chol.solve(&spec.rho.transpose());
        (num, den, resid)
    };
    if !(den > 0.0) {
        return Err(Error::CorruptedMoments(format!("residual treatment variance {den:e} must be positive")));
    }
    let b = (resid - &num * num.transpose() / den) * &spec.theta_u;
    let k = b.transpose() * &spec.mu_u;
    let condition = condition_number(&k);
    let use_pinv = d.p < d.m;
    let kinv = if use_pinv {
        pseudo_inverse(&k)
    } else if condition <= CONDITION_LIMIT {
        k.clone().try_inverse().ok_or(Error::Singular { what: "B^T mu_u", condition })?
    } else {
        return Err(Error::Singular { what: "B^T mu_u", condition });
    };
    let proj = DMatrix::identity(d.p, d.p) - &spec.mu_u * kinv * b.transpose();
    let delta = (num.transpose() * proj * &spec.gamma_u)[(0, 0)] / den;
    Ok(GeneralBias { delta, b, condition, pseudo_inverse: use_pinv })
}

pub fn bias_general(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<f64> {
    bias_general_detail(spec, mom).map(|g| g.delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub verdict: Verdict,
    pub r: f64,
    pub r_star: f64,
    pub r_lower: f64,
    pub r_upper: f64,
    /// Distance from r to the nearest pole or threshold.
    pub margin: f64,
}

pub fn compare_biases_zw(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<Comparison> {
    ensure_valid(spec)?;
    zw_shape(spec)?;
    check_moments(spec, mom)?;
    if spec.gamma_au[0] != 0.0 {
        return Err(Error::Precondition("the comparison assumes gamma_au = 0".into()));
    }
    let c = coeffs(spec);
    if c.theta_u2 * c.mu_u2 == 0.0 {
        return Err(Error::Degenerate("theta_u2 * mu_u2 = 0: the proximal estimator is unbiased".into()));
    }
    let s = s_factors(mom)?;
    let r = c.r();
    let t = thresholds(mom.e_a, s);
    let (verdict, margin) = classify_ratio(r, mom.e_a, s);
    Ok(Comparison { verdict, r, r_star: t.r_star, r_lower: t.r_lower, r_upper: t.r_upper, margin })
}

/// The formula family that applies to a spec, if any.
pub fn detect_setup(spec: &LsemSpec) -> Option<Setup> {
    let d = spec.dims;
    if d.p == 2 && d.q == 0 && d.m == 1 && d.n == 1 && spec.gamma_au[1] == 0.0 {
        if zw_shape(spec).is_ok() {
            return Some(Setup::ZwViolation);
        }
        if ay_shape(spec).is_ok() {
            return Some(Setup::AyViolation);
        }
    }
    if d.m == d.n && spec.gamma_au.iter().all(|&g| g == 0.0) {
        return Some(Setup::General);
    }
    None
}

pub fn bias_report(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<BiasReport> {
    ensure_valid(spec)?;
    let setup = detect_setup(spec).ok_or_else(|| {
        Error::Precondition("spec matches none of the ZW, AY or general formula families".into())
    })?;
    let mut im = BTreeMap::new();
    let delta_unadj = bias_unadj(spec, mom)?;
    let delta_or = Some(bias_or(spec, mom)?);
    let delta_por = match setup {
        Setup::ZwViolation => {
            let s = s_factors(mom)?;
            im.insert("s1".into(), Intermediate::Scalar(s.s1));
            im.insert("s2".into(), Intermediate::Scalar(s.s2));
            let t = thresholds(mom.e_a, s);
            im.insert("r_star".into(), Intermediate::Scalar(t.r_star));
            let c = coeffs(spec);
            if c.theta_u2 * c.mu_u2 != 0.0 {
                im.insert("r".into(), Intermediate::Scalar(c.r()));
            }
            bias_por_zw(spec, mom)?
        }
        Setup::AyViolation => {
            let s = s_factors(mom)?;
            let r = r_factors(mom)?;
            im.insert("s1".into(), Intermediate::Scalar(s.s1));
            im.insert("s2".into(), Intermediate::Scalar(s.s2));
            im.insert("r1".into(), Intermediate::Scalar(r.r1));
            im.insert("r2".into(), Intermediate::Scalar(r.r2));
            bias_por_ay(spec, mom)?
        }
        Setup::General => {
            let g = bias_general_detail(spec, mom)?;
            let rows = (0..g.b.nrows()).map(|i| g.b.row(i).iter().copied().collect()).collect();
            im.insert("b".into(), Intermediate::Matrix(rows));
            im.insert("condition".into(), Intermediate::Scalar(g.condition));
            g.delta
        }
    };
    Ok(BiasReport { delta_por, delta_or, delta_unadj, setup, intermediates: im })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsem::Dimensions;
    use crate::moments::treatment_moments_quadrature;

    fn zw(alpha: f64, th2: f64, mu2: f64) -> LsemSpec {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 1, n: 1 });
        s.alpha_u[0] = alpha;
        s.theta_a[0] = 1.0;
        s.theta_u = DMatrix::from_column_slice(2, 1, &[1.0, th2]);
        s.mu_u = DMatrix::from_column_slice(2, 1, &[0.5, mu2]);
        s.gamma_a = 0.5;
        s.gamma_u[0] = 1.0;
        s.gamma_au[0] = 1.5;
        s.noise_sd = [1.0, 1.0, 2.0];
        s
    }

    fn mom(s: &LsemSpec) -> TreatmentMoments {
        treatment_moments_quadrature(s, 60).unwrap()
    }

    #[test]
    fn zero_loading_or_zero_confounding_means_zero_bias() {
        let s = zw(0.3, 0.0, 0.5);
        assert_eq!(bias_por_zw(&s, &mom(&s)).unwrap(), 0.0);
        let s = zw(0.0, 0.5, 0.5);
        let m = mom(&s);
        assert_eq!(bias_por_zw(&s, &m).unwrap(), 0.0);
        assert_eq!(bias_unadj(&s, &m).unwrap(), 0.0);
        // Z responds to A, so standardizing over its marginal is biased unless θ_a = 0.
        assert!(bias_or_zw(&s, &m).unwrap().abs() > 0.1);
        let mut s = s;
        s.theta_a[0] = 0.0;
        assert!(bias_or_zw(&s, &m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn pole_is_reported() {
        let mut s = zw(0.3, 1.0, 1.0);
        s.gamma_au[0] = 0.0;
        s.mu_u[(0, 0)] = -0.5;
        let m = mom(&s);
        let sf = s_factors(&m).unwrap();
        // μ_{u1} + S·θ_{u2}² = 0
        let th = (0.5 / sf.s1.min(sf.s2)).sqrt();
        s.theta_u[(1, 0)] = th;
        s.mu_u[(1, 0)] = th;
        assert!(matches!(bias_por_zw(&s, &m), Err(Error::Pole { .. })));
        assert_eq!(compare_biases_zw(&s, &m).unwrap().verdict, Verdict::Pole);
    }

    #[test]
    fn same_sign_products_favour_proximal() {
        let mut s = zw(0.3, 0.5, 0.5);
        s.gamma_au[0] = 0.0;
        s.mu_u[(0, 0)] = 0.25;
        s.theta_u[(0, 0)] = 1.0;
        let c = compare_biases_zw(&s, &mom(&s)).unwrap();
        assert_eq!(c.verdict, Verdict::PorDominates);
    }

    #[test]
    fn ay_bias_ignores_outcome_side_of_u1() {
        let mut s = zw(0.5, 0.0, 0.0);
        s.alpha_u[1] = 0.7;
        s.gamma_u[1] = 1.0;
        let m = mom(&s);
        let base = bias_por_ay(&s, &m).unwrap();
        s.gamma_u[0] = -4.0;
        s.gamma_au[0] = 2.0;
        s.theta_a[0] = 3.0;
        assert_eq!(bias_por_ay(&s, &m).unwrap(), base);
        s.gamma_u[1] = 0.0;
        assert_eq!(bias_por_ay(&s, &m).unwrap(), 0.0);
    }

    #[test]
    fn classification_matches_ratio_magnitude() {
        let s = SFactors { s1: 1.3f64, s2: 1.1 };
        let ea = 0.4;
        let mut r: f64 = -6.0;
        while r < 3.0 {
            let (v, margin) = classify_ratio(r, ea, s);
            if margin > 1e-6 && v != Verdict::Pole {
                let por = ratio_f(r, ea, s).abs() < 1.0;
                assert_eq!(v == Verdict::PorDominates, por, "r = {r}");
            }
            r += 0.001;
        }
    }

    #[test]
    fn classification_in_single_precision() {
        let s = SFactors { s1: 1.2f32, s2: 1.2 };
        assert_eq!(classify_ratio(-3.0f32, 0.5, s).0, Verdict::PorDominates);
        assert_eq!(classify_ratio(-1.5f32, 0.5, s).0, Verdict::UnadjDominates);
        assert_eq!(classify_ratio(-0.5f32, 0.5, s).0, Verdict::UnadjDominates);
        assert_eq!(classify_ratio(0.5f32, 0.5, s).0, Verdict::PorDominates);
    }

    #[test]
    fn setups_detected() {
        assert_eq!(detect_setup(&zw(0.3, 0.5, 0.5)), Some(Setup::ZwViolation));
        let mut ay = zw(0.3, 0.0, 0.0);
        ay.alpha_u[1] = 0.4;
        ay.gamma_u[1] = 1.0;
        assert_eq!(detect_setup(&ay), Some(Setup::AyViolation));
        let mut g = LsemSpec::zeros(Dimensions { p: 3, q: 1, m: 2, n: 2 });
        g.theta_u[(0, 0)] = 1.0;
        assert_eq!(detect_setup(&g), Some(Setup::General));
        g.gamma_au[0] = 1.0;
        assert_eq!(detect_setup(&g), None);
    }

    #[test]
    fn general_with_matching_dimensions_is_unbiased() {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 1, m: 2, n: 2 });
        s.alpha_u = DVector::from_vec(vec![0.5, -0.3]);
        s.alpha_x[0] = 0.2;
        s.theta_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.4, 0.9]);
        s.mu_u = DMatrix::from_row_slice(2, 2, &[0.7, -0.3, 0.1, 1.2]);
        s.gamma_u = DVector::from_vec(vec![1.0, 0.8]);
        s.rho = DMatrix::from_column_slice(2, 1, &[0.3, -0.2]);
        let g = bias_general_detail(&s, &mom(&s)).unwrap();
        assert!(g.delta.abs() < 1e-12);
        assert!(!g.pseudo_inverse);
    }

    #[test]
    fn fewer_confounders_than_proxies_uses_pseudo_inverse() {
        let mut s = LsemSpec::zeros(Dimensions { p: 1, q: 0, m: 2, n: 2 });
        s.alpha_u[0] = 0.5;
        s.theta_u = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        s.mu_u = DMatrix::from_row_slice(1, 2, &[0.7, 0.2]);
        s.gamma_u[0] = 1.0;
        let g = bias_general_detail(&s, &mom(&s)).unwrap();
        assert!(g.pseudo_inverse && g.delta.is_finite());
    }
}
