//! Finite-sample estimators and their exact population analogues.
//!
//! Both sides are linear instrumental-variable solves over a list of [`Feature`]s. The population
//! side builds every cross moment exactly from the model and the treatment moments, which makes
//! it an oracle for the closed-form biases.
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::OutcomeBridgeParams;
use crate::error::{Error, Result};
use crate::linalg::solve_checked;
use crate::lsem::{ensure_valid, Dataset, Dimensions, LsemSpec};
use crate::moments::TreatmentMoments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    One,
    A,
    Z(usize),
    W(usize),
    X(usize),
    AZ(usize),
    AW(usize),
    AX(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeForm {
    /// {1, A, W, X, AX, AW}
    Full,
    /// {1, A, W, X}
    NoInteraction,
}

impl BridgeForm {
    pub fn features(self, d: Dimensions) -> Vec<Feature> {
        let mut f = vec![Feature::One, Feature::A];
        f.extend((0..d.n).map(Feature::W));
        f.extend((0..d.q).map(Feature::X));
        if self == BridgeForm::Full {
            f.extend((0..d.q).map(Feature::AX));
            f.extend((0..d.n).map(Feature::AW));
        }
        f
    }

    /// Mirrors the bridge: Z takes the place of W. Only the first n components of Z are used.
    pub fn instruments(self, d: Dimensions) -> Vec<Feature> {
        let k = d.m.min(d.n);
        let mut f = vec![Feature::One, Feature::A];
        f.extend((0..k).map(Feature::Z));
        f.extend((0..d.q).map(Feature::X));
        if self == BridgeForm::Full {
            f.extend((0..d.q).map(Feature::AX));
            f.extend((0..k).map(Feature::AZ));
        }
        f
    }
}

/// Regressors of the adjusted outcome regression: (1, Z, W, A, AZ, AW, X, AX).
pub fn or_features(d: Dimensions) -> Vec<Feature> {
    let mut f = vec![Feature::One];
    f.extend((0..d.m).map(Feature::Z));
    f.extend((0..d.n).map(Feature::W));
    f.push(Feature::A);
    f.extend((0..d.m).map(Feature::AZ));
    f.extend((0..d.n).map(Feature::AW));
    f.extend((0..d.q).map(Feature::X));
    f.extend((0..d.q).map(Feature::AX));
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub psi_hat: f64,
    pub features: Vec<Feature>,
    pub coefficients: Vec<f64>,
    pub n: usize,
    pub se_psi: f64,
}

impl FitResult {
    pub fn coefficient(&self, f: Feature) -> Option<f64> {
        self.features.iter().position(|&g| g == f).map(|i| self.coefficients[i])
    }

    /// The fitted coefficients as an outcome bridge, when the features form one.
    pub fn outcome_bridge(&self, d: Dimensions) -> Option<OutcomeBridgeParams> {
        bridge_from(&self.features, &self.coefficients, d)
    }
}

fn bridge_from(features: &[Feature], coef: &[f64], d: Dimensions) -> Option<OutcomeBridgeParams> {
    if features.iter().any(|f| matches!(f, Feature::Z(_) | Feature::AZ(_))) {
        return None;
    }
    let mut b = OutcomeBridgeParams {
        b0: 0.0,
        ba: 0.0,
        bx: vec![0.0; d.q],
        bw: vec![0.0; d.n],
        bax: vec![0.0; d.q],
        baw: vec![0.0; d.n],
    };
    for (&f, &c) in features.iter().zip(coef) {
        match f {
            Feature::One => b.b0 = c,
            Feature::A => b.ba = c,
            Feature::W(j) => b.bw[j] = c,
            Feature::X(j) => b.bx[j] = c,
            Feature::AW(j) => b.baw[j] = c,
            Feature::AX(j) => b.bax[j] = c,
            Feature::Z(_) | Feature::AZ(_) => unreachable!(),
        }
    }
    Some(b)
}

fn check_features(features: &[Feature], d: Dimensions) -> Result<()> {
    let ok = features.iter().all(|f| match *f {
        Feature::One | Feature::A => true,
        Feature::Z(j) | Feature::AZ(j) => j < d.m,
        Feature::W(j) | Feature::AW(j) => j < d.n,
        Feature::X(j) | Feature::AX(j) => j < d.q,
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition("feature index outside the model dimensions".into()))
    }
}

// ---------------------------------------------------------------- population side

/// c + gᵀG + eᵀε with G = (U, X) and ε the stacked unit-variance noise (ε₁, ε₂, ε₃).
#[derive(Clone, Debug)]
struct Affine {
    c: f64,
    g: DVector<f64>,
    e: DVector<f64>,
}

impl Affine {
    fn zero(k: usize, r: usize) -> Self {
        Affine { c: 0.0, g: DVector::zeros(k), e: DVector::zeros(r) }
    }

    fn add(&self, o: &Affine) -> Affine {
        Affine { c: self.c + o.c, g: &self.g + &o.g, e: &self.e + &o.e }
    }
}

/// P0 + A·P1
#[derive(Clone, Debug)]
struct AVar {
    p0: Affine,
    p1: Affine,
}

struct Population<'a> {
    spec: &'a LsemSpec,
    sigma: DMatrix<f64>,
    ea: f64,
    eag: DVector<f64>,
    eagg: DMatrix<f64>,
}

impl<'a> Population<'a> {
    fn new(spec: &'a LsemSpec, mom: &TreatmentMoments) -> Result<Self> {
        ensure_valid(spec)?;
        if mom.p() != spec.dims.p || mom.q() != spec.dims.q {
            return Err(Error::Precondition("moments do not match the model dimensions".into()));
        }
        Ok(Population { spec, sigma: spec.joint_cov(), ea: mom.e_a, eag: mom.e_ag(), eagg: mom.e_agg() })
    }

    fn sizes(&self) -> (usize, usize) {
        let d = self.spec.dims;
        (d.p + d.q, d.m + d.n + 1)
    }

    fn base(&self) -> Affine {
        let (k, r) = self.sizes();
        Affine::zero(k, r)
    }

    fn z(&self, j: usize) -> AVar {
        let s = self.spec;
        let p = s.dims.p;
        let mut p0 = self.base();
        p0.c = s.theta0[j];
        p0.g.rows_mut(0, p).copy_from(&s.theta_u.column(j));
        p0.g.rows_mut(p, s.dims.q).copy_from(&s.theta_x.column(j));
        p0.e[j] = s.noise_sd[0];
        let mut p1 = self.base();
        p1.c = s.theta_a[j];
        AVar { p0, p1 }
    }

    fn w(&self, j: usize) -> AVar {
        let s = self.spec;
        let p = s.dims.p;
        let mut p0 = self.base();
        p0.c = s.mu0[j];
        p0.g.rows_mut(0, p).copy_from(&s.mu_u.column(j));
        p0.g.rows_mut(p, s.dims.q).copy_from(&s.mu_x.column(j));
        p0.e[s.dims.m + j] = s.noise_sd[1];
        AVar { p0, p1: self.base() }
    }

    fn y(&self) -> AVar {
        let s = self.spec;
        let p = s.dims.p;
        let mut p0 = self.base();
        p0.c = s.gamma0;
        p0.g.rows_mut(0, p).copy_from(&s.gamma_u);
        p0.g.rows_mut(p, s.dims.q).copy_from(&s.gamma_x);
        p0.e[s.dims.m + s.dims.n] = s.noise_sd[2];
        let mut p1 = self.base();
        p1.c = s.gamma_a;
        p1.g.rows_mut(0, p).copy_from(&s.gamma_au);
        AVar { p0, p1 }
    }

    fn times_a(v: AVar) -> AVar {
        let zero = Affine::zero(v.p0.g.len(), v.p0.e.len());
        AVar { p1: v.p0.add(&v.p1), p0: zero }
    }

    fn feature(&self, f: Feature) -> AVar {
        let p = self.spec.dims.p;
        match f {
            Feature::One => {
                let mut p0 = self.base();
                p0.c = 1.0;
                AVar { p0, p1: self.base() }
            }
            Feature::A => {
                let mut p1 = self.base();
                p1.c = 1.0;
                AVar { p0: self.base(), p1 }
            }
            Feature::Z(j) => self.z(j),
            Feature::W(j) => self.w(j),
            Feature::X(j) => {
                let mut p0 = self.base();
                p0.g[p + j] = 1.0;
                AVar { p0, p1: self.base() }
            }
            Feature::AZ(j) => Self::times_a(self.z(j)),
            Feature::AW(j) => Self::times_a(self.w(j)),
            Feature::AX(j) => Self::times_a(self.feature(Feature::X(j))),
        }
    }

    /// E[P Q]
    fn e_pq(&self, a: &Affine, b: &Affine) -> f64 {
        a.c * b.c + (a.g.transpose() * &self.sigma * &b.g)[(0, 0)] + a.e.dot(&b.e)
    }

    /// E[A P Q]
    fn e_apq(&self, a: &Affine, b: &Affine) -> f64 {
        self.ea * a.c * b.c
            + a.c * b.g.dot(&self.eag)
            + b.c * a.g.dot(&self.eag)
            + (a.g.transpose() * &self.eagg * &b.g)[(0, 0)]
            + self.ea * a.e.dot(&b.e)
    }

    /// E[V W] with A² = A.
    fn cross(&self, u: &AVar, v: &AVar) -> f64 {
        self.e_pq(&u.p0, &v.p0) + self.e_apq(&u.p0, &v.p1) + self.e_apq(&u.p1, &v.p0) + self.e_apq(&u.p1, &v.p1)
    }

    fn mean(&self, v: &AVar) -> f64 {
        v.p0.c + self.ea * v.p1.c + v.p1.g.dot(&self.eag)
    }

    /// E[F(a=1) − F(a=0)] with A-interactions standardized over the marginal of the other factor.
    fn contrast(&self, f: Feature) -> f64 {
        match f {
            Feature::A => 1.0,
            Feature::AZ(j) => self.mean(&self.z(j)),
            Feature::AW(j) => self.mean(&self.w(j)),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationFit {
    pub features: Vec<Feature>,
    pub coefficients: Vec<f64>,
    pub psi: f64,
    pub bias: f64,
    pub condition: f64,
}

impl PopulationFit {
    pub fn coefficient(&self, f: Feature) -> Option<f64> {
        self.features.iter().position(|&g| g == f).map(|i| self.coefficients[i])
    }

    pub fn outcome_bridge(&self, d: Dimensions) -> Option<OutcomeBridgeParams> {
        bridge_from(&self.features, &self.coefficients, d)
    }
}

/// Population solution of E[(Y − bᵀF) Q] = 0 and its ACE contrast.
pub fn population_linear(
    spec: &LsemSpec,
    mom: &TreatmentMoments,
    features: &[Feature],
    instruments: &[Feature],
) -> Result<PopulationFit> {
    check_features(features, spec.dims)?;
    check_features(instruments, spec.dims)?;
    if features.len() != instruments.len() {
        return Err(Error::Precondition(format!(
            "{} instruments for {} features: the system is not exactly identified",
            instruments.len(),
            features.len()
        )));
    }
    let pop = Population::new(spec, mom)?;
    let fv: Vec<AVar> = features.iter().map(|&f| pop.feature(f)).collect();
    let qv: Vec<AVar> = instruments.iter().map(|&f| pop.feature(f)).collect();
    let y = pop.y();
    let k = features.len();
    let m = DMatrix::from_fn(k, k, |i, j| pop.cross(&qv[i], &fv[j]));
    let r = DVector::from_fn(k, |i, _| pop.cross(&qv[i], &y));
    let (b, condition) = solve_checked(&m, &r, "population moment system")?;
    let psi: f64 = features.iter().zip(b.iter()).map(|(&f, c)| c * pop.contrast(f)).sum();
    Ok(PopulationFit {
        features: features.to_vec(),
        coefficients: b.as_slice().to_vec(),
        psi,
        bias: psi - spec.gamma_a,
        condition,
    })
}

pub fn population_gmm(spec: &LsemSpec, mom: &TreatmentMoments, form: BridgeForm, instruments: &[Feature]) -> Result<PopulationFit> {
    population_linear(spec, mom, &form.features(spec.dims), instruments)
}

/// Population OLS on (1, Z, W, A, AZ, AW, X, AX) with the marginal-mean contrast.
pub fn population_or(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<PopulationFit> {
    let f = or_features(spec.dims);
    population_linear(spec, mom, &f, &f)
}

/// E[Y | A=1] − E[Y | A=0] and its bias.
pub fn population_unadj(spec: &LsemSpec, mom: &TreatmentMoments) -> Result<PopulationFit> {
    let pop = Population::new(spec, mom)?;
    let y = pop.y();
    let a = pop.feature(Feature::A);
    let one = pop.feature(Feature::One);
    let eay = pop.cross(&a, &y);
    let ey = pop.cross(&one, &y);
    let psi = eay / pop.ea - (ey - eay) / (1.0 - pop.ea);
    Ok(PopulationFit {
        features: vec![Feature::One, Feature::A],
        coefficients: vec![(ey - eay) / (1.0 - pop.ea), psi],
        psi,
        bias: psi - spec.gamma_a,
        condition: 1.0,
    })
}

// ---------------------------------------------------------------- sample side

fn value(data: &Dataset, f: Feature, i: usize) -> f64 {
    let a = data.a[i];
    match f {
        Feature::One => 1.0,
        Feature::A => a,
        Feature::Z(j) => data.z[(i, j)],
        Feature::W(j) => data.w[(i, j)],
        Feature::X(j) => data.x[(i, j)],
        Feature::AZ(j) => a * data.z[(i, j)],
        Feature::AW(j) => a * data.w[(i, j)],
        Feature::AX(j) => a * data.x[(i, j)],
    }
}

/// Row-level derivative of F(a=1) − F(a=0).
fn row_contrast(data: &Dataset, f: Feature, i: usize) -> f64 {
    match f {
        Feature::A => 1.0,
        Feature::AZ(j) => data.z[(i, j)],
        Feature::AW(j) => data.w[(i, j)],
        Feature::AX(j) => data.x[(i, j)],
        _ => 0.0,
    }
}

fn data_dims(data: &Dataset) -> Dimensions {
    Dimensions { p: 0, q: data.x.ncols(), m: data.z.ncols(), n: data.w.ncols() }
}

/// Exactly identified sample solve of E_n[(Y − bᵀF) Q] = 0 with a delta-method SE for ψ̂.
pub fn fit_linear(data: &Dataset, features: &[Feature], instruments: &[Feature]) -> Result<FitResult> {
    let d = data_dims(data);
    check_features(features, d)?;
    check_features(instruments, d)?;
    let k = features.len();
    if instruments.len() != k {
        return Err(Error::Precondition("instrument and feature counts differ".into()));
    }
    let n = data.len();
    if n <= k {
        return Err(Error::Precondition(format!("{n} rows for {k} parameters")));
    }
    let nf = n as f64;
    let mut m = DMatrix::<f64>::zeros(k, k);
    let mut r = DVector::<f64>::zeros(k);
    let mut cbar = DVector::<f64>::zeros(k);
    let mut fv = vec![0.0; k];
    let mut qv = vec![0.0; k];
    for i in 0..n {
        for t in 0..k {
            fv[t] = value(data, features[t], i);
            qv[t] = value(data, instruments[t], i);
            cbar[t] += row_contrast(data, features[t], i);
        }
        let y = data.y[i];
        for s in 0..k {
            r[s] += qv[s] * y;
            for t in 0..k {
                m[(s, t)] += qv[s] * fv[t];
            }
        }
    }
    m /= nf;
    r /= nf;
    cbar /= nf;
    let b = match solve_checked(&m, &r, "instrument-feature cross moments") {
        Ok((b, _)) => b,
        Err(Error::Singular { condition, .. }) => return Err(Error::Identification { condition }),
        Err(e) => return Err(e),
    };
    let psi = cbar.dot(&b);

    // Influence: (cᵢᵀb − ψ) + c̄ᵀ M⁻¹ qᵢ eᵢ
    let lever = m.transpose().lu().solve(&cbar).ok_or(Error::Identification { condition: f64::INFINITY })?;
    let mut ss = 0.0;
    for i in 0..n {
        let mut fit = 0.0;
        let mut ci = 0.0;
        let mut lq = 0.0;
        for t in 0..k {
            fit += b[t] * value(data, features[t], i);
            ci += b[t] * row_contrast(data, features[t], i);
            lq += lever[t] * value(data, instruments[t], i);
        }
        let inf = (ci - psi) + lq * (data.y[i] - fit);
        ss += inf * inf;
    }
    Ok(FitResult {
        psi_hat: psi,
        features: features.to_vec(),
        coefficients: b.as_slice().to_vec(),
        n,
        se_psi: (ss / (nf * (nf - 1.0))).sqrt(),
    })
}

pub fn fit_proximal_gmm(data: &Dataset, form: BridgeForm) -> Result<FitResult> {
    let d = data_dims(data);
    if d.m < d.n {
        return Err(Error::Precondition(format!("{} instruments in Z cannot identify {} in W", d.m, d.n)));
    }
    fit_linear(data, &form.features(d), &form.instruments(d))
}

pub fn fit_or(data: &Dataset) -> Result<FitResult> {
    let f = or_features(data_dims(data));
    fit_linear(data, &f, &f)
}

pub fn fit_unadj(data: &Dataset) -> Result<FitResult> {
    let mut s = [0.0f64; 2];
    let mut ss = [0.0f64; 2];
    let mut c = [0usize; 2];
    for i in 0..data.len() {
        let arm = data.a[i] as usize;
        s[arm] += data.y[i];
        ss[arm] += data.y[i] * data.y[i];
        c[arm] += 1;
    }
    for arm in 0..2 {
        if c[arm] == 0 {
            return Err(Error::EmptyArm { arm: arm as u8 });
        }
    }
    let mean = [s[0] / c[0] as f64, s[1] / c[1] as f64];
    let var = |arm: usize| {
        let n = c[arm] as f64;
        if c[arm] < 2 {
            0.0
        } else {
            (ss[arm] - n * mean[arm] * mean[arm]) / (n - 1.0)
        }
    };
    let se = (var(0) / c[0] as f64 + var(1) / c[1] as f64).sqrt();
    Ok(FitResult {
        psi_hat: mean[1] - mean[0],
        features: vec![Feature::One, Feature::A],
        coefficients: vec![mean[0], mean[1] - mean[0]],
        n: data.len(),
        se_psi: se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::solve_outcome_bridge_base;
    use crate::lsem::sample;
    use crate::moments::treatment_moments_quadrature;

    fn base_case() -> LsemSpec {
        let mut s = LsemSpec::zeros(Dimensions { p: 1, q: 1, m: 1, n: 1 });
        s.alpha0 = -0.3;
        s.alpha_u[0] = 0.7;
        s.alpha_x[0] = 0.4;
        s.theta0[0] = 0.2;
        s.theta_a[0] = 1.0;
        s.theta_u[(0, 0)] = 1.1;
        s.theta_x[(0, 0)] = -0.5;
        s.mu0[0] = 0.4;
        s.mu_u[(0, 0)] = 0.9;
        s.mu_x[(0, 0)] = 0.3;
        s.gamma0 = -0.1;
        s.gamma_a = 0.5;
        s.gamma_u[0] = 1.0;
        s.gamma_x[0] = 0.6;
        s.gamma_au[0] = 1.5;
        s.rho[(0, 0)] = 0.35;
        s
    }

    #[test]
    fn population_gmm_recovers_base_bridge() {
        let s = base_case();
        let mom = treatment_moments_quadrature(&s, 60).unwrap();
        let fit = population_gmm(&s, &mom, BridgeForm::Full, &BridgeForm::Full.instruments(s.dims)).unwrap();
        let want = solve_outcome_bridge_base(&s).unwrap();
        let got = fit.outcome_bridge(s.dims).unwrap();
        for (g, w) in [
            (got.b0, want.b0),
            (got.ba, want.ba),
            (got.bx[0], want.bx[0]),
            (got.bw[0], want.bw[0]),
            (got.bax[0], want.bax[0]),
            (got.baw[0], want.baw[0]),
        ] {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
        assert!(fit.bias.abs() < 1e-10);
    }

    #[test]
    fn no_confounding_has_no_bias_anywhere() {
        let mut s = base_case();
        s.gamma_u[0] = 0.0;
        s.gamma_au[0] = 0.0;
        s.gamma_x[0] = 0.0;
        let mom = treatment_moments_quadrature(&s, 60).unwrap();
        assert!(population_unadj(&s, &mom).unwrap().bias.abs() < 1e-12);
        assert!(population_or(&s, &mom).unwrap().bias.abs() < 1e-10);
    }

    #[test]
    fn mismatched_counts_rejected() {
        let s = base_case();
        let mom = treatment_moments_quadrature(&s, 60).unwrap();
        let inst = BridgeForm::NoInteraction.instruments(s.dims);
        assert!(matches!(population_gmm(&s, &mom, BridgeForm::Full, &inst), Err(Error::Precondition(_))));
    }

    #[test]
    fn duplicated_w_is_not_identified() {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 2, n: 2 });
        s.theta_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
        s.mu_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        let data = sample(&s, 2000, 1).unwrap();
        let w = data.w.column(0).into_owned();
        let mut dup = data.clone();
        dup.w.set_column(1, &w);
        assert!(matches!(fit_proximal_gmm(&dup, BridgeForm::Full), Err(Error::Identification { .. })));
        assert!(fit_proximal_gmm(&data, BridgeForm::Full).is_ok());
    }

    #[test]
    fn constant_z_breaks_outcome_regression() {
        let s = base_case();
        let mut data = sample(&s, 500, 4).unwrap();
        data.z.fill(1.0);
        assert!(matches!(fit_or(&data), Err(Error::Identification { .. })));
    }

    #[test]
    fn empty_arm_rejected() {
        let s = base_case();
        let mut data = sample(&s, 100, 4).unwrap();
        data.a.fill(1.0);
        assert!(matches!(fit_unadj(&data), Err(Error::EmptyArm { arm: 0 })));
    }

    #[test]
    fn latent_block_is_never_read() {
        let s = base_case();
        let data = sample(&s, 3000, 8).unwrap();
        let poisoned = data.clone().with_latent(DMatrix::from_element(3000, 1, f64::NAN)).unwrap();
        assert_eq!(fit_proximal_gmm(&data, BridgeForm::Full).unwrap(), fit_proximal_gmm(&poisoned, BridgeForm::Full).unwrap());
        assert_eq!(fit_or(&data).unwrap(), fit_or(&poisoned).unwrap());
        assert_eq!(fit_unadj(&data).unwrap(), fit_unadj(&poisoned).unwrap());
    }

    #[test]
    fn standard_errors_positive() {
        let s = base_case();
        let data = sample(&s, 400, 2).unwrap();
        for fit in [fit_proximal_gmm(&data, BridgeForm::Full), fit_or(&data), fit_unadj(&data)] {
            assert!(fit.unwrap().se_psi > 0.0);
        }
    }
}
