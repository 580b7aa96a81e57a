//! Base-case confounding bridges and their Fredholm certification.
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{population_gmm, BridgeForm};
use crate::lsem::{ensure_valid, logistic, sample, LsemSpec};
use crate::moments::treatment_moments;
use crate::quadrature::GaussHermite;

/// h(W, A, X) = b0 + ba A + bwᵀW + bxᵀX + A (baxᵀX + bawᵀW)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBridgeParams {
    pub b0: f64,
    pub ba: f64,
    pub bx: Vec<f64>,
    pub bw: Vec<f64>,
    pub bax: Vec<f64>,
    pub baw: Vec<f64>,
}

impl OutcomeBridgeParams {
    pub fn eval(&self, w: &[f64], a: f64, x: &[f64]) -> f64 {
        let dot = |c: &[f64], v: &[f64]| c.iter().zip(v).map(|(c, v)| c * v).sum::<f64>();
        self.b0 + self.ba * a + dot(&self.bw, w) + dot(&self.bx, x) + a * (dot(&self.bax, x) + dot(&self.baw, w))
    }

    /// b0, ba, bx, bw, bax, baw flattened in that order.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = vec![self.b0, self.ba];
        for part in [&self.bx, &self.bw, &self.bax, &self.baw] {
            v.extend_from_slice(part);
        }
        v
    }

    /// E[h(W,1,X) − h(W,0,X)] under the model; E[X] = 0.
    pub fn ace(&self, spec: &LsemSpec) -> f64 {
        self.ba + self.baw.iter().zip(spec.mu0.iter()).map(|(b, m)| b * m).sum::<f64>()
    }
}

/// q(Z, A, X) = 1 + exp{(−1)^{1−A} (t0 + tz Z + ta A + txᵀX)}
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentBridgeParams {
    pub t0: f64,
    pub ta: f64,
    pub tx: Vec<f64>,
    pub tz: f64,
}

impl TreatmentBridgeParams {
    pub fn eval(&self, z: f64, a: f64, x: &[f64]) -> f64 {
        let lin = self.t0 + self.tz * z + self.ta * a + self.tx.iter().zip(x).map(|(t, x)| t * x).sum::<f64>();
        let sign = if a == 1.0 { 1.0 } else { -1.0 };
        1.0 + (sign * lin).exp()
    }
}

fn require_base_case(spec: &LsemSpec) -> Result<()> {
    ensure_valid(spec)?;
    let d = spec.dims;
    if d.p != 1 || d.m != 1 || d.n != 1 || d.q > 1 {
        return Err(Error::Precondition(format!(
            "base-case bridge needs p=m=n=1 and q<=1, got {d:?}"
        )));
    }
    Ok(())
}

pub fn solve_outcome_bridge_base(spec: &LsemSpec) -> Result<OutcomeBridgeParams> {
    require_base_case(spec)?;
    let mu = spec.mu_u[(0, 0)];
    if mu == 0.0 {
        return Err(Error::NoBridge("outcome"));
    }
    let (gu, gau, mu0) = (spec.gamma_u[0], spec.gamma_au[0], spec.mu0[0]);
    let mux = spec.mu_x.column(0);
    Ok(OutcomeBridgeParams {
        b0: spec.gamma0 - mu0 * gu / mu,
        ba: spec.gamma_a - mu0 * gau / mu,
        bx: spec.gamma_x.iter().zip(mux.iter()).map(|(gx, mx)| gx - mx * gu / mu).collect(),
        bw: vec![gu / mu],
        bax: mux.iter().map(|mx| -mx * gau / mu).collect(),
        baw: vec![gau / mu],
    })
}

/// The ε₁ variance enters through E[exp(tz ε₁)]; at unit variance these are the usual coefficients.
pub fn solve_treatment_bridge_base(spec: &LsemSpec) -> Result<TreatmentBridgeParams> {
    require_base_case(spec)?;
    let th = spec.theta_u[(0, 0)];
    if th == 0.0 {
        return Err(Error::NoBridge("treatment"));
    }
    let au = spec.alpha_u[0];
    let v1 = spec.noise_sd[0].powi(2);
    let r = au / th;
    Ok(TreatmentBridgeParams {
        t0: -spec.alpha0 + spec.theta0[0] * r + 0.5 * v1 * r * r,
        ta: -v1 * r * r + spec.theta_a[0] * r,
        tx: spec.theta_x.column(0).iter().zip(spec.alpha_x.iter()).map(|(tx, ax)| tx * r - ax).collect(),
        tz: -r,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub z: Vec<f64>,
    pub a: u8,
    pub x: Vec<f64>,
}

const GRID_STEPS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

/// z and x at {−2,…,2} conditional standard deviations, both arms.
pub fn standard_grid(spec: &LsemSpec) -> Result<Vec<GridPoint>> {
    ensure_valid(spec)?;
    let q = spec.dims.q;
    let xs: Vec<Vec<f64>> = if q == 0 {
        vec![Vec::new()]
    } else {
        GRID_STEPS.iter().map(|&k| (0..q).map(|j| k * spec.sigma_x[(j, j)].sqrt()).collect()).collect()
    };
    let mut out = Vec::new();
    for a in [0u8, 1] {
        for x in &xs {
            let (m, c) = prior_u_given_x(spec, x)?;
            let mean_z = z_mean(spec, a, x, &m);
            let cov_z = spec.theta_u.transpose() * &c * &spec.theta_u;
            for &k in &GRID_STEPS {
                let z = (0..spec.dims.m)
                    .map(|j| mean_z[j] + k * (cov_z[(j, j)] + spec.noise_sd[0].powi(2)).sqrt())
                    .collect();
                out.push(GridPoint { z, a, x: x.clone() });
            }
        }
    }
    Ok(out)
}

fn prior_u_given_x(spec: &LsemSpec, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = spec.dims.p;
    if spec.dims.q == 0 {
        return Ok((DVector::zeros(p), DMatrix::identity(p, p)));
    }
    let chol = spec.sigma_x.clone().cholesky().ok_or(Error::Singular { what: "sigma_x", condition: f64::INFINITY })?;
    let xv = DVector::from_column_slice(x);
    let m = &spec.rho * chol.solve(&xv);
    let c = DMatrix::identity(p, p) - &spec.rho * chol.solve(&spec.rho.transpose());
    Ok((m, c))
}

fn z_mean(spec: &LsemSpec, a: u8, x: &[f64], u: &DVector<f64>) -> DVector<f64> {
    let xv = DVector::from_column_slice(x);
    &spec.theta0 + &spec.theta_a * f64::from(a) + spec.theta_u.transpose() * u + spec.theta_x.transpose() * xv
}

const TILT_ORDER: usize = 80;

/// E[U | Z=z, A=a, X=x]: Gaussian regression on (Z, X), then the logistic tilt from A along αᵀU.
pub fn conditional_mean_u(spec: &LsemSpec, pt: &GridPoint) -> Result<DVector<f64>> {
    let (m0, c0) = prior_u_given_x(spec, &pt.x)?;
    let th = &spec.theta_u;
    let s = th.transpose() * &c0 * th + DMatrix::identity(spec.dims.m, spec.dims.m) * spec.noise_sd[0].powi(2);
    let sc = s.cholesky().ok_or(Error::Singular { what: "conditional covariance of Z", condition: f64::INFINITY })?;
    let resid = DVector::from_column_slice(&pt.z) - z_mean(spec, pt.a, &pt.x, &m0);
    let gain = &c0 * th;
    let m = &m0 + &gain * sc.solve(&resid);
    let c = &c0 - &gain * sc.solve(&gain.transpose());

    let alpha = &spec.alpha_u;
    let v = (alpha.transpose() * &c * alpha)[(0, 0)];
    if v <= 0.0 {
        return Ok(m);
    }
    let sd = v.sqrt();
    let base = spec.alpha0 + spec.alpha_x.dot(&DVector::from_column_slice(&pt.x)) + alpha.dot(&m);
    let sign = if pt.a == 1 { 1.0 } else { -1.0 };
    let gh = GaussHermite::<f64>::new(TILT_ORDER);
    let norm = gh.expect(|t| logistic(sign * (base + sd * t)));
    let shift = gh.expect(|t| sd * t * logistic(sign * (base + sd * t))) / norm;
    Ok(m + c * alpha * (shift / v))
}

/// max over the grid of |E[Y|z,a,x] − E[h(W,a,x)|z,a,x]|.
pub fn fredholm_residual(bridge: &OutcomeBridgeParams, spec: &LsemSpec, grid: &[GridPoint]) -> Result<f64> {
    ensure_valid(spec)?;
    if grid.is_empty() {
        return Err(Error::Precondition("empty certification grid".into()));
    }
    let d = spec.dims;
    if bridge.bw.len() != d.n || bridge.baw.len() != d.n || bridge.bx.len() != d.q || bridge.bax.len() != d.q {
        return Err(Error::Precondition("bridge coefficients do not conform to the model".into()));
    }
    let mut worst = 0.0f64;
    for pt in grid {
        let a = f64::from(pt.a);
        let u = conditional_mean_u(spec, pt)?;
        let x = DVector::from_column_slice(&pt.x);
        let ey = spec.gamma0 + spec.gamma_a * a + spec.gamma_x.dot(&x) + (&spec.gamma_u + &spec.gamma_au * a).dot(&u);
        let ew = &spec.mu0 + spec.mu_u.transpose() * &u + spec.mu_x.transpose() * &x;
        let eh = bridge.eval(ew.as_slice(), a, &pt.x);
        worst = worst.max((ey - eh).abs());
    }
    Ok(worst)
}

pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
pub const COEFFICIENT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeCertificate {
    pub bridge: OutcomeBridgeParams,
    pub grid_points: usize,
    pub fredholm_residual: f64,
    /// Largest gap between the closed-form coefficients and the population moment solve.
    pub coefficient_error: f64,
    pub passed: bool,
}

pub fn certify_bridge(spec: &LsemSpec, order: usize) -> Result<BridgeCertificate> {
    let bridge = solve_outcome_bridge_base(spec)?;
    let grid = standard_grid(spec)?;
    let residual = fredholm_residual(&bridge, spec, &grid)?;
    let mom = treatment_moments(spec, order)?;
    let form = BridgeForm::Full;
    let fit = population_gmm(spec, &mom, form, &form.instruments(spec.dims))?;
    let pop = fit.outcome_bridge(spec.dims).expect("full form has no Z features");
    let err = bridge
        .coefficients()
        .iter()
        .zip(pop.coefficients())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(BridgeCertificate {
        bridge,
        grid_points: grid.len(),
        fredholm_residual: residual,
        coefficient_error: err,
        passed: residual < RESIDUAL_TOLERANCE && err < COEFFICIENT_TOLERANCE,
    })
}

/// Sample mean and standard error of q(Z,a,X)·1{A=a} for a = 0, 1; both should be 1.
pub fn inverse_probability_check(
    spec: &LsemSpec,
    bridge: &TreatmentBridgeParams,
    n: usize,
    seed: u64,
) -> Result<[(f64, f64); 2]> {
    let data = sample(spec, n, seed)?;
    let nf = data.len() as f64;
    let mut out = [(0.0, 0.0); 2];
    for (arm, slot) in out.iter_mut().enumerate() {
        let arm = arm as f64;
        let vals: Vec<f64> = (0..data.len())
            .map(|i| {
                if data.a[i] == arm {
                    let x: Vec<f64> = data.x.row(i).iter().copied().collect();
                    bridge.eval(data.z[(i, 0)], arm, &x)
                } else {
                    0.0
                }
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / nf;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        *slot = (mean, (var / nf).sqrt());
    }
    Ok(out)
}
