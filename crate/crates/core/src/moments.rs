//! Logistic-Gaussian treatment moments E[A], E[AG], E[AGGᵀ] with G = (U, X).
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lsem::{ensure_valid, logistic, LsemSpec, Sampler};
use crate::quadrature::GaussHermite;
use crate::scalar::Real;

pub const DEFAULT_ORDER: usize = 60;
pub const MAX_QUADRATURE_DIRECTIONS: usize = 3;
/// Draws used when a spec has too many active directions for quadrature.
pub const FALLBACK_DRAWS: usize = 400_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMethod {
    Quadrature,
    MonteCarlo,
}

impl std::fmt::Display for MomentMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MomentMethod::Quadrature => "quadrature",
            MomentMethod::MonteCarlo => "monte-carlo",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentMoments<T = f64> {
    pub e_a: T,
    pub e_au: Vec<T>,
    pub e_ax: Vec<T>,
    /// E[A U_i U_j]
    pub e_auu: Vec<Vec<T>>,
    /// E[A U_i X_j]
    pub e_aux: Vec<Vec<T>>,
    /// E[A X_i X_j]
    pub e_axx: Vec<Vec<T>>,
    pub method: MomentMethod,
    pub est_error: T,
}

impl<T: Real> TreatmentMoments<T> {
    pub fn p(&self) -> usize {
        self.e_au.len()
    }

    pub fn q(&self) -> usize {
        self.e_ax.len()
    }

    pub fn cast<S: Real>(&self) -> TreatmentMoments<S> {
        let c = |v: T| S::lit(v.to_f64().expect("finite moment"));
        let cv = |v: &Vec<T>| v.iter().map(|&x| c(x)).collect::<Vec<S>>();
        let cm = |m: &Vec<Vec<T>>| m.iter().map(cv).collect::<Vec<_>>();
        TreatmentMoments {
            e_a: c(self.e_a),
            e_au: cv(&self.e_au),
            e_ax: cv(&self.e_ax),
            e_auu: cm(&self.e_auu),
            e_aux: cm(&self.e_aux),
            e_axx: cm(&self.e_axx),
            method: self.method,
            est_error: c(self.est_error),
        }
    }

    /// E[A]E[AU_i²] ≥ E[AU_i]² and (1−E[A])(1−E[AU_i²]) ≥ E[AU_i]² for every i.
    pub fn positivity_holds(&self) -> bool {
        let ea = self.e_a;
        let one = T::one();
        ea > T::zero()
            && ea < one
            && (0..self.p()).all(|i| {
                let a1 = self.e_au[i];
                let a11 = self.e_auu[i][i];
                ea * a11 >= a1 * a1 && (one - ea) * (one - a11) >= a1 * a1
            })
    }
}

impl TreatmentMoments<f64> {
    /// E[A G]
    pub fn e_ag(&self) -> DVector<f64> {
        DVector::from_iterator(self.p() + self.q(), self.e_au.iter().chain(&self.e_ax).copied())
    }

    /// E[A G Gᵀ]
    pub fn e_agg(&self) -> DMatrix<f64> {
        let (p, q) = (self.p(), self.q());
        DMatrix::from_fn(p + q, p + q, |i, j| match (i < p, j < p) {
            (true, true) => self.e_auu[i][j],
            (true, false) => self.e_aux[i][j - p],
            (false, true) => self.e_aux[j][i - p],
            (false, false) => self.e_axx[i - p][j - p],
        })
    }

    fn from_blocks(
        p: usize,
        e_a: f64,
        eag: &DVector<f64>,
        eagg: &DMatrix<f64>,
        method: MomentMethod,
        est_error: f64,
    ) -> Self {
        let k = eag.len();
        let block = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
            r.map(|i| c.clone().map(|j| eagg[(i, j)]).collect()).collect()
        };
        TreatmentMoments {
            e_a,
            e_au: eag.rows(0, p).iter().copied().collect(),
            e_ax: eag.rows(p, k - p).iter().copied().collect(),
            e_auu: block(0..p, 0..p),
            e_aux: block(0..p, p..k),
            e_axx: block(p..k, p..k),
            method,
            est_error,
        }
    }

    fn max_abs_diff(&self, o: &Self) -> f64 {
        let mut d = (self.e_a - o.e_a).abs();
        d = d.max((self.e_ag() - o.e_ag()).amax());
        d.max((self.e_agg() - o.e_agg()).amax())
    }
}

fn active_directions(spec: &LsemSpec) -> Vec<usize> {
    spec.alpha_g().iter().enumerate().filter(|(_, &a)| a != 0.0).map(|(i, _)| i).collect()
}

pub fn treatment_moments_quadrature(spec: &LsemSpec, order: usize) -> Result<TreatmentMoments> {
    ensure_valid(spec)?;
    if order < 20 {
        return Err(Error::Precondition(format!("quadrature order {order} is below 20")));
    }
    let active = active_directions(spec);
    if active.len() > MAX_QUADRATURE_DIRECTIONS {
        return Err(Error::TooManyDirections { active: active.len() });
    }
    let fine = quadrature_at(spec, &active, order);
    let coarse = quadrature_at(spec, &active, order / 2);
    let est_error = fine.max_abs_diff(&coarse).max(64.0 * f64::EPSILON);
    Ok(TreatmentMoments { est_error, ..fine })
}

fn quadrature_at(spec: &LsemSpec, active: &[usize], order: usize) -> TreatmentMoments {
    let p = spec.dims.p;
    let sigma = spec.joint_cov();
    let k = sigma.nrows();
    let alpha = spec.alpha_g();
    let d = active.len();

    if d == 0 {
        let ea = logistic(spec.alpha0);
        return TreatmentMoments::from_blocks(p, ea, &DVector::zeros(k), &(sigma * ea), MomentMethod::Quadrature, 0.0);
    }

    let inactive: Vec<usize> = (0..k).filter(|i| !active.contains(i)).collect();
    let s_ii = sigma.select_rows(active).select_columns(active);
    let l = s_ii.clone().cholesky().expect("principal block of a PD matrix").l();
    // η = α0 + cᵀξ with G_I = L ξ.
    let a_i = DVector::from_iterator(d, active.iter().map(|&i| alpha[i]));
    let c = l.transpose() * &a_i;

    let gh = GaussHermite::<f64>::new(order);
    let mut e0 = 0.0;
    let mut e1 = DVector::<f64>::zeros(d);
    let mut e2 = DMatrix::<f64>::zeros(d, d);
    let mut idx = vec![0usize; d];
    let mut xi = vec![0.0; d];
    loop {
        let mut w = 1.0;
        let mut eta = spec.alpha0;
        for t in 0..d {
            xi[t] = gh.nodes[idx[t]];
            w *= gh.weights[idx[t]];
            eta += c[t] * xi[t];
        }
        let s = w * logistic(eta);
        e0 += s;
        for a in 0..d {
            e1[a] += s * xi[a];
            for b in 0..=a {
                e2[(a, b)] += s * xi[a] * xi[b];
            }
        }
        let mut t = 0;
        while t < d {
            idx[t] += 1;
            if idx[t] < order {
                break;
            }
            idx[t] = 0;
            t += 1;
        }
        if t == d {
            break;
        }
    }
    e2.fill_upper_triangle_with_lower_triangle();

    let ag_i = &l * e1;
    let agg_i = &l * e2 * l.transpose();

    let mut eag = DVector::zeros(k);
    let mut eagg = DMatrix::zeros(k, k);
    for (a, &i) in active.iter().enumerate() {
        eag[i] = ag_i[a];
        for (b, &j) in active.iter().enumerate() {
            eagg[(i, j)] = agg_i[(a, b)];
        }
    }
    if !inactive.is_empty() {
        // G_J = B G_I + R with R independent of (G_I, A).
        let s_ji = sigma.select_rows(&inactive).select_columns(active);
        let s_jj = sigma.select_rows(&inactive).select_columns(&inactive);
        let bt = s_ii.clone().cholesky().unwrap().solve(&s_ji.transpose());
        let b = bt.transpose();
        let resid = &s_jj - &b * &s_ji.transpose();
        let ag_j = &b * &ag_i;
        let agg_ji = &b * &agg_i;
        let agg_jj = &b * &agg_i * b.transpose() + resid * e0;
        for (a, &i) in inactive.iter().enumerate() {
            eag[i] = ag_j[a];
            for (bb, &j) in active.iter().enumerate() {
                eagg[(i, j)] = agg_ji[(a, bb)];
                eagg[(j, i)] = agg_ji[(a, bb)];
            }
            for (bb, &j) in inactive.iter().enumerate() {
                eagg[(i, j)] = agg_jj[(a, bb)];
            }
        }
    }
    TreatmentMoments::from_blocks(p, e0, &eag, &eagg, MomentMethod::Quadrature, 0.0)
}

/// Running sums of A, A·G and A·G Gᵀ and of their squares.
#[derive(Clone)]
struct McSums {
    n: usize,
    s: Vec<f64>,
    ss: Vec<f64>,
}

pub fn treatment_moments_mc(spec: &LsemSpec, n: usize, seed: u64) -> Result<TreatmentMoments> {
    if n < 10_000 {
        return Err(Error::Precondition(format!("Monte Carlo moments need at least 10^4 draws, got {n}")));
    }
    let sampler = Sampler::new(spec)?;
    let p = spec.dims.p;
    let k = p + spec.dims.q;
    let width = 1 + k + k * (k + 1) / 2;

    let parts: Vec<McSums> = (0..Sampler::chunks(n))
        .into_par_iter()
        .map(|c| {
            let len = Sampler::chunk_len(n, c);
            let chunk = sampler.latent(seed, c, len);
            let mut acc = McSums { n: len, s: vec![0.0; width], ss: vec![0.0; width] };
            let mut v = vec![0.0; width];
            for r in 0..len {
                let a = chunk.a[r];
                let g = &chunk.g[r * k..(r + 1) * k];
                v[0] = a;
                let mut t = 1;
                for i in 0..k {
                    v[t] = a * g[i];
                    t += 1;
                }
                for i in 0..k {
                    for j in 0..=i {
                        v[t] = a * g[i] * g[j];
                        t += 1;
                    }
                }
                for (t, &x) in v.iter().enumerate() {
                    acc.s[t] += x;
                    acc.ss[t] += x * x;
                }
            }
            acc
        })
        .collect();

    let mut total = McSums { n: 0, s: vec![0.0; width], ss: vec![0.0; width] };
    for part in parts {
        total.n += part.n;
        for t in 0..width {
            total.s[t] += part.s[t];
            total.ss[t] += part.ss[t];
        }
    }
    let nf = total.n as f64;
    let mean: Vec<f64> = total.s.iter().map(|s| s / nf).collect();
    let worst_se = (0..width)
        .map(|t| ((total.ss[t] / nf - mean[t] * mean[t]).max(0.0) / (nf - 1.0)).sqrt())
        .fold(0.0, f64::max);

    let eag = DVector::from_iterator(k, mean[1..1 + k].iter().copied());
    let mut eagg = DMatrix::zeros(k, k);
    let mut t = 1 + k;
    for i in 0..k {
        for j in 0..=i {
            eagg[(i, j)] = mean[t];
            eagg[(j, i)] = mean[t];
            t += 1;
        }
    }
    Ok(TreatmentMoments::from_blocks(p, mean[0], &eag, &eagg, MomentMethod::MonteCarlo, 3.0 * worst_se))
}

/// Quadrature when the logit has at most three active directions, otherwise Monte Carlo with a
/// seed derived from the model content.
pub fn treatment_moments(spec: &LsemSpec, order: usize) -> Result<TreatmentMoments> {
    match treatment_moments_quadrature(spec, order) {
        Err(Error::TooManyDirections { .. }) => {
            let key = moment_key(spec, order);
            let seed = u64::from_str_radix(&key[..16], 16).expect("hex digest");
            treatment_moments_mc(spec, FALLBACK_DRAWS, seed)
        }
        other => other,
    }
}

/// Content hash of the model fields the moments depend on.
pub fn moment_key(spec: &LsemSpec, order: usize) -> String {
    let mut h = Sha256::new();
    h.update(order.to_le_bytes());
    h.update(spec.dims.p.to_le_bytes());
    h.update(spec.dims.q.to_le_bytes());
    h.update(spec.alpha0.to_le_bytes());
    for x in spec.alpha_u.iter().chain(spec.alpha_x.iter()).chain(spec.rho.iter()).chain(spec.sigma_x.iter()) {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// In-memory moment cache with an optional JSON directory shared between runs.
#[derive(Debug, Default)]
pub struct MomentCache {
    dir: Option<PathBuf>,
    map: Mutex<HashMap<String, TreatmentMoments>>,
}

impl MomentCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        MomentCache { dir, map: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, spec: &LsemSpec, order: usize) -> Result<TreatmentMoments> {
        let key = moment_key(spec, order);
        if let Some(m) = self.map.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(path) = &path {
            if let Ok(text) = std::fs::read_to_string(path) {
                if let Ok(m) = serde_json::from_str::<TreatmentMoments>(&text) {
                    self.map.lock().unwrap().insert(key, m.clone());
                    return Ok(m);
                }
            }
        }
        let m = treatment_moments(spec, order)?;
        if let Some(path) = &path {
            std::fs::create_dir_all(path.parent().unwrap())?;
            std::fs::write(path, serde_json::to_string(&m)?)?;
        }
        self.map.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SFactors<T = f64> {
    pub s1: T,
    pub s2: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RFactors<T = f64> {
    pub r1: T,
    pub r2: T,
}

fn as_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Denominators (1−E[A])(1−E[AU₁²]) − E[AU₁]² and E[A]E[AU₁²] − E[AU₁]².
fn arm_denominators<T: Real>(mom: &TreatmentMoments<T>) -> (T, T) {
    let (ea, a1, a11) = (mom.e_a, mom.e_au[0], mom.e_auu[0][0]);
    ((T::one() - ea) * (T::one() - a11) - a1 * a1, ea * a11 - a1 * a1)
}

pub fn s_factors<T: Real>(mom: &TreatmentMoments<T>) -> Result<SFactors<T>> {
    if mom.p() < 1 {
        return Err(Error::Precondition("S factors need at least one confounder".into()));
    }
    let (d1, d2) = arm_denominators(mom);
    if !(d1 > T::zero() && d2 > T::zero()) {
        return Err(Error::CorruptedMoments(format!(
            "arm variance denominators ({:e}, {:e}) must be positive",
            as_f64(d1),
            as_f64(d2)
        )));
    }
    let ea = mom.e_a;
    let one = T::one();
    Ok(SFactors { s1: (one - ea) * (one - ea) / d1, s2: ea * ea / d2 })
}

pub fn r_factors<T: Real>(mom: &TreatmentMoments<T>) -> Result<RFactors<T>> {
    if mom.p() < 2 {
        return Err(Error::Precondition("R factors need two confounders".into()));
    }
    let (d1, d2) = arm_denominators(mom);
    if d1 == T::zero() || d2 == T::zero() || !(d1.is_finite() && d2.is_finite()) {
        return Err(Error::CorruptedMoments("zero arm variance denominator".into()));
    }
    let one = T::one();
    Ok(RFactors {
        r1: mom.e_au[0] * mom.e_au[1] / d1,
        r2: (one - mom.e_a - mom.e_auu[0][0]) / d2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsem::Dimensions;

    fn spec(p: usize, q: usize) -> LsemSpec {
        LsemSpec::zeros(Dimensions { p, q, m: 1, n: 1 })
    }

    #[test]
    fn independent_treatment() {
        let m = treatment_moments_quadrature(&spec(2, 1), 60).unwrap();
        assert_eq!(m.e_a, 0.5);
        assert!(m.e_au.iter().chain(&m.e_ax).all(|v| *v == 0.0));
        assert_eq!(m.e_auu, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
    }

    #[test]
    fn symmetric_logit_and_independent_component() {
        let mut s = spec(2, 0);
        s.alpha_u[0] = 0.8;
        let m = treatment_moments_quadrature(&s, 60).unwrap();
        assert!((m.e_a - 0.5).abs() < 1e-14);
        assert_eq!(m.e_au[1], 0.0);
        assert!((m.e_auu[1][1] - 0.5).abs() < 1e-14);
        assert!(m.e_au[0] > 0.0);
    }

    #[test]
    fn one_dimensional_reference_values() {
        // E[A U] = α E[σ'(αU)] by Stein's lemma; compare with a fine direct rule.
        let mut s = spec(1, 0);
        s.alpha0 = -0.4;
        s.alpha_u[0] = 1.3;
        let m = treatment_moments_quadrature(&s, 60).unwrap();
        let gh = GaussHermite::<f64>::new(200);
        let sig = |x: f64| logistic(-0.4 + 1.3 * x);
        let stein = 1.3 * gh.expect(|x| sig(x) * (1.0 - sig(x)));
        assert!((m.e_au[0] - stein).abs() < 1e-13);
        assert!((m.e_a - gh.expect(sig)).abs() < 1e-13);
        // order 30 against order 60 is a loose bound on the order-60 error
        assert!(m.est_error < 1e-9);
    }

    #[test]
    fn correlated_inactive_components_use_regression() {
        // X is inactive but correlated with U1; compare against treating X as active.
        let mut s = spec(2, 1);
        s.alpha_u[0] = 0.7;
        s.rho[(0, 0)] = 0.4;
        s.rho[(1, 0)] = -0.3;
        let reduced = treatment_moments_quadrature(&s, 60).unwrap();
        s.alpha_x[0] = 1e-300;
        s.alpha_u[1] = 1e-300;
        let full = treatment_moments_quadrature(&s, 40).unwrap();
        assert!(reduced.max_abs_diff(&full) < 1e-12, "{}", reduced.max_abs_diff(&full));
    }

    #[test]
    fn refuses_four_active_directions() {
        let mut s = spec(3, 1);
        s.alpha_u.fill(0.2);
        s.alpha_x[0] = 0.2;
        assert!(matches!(treatment_moments_quadrature(&s, 60), Err(Error::TooManyDirections { active: 4 })));
        assert_eq!(treatment_moments(&s, 60).unwrap().method, MomentMethod::MonteCarlo);
    }

    #[test]
    fn mc_is_deterministic_and_unbiased_when_independent() {
        let s = spec(1, 0);
        let a = treatment_moments_mc(&s, 1_000_000, 3).unwrap();
        let b = treatment_moments_mc(&s, 1_000_000, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.e_a - 0.5).abs() < 0.0015);
        assert!(treatment_moments_mc(&s, 100, 3).is_err());
    }

    #[test]
    fn factors_at_independence() {
        let m = treatment_moments_quadrature(&spec(2, 0), 60).unwrap();
        let s = s_factors(&m).unwrap();
        assert!((s.s1 - 1.0).abs() < 1e-15 && (s.s2 - 1.0).abs() < 1e-15);
        let r = r_factors(&m).unwrap();
        assert_eq!(r.r1, 0.0);
        assert!(r.r2.abs() < 1e-15);
    }

    #[test]
    fn corrupted_moments_rejected() {
        let mut m = treatment_moments_quadrature(&spec(2, 0), 60).unwrap();
        m.e_au[0] = 0.6;
        assert!(matches!(s_factors(&m), Err(Error::CorruptedMoments(_))));
        assert!(!m.positivity_holds());
    }

    #[test]
    fn cache_key_ignores_outcome_coefficients() {
        let mut s = spec(2, 0);
        let k = moment_key(&s, 60);
        s.gamma_u[0] = 3.0;
        s.theta_u[(1, 0)] = 2.0;
        assert_eq!(moment_key(&s, 60), k);
        s.alpha_u[1] = 0.1;
        assert_ne!(moment_key(&s, 60), k);
    }

    #[test]
    fn disk_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(2, 0);
        s.alpha_u[0] = 0.3;
        let first = MomentCache::new(Some(dir.path().to_path_buf())).get(&s, 60).unwrap();
        let second = MomentCache::new(Some(dir.path().to_path_buf())).get(&s, 60).unwrap();
        assert_eq!(first, second);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
