//! Linear structural equation model: spec, validation and sampling.
//!
//! (U, X) ~ N(0, [[I, rho], [rhoᵀ, Sigma_x]]), logit P(A=1) = alpha0 + alpha_uᵀU + alpha_xᵀX,
//! Z = theta0 + theta_a A + theta_uᵀU + theta_xᵀX + e1,
//! W = mu0 + mu_uᵀU + mu_xᵀX + e2,
//! Y = gamma0 + gamma_a A + gamma_uᵀU + gamma_xᵀX + A gamma_auᵀU + e3.
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc", into = "SpecDoc")]
pub struct LsemSpec {
    pub dims: Dimensions,
    pub alpha0: f64,
    pub alpha_u: DVector<f64>,
    pub alpha_x: DVector<f64>,
    pub theta0: DVector<f64>,
    pub theta_a: DVector<f64>,
    /// p×m
    pub theta_u: DMatrix<f64>,
    /// q×m
    pub theta_x: DMatrix<f64>,
    pub mu0: DVector<f64>,
    /// p×n
    pub mu_u: DMatrix<f64>,
    /// q×n
    pub mu_x: DMatrix<f64>,
    pub gamma0: f64,
    pub gamma_a: f64,
    pub gamma_u: DVector<f64>,
    pub gamma_x: DVector<f64>,
    pub gamma_au: DVector<f64>,
    /// p×q, Corr(U, X)
    pub rho: DMatrix<f64>,
    pub sigma_x: DMatrix<f64>,
    pub noise_sd: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Dimension(String),
    Shape {
        field: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    NonFinite(&'static str),
    RhoRange { i: usize, j: usize, value: f64 },
    SigmaX(String),
    JointCovariance,
    NoiseSd { index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension(s) => write!(f, "dimension: {s}"),
            Violation::Shape { field, expected, found } => write!(
                f,
                "{field} has shape {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::NonFinite(field) => write!(f, "{field} has a non-finite entry"),
            Violation::RhoRange { i, j, value } => {
                write!(f, "rho[{},{}] = {value} is outside (-1, 1)", i + 1, j + 1)
            }
            Violation::SigmaX(s) => write!(f, "sigma_x: {s}"),
            Violation::JointCovariance => {
                write!(f, "joint covariance of (U, X) is not positive definite")
            }
            Violation::NoiseSd { index, value } => {
                write!(f, "noise_sd[{}] = {value} must be strictly positive", index + 1)
            }
        }
    }
}

impl LsemSpec {
    /// All coefficients zero, independent unit-variance X, unit noise.
    pub fn zeros(dims: Dimensions) -> Self {
        let Dimensions { p, q, m, n } = dims;
        LsemSpec {
            dims,
            alpha0: 0.0,
            alpha_u: DVector::zeros(p),
            alpha_x: DVector::zeros(q),
            theta0: DVector::zeros(m),
            theta_a: DVector::zeros(m),
            theta_u: DMatrix::zeros(p, m),
            theta_x: DMatrix::zeros(q, m),
            mu0: DVector::zeros(n),
            mu_u: DMatrix::zeros(p, n),
            mu_x: DMatrix::zeros(q, n),
            gamma0: 0.0,
            gamma_a: 0.0,
            gamma_u: DVector::zeros(p),
            gamma_x: DVector::zeros(q),
            gamma_au: DVector::zeros(p),
            rho: DMatrix::zeros(p, q),
            sigma_x: DMatrix::identity(q, q),
            noise_sd: [1.0; 3],
        }
    }

    /// Covariance of G = (U, X).
    pub fn joint_cov(&self) -> DMatrix<f64> {
        let (p, q) = (self.dims.p, self.dims.q);
        let mut c = DMatrix::identity(p + q, p + q);
        c.view_mut((0, p), (p, q)).copy_from(&self.rho);
        c.view_mut((p, 0), (q, p)).copy_from(&self.rho.transpose());
        c.view_mut((p, p), (q, q)).copy_from(&self.sigma_x);
        c
    }

    /// Logit coefficients on G = (U, X).
    pub fn alpha_g(&self) -> DVector<f64> {
        stack(&self.alpha_u, &self.alpha_x)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    pub fn get_param(&self, path: &str) -> Result<f64> {
        let mut s = self.clone();
        s.slot(path).map(|v| *v)
    }

    /// Off-diagonal `sigma_x` entries are set together with their mirror.
    pub fn set_param(&mut self, path: &str, value: f64) -> Result<()> {
        *self.slot(path)? = value;
        if let Some(rest) = path.trim().strip_prefix("sigma_x[") {
            if let Some((i, j)) = rest.trim_end_matches(']').split_once(',') {
                self.slot(&format!("sigma_x[{},{}]", j.trim(), i.trim()))
                    .map(|v| *v = value)?;
            }
        }
        Ok(())
    }

    /// Resolves a bracketed, 1-based parameter path such as `theta_u[2]` or `mu_u[1,2]`.
    fn slot(&mut self, path: &str) -> Result<&mut f64> {
        let bad = || Error::ParamPath(path.to_string());
        let path = path.trim();
        let (name, idx) = match path.find('[') {
            None => (path, Vec::new()),
            Some(open) => {
                let inner = path[open..]
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(bad)?;
                let idx = inner
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                (&path[..open], idx)
            }
        };
        match name {
            "alpha0" | "gamma0" | "gamma_a" if idx.is_empty() => Ok(match name {
                "alpha0" => &mut self.alpha0,
                "gamma0" => &mut self.gamma0,
                _ => &mut self.gamma_a,
            }),
            "noise_sd" => match idx[..] {
                [i] if i < 3 => Ok(&mut self.noise_sd[i]),
                _ => Err(bad()),
            },
            "alpha_u" | "alpha_x" | "theta0" | "theta_a" | "mu0" | "gamma_u" | "gamma_x"
            | "gamma_au" => {
                let v = match name {
                    "alpha_u" => &mut self.alpha_u,
                    "alpha_x" => &mut self.alpha_x,
                    "theta0" => &mut self.theta0,
                    "theta_a" => &mut self.theta_a,
                    "mu0" => &mut self.mu0,
                    "gamma_u" => &mut self.gamma_u,
                    "gamma_x" => &mut self.gamma_x,
                    _ => &mut self.gamma_au,
                };
                match idx[..] {
                    [i] if i < v.len() => Ok(&mut v[i]),
                    _ => Err(bad()),
                }
            }
            "theta_u" | "theta_x" | "mu_u" | "mu_x" | "rho" | "sigma_x" => {
                let mat = match name {
                    "theta_u" => &mut self.theta_u,
                    "theta_x" => &mut self.theta_x,
                    "mu_u" => &mut self.mu_u,
                    "mu_x" => &mut self.mu_x,
                    "rho" => &mut self.rho,
                    _ => &mut self.sigma_x,
                };
                let (r, c) = mat.shape();
                let (i, j) = match idx[..] {
                    [i, j] => (i, j),
                    [i] if c == 1 => (i, 0),
                    [j] if r == 1 => (0, j),
                    _ => return Err(bad()),
                };
                if i < r && j < c {
                    Ok(&mut mat[(i, j)])
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

pub fn validate(spec: &LsemSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let Dimensions { p, q, m, n } = spec.dims;
    if p == 0 {
        out.push(Violation::Dimension("p must be at least 1".into()));
    }
    if m == 0 {
        out.push(Violation::Dimension("m must be at least 1".into()));
    }
    if n == 0 {
        out.push(Violation::Dimension("n must be at least 1".into()));
    }

    let vecs: [(&'static str, &DVector<f64>, usize); 8] = [
        ("alpha_u", &spec.alpha_u, p),
        ("alpha_x", &spec.alpha_x, q),
        ("theta0", &spec.theta0, m),
        ("theta_a", &spec.theta_a, m),
        ("mu0", &spec.mu0, n),
        ("gamma_u", &spec.gamma_u, p),
        ("gamma_x", &spec.gamma_x, q),
        ("gamma_au", &spec.gamma_au, p),
    ];
    let mats: [(&'static str, &DMatrix<f64>, (usize, usize)); 6] = [
        ("theta_u", &spec.theta_u, (p, m)),
        ("theta_x", &spec.theta_x, (q, m)),
        ("mu_u", &spec.mu_u, (p, n)),
        ("mu_x", &spec.mu_x, (q, n)),
        ("rho", &spec.rho, (p, q)),
        ("sigma_x", &spec.sigma_x, (q, q)),
    ];
    let mut shapes_ok = true;
    for (field, v, len) in vecs {
        if v.len() != len {
            shapes_ok = false;
            out.push(Violation::Shape { field, expected: (len, 1), found: (v.len(), 1) });
        } else if v.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite(field));
        }
    }
    for (field, a, shape) in mats {
        if a.shape() != shape {
            shapes_ok = false;
            out.push(Violation::Shape { field, expected: shape, found: a.shape() });
        } else if a.iter().any(|x| !x.is_finite()) {
            out.push(Violation::NonFinite(field));
        }
    }
    for (field, x) in [("alpha0", spec.alpha0), ("gamma0", spec.gamma0), ("gamma_a", spec.gamma_a)] {
        if !x.is_finite() {
            out.push(Violation::NonFinite(field));
        }
    }
    for (index, &value) in spec.noise_sd.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            out.push(Violation::NoiseSd { index, value });
        }
    }
    if !shapes_ok {
        return out;
    }

    for i in 0..p {
        for j in 0..q {
            let value = spec.rho[(i, j)];
            if !(value > -1.0 && value < 1.0) {
                out.push(Violation::RhoRange { i, j, value });
            }
        }
    }
    let sx = &spec.sigma_x;
    let mut sigma_ok = true;
    for i in 0..q {
        if (sx[(i, i)] - 1.0).abs() > 1e-12 {
            sigma_ok = false;
            out.push(Violation::SigmaX(format!("diagonal entry {} is {}, not 1", i + 1, sx[(i, i)])));
        }
        for j in 0..i {
            if (sx[(i, j)] - sx[(j, i)]).abs() > 1e-12 {
                sigma_ok = false;
                out.push(Violation::SigmaX(format!("not symmetric at ({}, {})", i + 1, j + 1)));
            }
        }
    }
    if sigma_ok && q > 0 && sx.clone().cholesky().is_none() {
        out.push(Violation::SigmaX("not positive definite".into()));
    } else if sigma_ok && spec.joint_cov().cholesky().is_none() {
        out.push(Violation::JointCovariance);
    }
    out
}

pub fn true_ace(spec: &LsemSpec) -> f64 {
    // E[U] = 0 removes the effect-modification term.
    spec.gamma_a
}

pub(crate) fn ensure_valid(spec: &LsemSpec) -> Result<()> {
    let v = validate(spec);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(v))
    }
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Observed data plus the latent U, which only diagnostics may read.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub a: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub x: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl Dataset {
    pub fn new(
        a: DVector<f64>,
        y: DVector<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        x: DMatrix<f64>,
        u: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::Precondition("dataset must have at least one row".into()));
        }
        if [y.len(), z.nrows(), w.nrows(), x.nrows(), u.nrows()].iter().any(|&r| r != n) {
            return Err(Error::Precondition("dataset columns have unequal row counts".into()));
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("treatment must be 0 or 1".into()));
        }
        Ok(Dataset { a, y, z, w, x, u })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Latent confounders, for diagnostics.
    pub fn latent(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn with_latent(mut self, u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != self.len() {
            return Err(Error::Precondition("latent block has the wrong row count".into()));
        }
        self.u = u;
        Ok(self)
    }
}

pub(crate) const CHUNK: usize = 1 << 14;

/// Draws in fixed-size chunks. Chunk k takes its (U, X, A) draws from stream 2k and its noise
/// from stream 2k+1, so every consumer of the latent block sees the same values.
pub(crate) struct Sampler<'a> {
    spec: &'a LsemSpec,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

pub(crate) struct LatentChunk {
    /// Row-major, len × (p+q).
    pub g: Vec<f64>,
    pub a: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(spec: &'a LsemSpec) -> Result<Self> {
        ensure_valid(spec)?;
        let chol = spec.joint_cov().cholesky().ok_or(Error::InvalidSpec(vec![Violation::JointCovariance]))?;
        Ok(Sampler { spec, chol: chol.l(), alpha: spec.alpha_g() })
    }

    pub fn chunks(n: usize) -> usize {
        n.div_ceil(CHUNK)
    }

    pub fn chunk_len(n: usize, k: usize) -> usize {
        CHUNK.min(n - k * CHUNK)
    }

    fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    }

    pub fn latent(&self, seed: u64, k: usize, len: usize) -> LatentChunk {
        let kdim = self.chol.nrows();
        let mut rng = Self::rng(seed, 2 * k as u64);
        let mut g = vec![0.0; len * kdim];
        let mut a = vec![0.0; len];
        let mut xi = vec![0.0; kdim];
        for r in 0..len {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let row = &mut g[r * kdim..(r + 1) * kdim];
            let mut eta = self.spec.alpha0;
            for i in 0..kdim {
                let mut s = 0.0;
                for j in 0..=i {
                    s += self.chol[(i, j)] * xi[j];
                }
                row[i] = s;
                eta += self.alpha[i] * s;
            }
            let u: f64 = rng.random();
            a[r] = if u < logistic(eta) { 1.0 } else { 0.0 };
        }
        LatentChunk { g, a }
    }

    fn noise(&self, seed: u64, k: usize, len: usize) -> Vec<f64> {
        let Dimensions { m, n, .. } = self.spec.dims;
        let mut rng = Self::rng(seed, 2 * k as u64 + 1);
        (0..len * (m + n + 1)).map(|_| rng.sample(StandardNormal)).collect()
    }
}

struct ChunkRows {
    latent: LatentChunk,
    z: Vec<f64>,
    w: Vec<f64>,
    y: Vec<f64>,
}

pub fn sample(spec: &LsemSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Precondition("sample size must be at least 1".into()));
    }
    let sampler = Sampler::new(spec)?;
    let Dimensions { p, q, m, n: nw } = spec.dims;
    let kdim = p + q;
    let [s1, s2, s3] = spec.noise_sd;

    let chunks: Vec<ChunkRows> = (0..Sampler::chunks(n))
        .into_par_iter()
        .map(|k| {
            let len = Sampler::chunk_len(n, k);
            let latent = sampler.latent(seed, k, len);
            let eps = sampler.noise(seed, k, len);
            let mut z = vec![0.0; len * m];
            let mut w = vec![0.0; len * nw];
            let mut y = vec![0.0; len];
            for r in 0..len {
                let g = &latent.g[r * kdim..(r + 1) * kdim];
                let (u, x) = g.split_at(p);
                let a = latent.a[r];
                let e = &eps[r * (m + nw + 1)..(r + 1) * (m + nw + 1)];
                for j in 0..m {
                    let mut v = spec.theta0[j] + spec.theta_a[j] * a + s1 * e[j];
                    v += (0..p).map(|i| spec.theta_u[(i, j)] * u[i]).sum::<f64>();
                    v += (0..q).map(|i| spec.theta_x[(i, j)] * x[i]).sum::<f64>();
                    z[r * m + j] = v;
                }
                for j in 0..nw {
                    let mut v = spec.mu0[j] + s2 * e[m + j];
                    v += (0..p).map(|i| spec.mu_u[(i, j)] * u[i]).sum::<f64>();
                    v += (0..q).map(|i| spec.mu_x[(i, j)] * x[i]).sum::<f64>();
                    w[r * nw + j] = v;
                }
                let mut v = spec.gamma0 + spec.gamma_a * a + s3 * e[m + nw];
                v += (0..p).map(|i| (spec.gamma_u[i] + a * spec.gamma_au[i]) * u[i]).sum::<f64>();
                v += (0..q).map(|i| spec.gamma_x[i] * x[i]).sum::<f64>();
                y[r] = v;
            }
            ChunkRows { latent, z, w, y }
        })
        .collect();

    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n * kdim);
    let mut z = Vec::with_capacity(n * m);
    let mut w = Vec::with_capacity(n * nw);
    for c in chunks {
        a.extend_from_slice(&c.latent.a);
        y.extend_from_slice(&c.y);
        g.extend_from_slice(&c.latent.g);
        z.extend_from_slice(&c.z);
        w.extend_from_slice(&c.w);
    }
    let g = DMatrix::from_row_slice(n, kdim, &g);
    Dataset::new(
        DVector::from_vec(a),
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, m, &z),
        DMatrix::from_row_slice(n, nw, &w),
        g.columns(p, q).into_owned(),
        g.columns(0, p).into_owned(),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<Dimensions>,
    alpha0: f64,
    alpha_u: Vec<f64>,
    #[serde(default)]
    alpha_x: Vec<f64>,
    theta0: Vec<f64>,
    theta_a: Vec<f64>,
    theta_u: Vec<Vec<f64>>,
    #[serde(default)]
    theta_x: Vec<Vec<f64>>,
    mu0: Vec<f64>,
    mu_u: Vec<Vec<f64>>,
    #[serde(default)]
    mu_x: Vec<Vec<f64>>,
    gamma0: f64,
    gamma_a: f64,
    gamma_u: Vec<f64>,
    #[serde(default)]
    gamma_x: Vec<f64>,
    #[serde(default)]
    gamma_au: Vec<f64>,
    #[serde(default)]
    rho: Vec<Vec<f64>>,
    #[serde(default)]
    sigma_x: Vec<Vec<f64>>,
    #[serde(default = "unit_noise")]
    noise_sd: [f64; 3],
}

fn unit_noise() -> [f64; 3] {
    [1.0; 3]
}

fn vector(field: &str, v: Vec<f64>, len: usize) -> std::result::Result<DVector<f64>, String> {
    match v.len() {
        0 => Ok(DVector::zeros(len)),
        l if l == len => Ok(DVector::from_vec(v)),
        l => Err(format!("{field} has length {l}, expected {len}")),
    }
}

fn matrix(field: &str, rows: Vec<Vec<f64>>, r: usize, c: usize) -> std::result::Result<Option<DMatrix<f64>>, String> {
    if rows.is_empty() {
        return Ok(None);
    }
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(format!("{field} must be {r}x{c}"));
    }
    Ok(Some(DMatrix::from_fn(r, c, |i, j| rows[i][j])))
}

impl TryFrom<SpecDoc> for LsemSpec {
    type Error = String;

    fn try_from(d: SpecDoc) -> std::result::Result<Self, String> {
        let dims = Dimensions {
            p: d.alpha_u.len(),
            q: d.alpha_x.len(),
            m: d.theta0.len(),
            n: d.mu0.len(),
        };
        if let Some(given) = d.dims {
            if given != dims {
                return Err(format!("dims {given:?} disagree with array lengths {dims:?}"));
            }
        }
        let Dimensions { p, q, m, n } = dims;
        let zeros = |r, c| DMatrix::zeros(r, c);
        Ok(LsemSpec {
            dims,
            alpha0: d.alpha0,
            alpha_u: DVector::from_vec(d.alpha_u),
            alpha_x: DVector::from_vec(d.alpha_x),
            theta0: DVector::from_vec(d.theta0),
            theta_a: vector("theta_a", d.theta_a, m)?,
            theta_u: matrix("theta_u", d.theta_u, p, m)?.unwrap_or_else(|| zeros(p, m)),
            theta_x: matrix("theta_x", d.theta_x, q, m)?.unwrap_or_else(|| zeros(q, m)),
            mu0: DVector::from_vec(d.mu0),
            mu_u: matrix("mu_u", d.mu_u, p, n)?.unwrap_or_else(|| zeros(p, n)),
            mu_x: matrix("mu_x", d.mu_x, q, n)?.unwrap_or_else(|| zeros(q, n)),
            gamma0: d.gamma0,
            gamma_a: d.gamma_a,
            gamma_u: vector("gamma_u", d.gamma_u, p)?,
            gamma_x: vector("gamma_x", d.gamma_x, q)?,
            gamma_au: vector("gamma_au", d.gamma_au, p)?,
            rho: matrix("rho", d.rho, p, q)?.unwrap_or_else(|| zeros(p, q)),
            sigma_x: matrix("sigma_x", d.sigma_x, q, q)?.unwrap_or_else(|| DMatrix::identity(q, q)),
            noise_sd: d.noise_sd,
        })
    }
}

impl From<LsemSpec> for SpecDoc {
    fn from(s: LsemSpec) -> Self {
        let rows = |a: &DMatrix<f64>| (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
        SpecDoc {
            dims: Some(s.dims),
            alpha0: s.alpha0,
            alpha_u: s.alpha_u.as_slice().to_vec(),
            alpha_x: s.alpha_x.as_slice().to_vec(),
            theta0: s.theta0.as_slice().to_vec(),
            theta_a: s.theta_a.as_slice().to_vec(),
            theta_u: rows(&s.theta_u),
            theta_x: rows(&s.theta_x),
            mu0: s.mu0.as_slice().to_vec(),
            mu_u: rows(&s.mu_u),
            mu_x: rows(&s.mu_x),
            gamma0: s.gamma0,
            gamma_a: s.gamma_a,
            gamma_u: s.gamma_u.as_slice().to_vec(),
            gamma_x: s.gamma_x.as_slice().to_vec(),
            gamma_au: s.gamma_au.as_slice().to_vec(),
            rho: rows(&s.rho),
            sigma_x: rows(&s.sigma_x),
            noise_sd: s.noise_sd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> LsemSpec {
        LsemSpec::zeros(Dimensions { p: 2, q: 1, m: 1, n: 1 })
    }

    #[test]
    fn identity_covariance_is_valid() {
        assert!(validate(&base()).is_empty());
    }

    #[test]
    fn strong_correlations_break_positive_definiteness() {
        let mut s = base();
        s.rho[(0, 0)] = 0.8;
        s.rho[(1, 0)] = 0.8;
        let v = validate(&s);
        assert_eq!(v, vec![Violation::JointCovariance]);
    }

    #[test]
    fn zero_noise_rejected() {
        let mut s = base();
        s.noise_sd = [1.0, 1.0, 0.0];
        assert!(matches!(validate(&s)[..], [Violation::NoiseSd { index: 2, .. }]));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut s = base();
        s.theta_u = DMatrix::zeros(3, 1);
        assert!(validate(&s).iter().any(|v| matches!(v, Violation::Shape { field: "theta_u", .. })));
    }

    #[test]
    fn paths_are_one_based() {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 1, n: 2 });
        s.set_param("theta_u[2]", 0.7).unwrap();
        s.set_param("mu_u[1,2]", -1.5).unwrap();
        s.set_param("noise_sd[3]", 2.0).unwrap();
        assert_eq!(s.theta_u[(1, 0)], 0.7);
        assert_eq!(s.mu_u[(0, 1)], -1.5);
        assert_eq!(s.get_param("noise_sd[3]").unwrap(), 2.0);
        assert!(s.set_param("theta_u[0]", 1.0).is_err());
        assert!(s.set_param("theta_u[3]", 1.0).is_err());
        assert!(s.set_param("mu_u[1]", 1.0).is_err());
        assert!(s.set_param("kappa", 1.0).is_err());
    }

    #[test]
    fn json_roundtrip_and_inference() {
        let text = r#"{"alpha0":0,"alpha_u":[0.3,0],"theta0":[0],"theta_a":[1],
            "theta_u":[[1],[0.5]],"mu0":[0],"mu_u":[[0.5],[0.5]],
            "gamma0":0,"gamma_a":0.5,"gamma_u":[1,0],"gamma_au":[1.5,0],"noise_sd":[1,1,2]}"#;
        let s: LsemSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.dims, Dimensions { p: 2, q: 0, m: 1, n: 1 });
        let back: LsemSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);

        let wrong = text.replace("\"alpha0\":0", "\"dims\":{\"p\":3,\"q\":0,\"m\":1,\"n\":1},\"alpha0\":0");
        assert!(serde_json::from_str::<LsemSpec>(&wrong).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_chunk_stable() {
        let mut s = base();
        s.alpha_u[0] = 0.4;
        s.gamma_u[0] = 1.0;
        let a = sample(&s, CHUNK + 17, 9).unwrap();
        let b = sample(&s, CHUNK + 17, 9).unwrap();
        assert_eq!(a, b);
        let c = sample(&s, CHUNK + 17, 10).unwrap();
        assert_ne!(a.y, c.y);
        // The prefix does not depend on the total size.
        let short = sample(&s, 100, 9).unwrap();
        assert_eq!(short.y.as_slice(), &a.y.as_slice()[..100]);
    }

    #[test]
    fn invalid_spec_not_sampled() {
        let mut s = base();
        s.noise_sd[0] = -1.0;
        assert!(matches!(sample(&s, 10, 1), Err(Error::InvalidSpec(_))));
    }
}
