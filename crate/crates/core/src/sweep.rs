//! Configuration-driven bias sweeps, CSV output, and the verification batteries.
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::{
    bias_general, bias_or, bias_por_ay, bias_por_zw, bias_unadj, classify_ratio, detect_setup, Setup,
    Verdict, ZwCoefficients,
};
use crate::bridge::certify_bridge;
use crate::completeness::{self, certify};
use crate::draws;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_or, fit_proximal_gmm, fit_unadj, population_gmm, population_or, population_unadj, BridgeForm,
};
use crate::lsem::{sample, true_ace, LsemSpec};
use crate::moments::{s_factors, treatment_moments, MomentCache, TreatmentMoments};
use crate::presets;

pub const DEFAULT_ORDER: usize = 60;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;
pub const BOUNDARY_BAND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Por,
    Or,
    Unadj,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Por => "por",
            Estimator::Or => "or",
            Estimator::Unadj => "unadj",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    #[default]
    None,
    PopulationGmm,
    MonteCarlo { n: usize, seeds: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub path: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Axis {
    /// Evenly spaced, with both endpoints hit exactly.
    pub fn values(&self) -> Vec<f64> {
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| if i + 1 == self.steps { self.hi } else { self.lo + (self.hi - self.lo) * i as f64 / last })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linked {
    pub path: String,
    pub multiplier: f64,
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base_spec: LsemSpec,
    pub axis: Axis,
    #[serde(default)]
    pub linked: Vec<Linked>,
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub oracle: Oracle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
}

impl SweepConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let ax = &self.axis;
        if ax.steps < 2 {
            return Err(Error::Config(format!("axis needs at least 2 steps, got {}", ax.steps)));
        }
        if !(ax.lo.is_finite() && ax.hi.is_finite() && ax.lo < ax.hi) {
            return Err(Error::Config(format!("axis range [{}, {}] must be finite with lo < hi", ax.lo, ax.hi)));
        }
        if let Some(l) = self.linked.iter().find(|l| !l.multiplier.is_finite()) {
            return Err(Error::Config(format!("multiplier for {} is not finite", l.path)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::Config("estimators listed twice".into()));
        }
        if let Oracle::MonteCarlo { n, seeds } = self.oracle {
            if n < 100 || seeds == 0 {
                return Err(Error::Config(format!("monte-carlo oracle needs n >= 100 and seeds >= 1, got {n}, {seeds}")));
            }
        }
        if self.quadrature_order < 20 {
            return Err(Error::Config(format!("quadrature order {} is below 20", self.quadrature_order)));
        }
        self.base_spec.get_param(&ax.path)?;
        for l in &self.linked {
            self.base_spec.get_param(&l.path)?;
        }
        self.grid().map(|_| ())
    }

    /// Patched specs in axis order; every one must validate.
    pub fn grid(&self) -> Result<Vec<(f64, LsemSpec)>> {
        self.axis
            .values()
            .into_iter()
            .map(|v| {
                let mut s = self.base_spec.clone();
                s.set_param(&self.axis.path, v)?;
                for l in &self.linked {
                    s.set_param(&l.path, l.multiplier * v)?;
                }
                let bad = s.validate();
                if bad.is_empty() {
                    Ok((v, s))
                } else {
                    Err(Error::InvalidSpec(bad))
                }
            })
            .collect()
    }

    /// Content hash of everything that determines the rows.
    pub fn spec_hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.name = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub type BiasFn = fn(&LsemSpec, &TreatmentMoments) -> Result<f64>;

/// The closed forms a sweep or battery evaluates; swappable so tests can plant a wrong one.
#[derive(Clone, Copy)]
pub struct Formulas {
    pub zw_por: BiasFn,
    pub ay_por: BiasFn,
    pub general_por: BiasFn,
    pub or: BiasFn,
    pub unadj: BiasFn,
}

impl Default for Formulas {
    fn default() -> Self {
        Formulas { zw_por: bias_por_zw, ay_por: bias_por_ay, general_por: bias_general, or: bias_or, unadj: bias_unadj }
    }
}

impl Formulas {
    /// Proximal bias from the family the model belongs to.
    pub fn por(&self, spec: &LsemSpec, mom: &TreatmentMoments) -> Result<(Setup, f64)> {
        let setup = detect_setup(spec)
            .ok_or_else(|| Error::Precondition("no closed-form proximal bias covers this spec".into()))?;
        let f = match setup {
            Setup::ZwViolation => self.zw_por,
            Setup::AyViolation => self.ay_por,
            Setup::General => self.general_por,
        };
        Ok((setup, f(spec, mom)?))
    }
}

/// Bridge family whose population solve the setup's closed form describes.
pub fn bridge_form(setup: Setup) -> BridgeForm {
    match setup {
        Setup::General => BridgeForm::NoInteraction,
        _ => BridgeForm::Full,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: f64,
    /// Aligned with `SweepResult::columns` after the axis column.
    pub values: Vec<f64>,
    pub pole: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub name: Option<String>,
    pub spec_hash: String,
    pub build: String,
    pub moment_method: String,
    pub axis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub metadata: SweepMetadata,
}

impl SweepResult {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn axis(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.axis).collect()
    }

    pub fn pole_rows(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].pole).collect()
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        if let Some(name) = &m.name {
            writeln!(out, "# preset: {name}").unwrap();
        }
        writeln!(out, "# spec_hash: {}", m.spec_hash).unwrap();
        writeln!(out, "# build: {}", m.build).unwrap();
        writeln!(out, "# moment_method: {}", m.moment_method).unwrap();
        writeln!(out, "# axis: {}", m.axis).unwrap();
        writeln!(out, "axis,{},flag", self.columns.join(",")).unwrap();
        for r in &self.rows {
            write!(out, "{:?}", r.axis).unwrap();
            for v in &r.values {
                write!(out, ",{v:?}").unwrap();
            }
            writeln!(out, ",{}", if r.pole { "pole" } else { "" }).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn build_id() -> &'static str {
    env!("PROXBIAS_BUILD")
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    pub no_cache: bool,
    pub cache_dir: Option<PathBuf>,
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    run_sweep_with(config, &RunOptions::default(), &Formulas::default())
}

fn columns(config: &SweepConfig) -> Vec<String> {
    let mut cols: Vec<String> = config.estimators.iter().map(|e| e.name().to_string()).collect();
    for e in &config.estimators {
        match config.oracle {
            Oracle::None => {}
            Oracle::PopulationGmm => cols.push(format!("pop_{}", e.name())),
            Oracle::MonteCarlo { .. } => {
                cols.push(format!("mc_{}", e.name()));
                cols.push(format!("mc_{}_se", e.name()));
            }
        }
    }
    cols
}

/// Seed for one (row, replicate) pair, independent of scheduling.
pub fn replicate_seed(root: u64, row: usize, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(row as u64);
    rng.set_word_pos(2 * rep as u128);
    rng.next_u64()
}

struct Evaluated {
    row: SweepRow,
    method: String,
}

fn evaluate(
    config: &SweepConfig,
    formulas: &Formulas,
    idx: usize,
    axis: f64,
    spec: &LsemSpec,
    cache: Option<&MomentCache>,
) -> Result<Evaluated> {
    let order = config.quadrature_order;
    let mom = match cache {
        Some(c) => c.get(spec, order)?,
        None => treatment_moments(spec, order)?,
    };
    let mut values = Vec::new();
    let mut pole = false;
    let mut setup = None;
    for &e in &config.estimators {
        let v = match e {
            Estimator::Por => match formulas.por(spec, &mom) {
                Ok((s, v)) => {
                    setup = Some(s);
                    v
                }
                Err(Error::Pole { .. }) => {
                    pole = true;
                    f64::NAN
                }
                Err(err) => return Err(err),
            },
            Estimator::Or => (formulas.or)(spec, &mom)?,
            Estimator::Unadj => (formulas.unadj)(spec, &mom)?,
        };
        values.push(v.abs());
    }
    let form = bridge_form(setup.or_else(|| detect_setup(spec)).unwrap_or(Setup::ZwViolation));
    match config.oracle {
        Oracle::None => {}
        Oracle::PopulationGmm => {
            for &e in &config.estimators {
                let v = match e {
                    Estimator::Por if pole => f64::NAN,
                    Estimator::Por => population_gmm(spec, &mom, form, &form.instruments(spec.dims))?.bias,
                    Estimator::Or => population_or(spec, &mom)?.bias,
                    Estimator::Unadj => population_unadj(spec, &mom)?.bias,
                };
                values.push(v.abs());
            }
        }
        Oracle::MonteCarlo { n, seeds } => {
            let ace = true_ace(spec);
            let mut draws = vec![Vec::with_capacity(seeds); config.estimators.len()];
            for rep in 0..seeds {
                let data = sample(spec, n, replicate_seed(config.seed, idx, rep))?;
                for (k, &e) in config.estimators.iter().enumerate() {
                    let fit = match e {
                        Estimator::Por if pole => continue,
                        Estimator::Por => fit_proximal_gmm(&data, form)?,
                        Estimator::Or => fit_or(&data)?,
                        Estimator::Unadj => fit_unadj(&data)?,
                    };
                    draws[k].push((fit.psi_hat - ace, fit.se_psi));
                }
            }
            for d in draws {
                let (mean, se) = summarize(&d);
                values.push(mean.abs());
                values.push(se);
            }
        }
    }
    Ok(Evaluated { row: SweepRow { axis, values, pole }, method: mom.method.to_string() })
}

/// Mean bias over replicates; the SE is the replicate spread, or the plug-in SE for a single fit.
fn summarize(d: &[(f64, f64)]) -> (f64, f64) {
    match d.len() {
        0 => (f64::NAN, f64::NAN),
        1 => d[0],
        k => {
            let kf = k as f64;
            let mean = d.iter().map(|x| x.0).sum::<f64>() / kf;
            let var = d.iter().map(|x| (x.0 - mean).powi(2)).sum::<f64>() / (kf - 1.0);
            (mean, (var / kf).sqrt())
        }
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn run_sweep_with(config: &SweepConfig, opts: &RunOptions, formulas: &Formulas) -> Result<SweepResult> {
    config.validate()?;
    let grid = config.grid()?;
    let cache = (!opts.no_cache).then(|| MomentCache::new(opts.cache_dir.clone()));
    let evaluated = in_pool(opts.threads, || {
        grid.par_iter()
            .enumerate()
            .map(|(i, (v, s))| evaluate(config, formulas, i, *v, s, cache.as_ref()))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut methods: Vec<String> = evaluated.iter().map(|e| e.method.clone()).collect();
    methods.sort();
    methods.dedup();
    Ok(SweepResult {
        columns: columns(config),
        rows: evaluated.into_iter().map(|e| e.row).collect(),
        metadata: SweepMetadata {
            name: config.name.clone(),
            spec_hash: config.spec_hash(),
            build: build_id().to_string(),
            moment_method: methods.join("+"),
            axis: config.axis.path.clone(),
        },
    })
}

// ------------------------------------------------------------------ verification

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Every grid point of the shipped figure presets.
    Presets,
    /// Randomized ZW, AY and general specs.
    Random,
    All,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "presets" => Ok(Family::Presets),
            "random" => Ok(Family::Random),
            "all" => Ok(Family::All),
            _ => Err(Error::Config(format!("unknown family {s:?}; expected presets, random or all"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Random specs per setup in the equivalence battery.
    pub random_specs: usize,
    /// Draws per sign class in the comparison battery.
    pub sign_draws: usize,
    /// Every k-th grid point of each preset is checked.
    pub preset_stride: usize,
    pub quadrature_order: usize,
}

impl Budget {
    pub const MINIMAL: Budget = Budget { random_specs: 20, sign_draws: 100, preset_stride: 25, quadrature_order: 40 };
    pub const DEFAULT: Budget = Budget { random_specs: 200, sign_draws: 1000, preset_stride: 1, quadrature_order: 60 };

    pub fn named(name: &str) -> Result<Budget> {
        match name {
            "minimal" => Ok(Budget::MINIMAL),
            "default" => Ok(Budget::DEFAULT),
            _ => Err(Error::Config(format!("unknown budget {name:?}; expected minimal or default"))),
        }
    }

    fn check(&self) -> Result<()> {
        let m = Budget::MINIMAL;
        if self.random_specs < m.random_specs
            || self.sign_draws < m.sign_draws
            || self.preset_stride == 0
            || self.preset_stride > m.preset_stride
            || self.quadrature_order < m.quadrature_order
        {
            return Err(Error::Precondition(format!("budget {self:?} is below the minimal preset")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Draws discarded at poles or singular population systems.
    pub rejected: usize,
    pub worst: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub family: Family,
    pub budget: Budget,
    pub batteries: Vec<BatteryResult>,
    pub passed: bool,
}

pub fn verify_all(family: Family, budget: Budget) -> Result<VerificationReport> {
    verify_with(family, budget, &Formulas::default())
}

pub fn verify_with(family: Family, budget: Budget, formulas: &Formulas) -> Result<VerificationReport> {
    budget.check()?;
    let mut batteries = vec![bridge_battery(budget), completeness_battery()];
    if matches!(family, Family::Presets | Family::All) {
        batteries.push(preset_equivalence(budget, formulas));
    }
    if matches!(family, Family::Random | Family::All) {
        for setup in [Setup::ZwViolation, Setup::AyViolation, Setup::General] {
            batteries.push(random_equivalence(setup, budget, formulas));
        }
    }
    batteries.push(sign_battery(budget, formulas));
    let passed = batteries.iter().all(|b| b.passed);
    Ok(VerificationReport { family, budget, batteries, passed })
}

fn failed(name: &str, e: Error) -> BatteryResult {
    BatteryResult { name: name.into(), passed: false, cases: 0, rejected: 0, worst: f64::NAN, detail: e.to_string() }
}

fn bridge_battery(budget: Budget) -> BatteryResult {
    let name = "bridge";
    match presets::spec("base-case").and_then(|s| certify_bridge(&s, budget.quadrature_order)) {
        Ok(c) => BatteryResult {
            name: name.into(),
            passed: c.passed,
            cases: c.grid_points,
            rejected: 0,
            worst: c.fredholm_residual.max(c.coefficient_error),
            detail: format!("residual {:e}, coefficient gap {:e}", c.fredholm_residual, c.coefficient_error),
        },
        Err(e) => failed(name, e),
    }
}

fn completeness_battery() -> BatteryResult {
    let name = "completeness";
    match presets::spec("completeness").and_then(|s| certify(&s, completeness::DEFAULT_ORDER)) {
        Ok(c) => BatteryResult {
            name: name.into(),
            passed: c.passed,
            cases: c.rows.len(),
            rejected: 0,
            worst: c.max_abs_conditional_mean,
            detail: format!("max |E[g|Z,A,X]| {:e}, max |g| {:e}", c.max_abs_conditional_mean, c.max_abs_g),
        },
        Err(e) => failed(name, e),
    }
}

/// Largest gap between each closed form and its population solve; `None` when the model sits on
/// a pole or the population system is singular.
pub fn equivalence_gap(spec: &LsemSpec, mom: &TreatmentMoments, formulas: &Formulas) -> Result<Option<f64>> {
    let (setup, por) = match formulas.por(spec, mom) {
        Ok(v) => v,
        Err(Error::Pole { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let form = bridge_form(setup);
    let pop = match population_gmm(spec, mom, form, &form.instruments(spec.dims)) {
        Ok(p) => p,
        Err(Error::Singular { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let or = match population_or(spec, mom) {
        Ok(p) => p,
        Err(Error::Singular { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let un = population_unadj(spec, mom)?;
    let gaps = [
        (por - pop.bias).abs(),
        ((formulas.or)(spec, mom)? - or.bias).abs(),
        ((formulas.unadj)(spec, mom)? - un.bias).abs(),
    ];
    Ok(Some(gaps.iter().copied().fold(0.0, f64::max)))
}

fn tally(name: &str, results: Vec<Result<Option<f64>>>, detail: String) -> BatteryResult {
    let mut worst = 0.0f64;
    let (mut cases, mut rejected) = (0, 0);
    for r in results {
        match r {
            Ok(Some(g)) => {
                cases += 1;
                worst = if g.is_nan() { f64::NAN } else { worst.max(g) };
            }
            Ok(None) => rejected += 1,
            Err(e) => return failed(name, e),
        }
    }
    BatteryResult {
        name: name.into(),
        passed: worst < EQUIVALENCE_TOLERANCE && cases > 0,
        cases,
        rejected,
        worst,
        detail,
    }
}

fn preset_equivalence(budget: Budget, formulas: &Formulas) -> BatteryResult {
    let mut specs = Vec::new();
    for name in presets::sweep_names() {
        match presets::sweep(name).and_then(|c| c.grid()) {
            Ok(g) => specs.extend(g.into_iter().step_by(budget.preset_stride).map(|(_, s)| s)),
            Err(e) => return failed("equivalence/presets", e),
        }
    }
    let cache = MomentCache::new(None);
    let results = specs
        .par_iter()
        .map(|s| equivalence_gap(s, &cache.get(s, budget.quadrature_order)?, formulas))
        .collect();
    tally("equivalence/presets", results, format!("{} preset grid points", specs.len()))
}

fn draw(setup: Setup, rng: &mut ChaCha8Rng) -> LsemSpec {
    match setup {
        Setup::ZwViolation => draws::zw_spec(rng),
        Setup::AyViolation => draws::ay_spec(rng),
        Setup::General => draws::general_spec(rng, false),
    }
}

/// One accepted random draw per index; rejected draws are redrawn from the same stream.
fn random_equivalence(setup: Setup, budget: Budget, formulas: &Formulas) -> BatteryResult {
    let name = format!("equivalence/{}", setup_name(setup));
    let results: Vec<(Result<Option<f64>>, usize)> = (0..budget.random_specs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ setup as u64);
            rng.set_stream(i as u64);
            let mut rejected = 0;
            loop {
                let s = draw(setup, &mut rng);
                let gap = treatment_moments(&s, budget.quadrature_order)
                    .and_then(|m| equivalence_gap(&s, &m, formulas));
                match gap {
                    Ok(None) if rejected < 50 => rejected += 1,
                    other => return (other, rejected),
                }
            }
        })
        .collect();
    let rejected: usize = results.iter().map(|r| r.1).sum();
    let mut b = tally(&name, results.into_iter().map(|r| r.0).collect(), String::new());
    b.rejected += rejected;
    b.detail = format!("{} specs, {} redrawn", b.cases, b.rejected);
    b
}

fn setup_name(s: Setup) -> &'static str {
    match s {
        Setup::ZwViolation => "zw",
        Setup::AyViolation => "ay",
        Setup::General => "general",
    }
}

/// Outcome of one draw in the sign battery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SignCase {
    Agrees,
    Disagrees,
    /// Within the boundary band of a pole or threshold.
    Boundary,
}

/// Same-sign draws must favour the proximal estimator; opposite-sign draws must be classified
/// the way the direct magnitude comparison says.
pub fn sign_case(spec: &LsemSpec, mom: &TreatmentMoments, same_sign: bool, formulas: &Formulas) -> Result<SignCase> {
    let s = s_factors(mom)?;
    let c = ZwCoefficients {
        theta_u1: spec.theta_u[(0, 0)],
        theta_u2: spec.theta_u[(1, 0)],
        mu_u1: spec.mu_u[(0, 0)],
        mu_u2: spec.mu_u[(1, 0)],
        gamma_u1: spec.gamma_u[0],
        gamma_au1: 0.0,
    };
    let unadj = (formulas.unadj)(spec, mom)?.abs();
    if same_sign {
        let por = (formulas.zw_por)(spec, mom)?.abs();
        return Ok(if por < unadj { SignCase::Agrees } else { SignCase::Disagrees });
    }
    let (verdict, margin) = classify_ratio(c.r(), mom.e_a, s);
    if margin <= BOUNDARY_BAND || verdict == Verdict::Pole {
        return Ok(SignCase::Boundary);
    }
    let por = match (formulas.zw_por)(spec, mom) {
        Ok(v) => v.abs(),
        Err(Error::Pole { .. }) => return Ok(SignCase::Boundary),
        Err(e) => return Err(e),
    };
    let direct = if por < unadj { Verdict::PorDominates } else { Verdict::UnadjDominates };
    Ok(if direct == verdict { SignCase::Agrees } else { SignCase::Disagrees })
}

fn sign_battery(budget: Budget, formulas: &Formulas) -> BatteryResult {
    let name = "comparison-signs";
    let results: Vec<Result<(bool, SignCase)>> = (0..2 * budget.sign_draws)
        .into_par_iter()
        .map(|i| {
            let same = i < budget.sign_draws;
            let mut rng = ChaCha8Rng::seed_from_u64(0x519e);
            rng.set_stream(i as u64);
            let s = draws::sign_spec(&mut rng, same);
            let m = treatment_moments(&s, budget.quadrature_order)?;
            sign_case(&s, &m, same, formulas).map(|c| (same, c))
        })
        .collect();
    let (mut bad, mut band) = (0usize, 0usize);
    for r in results {
        match r {
            Ok((_, SignCase::Disagrees)) => bad += 1,
            Ok((_, SignCase::Boundary)) => band += 1,
            Ok(_) => {}
            Err(e) => return failed(name, e),
        }
    }
    BatteryResult {
        name: name.into(),
        passed: bad == 0,
        cases: 2 * budget.sign_draws,
        rejected: band,
        worst: bad as f64,
        detail: format!("{bad} exceptions, {band} inside the boundary band"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsem::Dimensions;

    fn config() -> SweepConfig {
        let mut c = presets::sweep("fig5a").unwrap();
        c.axis.steps = 9;
        c
    }

    #[test]
    fn axis_hits_both_ends() {
        let a = Axis { path: "x".into(), lo: -2.0, hi: 2.0, steps: 201 };
        let v = a.values();
        assert_eq!((v[0], v[100], v[200]), (-2.0, 0.0, 2.0));
    }

    #[test]
    fn config_rejections() {
        let mut c = config();
        c.axis.steps = 1;
        assert!(c.validate().is_err());
        let mut c = config();
        c.axis.lo = 3.0;
        assert!(c.validate().is_err());
        let mut c = config();
        c.linked[0].multiplier = f64::INFINITY;
        assert!(c.validate().is_err());
        let mut c = config();
        c.axis.path = "theta_u[3]".into();
        assert!(matches!(c.validate(), Err(Error::ParamPath(_))));
        let mut c = config();
        c.axis.path = "noise_sd[1]".into();
        assert!(matches!(c.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn no_confounding_gives_zero_columns() {
        let mut s = LsemSpec::zeros(Dimensions { p: 2, q: 0, m: 1, n: 1 });
        s.theta_u[(0, 0)] = 1.0;
        s.mu_u[(0, 0)] = 0.5;
        s.gamma_u[0] = 1.0;
        let c = SweepConfig {
            name: None,
            base_spec: s,
            axis: Axis { path: "theta_u[2]".into(), lo: -1.0, hi: 1.0, steps: 2 },
            linked: vec![],
            estimators: vec![Estimator::Por, Estimator::Or, Estimator::Unadj],
            oracle: Oracle::PopulationGmm,
            output: None,
            seed: 0,
            quadrature_order: 40,
        };
        let r = run_sweep(&c).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!(row.values.iter().all(|v| v.abs() < 1e-12), "{row:?}");
        }
    }

    #[test]
    fn csv_round_trips_floats() {
        let r = run_sweep(&config()).unwrap();
        let csv = r.to_csv();
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], "axis,por,or,unadj,pop_por,pop_or,pop_unadj,flag");
        for (line, row) in body[1..].iter().zip(&r.rows) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0].parse::<f64>().unwrap(), row.axis);
            for (s, v) in f[1..=row.values.len()].iter().zip(&row.values) {
                assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn replicate_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for row in 0..20 {
            for rep in 0..20 {
                assert!(seen.insert(replicate_seed(7, row, rep)));
            }
        }
        assert_eq!(replicate_seed(7, 3, 4), replicate_seed(7, 3, 4));
    }

    #[test]
    fn budget_floor() {
        let zero = Budget { random_specs: 0, sign_draws: 0, preset_stride: 0, quadrature_order: 0 };
        assert!(matches!(verify_all(Family::All, zero), Err(Error::Precondition(_))));
        assert!(Budget::named("huge").is_err());
    }
}
