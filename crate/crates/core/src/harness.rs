//! Experiment orchestration: validated configs, the four studies, result tables
//! and their persistence.
//!
//! Replicates fan out over rayon with per-replicate RNG streams and are collected
//! in index order, so every aggregate is independent of scheduling. Reference
//! samples for the limit laws use streams far above any replicate index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chaos::{
    exact_grid_size, expected_leray, grid_is_exact, leray_chaos_projection, leray_second_chaos, leray_total_variance,
    leray_variance_second, nodal_fourth_chaos_closed, nodal_fourth_chaos_quadrature, nodal_variance_leading, psi,
    sigma_n, var_fourth_closed_form, var_fourth_exact, w_vector, DEFAULT_Q_MAX,
};
use crate::error::{Error, Result};
use crate::field::{evaluate_field, replicate_rng, sample_coefficients, WaveCoefficients};
use crate::lattice::{enumerate_lattice_points, mu_hat_4, LatticePointSet};
use crate::limits::{
    correlation, q_statistic, rate_slope, standardize, summarize, wasserstein1, wasserstein1_vs_standard_normal,
    LimitGaussian, MEtaLaw, RateFit,
};
use crate::nodal::{default_epsilon, expected_nodal_length, leray_estimate, nodal_length, MIN_NODAL_GRID};

/// Chaos order whose exactness rule sets the `"auto"` grid.
pub const AUTO_CHAOS_ORDER: u32 = 2;
/// Base stream index for limit-law reference samples.
pub const REFERENCE_STREAM_BASE: u64 = 1 << 62;
/// Relative tolerance on the mean nodal length.
pub const NODAL_MEAN_REL_TOL: f64 = 0.01;
/// Accepted band for the full-length variance ratio.
pub const VARIANCE_RATIO_BAND: (f64, f64) = (0.8, 1.2);
/// Tolerance on analytic identities checked in floating point.
pub const IDENTITY_REL_TOL: f64 = 1e-8;
/// Slope bounds and margins for the rate study.
pub const LERAY_RATE_BOUND: f64 = -0.5;
pub const LERAY_RATE_MARGIN: f64 = 0.2;
pub const NODAL_RATE_BOUND: f64 = -0.25;
pub const NODAL_RATE_MARGIN: f64 = 0.15;
/// Number of standard errors for statistical targets.
pub const SE_MULTIPLIER: f64 = 3.0;

const PROV_LERAY_MEAN: &str = "expected Leray measure: E[Z_n] = 1/sqrt(2 pi)";
const PROV_LERAY2_VAR: &str = "second-chaos Leray variance: Var Z_n[2] = 1/(4 pi N_n)";
const PROV_LERAY_TOTAL_VAR: &str = "Leray variance series: sum_q beta_2q^2/(2q)! int r_n^2q";
const PROV_IDENTITY: &str = "chaos projection: grid quadrature equals closed form when M >= 4q sqrt(n) + 1";
const PROV_NODAL_MEAN: &str = "expected nodal length: E[L_n] = sqrt(E_n)/(2 sqrt 2)";
const PROV_NODAL4_VAR: &str = "fourth-chaos nodal variance: E_n/(512 N_n^2) (1 + mu4^2 + 34/N_n)";
const PROV_NODAL4_VAR_CLOSED: &str = "fourth-chaos variance from the closed form: E_n/(512 N_n^2) (1 + mu4^2 - 2/N_n)";
const PROV_NODAL_LEADING: &str = "leading nodal variance: c_n E_n/N_n^2 with c_n = (1 + mu4^2)/512";
const PROV_W_COV: &str = "W-vector covariance Sigma_n(mu4)";
const PROV_DEPENDENCE: &str = "asymptotic dependence of Leray measure and nodal length: corr != 0";
const PROV_Q_MARGINAL: &str = "limit marginal q(Z)/sqrt(1 + eta^2), Z ~ N(0, Sigma(eta))";
const PROV_LERAY_RATE: &str = "Wasserstein rate for the Leray measure: O(N_n^-1/2)";
const PROV_NODAL_RATE: &str = "Wasserstein rate for the nodal fourth chaos: O(N_n^-1/4)";

/// Which study to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Leray,
    Nodal,
    Joint,
    Rates,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Leray => "leray",
            Self::Nodal => "nodal",
            Self::Joint => "joint",
            Self::Rates => "rates",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrWord<T> {
    Number(T),
    Word(String),
}

/// Grid resolution: explicit, or the exactness rule at [`AUTO_CHAOS_ORDER`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord<usize>", into = "NumberOrWord<usize>")]
pub enum GridSpec {
    #[default]
    Auto,
    Fixed(usize),
}

impl TryFrom<NumberOrWord<usize>> for GridSpec {
    type Error = String;
    fn try_from(v: NumberOrWord<usize>) -> std::result::Result<Self, String> {
        match v {
            NumberOrWord::Number(m) => Ok(Self::Fixed(m)),
            NumberOrWord::Word(w) if w == "auto" => Ok(Self::Auto),
            NumberOrWord::Word(w) => Err(format!("grid must be a size or \"auto\", got {w:?}")),
        }
    }
}

impl From<GridSpec> for NumberOrWord<usize> {
    fn from(g: GridSpec) -> Self {
        match g {
            GridSpec::Auto => Self::Word("auto".into()),
            GridSpec::Fixed(m) => Self::Number(m),
        }
    }
}

impl GridSpec {
    pub fn resolve(&self, n: u64) -> usize {
        match *self {
            Self::Auto => exact_grid_size(n, AUTO_CHAOS_ORDER),
            Self::Fixed(m) => m,
        }
    }
}

/// Window half-width for the Leray estimator: explicit, or `10/M`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord<f64>", into = "NumberOrWord<f64>")]
pub enum EpsilonPolicy {
    #[default]
    Auto,
    Fixed(f64),
}

impl TryFrom<NumberOrWord<f64>> for EpsilonPolicy {
    type Error = String;
    fn try_from(v: NumberOrWord<f64>) -> std::result::Result<Self, String> {
        match v {
            NumberOrWord::Number(e) => Ok(Self::Fixed(e)),
            NumberOrWord::Word(w) if w == "auto" => Ok(Self::Auto),
            NumberOrWord::Word(w) => Err(format!("epsilon must be a number or \"auto\", got {w:?}")),
        }
    }
}

impl From<EpsilonPolicy> for NumberOrWord<f64> {
    fn from(e: EpsilonPolicy) -> Self {
        match e {
            EpsilonPolicy::Auto => Self::Word("auto".into()),
            EpsilonPolicy::Fixed(x) => Self::Number(x),
        }
    }
}

impl EpsilonPolicy {
    pub fn resolve(&self, m: usize) -> f64 {
        match *self {
            Self::Auto => default_epsilon(m),
            Self::Fixed(e) => e,
        }
    }
}

fn default_reference_draws() -> usize {
    1_000_000
}

fn default_quadrature_checks() -> usize {
    50
}

fn default_true() -> bool {
    true
}

/// Everything a study needs; mirrored by the CLI's `--config` JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub frequencies: Vec<u64>,
    #[serde(default)]
    pub grid: GridSpec,
    /// Grid-based replicates (field synthesis, nodal length, ε-window).
    pub replicates: usize,
    /// Closed-form replicates; defaults to `replicates`.
    #[serde(default)]
    pub closed_form_replicates: Option<usize>,
    #[serde(default)]
    pub epsilon: EpsilonPolicy,
    pub seed: u64,
    /// Limit parameter; `None` matches `|μ̂_n(4)|` per frequency.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_reference_draws")]
    pub reference_draws: usize,
    /// Realizations used for the quadrature-vs-closed-form check.
    #[serde(default = "default_quadrature_checks")]
    pub quadrature_checks: usize,
    #[serde(default = "default_true")]
    pub gradients: bool,
    #[serde(default = "default_true")]
    pub chaos_quadrature: bool,
    #[serde(default)]
    pub parallel_frequencies: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub stem: Option<String>,
}

impl ExperimentConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(kind: ExperimentKind, frequencies: Vec<u64>, replicates: usize, seed: u64) -> Self {
        Self {
            kind,
            frequencies,
            grid: GridSpec::Auto,
            replicates,
            closed_form_replicates: None,
            epsilon: EpsilonPolicy::Auto,
            seed,
            eta: None,
            reference_draws: default_reference_draws(),
            quadrature_checks: default_quadrature_checks(),
            gradients: true,
            chaos_quadrature: true,
            parallel_frequencies: false,
            out_dir: None,
            stem: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn closed_replicates(&self) -> usize {
        self.closed_form_replicates.unwrap_or(self.replicates)
    }

    pub fn stem(&self) -> String {
        self.stem.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    /// Check every field; nothing is computed until this passes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frequencies.is_empty() {
            return bad("frequency list is empty".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        if self.closed_replicates() < 2 {
            return bad("closed-form replicates must be at least 2".into());
        }
        if self.reference_draws < 2 {
            return bad("reference_draws must be at least 2".into());
        }
        if let GridSpec::Fixed(m) = self.grid {
            if m < MIN_NODAL_GRID {
                return bad(format!("grid M={m} is below the minimum {MIN_NODAL_GRID}"));
            }
        }
        if let EpsilonPolicy::Fixed(e) = self.epsilon {
            if !(e > 0.0) {
                return bad(format!("epsilon must be positive, got {e}"));
            }
        }
        if let Some(eta) = self.eta {
            if !(eta.abs() <= 1.0) {
                return bad(format!("|eta| must be at most 1, got {eta}"));
            }
        }
        if self.kind == ExperimentKind::Nodal && self.chaos_quadrature && !self.gradients {
            return Err(Error::MissingGradient);
        }
        let mut sizes = Vec::with_capacity(self.frequencies.len());
        for &n in &self.frequencies {
            sizes.push(enumerate_lattice_points(n)?.cardinality());
        }
        if self.kind == ExperimentKind::Rates {
            if sizes.len() < 3 {
                return bad(format!("rate study needs at least 3 frequencies, got {}", sizes.len()));
            }
            if sizes.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!("rate study needs strictly increasing N_n, got {sizes:?}"));
            }
        }
        Ok(())
    }
}

/// One line of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub n: u64,
    pub n_points: usize,
    pub estimator: String,
    pub estimate: f64,
    pub target: Option<f64>,
    pub std_error: Option<f64>,
    pub replicates: usize,
    pub pass: Option<bool>,
    pub provenance: String,
}

/// Per-frequency parameters resolved for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub n: u64,
    pub n_points: usize,
    pub mu4: f64,
    pub grid: usize,
    pub epsilon: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowProvenance {
    pub n: u64,
    pub estimator: String,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub frequencies: Vec<FrequencyRecord>,
    pub standardization: Vec<String>,
    pub provenance: Vec<RowProvenance>,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub manifest: Manifest,
}

impl ResultTable {
    /// `true` unless some asserted row failed.
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass != Some(false))
    }

    pub fn failures(&self) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.pass == Some(false)).collect()
    }

    pub fn find(&self, n: u64, estimator: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.n == n && r.estimator == estimator)
    }

    /// Fixed-width text summary.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"));
        let mut out = format!(
            "{:>6} {:>4} {:<30} {:>14} {:>14} {:>14} {:>8} {:>5}\n",
            "n", "N", "estimator", "estimate", "target", "std_error", "R", "pass"
        );
        for r in &self.rows {
            let pass = match r.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "-",
            };
            out.push_str(&format!(
                "{:>6} {:>4} {:<30} {:>14.6e} {:>14} {:>14} {:>8} {:>5}\n",
                r.n,
                r.n_points,
                r.estimator,
                r.estimate,
                fmt(r.target),
                fmt(r.std_error),
                r.replicates,
                pass
            ));
        }
        out
    }
}

/// Mean, variance and the standard error of the sample variance.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mean: f64,
    mean_se: f64,
    variance: f64,
    variance_se: f64,
}

fn moments(x: &[f64]) -> Result<Moments> {
    let s = summarize(x)?;
    let m4 = x.iter().map(|v| (v - s.mean).powi(4)).sum::<f64>() / x.len() as f64;
    Ok(Moments {
        mean: s.mean,
        mean_se: s.std_error,
        variance: s.variance,
        variance_se: ((m4 - s.variance * s.variance).max(0.0) / x.len() as f64).sqrt(),
    })
}

fn within_se(estimate: f64, target: f64, se: f64) -> bool {
    (estimate - target).abs() <= SE_MULTIPLIER * se
}

struct RowBuilder<'a> {
    set: &'a LatticePointSet,
    rows: Vec<ResultRow>,
}

impl<'a> RowBuilder<'a> {
    fn new(set: &'a LatticePointSet) -> Self {
        Self { set, rows: Vec::new() }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        estimator: &str,
        estimate: f64,
        target: Option<f64>,
        std_error: Option<f64>,
        replicates: usize,
        pass: Option<bool>,
        provenance: &str,
    ) {
        self.rows.push(ResultRow {
            n: self.set.n(),
            n_points: self.set.cardinality(),
            estimator: estimator.to_string(),
            estimate,
            target,
            std_error,
            replicates,
            pass,
            provenance: provenance.to_string(),
        });
    }

    fn info(&mut self, estimator: &str, estimate: f64, replicates: usize) {
        self.push(estimator, estimate, None, None, replicates, None, "");
    }
}

struct Prepared {
    set: Arc<LatticePointSet>,
    record: FrequencyRecord,
}

fn prepare(config: &ExperimentConfig) -> Result<Vec<Prepared>> {
    config
        .frequencies
        .iter()
        .map(|&n| {
            let set = Arc::new(enumerate_lattice_points(n)?);
            let mu4 = mu_hat_4(&set)?;
            let grid = config.grid.resolve(n);
            Ok(Prepared {
                record: FrequencyRecord {
                    n,
                    n_points: set.cardinality(),
                    mu4,
                    grid,
                    epsilon: config.epsilon.resolve(grid),
                    eta: config.eta.map_or(mu4.abs(), f64::abs),
                },
                set,
            })
        })
        .collect()
}

fn closed_form_draws<T: Send>(
    set: &Arc<LatticePointSet>,
    seed: u64,
    replicates: usize,
    f: impl Fn(&WaveCoefficients) -> T + Sync,
) -> Result<Vec<T>> {
    (0..replicates as u64)
        .into_par_iter()
        .map(|r| sample_coefficients(set, seed, r).map(|c| f(&c)))
        .collect()
}

fn m_eta_reference(seed: u64, n: u64, eta: f64, draws: usize) -> Result<Vec<f64>> {
    let law = MEtaLaw::new(eta)?;
    let mut rng = replicate_rng(seed, REFERENCE_STREAM_BASE + n);
    Ok(law.sample_many(&mut rng, draws))
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn map_frequencies<T: Send>(
    config: &ExperimentConfig,
    prepared: &[Prepared],
    f: impl Fn(&Prepared) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if config.parallel_frequencies {
        prepared.par_iter().map(&f).collect()
    } else {
        prepared.iter().map(f).collect()
    }
}

fn finish(
    config: &ExperimentConfig,
    prepared: Vec<Prepared>,
    rows: Vec<ResultRow>,
    standardization: Vec<String>,
    started: (SystemTime, Instant),
) -> ResultTable {
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let provenance = rows
        .iter()
        .filter(|r| !r.provenance.is_empty())
        .map(|r| RowProvenance {
            n: r.n,
            estimator: r.estimator.clone(),
            provenance: r.provenance.clone(),
        })
        .collect();
    ResultTable {
        rows,
        manifest: Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seed: config.seed,
            frequencies: prepared.into_iter().map(|p| p.record).collect(),
            standardization,
            provenance,
            threads: rayon::current_num_threads(),
            started_unix: unix(started.0),
            finished_unix: unix(SystemTime::now()),
            wall_time_s: started.1.elapsed().as_secs_f64(),
        },
    }
}

fn start_clock() -> (SystemTime, Instant) {
    (SystemTime::now(), Instant::now())
}

fn ensure_kind(config: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if config.kind != kind {
        return Err(Error::Config(format!("expected a {} config, got {}", kind.name(), config.kind.name())));
    }
    config.validate()
}

/// Leray measure study: mean, second-chaos variance, quadrature identity and normal distances.
pub fn run_leray_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    ensure_kind(config, ExperimentKind::Leray)?;
    let started = start_clock();
    let prepared = prepare(config)?;
    let per_n = map_frequencies(config, &prepared, |p| leray_rows(config, p))?;
    let standardization = vec![
        "leray2_w1_normal: Z_n[2] centered at 0, scaled by sqrt(1/(4 pi N_n)) (theoretical)".to_string(),
        format!(
            "leray_eps_w1_normal: estimate centered at 1/sqrt(2 pi), scaled by the Leray variance series with Q = {DEFAULT_Q_MAX} (theoretical)"
        ),
    ];
    Ok(finish(config, prepared, per_n.into_iter().flatten().collect(), standardization, started))
}

fn leray_rows(config: &ExperimentConfig, p: &Prepared) -> Result<Vec<ResultRow>> {
    let (set, rec) = (&p.set, &p.record);
    let (n, big_n) = (rec.n, rec.n_points);
    let checks = config.quadrature_checks.min(config.replicates);
    let exact_m = if grid_is_exact(rec.grid, n, 1) { rec.grid } else { exact_grid_size(n, 1) };

    let grid_draws: Vec<(f64, Option<f64>)> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<(f64, Option<f64>)> {
            let c = sample_coefficients(set, config.seed, r)?;
            let g = evaluate_field(&c, rec.grid, false)?;
            let est = leray_estimate(&g, rec.epsilon)?;
            let gap = if (r as usize) < checks {
                let quad = if exact_m == rec.grid {
                    leray_chaos_projection(&g, 1)?
                } else {
                    leray_chaos_projection(&evaluate_field(&c, exact_m, false)?, 1)?
                };
                let closed = leray_second_chaos(&c);
                Some((quad.value - closed).abs() / closed.abs().max(1e-300))
            } else {
                None
            };
            Ok((est, gap))
        })
        .collect::<Result<_>>()?;
    let estimates: Vec<f64> = grid_draws.iter().map(|d| d.0).collect();
    let max_gap = grid_draws.iter().filter_map(|d| d.1).fold(0.0, f64::max);

    let closed = closed_form_draws(set, config.seed, config.closed_replicates(), leray_second_chaos)?;

    let mut rows = RowBuilder::new(set);
    let target = expected_leray();
    let r = config.replicates;
    if r >= 2 {
        let m = moments(&estimates)?;
        rows.push("leray_mean", m.mean, Some(target), Some(m.mean_se), r, Some(within_se(m.mean, target, m.mean_se)), PROV_LERAY_MEAN);
    } else {
        rows.push("leray_mean", estimates[0], Some(target), None, r, None, PROV_LERAY_MEAN);
    }

    let var_target = leray_variance_second(big_n);
    let mc = moments(&closed)?;
    rows.push(
        "leray2_variance",
        mc.variance,
        Some(var_target),
        Some(mc.variance_se),
        closed.len(),
        Some(within_se(mc.variance, var_target, mc.variance_se)),
        PROV_LERAY2_VAR,
    );

    if checks > 0 {
        rows.push("leray2_quadrature_gap", max_gap, Some(0.0), None, checks, Some(max_gap <= IDENTITY_REL_TOL), PROV_IDENTITY);
    }

    let z2 = standardize(&closed, 0.0, var_target.sqrt())?;
    rows.info("leray2_w1_normal", wasserstein1_vs_standard_normal(&z2)?, closed.len());

    let q_grid = exact_grid_size(n, DEFAULT_Q_MAX);
    let total_var = leray_total_variance(set, DEFAULT_Q_MAX, q_grid)?;
    if r >= 2 {
        let m = moments(&estimates)?;
        rows.push("leray_variance", m.variance, Some(total_var), Some(m.variance_se), r, None, PROV_LERAY_TOTAL_VAR);
    }
    let z = standardize(&estimates, target, total_var.sqrt())?;
    rows.info("leray_eps_w1_normal", wasserstein1_vs_standard_normal(&z)?, r);
    Ok(rows.rows)
}

/// Nodal length study: mean, fourth-chaos variance, variance ratio and distances to `M_η`.
pub fn run_nodal_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    ensure_kind(config, ExperimentKind::Nodal)?;
    let started = start_clock();
    let prepared = prepare(config)?;
    let per_n = map_frequencies(config, &prepared, |p| nodal_rows(config, p))?;
    let standardization = vec![
        "nodal4_w1_meta: L_n[4] centered at 0, scaled by the closed-form variance E_n/(512 N_n^2)(1 + mu4^2 - 2/N_n) (theoretical)".to_string(),
        "nodal_length_w1_meta: length centered at sqrt(E_n)/(2 sqrt 2), scaled by sqrt(c_n E_n/N_n^2) (theoretical)"
            .to_string(),
        "reference law: M_eta with eta per frequency record".to_string(),
    ];
    Ok(finish(config, prepared, per_n.into_iter().flatten().collect(), standardization, started))
}

fn nodal_rows(config: &ExperimentConfig, p: &Prepared) -> Result<Vec<ResultRow>> {
    let (set, rec) = (&p.set, &p.record);
    let (n, big_n) = (rec.n, rec.n_points);
    let checks = if config.chaos_quadrature { config.quadrature_checks.min(config.replicates) } else { 0 };
    let exact_m = if grid_is_exact(rec.grid, n, 2) { rec.grid } else { exact_grid_size(n, 2) };
    let with_grad = config.gradients && exact_m == rec.grid;

    let grid_draws: Vec<(f64, Option<f64>)> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<(f64, Option<f64>)> {
            let c = sample_coefficients(set, config.seed, r)?;
            let check = (r as usize) < checks;
            let g = evaluate_field(&c, rec.grid, with_grad && check)?;
            let length = nodal_length(&g)?;
            let gap = if check {
                let quad = if g.has_gradient() {
                    nodal_fourth_chaos_quadrature(&g)?
                } else {
                    nodal_fourth_chaos_quadrature(&evaluate_field(&c, exact_m, true)?)?
                };
                let closed = nodal_fourth_chaos_closed(&c);
                Some(relative_gap(quad.value, closed))
            } else {
                None
            };
            Ok((length, gap))
        })
        .collect::<Result<_>>()?;
    let lengths: Vec<f64> = grid_draws.iter().map(|d| d.0).collect();
    let max_gap = grid_draws.iter().filter_map(|d| d.1).fold(0.0, f64::max);

    let closed = closed_form_draws(set, config.seed, config.closed_replicates(), nodal_fourth_chaos_closed)?;

    let mut rows = RowBuilder::new(set);
    let r = config.replicates;
    let mean_target = expected_nodal_length(set.frequency());
    let leading = nodal_variance_leading(n, big_n, rec.mu4);
    let lm = if r >= 2 { Some(moments(&lengths)?) } else { None };
    let mean = lm.map_or(lengths[0], |m| m.mean);
    rows.push(
        "nodal_length_mean",
        mean,
        Some(mean_target),
        lm.map(|m| m.mean_se),
        r,
        Some(relative_gap(mean, mean_target) <= NODAL_MEAN_REL_TOL),
        PROV_NODAL_MEAN,
    );

    let v4 = var_fourth_exact(n, big_n, rec.mu4);
    let mc = moments(&closed)?;
    rows.push(
        "nodal4_variance",
        mc.variance,
        Some(v4),
        Some(mc.variance_se),
        closed.len(),
        Some(within_se(mc.variance, v4, mc.variance_se)),
        PROV_NODAL4_VAR,
    );

    let v4c = var_fourth_closed_form(n, big_n, rec.mu4);
    rows.push(
        "nodal4_variance_closed_form",
        mc.variance,
        Some(v4c),
        Some(mc.variance_se),
        closed.len(),
        Some(within_se(mc.variance, v4c, mc.variance_se)),
        PROV_NODAL4_VAR_CLOSED,
    );

    if let Some(m) = lm {
        let ratio = m.variance / leading;
        let (lo, hi) = VARIANCE_RATIO_BAND;
        rows.push(
            "nodal_length_variance_ratio",
            ratio,
            Some(1.0),
            Some(m.variance_se / leading),
            r,
            Some((lo..=hi).contains(&ratio)),
            PROV_NODAL_LEADING,
        );
    }

    if checks > 0 {
        rows.push("nodal4_quadrature_gap", max_gap, Some(0.0), None, checks, Some(max_gap <= IDENTITY_REL_TOL), PROV_IDENTITY);
    }

    let reference = m_eta_reference(config.seed, n, rec.eta, config.reference_draws)?;
    let l4 = standardize(&closed, 0.0, v4c.sqrt())?;
    rows.info("nodal4_w1_meta", wasserstein1(&l4, &reference)?, closed.len());
    let lz = standardize(&lengths, mean_target, leading.sqrt())?;
    rows.info("nodal_length_w1_meta", wasserstein1(&lz, &reference)?, r);
    Ok(rows.rows)
}

/// Joint study of the standardized Leray and nodal chaos components.
pub fn run_joint_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    ensure_kind(config, ExperimentKind::Joint)?;
    let started = start_clock();
    let prepared = prepare(config)?;
    let per_n = map_frequencies(config, &prepared, |p| joint_rows(config, p))?;
    let standardization = vec![
        "Z~: Z_n[2]/sqrt(1/(4 pi N_n)) (theoretical)".to_string(),
        "L~: L_n[4] scaled by the closed-form variance E_n/(512 N_n^2)(1 + mu4^2 - 2/N_n) (theoretical)".to_string(),
        "W covariance compared with Sigma_n at the signed mu4 of each frequency".to_string(),
    ];
    Ok(finish(config, prepared, per_n.into_iter().flatten().collect(), standardization, started))
}

fn joint_rows(config: &ExperimentConfig, p: &Prepared) -> Result<Vec<ResultRow>> {
    let (set, rec) = (&p.set, &p.record);
    let big_n = rec.n_points;
    let reps = config.closed_replicates();
    let draws = closed_form_draws(set, config.seed, reps, |c| {
        (w_vector(c).w, leray_second_chaos(c), nodal_fourth_chaos_closed(c), psi(c))
    })?;

    let mut rows = RowBuilder::new(set);
    let sigma = sigma_n(rec.mu4);
    for i in 0..4 {
        for j in i..4 {
            let prod: Vec<f64> = draws.iter().map(|d| d.0[i] * d.0[j]).collect();
            let s = summarize(&prod)?;
            let target = sigma[(i, j)];
            rows.push(
                &format!("w_cov_{}{}", i + 1, j + 1),
                s.mean,
                Some(target),
                Some(s.std_error),
                reps,
                Some((s.mean - target).abs() <= SE_MULTIPLIER * s.std_error + 1e-12),
                PROV_W_COV,
            );
        }
    }

    let zt = standardize(&draws.iter().map(|d| d.1).collect::<Vec<_>>(), 0.0, leray_variance_second(big_n).sqrt())?;
    let lt = standardize(
        &draws.iter().map(|d| d.2).collect::<Vec<_>>(),
        0.0,
        var_fourth_closed_form(rec.n, big_n, rec.mu4).sqrt(),
    )?;
    let corr = correlation(&zt, &lt)?;
    let null_se = 1.0 / (reps as f64).sqrt();
    let asserted = big_n >= 16;
    rows.push(
        "corr_leray_nodal",
        corr,
        None,
        Some(null_se),
        reps,
        asserted.then(|| corr.abs() > SE_MULTIPLIER * null_se),
        PROV_DEPENDENCE,
    );
    let z2: Vec<f64> = zt.iter().map(|z| z * z).collect();
    rows.push("corr_leray_sq_nodal", correlation(&z2, &lt)?, None, Some(null_se), reps, None, PROV_DEPENDENCE);
    if config.replicates >= 3 {
        let full: Vec<(f64, f64)> = (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| -> Result<(f64, f64)> {
                let g = evaluate_field(&sample_coefficients(set, config.seed, r)?, rec.grid, false)?;
                Ok((leray_estimate(&g, rec.epsilon)?, nodal_length(&g)?))
            })
            .collect::<Result<_>>()?;
        let (a, b): (Vec<f64>, Vec<f64>) = full.into_iter().unzip();
        let se = 1.0 / (config.replicates as f64).sqrt();
        rows.push("corr_leray_nodal_full", correlation(&a, &b)?, None, Some(se), config.replicates, None, PROV_DEPENDENCE);
    }

    let limit = LimitGaussian::new(rec.eta)?;
    let mut rng = replicate_rng(config.seed, REFERENCE_STREAM_BASE + (1 << 40) + rec.n);
    let s = (1.0 + rec.eta * rec.eta).sqrt();
    let q: Vec<f64> = (0..config.reference_draws).map(|_| q_statistic(&limit.sample(&mut rng)) / s).collect();
    let (ml, mq) = (moments(&lt)?, moments(&q)?);
    let se_mean = (ml.mean_se.powi(2) + mq.mean_se.powi(2)).sqrt();
    rows.push("q_marginal_mean", ml.mean, Some(mq.mean), Some(se_mean), reps, Some(within_se(ml.mean, mq.mean, se_mean)), PROV_Q_MARGINAL);
    let se_var = (ml.variance_se.powi(2) + mq.variance_se.powi(2)).sqrt();
    rows.push(
        "q_marginal_variance",
        ml.variance,
        Some(mq.variance),
        Some(se_var),
        reps,
        Some(within_se(ml.variance, mq.variance, se_var)),
        PROV_Q_MARGINAL,
    );
    let third = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / x.len() as f64;
    rows.push("q_marginal_third_moment", third(&lt, ml.mean), Some(third(&q, mq.mean)), None, reps, None, PROV_Q_MARGINAL);
    let mp = moments(&draws.iter().map(|d| d.3).collect::<Vec<_>>())?;
    let psi_target = 10.0 / big_n as f64;
    rows.push(
        "psi_variance",
        mp.variance,
        Some(psi_target),
        Some(mp.variance_se),
        reps,
        Some(within_se(mp.variance, psi_target, mp.variance_se)),
        "fourth-moment remainder: Var psi_n = 10/N_n",
    );
    Ok(rows.rows)
}

/// A slope check against a one-sided rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAssessment {
    pub fit: RateFit,
    pub monotone: bool,
    pub threshold: f64,
    pub pass: bool,
}

/// PASS when `slope ≤ bound + margin` and distances decrease along the ladder.
pub fn assess_rate(points: &[(f64, f64)], bound: f64, margin: f64) -> Result<RateAssessment> {
    let fit = rate_slope(points)?;
    let monotone = points.windows(2).all(|w| w[1].1 < w[0].1);
    let threshold = bound + margin;
    Ok(RateAssessment {
        fit,
        monotone,
        threshold,
        pass: fit.slope <= threshold && monotone,
    })
}

/// Berry–Esseen slopes for the standardized second and fourth chaos components.
pub fn run_rate_study(config: &ExperimentConfig) -> Result<ResultTable> {
    ensure_kind(config, ExperimentKind::Rates)?;
    let started = start_clock();
    let prepared = prepare(config)?;
    let reps = config.closed_replicates();
    let distances = map_frequencies(config, &prepared, |p| -> Result<(f64, f64)> {
        let (set, rec) = (&p.set, &p.record);
        let draws = closed_form_draws(set, config.seed, reps, |c| (leray_second_chaos(c), nodal_fourth_chaos_closed(c)))?;
        let z = standardize(&draws.iter().map(|d| d.0).collect::<Vec<_>>(), 0.0, leray_variance_second(rec.n_points).sqrt())?;
        let l = standardize(
            &draws.iter().map(|d| d.1).collect::<Vec<_>>(),
            0.0,
            var_fourth_closed_form(rec.n, rec.n_points, rec.mu4).sqrt(),
        )?;
        let reference = m_eta_reference(config.seed, rec.n, rec.eta, config.reference_draws)?;
        Ok((wasserstein1_vs_standard_normal(&z)?, wasserstein1(&l, &reference)?))
    })?;

    let mut all = Vec::new();
    for (p, &(dz, dl)) in prepared.iter().zip(&distances) {
        let mut rows = RowBuilder::new(&p.set);
        rows.info("rate_leray_w1", dz, reps);
        rows.info("rate_nodal4_w1", dl, reps);
        all.extend(rows.rows);
    }
    let last = &prepared[prepared.len() - 1];
    let pts = |k: usize| -> Vec<(f64, f64)> {
        prepared
            .iter()
            .zip(&distances)
            .map(|(p, d)| (p.record.n_points as f64, if k == 0 { d.0 } else { d.1 }))
            .collect()
    };
    let mut rows = RowBuilder::new(&last.set);
    for (k, name, bound, margin, prov) in [
        (0, "rate_leray", LERAY_RATE_BOUND, LERAY_RATE_MARGIN, PROV_LERAY_RATE),
        (1, "rate_nodal4", NODAL_RATE_BOUND, NODAL_RATE_MARGIN, PROV_NODAL_RATE),
    ] {
        let a = assess_rate(&pts(k), bound, margin)?;
        rows.push(&format!("{name}_slope"), a.fit.slope, Some(bound), None, reps, Some(a.pass), prov);
        rows.info(&format!("{name}_residual"), a.fit.residual, reps);
        rows.info(&format!("{name}_monotone"), if a.monotone { 1.0 } else { 0.0 }, reps);
    }
    all.extend(rows.rows);
    let standardization = vec![
        "rate_leray_w1: Z_n[2]/sqrt(1/(4 pi N_n)) against N(0,1) by quantile coupling".to_string(),
        "rate_nodal4_w1: L_n[4] scaled by the closed-form variance, against an M_eta reference sample, eta = |mu4| per frequency".to_string(),
        "slope rows are reported at the largest ladder frequency".to_string(),
    ];
    Ok(finish(config, prepared, all, standardization, started))
}

/// Dispatch on `config.kind`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    match config.kind {
        ExperimentKind::Leray => run_leray_experiment(config),
        ExperimentKind::Nodal => run_nodal_experiment(config),
        ExperimentKind::Joint => run_joint_experiment(config),
        ExperimentKind::Rates => run_rate_study(config),
    }
}

/// Files produced by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

/// Serialize rows to CSV bytes.
pub fn rows_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_result_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn replace_atomically(dir: &Path, target: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    if target.exists() {
        let mut backup = target.as_os_str().to_owned();
        backup.push(".bak");
        fs::rename(target, PathBuf::from(backup))?;
    }
    tmp.persist(target).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Write `<stem>.csv` and `<stem>.manifest.json` under `dir`.
///
/// Each file is staged in a temporary file and renamed into place; an existing
/// file is kept as `<name>.bak`. A failure leaves no partial CSV behind.
pub fn write_outputs(table: &ResultTable, dir: &Path, stem: &str) -> Result<OutputPaths> {
    let csv_bytes = rows_to_csv(&table.rows)?;
    let manifest_bytes = serde_json::to_vec_pretty(&table.manifest)?;
    fs::create_dir_all(dir)?;
    let paths = OutputPaths {
        csv: dir.join(format!("{stem}.csv")),
        manifest: dir.join(format!("{stem}.manifest.json")),
    };
    replace_atomically(dir, &paths.csv, &csv_bytes)?;
    replace_atomically(dir, &paths.manifest, &manifest_bytes)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, freqs: Vec<u64>) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind, freqs, 20, 7);
        c.closed_form_replicates = Some(2000);
        c.reference_draws = 20_000;
        c.quadrature_checks = 5;
        c
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = small(ExperimentKind::Leray, vec![25]);
        c.grid = GridSpec::Fixed(512);
        c.epsilon = EpsilonPolicy::Fixed(0.05);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        let auto: ExperimentConfig =
            serde_json::from_str(r#"{"kind":"nodal","frequencies":[5],"grid":"auto","replicates":3,"seed":1,"epsilon":"auto"}"#).unwrap();
        assert_eq!(auto.grid, GridSpec::Auto);
        assert_eq!(auto.grid.resolve(65), 67);
        assert_eq!(auto.grid.resolve(5) % 2, 1);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kind":"nodal","frequencies":[5],"grid":"big","replicates":3,"seed":1}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = small(ExperimentKind::Leray, vec![25]);
        c.replicates = 0;
        assert!(matches!(run_leray_experiment(&c), Err(Error::Config(_))));
        let c = small(ExperimentKind::Leray, vec![3]);
        assert!(matches!(c.validate(), Err(Error::NotInS(3))));
        let mut c = small(ExperimentKind::Nodal, vec![5]);
        c.gradients = false;
        assert!(matches!(run_nodal_experiment(&c), Err(Error::MissingGradient)));
        let c = small(ExperimentKind::Rates, vec![5, 65]);
        assert!(c.validate().is_err());
        let c = small(ExperimentKind::Rates, vec![5, 10, 65]);
        assert!(c.validate().is_err(), "5 and 10 share N = 8");
        let mut c = small(ExperimentKind::Leray, vec![5]);
        c.epsilon = EpsilonPolicy::Fixed(0.0);
        assert!(c.validate().is_err());
        let c = small(ExperimentKind::Nodal, vec![5]);
        assert!(matches!(run_leray_experiment(&c), Err(Error::Config(_))));
    }

    #[test]
    fn leray_rows_and_targets() {
        let t = run_leray_experiment(&small(ExperimentKind::Leray, vec![5])).unwrap();
        let mean = t.find(5, "leray_mean").unwrap();
        assert!((mean.target.unwrap() - 0.398942).abs() < 1e-6);
        assert!(mean.provenance.contains("1/sqrt(2 pi)"));
        let var = t.find(5, "leray2_variance").unwrap();
        assert!((var.target.unwrap() - 1.0 / (32.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert_eq!(var.replicates, 2000);
        assert_eq!(t.find(5, "leray2_quadrature_gap").unwrap().pass, Some(true));
        assert_eq!(t.manifest.seed, 7);
        assert_eq!(t.manifest.frequencies[0].grid, 19);
    }

    #[test]
    fn standard_error_is_sd_over_sqrt_r() {
        let c = small(ExperimentKind::Leray, vec![5]);
        let t = run_leray_experiment(&c).unwrap();
        let set = Arc::new(enumerate_lattice_points(5).unwrap());
        let rec = &t.manifest.frequencies[0];
        let est: Vec<f64> = (0..c.replicates as u64)
            .map(|r| {
                let co = sample_coefficients(&set, c.seed, r).unwrap();
                leray_estimate(&evaluate_field(&co, rec.grid, false).unwrap(), rec.epsilon).unwrap()
            })
            .collect();
        let s = summarize(&est).unwrap();
        let row = t.find(5, "leray_mean").unwrap();
        assert_eq!(row.estimate, s.mean);
        assert!((row.std_error.unwrap() - s.variance.sqrt() / (c.replicates as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn nodal_rows_and_targets() {
        let t = run_nodal_experiment(&small(ExperimentKind::Nodal, vec![5])).unwrap();
        let mean = t.find(5, "nodal_length_mean").unwrap();
        assert!((mean.target.unwrap() - 4.967).abs() < 1e-3);
        let v = t.find(5, "nodal4_variance").unwrap();
        assert!((v.target.unwrap() - 0.03209).abs() < 5e-5);
        assert_eq!(t.find(5, "nodal4_quadrature_gap").unwrap().pass, Some(true));
        assert!(t.find(5, "nodal4_w1_meta").is_some());
    }

    #[test]
    fn joint_rows_and_targets() {
        let mut c = small(ExperimentKind::Joint, vec![65]);
        c.closed_form_replicates = Some(20_000);
        let t = run_joint_experiment(&c).unwrap();
        assert_eq!(t.find(65, "w_cov_11").unwrap().target, Some(1.0));
        assert_eq!(t.find(65, "w_cov_12").unwrap().target, Some(0.5));
        assert_eq!(t.find(65, "w_cov_14").unwrap().target, Some(0.0));
        assert!(t.find(65, "corr_leray_nodal").unwrap().pass.is_some());
        let mut c = small(ExperimentKind::Joint, vec![5]);
        c.eta = Some(0.0);
        let t = run_joint_experiment(&c).unwrap();
        assert!(t.find(5, "corr_leray_nodal").unwrap().pass.is_none());
        assert_eq!(t.manifest.frequencies[0].eta, 0.0);
    }

    #[test]
    fn synthetic_rate_assessment() {
        let pts: Vec<(f64, f64)> = [8.0f64, 16.0, 24.0, 32.0].iter().map(|&n| (n, n.powf(-0.5))).collect();
        let a = assess_rate(&pts, LERAY_RATE_BOUND, LERAY_RATE_MARGIN).unwrap();
        assert!((a.fit.slope + 0.5).abs() < 1e-12 && a.pass && a.monotone);
        let flat: Vec<(f64, f64)> = pts.iter().map(|&(n, _)| (n, 0.1)).collect();
        assert!(!assess_rate(&flat, LERAY_RATE_BOUND, LERAY_RATE_MARGIN).unwrap().pass);
        assert!(assess_rate(&pts[..2], -0.5, 0.2).is_err());
    }

    #[test]
    fn outputs_round_trip_with_backup() {
        let t = run_joint_experiment(&small(ExperimentKind::Joint, vec![5])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_outputs(&t, dir.path(), "joint").unwrap();
        assert_eq!(read_result_csv(&paths.csv).unwrap(), t.rows);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&paths.manifest).unwrap()).unwrap();
        assert_eq!(manifest.seed, manifest.config.seed);
        assert_eq!(manifest, t.manifest);
        write_outputs(&t, dir.path(), "joint").unwrap();
        assert!(dir.path().join("joint.csv.bak").exists());
        assert!(dir.path().join("joint.manifest.json.bak").exists());
    }

    #[test]
    fn unwritable_directory_leaves_nothing() {
        let t = run_joint_experiment(&small(ExperimentKind::Joint, vec![5])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(write_outputs(&t, &blocker.join("sub"), "joint").is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
