//! Replicated convergence studies.
//!
//! For every ensemble size on the grid, independent replicates of the coupled
//! run are reduced to per-step summaries ([`ReplicateTrace`]). The estimators
//! below turn those into error estimates with standard errors, and
//! [`fit_rate`] fits `log(error)` against `log(N)`.
//!
//! Member-based estimators look at member 1 (the first column) only. Members
//! are identically distributed, and using one per replicate keeps the
//! replicate terms independent.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enkf::{CoupledFilter, CoupledState};
use crate::ensemble::{sample_cov, sample_mean};
use crate::error::{Error, Result};
use crate::format::{fmt_f64, fmt_opt};
use crate::kf::KfTrajectory;
use crate::model::LinearModel;

/// Moment-monitor flag threshold: max over the grid vs min over the grid.
pub const MOMENT_RATIO_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    MemberLp,
    MeanErr,
    CovErr,
    GainErr,
    MomentMonitor,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::MemberLp,
        Metric::MeanErr,
        Metric::CovErr,
        Metric::GainErr,
        Metric::MomentMonitor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MemberLp => "MEMBER_LP",
            Metric::MeanErr => "MEAN_ERR",
            Metric::CovErr => "COV_ERR",
            Metric::GainErr => "GAIN_ERR",
            Metric::MomentMonitor => "MOMENT_MONITOR",
        }
    }

    fn uses_moment_order(self) -> bool {
        matches!(self, Metric::MemberLp | Metric::MomentMonitor)
    }
}

/// A metric together with its moment order where one applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricKey {
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl MetricKey {
    pub fn new(metric: Metric) -> Self {
        Self { metric, p: None }
    }

    pub fn with_p(metric: Metric, p: f64) -> Self {
        Self { metric, p: Some(p) }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.p {
            Some(p) => write!(f, "{}[p={}]", self.metric.name(), p),
            None => f.write_str(self.metric.name()),
        }
    }
}

/// Point estimate and its standard error across replicates. The standard
/// error is `None` when fewer than two replicates contributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: Option<f64>,
}

/// What one replicate contributes at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub enkf_member: DVector<f64>,
    pub reference_member: DVector<f64>,
    pub enkf_mean: DVector<f64>,
    pub enkf_cov: DMatrix<f64>,
    pub ensemble_gain: Option<DMatrix<f64>>,
    pub exact_gain: Option<DMatrix<f64>>,
}

impl StepSummary {
    pub fn from_state(state: &CoupledState) -> Self {
        Self {
            enkf_member: state.enkf.member(0),
            reference_member: state.reference.member(0),
            enkf_mean: sample_mean(&state.enkf),
            enkf_cov: sample_cov(&state.enkf),
            ensemble_gain: state.ensemble_gain.as_ref().map(|g| g.matrix().clone()),
            exact_gain: state.exact_gain.as_ref().map(|g| g.matrix().clone()),
        }
    }
}

/// Per-step summaries of one coupled run, `k = 0..=K`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicateTrace {
    pub steps: Vec<StepSummary>,
}

impl ReplicateTrace {
    pub fn from_states(states: &[CoupledState]) -> Self {
        Self {
            steps: states.iter().map(StepSummary::from_state).collect(),
        }
    }

    /// Runs one replicate without keeping the ensembles around.
    pub fn simulate(filter: &CoupledFilter<'_>, replicate: u64, n: usize) -> Result<Self> {
        let mut trace = ReplicateTrace::default();
        filter.run_with(replicate, n, |s| {
            trace.steps.push(StepSummary::from_state(s));
            Ok(())
        })?;
        Ok(trace)
    }

    fn at(&self, k: usize) -> Result<&StepSummary> {
        self.steps.get(k).ok_or(Error::InvalidStep {
            index: k,
            steps: self.steps.len().saturating_sub(1),
        })
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn lp_estimate(norms: &[f64], p: f64) -> Result<Estimate> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Estimator(format!("moment order p={p} must be >= 1")));
    }
    if norms.len() < 2 {
        return Err(Error::Estimator(format!("need at least 2 replicates, got {}", norms.len())));
    }
    let powers: Vec<f64> = norms.iter().map(|e| e.powf(p)).collect();
    let (m, se_m) = mean_and_stderr(&powers);
    let value = m.powf(1.0 / p);
    // delta method for m^(1/p)
    let stderr = se_m.map(|se| if m > 0.0 { se * m.powf(1.0 / p - 1.0) / p } else { 0.0 });
    Ok(Estimate { value, stderr })
}

/// `(E ||X_N1^(k) - U_N1^(k)||^p)^{1/p}` over replicates.
pub fn member_lp_error(runs: &[ReplicateTrace], k: usize, p: f64) -> Result<Estimate> {
    let norms = runs
        .iter()
        .map(|r| r.at(k).map(|s| (&s.enkf_member - &s.reference_member).norm()))
        .collect::<Result<Vec<_>>>()?;
    lp_estimate(&norms, p)
}

/// Replicate means of `||xbar_N^(k) - u^(k)||` and `||C(X_N^(k)) - Q^(k)||_F`.
pub fn mean_cov_error(runs: &[ReplicateTrace], kf: &KfTrajectory, k: usize) -> Result<(Estimate, Estimate)> {
    if runs.is_empty() {
        return Err(Error::Estimator("no replicates".into()));
    }
    let truth = kf.analysis(k)?;
    let mut mean_errs = Vec::with_capacity(runs.len());
    let mut cov_errs = Vec::with_capacity(runs.len());
    for r in runs {
        let s = r.at(k)?;
        mean_errs.push((&s.enkf_mean - &truth.mean).norm());
        cov_errs.push((&s.enkf_cov - &truth.cov).norm());
    }
    let (mv, ms) = mean_and_stderr(&mean_errs);
    let (cv, cs) = mean_and_stderr(&cov_errs);
    Ok((Estimate { value: mv, stderr: ms }, Estimate { value: cv, stderr: cs }))
}

/// Replicate mean of `||K_N^(k) - L^(k)||_F`; undefined at `k = 0`.
pub fn gain_error(runs: &[ReplicateTrace], k: usize) -> Result<Estimate> {
    if k == 0 {
        return Err(Error::Estimator("no gain at step 0".into()));
    }
    if runs.is_empty() {
        return Err(Error::Estimator("no replicates".into()));
    }
    let errs = runs
        .iter()
        .map(|r| {
            let s = r.at(k)?;
            match (&s.ensemble_gain, &s.exact_gain) {
                (Some(kn), Some(l)) => Ok((kn - l).norm()),
                _ => Err(Error::Estimator(format!("missing gains at step {k}"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (value, stderr) = mean_and_stderr(&errs);
    Ok(Estimate { value, stderr })
}

/// `(E ||X_N1^(k)||^p)^{1/p}` for one ensemble size.
pub fn member_moment(runs: &[ReplicateTrace], k: usize, p: f64) -> Result<Estimate> {
    let norms = runs
        .iter()
        .map(|r| r.at(k).map(|s| s.enkf_member.norm()))
        .collect::<Result<Vec<_>>>()?;
    lp_estimate(&norms, p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTable {
    pub k: usize,
    pub p: f64,
    pub rows: Vec<MomentRow>,
    pub max_over_min: f64,
    /// Raised when the largest estimate exceeds [`MOMENT_RATIO_LIMIT`] times
    /// the smallest.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub n: usize,
    pub estimate: Estimate,
}

/// Moment estimates across the grid with the non-explosion flag.
pub fn moment_monitor(grid: &[(usize, &[ReplicateTrace])], k: usize, p: f64) -> Result<MomentTable> {
    let rows = grid
        .iter()
        .map(|&(n, runs)| member_moment(runs, k, p).map(|estimate| MomentRow { n, estimate }))
        .collect::<Result<Vec<_>>>()?;
    let max = rows.iter().map(|r| r.estimate.value).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.estimate.value).fold(f64::INFINITY, f64::min);
    let max_over_min = if rows.is_empty() {
        1.0
    } else if min > 0.0 {
        max / min
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(MomentTable {
        k,
        p,
        rows,
        max_over_min,
        flagged: max_over_min > MOMENT_RATIO_LIMIT,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_residual: f64,
    /// Points used in the fit.
    pub points: usize,
    /// Nonpositive-error points left out of the fit.
    pub dropped: usize,
}

/// Ordinary least squares of `log(error)` on `log(N)`. Nonpositive errors
/// are dropped (and counted); at least three usable points are required.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|&(n, e)| (n.ln(), e.ln()))
        .collect();
    let dropped = points.len() - usable.len();
    if usable.len() < 3 {
        return Err(Error::Estimator(format!(
            "rate fit needs at least 3 positive points, got {} ({} dropped)",
            usable.len(),
            dropped
        )));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Estimator("rate fit needs distinct N values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = usable
        .iter()
        .map(|&(x, y)| (y - intercept - slope * x).abs())
        .fold(0.0, f64::max);
    Ok(RateFit {
        slope,
        intercept,
        max_residual,
        points: usable.len(),
        dropped,
    })
}

/// Study parameters as read from a study file. The seed is optional here
/// because the command line may supply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(rename = "N_grid", alias = "n_grid")]
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(default = "default_p_list")]
    pub p_list: Vec<f64>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
}

fn default_p_list() -> Vec<f64> {
    vec![2.0, 4.0]
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

impl StudySpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            context: "study".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub model: LinearModel,
    pub seed: u64,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub p_list: Vec<f64>,
    pub metrics: Vec<Metric>,
}

impl StudyConfig {
    pub fn new(model: LinearModel, spec: StudySpec, seed: u64) -> Self {
        Self {
            model,
            seed,
            n_grid: spec.n_grid,
            replicates: spec.replicates,
            p_list: spec.p_list,
            metrics: spec.metrics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::InvalidConfig("N_grid is empty".into()));
        }
        if self.n_grid[0] < 2 {
            return Err(Error::InvalidConfig("N_grid entries must be >= 2".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("N_grid must be strictly increasing".into()));
        }
        if self.replicates < 2 {
            return Err(Error::InvalidConfig("replicates must be >= 2".into()));
        }
        if self.p_list.iter().any(|p| !(*p >= 1.0 && p.is_finite())) {
            return Err(Error::InvalidConfig("moment orders must be finite and >= 1".into()));
        }
        crate::model::validate_model(&self.model).map_err(Error::InvalidModel)
    }

    fn has(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }

    /// SHA-256 over the canonical serialization of the model and parameters.
    pub fn hash(&self) -> String {
        let spec = StudySpec {
            seed: Some(self.seed),
            n_grid: self.n_grid.clone(),
            replicates: self.replicates,
            p_list: self.p_list.clone(),
            metrics: self.metrics.clone(),
        };
        let mut h = Sha256::new();
        h.update(self.model.to_json().as_bytes());
        h.update(crate::format::to_canonical_json(&spec).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    #[serde(flatten)]
    pub key: MetricKey,
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub estimate: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEntry {
    #[serde(flatten)]
    pub key: MetricKey,
    pub k: usize,
    #[serde(flatten)]
    pub fit: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    #[serde(rename = "N_grid")]
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub p_list: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub steps: usize,
    /// Failed replicates per ensemble size.
    pub failed_replicates: BTreeMap<usize, usize>,
    pub wall_time_s: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub metadata: ReportMetadata,
    pub entries: Vec<ReportEntry>,
    pub slopes: Vec<SlopeEntry>,
    pub moment_monitor: Vec<MomentTable>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    /// Estimates for one metric and step, in grid order.
    pub fn series(&self, key: MetricKey, k: usize) -> Vec<&ReportEntry> {
        self.entries.iter().filter(|e| e.key == key && e.k == k).collect()
    }

    pub fn slope(&self, key: MetricKey, k: usize) -> Option<&RateFit> {
        self.slopes.iter().find(|s| s.key == key && s.k == k).map(|s| &s.fit)
    }

    pub fn to_json(&self) -> String {
        crate::format::to_canonical_json(self)
    }

    /// `metric,k,N,estimate,stderr`, one row per metric, step and size.
    pub fn entries_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "k", "N", "estimate", "stderr"]).unwrap();
        for e in &self.entries {
            w.write_record([
                e.key.to_string(),
                e.k.to_string(),
                e.n.to_string(),
                fmt_f64(e.estimate),
                fmt_opt(e.stderr),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// `metric,k,slope,intercept,max_residual`.
    pub fn slopes_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "k", "slope", "intercept", "max_residual"]).unwrap();
        for s in &self.slopes {
            w.write_record([
                s.key.to_string(),
                s.k.to_string(),
                fmt_f64(s.fit.slope),
                fmt_f64(s.fit.intercept),
                fmt_f64(s.fit.max_residual),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub fn run_study(config: &StudyConfig) -> Result<ConvergenceReport> {
    run_study_with_workers(config, None)
}

/// Runs the study with at most `workers` threads. Results do not depend on
/// the worker count.
pub fn run_study_with_workers(config: &StudyConfig, workers: Option<usize>) -> Result<ConvergenceReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_study_inner(config))
}

fn run_study_inner(config: &StudyConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let started = Instant::now();
    let filter = CoupledFilter::new(&config.model, config.seed)?;
    let steps = config.model.num_steps();

    let mut failed = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut grid_runs: Vec<(usize, Vec<ReplicateTrace>)> = Vec::new();
    for &n in &config.n_grid {
        let results: Vec<Result<ReplicateTrace>> = (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| ReplicateTrace::simulate(&filter, r, n))
            .collect();
        let mut ok = Vec::with_capacity(results.len());
        let mut failures = 0;
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(t) => ok.push(t),
                Err(e) => {
                    failures += 1;
                    warnings.push(format!("N={n} replicate {r} failed: {e}"));
                }
            }
        }
        failed.insert(n, failures);
        grid_runs.push((n, ok));
    }

    let mut keys = Vec::new();
    for &m in &config.metrics {
        if m == Metric::MomentMonitor {
            continue;
        }
        if m.uses_moment_order() {
            keys.extend(config.p_list.iter().map(|&p| MetricKey::with_p(m, p)));
        } else {
            keys.push(MetricKey::new(m));
        }
    }

    let mut entries = Vec::new();
    for key in &keys {
        for k in 0..=steps {
            if key.metric == Metric::GainErr && k == 0 {
                continue;
            }
            for (n, runs) in &grid_runs {
                let est = match key.metric {
                    Metric::MemberLp => member_lp_error(runs, k, key.p.unwrap_or(2.0)),
                    Metric::MeanErr => mean_cov_error(runs, filter.kf(), k).map(|(m, _)| m),
                    Metric::CovErr => mean_cov_error(runs, filter.kf(), k).map(|(_, c)| c),
                    Metric::GainErr => gain_error(runs, k),
                    Metric::MomentMonitor => unreachable!(),
                };
                match est {
                    Ok(e) => entries.push(ReportEntry {
                        key: *key,
                        k,
                        n: *n,
                        estimate: e.value,
                        stderr: e.stderr,
                    }),
                    Err(e) => warnings.push(format!("{key} k={k} N={n}: {e}")),
                }
            }
        }
    }

    let mut slopes = Vec::new();
    for key in &keys {
        for k in 0..=steps {
            let points: Vec<(f64, f64)> = entries
                .iter()
                .filter(|e| e.key == *key && e.k == k)
                .map(|e| (e.n as f64, e.estimate))
                .collect();
            if points.is_empty() {
                continue;
            }
            match fit_rate(&points) {
                Ok(fit) => {
                    if fit.dropped > 0 {
                        warnings.push(format!("{key} k={k}: {} zero-error points dropped from fit", fit.dropped));
                    }
                    slopes.push(SlopeEntry { key: *key, k, fit });
                }
                Err(e) => warnings.push(format!("{key} k={k}: not fitted: {e}")),
            }
        }
    }

    let mut moment_tables = Vec::new();
    if config.has(Metric::MomentMonitor) {
        let grid: Vec<(usize, &[ReplicateTrace])> = grid_runs.iter().map(|(n, r)| (*n, r.as_slice())).collect();
        for &p in &config.p_list {
            let key = MetricKey::with_p(Metric::MomentMonitor, p);
            for k in 0..=steps {
                match moment_monitor(&grid, k, p) {
                    Ok(table) => {
                        if table.flagged {
                            warnings.push(format!(
                                "{key} k={k}: moment estimates vary by factor {:.3} across the grid",
                                table.max_over_min
                            ));
                        }
                        for row in &table.rows {
                            entries.push(ReportEntry {
                                key,
                                k,
                                n: row.n,
                                estimate: row.estimate.value,
                                stderr: row.estimate.stderr,
                            });
                        }
                        moment_tables.push(table);
                    }
                    Err(e) => warnings.push(format!("{key} k={k}: {e}")),
                }
            }
        }
    }

    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(ConvergenceReport {
        metadata: ReportMetadata {
            seed: config.seed,
            config_hash: config.hash(),
            n_grid: config.n_grid.clone(),
            replicates: config.replicates,
            p_list: config.p_list.clone(),
            metrics: config.metrics.clone(),
            steps,
            failed_replicates: failed,
            wall_time_s: started.elapsed().as_secs_f64(),
            timestamp,
        },
        entries,
        slopes,
        moment_monitor: moment_tables,
        warnings,
    })
}
