//! File formats: observation records, run configurations, and experiment
//! reports.
//!
//! Records travel as CSV with a `t,x1,…,xN` header, one row per observation
//! time, every value printed as `{:.16e}` (17 significant digits — enough
//! for a bit-exact `f64` round trip), `.` decimal separator, LF line
//! endings. A JSON sidecar next to each record carries the generating
//! design and seed. Identical inputs produce byte-identical CSV; anything
//! non-reproducible (timestamps, wall-clock runtimes) is quarantined in the
//! sidecar.
//!
//! Configurations are JSON with a strict schema: unknown keys are rejected
//! so that a typo cannot silently disable an option.

use crate::simulate::ObservationSet;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Library version stamped into result provenance.
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    Json { path: PathBuf, err: serde_json::Error },
    Format { path: PathBuf, line: usize, what: String },
    Config { what: String },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "{e}"),
            IoError::Json { path, err } => write!(f, "{}: {err}", path.display()),
            IoError::Format { path, line, what } => {
                write!(f, "{}:{line}: {what}", path.display())
            }
            IoError::Config { what } => write!(f, "invalid configuration: {what}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

/// Format one value the way every file in this crate does: 17 significant
/// digits, scientific notation, `.` decimal point.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Observation records
// ---------------------------------------------------------------------------

/// Write `obs` as CSV: header `t,x1,…,xN`, then one row per state.
pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<(), IoError> {
    let mut out = String::new();
    out.push('t');
    for k in 1..=obs.dim {
        out.push_str(&format!(",x{k}"));
    }
    out.push('\n');
    for i in 0..obs.n_states() {
        out.push_str(&fmt_f64(obs.time(i)));
        for v in obs.state(i) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a record written by [`write_observations`]. The time column must be
/// uniformly spaced; its spacing becomes `dt`.
pub fn read_observations(path: &Path) -> Result<ObservationSet, IoError> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, what: String| IoError::Format { path: path.to_path_buf(), line, what };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.is_empty() || cols[0] != "t" || cols.len() < 2 {
        return Err(bad(1, format!("expected header t,x1,…  got '{header}'")));
    }
    for (k, c) in cols[1..].iter().enumerate() {
        if *c != format!("x{}", k + 1) {
            return Err(bad(1, format!("expected column x{}, got '{c}'", k + 1)));
        }
    }
    let dim = cols.len() - 1;

    let mut times = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let t: f64 = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| bad(idx + 1, format!("bad time value: {e}")))?;
        times.push(t);
        let mut count = 0;
        for field in fields {
            let v: f64 =
                field.parse().map_err(|e| bad(idx + 1, format!("bad state value: {e}")))?;
            data.push(v);
            count += 1;
        }
        if count != dim {
            return Err(bad(idx + 1, format!("expected {dim} state columns, got {count}")));
        }
    }
    if times.len() < 2 {
        return Err(bad(times.len() + 1, "need at least two observation rows".into()));
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err(bad(2, "time column must increase".into()));
    }
    for (i, w) in times.windows(2).enumerate() {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-9 * (1.0 + dt.abs()) {
            return Err(bad(i + 3, format!("non-uniform spacing: {step} vs {dt}")));
        }
    }
    Ok(ObservationSet::new(dt, dim, data))
}

/// Provenance sidecar written next to simulated records and reports. This is
/// the only file allowed to differ between identical runs (timestamp,
/// wall-clock runtimes live here).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub model_id: String,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub delta: f64,
    pub n_steps: usize,
    pub fine_substeps: usize,
    pub burn_in: f64,
    pub library_version: String,
    pub created_unix_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtimes_s: Option<Vec<f64>>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|err| IoError::Json { path: path.to_path_buf(), err })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|err| IoError::Json { path: path.to_path_buf(), err })
}

// ---------------------------------------------------------------------------
// Run configurations
// ---------------------------------------------------------------------------

/// Sampling design: observation spacing `delta` over horizon `t_horizon`,
/// with the generating fine step `fine_delta` (defaults to a scheme-accuracy
/// heuristic when omitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub delta: f64,
    pub t_horizon: f64,
    #[serde(default)]
    pub fine_delta: Option<f64>,
    #[serde(default)]
    pub burn_in: Option<f64>,
}

impl DesignConfig {
    pub fn n_steps(&self) -> usize {
        (self.t_horizon / self.delta).round() as usize
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if !(self.delta > 0.0) {
            return Err(IoError::Config { what: "design.delta must be positive".into() });
        }
        if self.n_steps() < 1 {
            return Err(IoError::Config {
                what: "design.t_horizon must cover at least one step".into(),
            });
        }
        if let Some(fd) = self.fine_delta {
            if !(fd > 0.0 && fd <= self.delta) {
                return Err(IoError::Config {
                    what: "design.fine_delta must lie in (0, delta]".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_design(&self) -> crate::simulate::ObservationDesign {
        let mut d = crate::simulate::ObservationDesign::new(self.n_steps(), self.delta);
        if let Some(fd) = self.fine_delta {
            d = d.with_substeps((self.delta / fd).round().max(1.0) as usize);
        }
        if let Some(b) = self.burn_in {
            d = d.with_burn_in(b);
        }
        d
    }
}

/// First-order optimizer settings (JSON `{"kind": "adam", …}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    #[serde(default = "default_adam_step")]
    pub step: f64,
    #[serde(default = "default_adam_iters")]
    pub iters: usize,
}

fn default_adam_step() -> f64 {
    0.1
}

fn default_adam_iters() -> usize {
    8000
}

/// Derivative-free optimizer settings (JSON `{"kind": "nelder-mead", …}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NelderMeadSettings {
    #[serde(default = "default_nm_tol")]
    pub tol: f64,
    #[serde(default = "default_nm_max_evals")]
    pub max_evals: usize,
}

fn default_nm_tol() -> f64 {
    1e-7
}

fn default_nm_max_evals() -> usize {
    4000
}

/// Unknown keys inside either variant are rejected by the settings structs
/// themselves (the tagged-enum wrapper cannot carry `deny_unknown_fields`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Adam(AdamSettings),
    NelderMead(NelderMeadSettings),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamSettings {
            step: default_adam_step(),
            iters: default_adam_iters(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    /// All coordinates observed; first-order contrast minimization.
    Complete,
    /// Only the first (smoothest) coordinate observed; marginal-likelihood
    /// maximization via the filtering recursion (neural-oscillator model).
    PartialFhn,
}

/// Box bounds for the parameter search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Full replication-experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_id: String,
    pub true_theta: Vec<f64>,
    /// Search box; the model's default box when omitted.
    #[serde(default)]
    pub theta_box: Option<BoxBounds>,
    pub design: DesignConfig,
    pub p_list: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub mode: ObservationMode,
    /// Optimization start; defaults to the box midpoint when omitted.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

/// Configuration for the `simulate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model_id: String,
    pub theta: Vec<f64>,
    pub design: DesignConfig,
    #[serde(default = "one")]
    pub replications: usize,
    pub base_seed: u64,
}

fn one() -> usize {
    1
}

/// Configuration for the `estimate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub model_id: String,
    /// Path to the observation CSV.
    pub data: PathBuf,
    pub p: usize,
    #[serde(default)]
    pub theta_box: Option<BoxBounds>,
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_mode_complete")]
    pub mode: ObservationMode,
}

fn default_mode_complete() -> ObservationMode {
    ObservationMode::Complete
}

/// Configuration for the `precision` command: simulate an ergodic sample
/// and report Γ(θ) with predicted estimator SDs at the design size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionConfig {
    pub model_id: String,
    pub theta: Vec<f64>,
    pub design: DesignConfig,
    pub seed: u64,
}

/// Configuration for the `validate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub model_id: String,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default = "default_validate_points")]
    pub n_points: usize,
    #[serde(default = "default_validate_seed")]
    pub seed: u64,
}

fn default_validate_points() -> usize {
    100
}

fn default_validate_seed() -> u64 {
    1
}

// ---------------------------------------------------------------------------
// Experiment reports
// ---------------------------------------------------------------------------

/// One replication × expansion-order estimation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub p: usize,
    pub seed: u64,
    /// "ok" or a short failure description.
    pub status: String,
    pub converged: bool,
    pub theta_hat: Vec<f64>,
    /// θ̂ − θ†.
    pub error: Vec<f64>,
    /// Wall-clock seconds (sidecar material: excluded from the CSV).
    pub runtime_s: f64,
}

impl ReplicationRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-(order, parameter) summary statistics over the successful rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub p: usize,
    pub param: String,
    pub mean_error: f64,
    pub sd_error: f64,
    pub n_effective: usize,
}

/// Everything a replication experiment produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub param_names: Vec<String>,
    pub rows: Vec<ReplicationRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    /// Recompute summary statistics from the rows (mean and sample SD of
    /// θ̂ − θ† per order and parameter, over rows with status "ok").
    pub fn summarize(param_names: &[String], rows: &[ReplicationRow]) -> Vec<SummaryRow> {
        let mut orders: Vec<usize> = rows.iter().map(|r| r.p).collect();
        orders.sort_unstable();
        orders.dedup();
        let mut out = Vec::new();
        for &p in &orders {
            let ok: Vec<&ReplicationRow> =
                rows.iter().filter(|r| r.p == p && r.ok()).collect();
            for (k, name) in param_names.iter().enumerate() {
                let n = ok.len();
                let (mean, sd) = if n == 0 {
                    (f64::NAN, f64::NAN)
                } else {
                    let mean = ok.iter().map(|r| r.error[k]).sum::<f64>() / n as f64;
                    let sd = if n > 1 {
                        let ss = ok
                            .iter()
                            .map(|r| {
                                let d = r.error[k] - mean;
                                d * d
                            })
                            .sum::<f64>();
                        (ss / (n - 1) as f64).sqrt()
                    } else {
                        f64::NAN
                    };
                    (mean, sd)
                };
                out.push(SummaryRow {
                    p,
                    param: name.clone(),
                    mean_error: mean,
                    sd_error: sd,
                    n_effective: n,
                });
            }
        }
        out
    }

    /// Deterministic per-replication CSV (no runtimes — those live in the
    /// sidecar so identical configs reproduce this file byte for byte).
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("rep,p,seed,status,converged");
        for n in &self.param_names {
            out.push_str(&format!(",{n}_hat"));
        }
        for n in &self.param_names {
            out.push_str(&format!(",{n}_err"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.rep, r.p, r.seed, r.status, r.converged
            ));
            for v in &r.theta_hat {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            for v in &r.error {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Deterministic summary CSV.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("p,param,mean_error,sd_error,n_effective\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.p,
                s.param,
                fmt_f64(s.mean_error),
                fmt_f64(s.sd_error),
                s.n_effective
            ));
        }
        out
    }

    /// Write `replications.csv`, `summary.csv`, and `report.json` under
    /// `dir`, creating it if necessary.
    pub fn write_dir(&self, dir: &Path) -> Result<(), IoError> {
        fs::create_dir_all(dir)?;
        let mut rows = fs::File::create(dir.join("replications.csv"))?;
        rows.write_all(self.rows_csv().as_bytes())?;
        let mut summary = fs::File::create(dir.join("summary.csv"))?;
        summary.write_all(self.summary_csv().as_bytes())?;
        write_json(&dir.join("report.json"), self)?;
        Ok(())
    }
}
