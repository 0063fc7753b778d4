//! Command-line front end.
//!
//! ```text
//! hypofit simulate   --config sim.json  --out data/        [--seed N]
//! hypofit estimate   --config est.json  --out results/
//! hypofit experiment --config exp.json  --out results/     [--seed N] [--jobs K]
//! hypofit validate   --config val.json  [--out results/]
//! hypofit precision  --config prec.json [--out results/]
//! ```
//!
//! Every command reads a strict JSON configuration (unknown keys rejected)
//! and writes machine-readable outputs; human-readable progress goes to
//! stdout. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
//! `--seed` overrides the seed in the configuration, `--jobs` caps the
//! worker-thread count.

use crate::builtins::{Builtin, BUILTIN_IDS};
use crate::estimate::asymptotic_precision;
use crate::io::{
    self, fmt_f64, write_json, EstimateConfig, ExperimentConfig, IoError,
    ObservationMode, PrecisionConfig, Sidecar, SimulateConfig, ValidateConfig,
    LIBRARY_VERSION,
};
use crate::mc::{estimate_record, run_experiment, EstimationTask, McError};
use crate::model::{hormander_rank_check, Model};
use crate::moments::{three_block_identity_residuals, Expansion};
use crate::oracle::{fd_operator_apply, OperatorKind};
use crate::simulate::simulate_fine_path;
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "hypofit",
    version,
    about = "Joint parameter estimation for hypo-elliptic SDEs from high-frequency records"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for replication batches (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Override the seed in the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate observation records and write them as CSV + sidecar.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Estimate parameters from one record.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a seeded replication experiment and tabulate estimation errors.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a model's structural ingredients (noise propagation, operator
    /// evaluators, precision-matrix identities, covariance definiteness).
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the asymptotic precision matrix at a parameter point.
    Precision {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Command failure, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments → exit 2.
    Config(String),
    /// Failure while running a valid configuration → exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(err) => CliError::Runtime(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::Config { what } => CliError::Config(what),
            McError::Io(err) => err.into(),
        }
    }
}

fn lookup_model(id: &str) -> Result<Builtin, CliError> {
    Builtin::from_id(id).map_err(|_| {
        CliError::Config(format!("unknown model '{id}'; known models: {}", BUILTIN_IDS.join(", ")))
    })
}

/// FNV-1a hash of the raw configuration bytes, for provenance stamping.
fn config_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn read_config_with_hash<T: for<'de> serde::Deserialize<'de>>(
    path: &Path,
) -> Result<(T, String), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((value, config_hash(&bytes)))
}

/// Entry point shared by the binary and the tests.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        // The global pool can only be installed once per process; a later
        // identical request is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::Simulate { config, out } => cmd_simulate(config, out, cli.seed),
        Command::Estimate { config, out } => cmd_estimate(config, out),
        Command::Experiment { config, out } => cmd_experiment(config, out, cli.seed, cli.jobs),
        Command::Validate { config, out } => cmd_validate(config, out.as_deref(), cli.seed),
        Command::Precision { config, out } => cmd_precision(config, out.as_deref(), cli.seed),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(config: &Path, out: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let (mut cfg, _hash) = read_config_with_hash::<SimulateConfig>(config)?;
    if let Some(s) = seed_override {
        cfg.base_seed = s;
    }
    cfg.design.validate()?;
    if cfg.replications < 1 {
        return Err(CliError::Config("replications must be at least 1".into()));
    }
    let model = lookup_model(&cfg.model_id)?;
    if cfg.theta.len() != model.n_params() {
        return Err(CliError::Config(format!(
            "theta has {} entries; model '{}' expects {}",
            cfg.theta.len(),
            cfg.model_id,
            model.n_params()
        )));
    }
    let design = cfg.design.to_design();
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;

    for rep in 0..cfg.replications {
        let seed = cfg.base_seed.wrapping_add(rep as u64);
        let obs = simulate_fine_path(&model, &cfg.theta, &design, seed)
            .map_err(|e| CliError::Runtime(format!("replication {rep} (seed {seed}): {e}")))?;
        let csv = out.join(format!("record_{seed}.csv"));
        io::write_observations(&csv, &obs)?;
        let sidecar = Sidecar {
            model_id: cfg.model_id.clone(),
            theta: cfg.theta.clone(),
            seed,
            delta: design.dt,
            n_steps: obs.n_steps(),
            fine_substeps: design.fine_substeps,
            burn_in: design.burn_in,
            library_version: LIBRARY_VERSION.into(),
            created_unix_s: io::unix_now(),
            runtimes_s: None,
        };
        write_json(&out.join(format!("record_{seed}.json")), &sidecar)?;
        println!("wrote {} ({} rows)", csv.display(), obs.n_states());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EstimateOutput {
    model_id: String,
    mode: ObservationMode,
    p: usize,
    data: PathBuf,
    theta0: Vec<f64>,
    theta_hat: Vec<f64>,
    value: f64,
    converged: bool,
    evals: usize,
    runtime_s: f64,
    trace: Vec<(f64, Vec<f64>)>,
    config_hash: String,
    library_version: String,
}

fn cmd_estimate(config: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, hash) = read_config_with_hash::<EstimateConfig>(config)?;
    let model = lookup_model(&cfg.model_id)?;
    let np = model.n_params();
    if cfg.theta0.len() != np {
        return Err(CliError::Config(format!("theta0 must have {np} entries")));
    }
    let (lo, hi) = match &cfg.theta_box {
        Some(b) => {
            if b.lo.len() != np || b.hi.len() != np {
                return Err(CliError::Config(format!("theta_box must have {np} entries")));
            }
            (b.lo.clone(), b.hi.clone())
        }
        None => model.default_box(),
    };
    if cfg.theta0.iter().zip(&lo).zip(&hi).any(|((v, l), h)| v < l || v > h) {
        return Err(CliError::Config("theta0 lies outside the search box".into()));
    }
    let max_p = match cfg.mode {
        ObservationMode::Complete => model.max_p(),
        ObservationMode::PartialFhn => 3,
    };
    if cfg.p < 2 || cfg.p > max_p {
        return Err(CliError::Config(format!(
            "expansion order {} outside the supported range 2..={max_p}",
            cfg.p
        )));
    }

    let data_path = if cfg.data.is_relative() {
        config.parent().map(|d| d.join(&cfg.data)).unwrap_or_else(|| cfg.data.clone())
    } else {
        cfg.data.clone()
    };
    let obs = io::read_observations(&data_path)?;
    if obs.dim != model.class().dim() {
        return Err(CliError::Config(format!(
            "record has {} coordinates; model '{}' expects {}",
            obs.dim,
            cfg.model_id,
            model.class().dim()
        )));
    }

    let task = EstimationTask {
        p: cfg.p,
        theta0: &cfg.theta0,
        lo: &lo,
        hi: &hi,
        optimizer: &cfg.optimizer,
        mode: cfg.mode,
    };
    let res = estimate_record(&model, &obs, &task).map_err(CliError::Runtime)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let output = EstimateOutput {
        model_id: cfg.model_id.clone(),
        mode: cfg.mode,
        p: cfg.p,
        data: data_path,
        theta0: cfg.theta0.clone(),
        theta_hat: res.theta_hat.clone(),
        value: res.value,
        converged: res.converged,
        evals: res.evals,
        runtime_s: res.runtime_s,
        trace: res.trace,
        config_hash: hash,
        library_version: LIBRARY_VERSION.into(),
    };
    let path = out.join("estimate.json");
    write_json(&path, &output)?;
    let pairs: Vec<String> = model
        .param_names()
        .iter()
        .zip(&res.theta_hat)
        .map(|(n, v)| format!("{n}={v:.6}"))
        .collect();
    println!(
        "estimate (p={}): {}  [converged: {}] -> {}",
        cfg.p,
        pairs.join("  "),
        res.converged,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ExperimentSidecar {
    config: ExperimentConfig,
    config_hash: String,
    library_version: String,
    created_unix_s: u64,
    jobs: Option<usize>,
    /// Per-row wall-clock seconds, aligned with `replications.csv`.
    runtimes_s: Vec<f64>,
    total_runtime_s: f64,
}

fn cmd_experiment(
    config: &Path,
    out: &Path,
    seed_override: Option<u64>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let (mut cfg, hash) = read_config_with_hash::<ExperimentConfig>(config)?;
    if let Some(s) = seed_override {
        cfg.base_seed = s;
    }
    let model = lookup_model(&cfg.model_id)?;
    let started = std::time::Instant::now();
    let report = run_experiment(&model, &cfg)?;
    let total = started.elapsed().as_secs_f64();

    report.write_dir(out)?;
    let sidecar = ExperimentSidecar {
        config: cfg.clone(),
        config_hash: hash,
        library_version: LIBRARY_VERSION.into(),
        created_unix_s: io::unix_now(),
        jobs,
        runtimes_s: report.rows.iter().map(|r| r.runtime_s).collect(),
        total_runtime_s: total,
    };
    write_json(&out.join("sidecar.json"), &sidecar)?;

    let n_failed = report.rows.iter().filter(|r| !r.ok()).count();
    println!(
        "experiment: {} rows ({} failed) in {:.1}s -> {}",
        report.rows.len(),
        n_failed,
        total,
        out.display()
    );
    println!("{:>3}  {:<8} {:>13}  {:>13}  {:>5}", "p", "param", "mean(err)", "sd(err)", "n");
    for s in &report.summary {
        println!(
            "{:>3}  {:<8} {:>13.6e}  {:>13.6e}  {:>5}",
            s.p, s.param, s.mean_error, s.sd_error, s.n_effective
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// The margin the pass/fail decision was made on (meaning per check).
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub model_id: String,
    pub theta: Vec<f64>,
    pub n_points: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

/// Random states in a centred cube, wide enough to exercise nonlinearities.
fn sample_states(rng: &mut ChaCha12Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn sample_theta(rng: &mut ChaCha12Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
}

/// Certify the drift-iterate and noise-direction evaluators against slow
/// finite-difference operator application.
fn certify_operators<M: Model>(
    model: &M,
    theta: &[f64],
    points: &[Vec<f64>],
) -> Result<CheckResult, CliError> {
    let class = model.class();
    let mut worst = 0.0f64;
    let mut worst_what = String::from("all comparisons trivial");
    let mut compare = |want: &[f64], got: &[f64], what: &str| {
        for (w, g) in want.iter().zip(got) {
            let rel = (g - w).abs() / (1.0 + w.abs());
            if rel > worst {
                worst = rel;
                worst_what = what.to_string();
            }
        }
    };

    for (pi, x) in points.iter().enumerate() {
        let mut mu = vec![0.0; class.dim()];
        model.drift(x, theta, &mut mu);
        for b in 0..class.n_blocks() {
            let range = class.block_range(b);
            let nb = range.len();
            let a = class.smoothness(b);
            let q = model.max_p() / 2 + a;
            for k in 1..=q {
                let mut want = vec![0.0; nb];
                model
                    .gen_mu(k, b, x, theta, &mut want)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                if k == 1 {
                    let rows: Vec<f64> = range.clone().map(|i| mu[i]).collect();
                    compare(&want, &rows, &format!("drift block {b} at point {pi}"));
                } else {
                    let inner = |y: &[f64], outv: &mut [f64]| {
                        model.gen_mu(k - 1, b, y, theta, outv).expect("iterate evaluation");
                    };
                    let got = fd_operator_apply(
                        model,
                        theta,
                        OperatorKind::Generator,
                        inner,
                        nb,
                        x,
                        1e-4,
                    );
                    compare(&want, &got, &format!("iterate {k} of block {b} at point {pi}"));
                }
            }
            if a >= 1 {
                for j in 0..class.d {
                    let mut want = vec![0.0; nb];
                    model.dir_mu(j, b, x, theta, &mut want);
                    let inner = |y: &[f64], outv: &mut [f64]| {
                        model.gen_mu(a, b, y, theta, outv).expect("iterate evaluation");
                    };
                    let got = fd_operator_apply(
                        model,
                        theta,
                        OperatorKind::Directional(j),
                        inner,
                        nb,
                        x,
                        1e-4,
                    );
                    compare(
                        &want,
                        &got,
                        &format!("noise direction {j} of block {b} at point {pi}"),
                    );
                }
            }
        }
    }
    let pass = worst < 5e-4;
    Ok(CheckResult {
        name: "operator-evaluators".into(),
        pass,
        margin: worst,
        detail: format!("worst relative deviation {worst:.3e} ({worst_what})"),
    })
}

/// Build the full validation report for one model.
pub fn validate_model(cfg: &ValidateConfig) -> Result<ValidationReport, CliError> {
    let model = lookup_model(&cfg.model_id)?;
    let theta = match &cfg.theta {
        Some(t) => {
            if t.len() != model.n_params() {
                return Err(CliError::Config(format!(
                    "theta must have {} entries",
                    model.n_params()
                )));
            }
            t.clone()
        }
        None => model.reference_theta(),
    };
    if cfg.n_points < 1 {
        return Err(CliError::Config("n_points must be at least 1".into()));
    }
    let class = model.class();
    let (lo, hi) = model.default_box();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    // 1. Noise propagation (rank condition) at random states.
    let rank_points = sample_states(&mut rng, class.dim(), cfg.n_points.min(25));
    let rank = hormander_rank_check(&model, &theta, &rank_points, 1e-6)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let rank_margin = rank
        .per_point
        .iter()
        .flat_map(|p| p.min_singular_values.iter().copied())
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckResult {
        name: "noise-propagation-rank".into(),
        pass: rank.pass,
        margin: rank_margin,
        detail: format!(
            "smallest span singular value {rank_margin:.3e} over {} states",
            rank.per_point.len()
        ),
    });

    // 2. Operator evaluators against finite differences (slow: few points).
    let op_points = sample_states(&mut rng, class.dim(), cfg.n_points.min(8));
    checks.push(certify_operators(&model, &theta, &op_points)?);

    // 3. Precision-identity residuals (three-block models).
    if class.n_blocks() == 3 {
        let mut worst = 0.0f64;
        for _ in 0..cfg.n_points {
            let x = sample_states(&mut rng, class.dim(), 1).pop().unwrap();
            let th = sample_theta(&mut rng, &lo, &hi);
            let res = three_block_identity_residuals(&model, &x, &th)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            for r in res {
                worst = worst.max(r.abs());
            }
        }
        checks.push(CheckResult {
            name: "precision-identities".into(),
            pass: worst < 1e-10,
            margin: worst,
            detail: format!(
                "largest identity residual {worst:.3e} over {} random (state, parameter) draws",
                cfg.n_points
            ),
        });
    }

    // 4. Leading-covariance definiteness across the parameter box.
    let exp = Expansion::new(&model, 2).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut min_eig = f64::INFINITY;
    let n = class.dim();
    let mut sigma = crate::linalg::SMat::zeros(n, n);
    let mut work = vec![0.0; 2 * n];
    for _ in 0..cfg.n_points {
        let x = sample_states(&mut rng, n, 1).pop().unwrap();
        let th = sample_theta(&mut rng, &lo, &hi);
        exp.leading_cov_into(&x, &th, &mut sigma, &mut work);
        let eigs = sigma.eigenvalues_symmetric();
        min_eig = min_eig.min(eigs[0]);
    }
    checks.push(CheckResult {
        name: "covariance-definiteness".into(),
        pass: min_eig > 0.0,
        margin: min_eig,
        detail: format!(
            "smallest covariance eigenvalue {min_eig:.3e} over {} box draws",
            cfg.n_points
        ),
    });

    let pass = checks.iter().all(|c| c.pass);
    Ok(ValidationReport {
        model_id: cfg.model_id.clone(),
        theta,
        n_points: cfg.n_points,
        seed: cfg.seed,
        checks,
        pass,
    })
}

fn cmd_validate(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let (mut cfg, _hash) = read_config_with_hash::<ValidateConfig>(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = validate_model(&cfg)?;
    for c in &report.checks {
        println!(
            "{}  {:<28} margin {:+.3e}  {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.margin,
            c.detail
        );
    }
    println!(
        "validate {}: {}",
        report.model_id,
        if report.pass { "all checks passed" } else { "CHECKS FAILED" }
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_json(&dir.join("validation.json"), &report)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// precision
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PrecisionOutput {
    model_id: String,
    theta: Vec<f64>,
    param_names: Vec<String>,
    /// Γ(θ) rows.
    gamma: Vec<Vec<f64>>,
    /// Per-parameter rate normalizers for the configured design.
    rates: Vec<f64>,
    /// Predicted estimator SD per parameter at the configured design.
    predicted_sd: Vec<f64>,
    n_steps: usize,
    delta: f64,
    seed: u64,
    library_version: String,
}

fn cmd_precision(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let (mut cfg, _hash) = read_config_with_hash::<PrecisionConfig>(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.design.validate()?;
    let model = lookup_model(&cfg.model_id)?;
    if cfg.theta.len() != model.n_params() {
        return Err(CliError::Config(format!(
            "theta must have {} entries",
            model.n_params()
        )));
    }
    let design = cfg.design.to_design();
    let sample = simulate_fine_path(&model, &cfg.theta, &design, cfg.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let prec = asymptotic_precision(&model, &sample, &cfg.theta)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let np = model.n_params();
    let gamma: Vec<Vec<f64>> =
        (0..np).map(|i| (0..np).map(|j| prec.gamma[(i, j)]).collect()).collect();
    let predicted: Vec<f64> = (0..np)
        .map(|k| prec.predicted_sd(k).unwrap_or(f64::NAN))
        .collect();
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        println!(
            "{name:<8} gamma {:>13}  rate {:>13}  predicted sd {:>13}",
            fmt_f64(prec.gamma[(k, k)]),
            fmt_f64(prec.rates[k]),
            fmt_f64(predicted[k])
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        let output = PrecisionOutput {
            model_id: cfg.model_id.clone(),
            theta: cfg.theta.clone(),
            param_names: names,
            gamma,
            rates: prec.rates.clone(),
            predicted_sd: predicted,
            n_steps: sample.n_steps(),
            delta: sample.dt,
            seed: cfg.seed,
            library_version: LIBRARY_VERSION.into(),
        };
        write_json(&dir.join("precision.json"), &output)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_json;
    use std::fs;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn argument_grammar_round_trips() {
        let cli = parse(&[
            "hypofit",
            "experiment",
            "--config",
            "exp.json",
            "--out",
            "results",
            "--jobs",
            "4",
            "--seed",
            "99",
        ]);
        assert_eq!(cli.jobs, Some(4));
        assert_eq!(cli.seed, Some(99));
        assert!(matches!(cli.command, Command::Experiment { .. }));
        assert!(Cli::try_parse_from(["hypofit", "estimate", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["hypofit", "frobnicate"]).is_err());
    }

    #[test]
    fn unknown_model_is_a_config_error_listing_known_ids() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("sim.json");
        write(
            &cfg,
            r#"{"model_id": "nope", "theta": [1.0], "design": {"delta": 0.01, "t_horizon": 1.0}, "base_seed": 1}"#,
        );
        let cli = parse(&[
            "hypofit",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("langevin-quad") && msg.contains("fhn"), "{msg}");
    }

    #[test]
    fn simulate_emits_sequentially_seeded_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("sim.json");
        write(
            &cfg,
            r#"{
                "model_id": "langevin-quad",
                "theta": [-1.5, 2.0],
                "design": {"delta": 0.01, "t_horizon": 1.0, "fine_delta": 0.002, "burn_in": 0.5},
                "replications": 2,
                "base_seed": 7
            }"#,
        );
        let out = dir.path().join("data");
        let cli = parse(&[
            "hypofit",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        run(&cli).unwrap();
        for seed in [7u64, 8] {
            let rec = out.join(format!("record_{seed}.csv"));
            let obs = io::read_observations(&rec).unwrap();
            assert_eq!(obs.n_states(), 101);
            assert_eq!(obs.dim, 2);
            let side: Sidecar = read_json(&out.join(format!("record_{seed}.json"))).unwrap();
            assert_eq!(side.seed, seed);
            assert_eq!(side.fine_substeps, 5);
        }
    }

    #[test]
    fn estimate_round_trip_on_a_simulated_record() {
        let dir = tempfile::tempdir().unwrap();
        let sim = dir.path().join("sim.json");
        write(
            &sim,
            r#"{
                "model_id": "langevin-quad",
                "theta": [-1.5, 2.0],
                "design": {"delta": 0.01, "t_horizon": 20.0, "fine_delta": 0.001, "burn_in": 2.0},
                "base_seed": 11
            }"#,
        );
        let out = dir.path().join("run");
        run(&parse(&[
            "hypofit",
            "simulate",
            "--config",
            sim.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();

        let est = dir.path().join("est.json");
        write(
            &est,
            &format!(
                r#"{{
                    "model_id": "langevin-quad",
                    "data": "{}",
                    "p": 2,
                    "theta0": [-1.0, 1.5],
                    "optimizer": {{"kind": "adam", "step": 0.1, "iters": 400}}
                }}"#,
                out.join("record_11.csv").display()
            ),
        );
        run(&parse(&[
            "hypofit",
            "estimate",
            "--config",
            est.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        let text = fs::read_to_string(out.join("estimate.json")).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(json["p"], 2);
        let sigma_hat = json["theta_hat"][1].as_f64().unwrap();
        assert!((sigma_hat - 2.0).abs() < 0.2, "sigma_hat {sigma_hat}");
        assert!(json["config_hash"].as_str().unwrap().len() == 16);
        assert!(!json["trace"].as_array().unwrap().is_empty());
    }

    #[test]
    fn estimate_rejects_a_start_outside_the_box() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("rec.csv");
        write(&data, "t,x1,x2\n0.0,0.1,0.2\n1.0,0.2,0.1\n");
        let est = dir.path().join("est.json");
        write(
            &est,
            &format!(
                r#"{{"model_id": "langevin-quad", "data": "{}", "p": 2, "theta0": [-1.0, 99.0]}}"#,
                data.display()
            ),
        );
        let err = run(&parse(&[
            "hypofit",
            "estimate",
            "--config",
            est.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]))
        .unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn experiment_writes_deterministic_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.json");
        write(
            &cfg,
            r#"{
                "model_id": "langevin-quad",
                "true_theta": [-1.5, 2.0],
                "design": {"delta": 0.01, "t_horizon": 3.0, "fine_delta": 0.001, "burn_in": 1.0},
                "p_list": [2],
                "replications": 2,
                "base_seed": 7,
                "optimizer": {"kind": "adam", "step": 0.1, "iters": 120},
                "mode": "complete",
                "theta0": [-1.0, 1.5]
            }"#,
        );
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        for out in [&out_a, &out_b] {
            run(&parse(&[
                "hypofit",
                "experiment",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]))
            .unwrap();
        }
        let rows_a = fs::read(out_a.join("replications.csv")).unwrap();
        let rows_b = fs::read(out_b.join("replications.csv")).unwrap();
        assert_eq!(rows_a, rows_b, "replication CSV must be byte-identical");
        let summary = fs::read_to_string(out_a.join("summary.csv")).unwrap();
        assert!(summary.starts_with("p,param,mean_error,sd_error,n_effective\n"));
        assert_eq!(summary.lines().count(), 3);
        // Seed override changes the records and therefore the report.
        let out_c = dir.path().join("c");
        run(&parse(&[
            "hypofit",
            "experiment",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_c.to_str().unwrap(),
            "--seed",
            "1234",
        ]))
        .unwrap();
        let rows_c = fs::read(out_c.join("replications.csv")).unwrap();
        assert_ne!(rows_a, rows_c);
    }

    #[test]
    fn validate_passes_builtins_and_catches_broken_coupling() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("val.json");
        write(&cfg, r#"{"model_id": "fhn", "n_points": 12, "seed": 5}"#);
        let out = dir.path().join("v");
        run(&parse(&[
            "hypofit",
            "validate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap())
                .unwrap();
        assert_eq!(report["pass"], true, "{report}");

        // Zero coupling disconnects the noise path to the smooth rows: the
        // rank check must fail, and the command still exits cleanly (the
        // failure is report content).
        let broken = dir.path().join("broken.json");
        write(
            &broken,
            r#"{"model_id": "qgle-quad", "theta": [0.0, 4.0, 4.0], "n_points": 6, "seed": 5}"#,
        );
        let rep = validate_model(&read_json::<ValidateConfig>(&broken).unwrap()).unwrap();
        assert!(!rep.pass);
        let rank = rep.checks.iter().find(|c| c.name == "noise-propagation-rank").unwrap();
        assert!(!rank.pass, "rank margin {}", rank.margin);
    }

    #[test]
    fn precision_reports_the_known_diffusion_entry() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("prec.json");
        write(
            &cfg,
            r#"{
                "model_id": "langevin-quad",
                "theta": [-1.5, 2.0],
                "design": {"delta": 0.01, "t_horizon": 5.0, "fine_delta": 0.002, "burn_in": 1.0},
                "seed": 3
            }"#,
        );
        let out = dir.path().join("p");
        run(&parse(&[
            "hypofit",
            "precision",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("precision.json")).unwrap())
                .unwrap();
        let g_sigma = json["gamma"][1][1].as_f64().unwrap();
        assert!((g_sigma - 1.0).abs() < 1e-12, "gamma_sigma {g_sigma}");
        assert!(json["predicted_sd"][1].as_f64().unwrap() > 0.0);
    }
}
