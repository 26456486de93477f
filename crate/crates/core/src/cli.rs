//! The `entsum` command line: generate data, fit, verify, certify, report.
//!
//! Settings come from flags, then an optional JSON config file, then
//! defaults. Every JSON artifact embeds the effective configuration and
//! seed and carries no timestamps, so identical runs write identical bytes.

use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{to_json_pretty, write_atomic};
use crate::criterion::{
    certify_model, counterexamples, standard_templates, worst_residual, CertificationReport, CriterionOptions,
    PartACertificate, PartBCertificate, DEFAULT_TOLERANCE,
};
use crate::decompose::{verify_stationary, VerificationVerdict, DEFAULT_EQUALITY_TOL};
use crate::error::Error;
use crate::inference::{fit_em, fit_ppca_report, initialize, FitOptions, FitReport};
use crate::models::{Dataset, ModelSpec, Noise};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "entsum", version, about = "Fit generative models and compare the ELBO with its entropy sum")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from a model.
    Gen(SharedArgs),
    /// Fit a model to a dataset.
    Fit(SharedArgs),
    /// Fit (or load a fit) and check the ELBO against the entropy sum.
    Verify(SharedArgs),
    /// Check the parameterization criterion at random parameter draws.
    Criterion(SharedArgs),
    /// Summarize verdict and certification artifacts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Em,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Data-driven seeded initialization.
    Seeded,
    /// Start from the parameters of `--model`.
    Model,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Model: a JSON file, inline JSON, or a built-in template name.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of the flag values (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rows to sample with `gen`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub tol_eq: Option<f64>,
    #[arg(long)]
    pub tol_grad: Option<f64>,
    #[arg(long)]
    pub tol_elbo: Option<f64>,
    #[arg(long)]
    pub tol_criterion: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Parameter draws per model for `criterion`.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub init: Option<Init>,
    /// Disable EM acceleration.
    #[arg(long)]
    pub plain_em: bool,
    /// Previously written fit artifact for `verify`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Also write the ELBO trajectory as CSV.
    #[arg(long)]
    pub trajectory_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Verdict or certification artifacts.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Text table destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Config file contents; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<Value>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    n: Option<usize>,
    tol_eq: Option<f64>,
    tol_grad: Option<f64>,
    tol_elbo: Option<f64>,
    tol_criterion: Option<f64>,
    max_iters: Option<usize>,
    draws: Option<usize>,
    threads: Option<usize>,
    method: Option<Method>,
    init: Option<Init>,
    plain_em: Option<bool>,
    fit: Option<PathBuf>,
    trajectory_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub tol_elbo: f64,
    pub tol_grad: f64,
    pub tol_eq: f64,
    pub tol_criterion: f64,
}

/// Effective settings of one run, embedded in every artifact. Output
/// locations and the thread count do not influence results and are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub model: Option<ModelSpec>,
    pub data_path: Option<String>,
    pub fit_path: Option<String>,
    pub seed: u64,
    pub n: Option<usize>,
    pub tolerances: Tolerances,
    pub max_iters: usize,
    pub method: Method,
    pub init: Init,
    pub accelerate: bool,
    pub draws: usize,
    #[serde(skip)]
    pub output_path: Option<PathBuf>,
    #[serde(skip)]
    pub trajectory_csv: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, message: msg.into() }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Numerical(_) | Error::DegenerateComponent { .. } => EXIT_FAILED,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(command: Command) -> CliResult<i32> {
    match command {
        Command::Report(args) => report(&args),
        Command::Gen(args) => {
            let cfg = resolve("gen", &args)?;
            setup_threads(&cfg)?;
            generate(&cfg)
        }
        Command::Fit(args) => {
            let cfg = resolve("fit", &args)?;
            setup_threads(&cfg)?;
            fit(&cfg)
        }
        Command::Verify(args) => {
            let cfg = resolve("verify", &args)?;
            setup_threads(&cfg)?;
            verify(&cfg)
        }
        Command::Criterion(args) => {
            let cfg = resolve("criterion", &args)?;
            setup_threads(&cfg)?;
            criterion(&cfg)
        }
    }
}

fn setup_threads(cfg: &RunConfig) -> CliResult<()> {
    if let Some(t) = cfg.threads {
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    Ok(())
}

fn read_config_file(path: &Path) -> CliResult<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

/// Resolves `--model`: inline JSON, then a built-in template name, then a file.
fn load_model(spec: &str) -> CliResult<ModelSpec> {
    let trimmed = spec.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| config_error(format!("inline model: {e}")));
    }
    if let Some((_, m)) = standard_templates().into_iter().find(|(name, _)| *name == spec) {
        return Ok(m);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn positive(name: &str, v: f64) -> CliResult<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_error(format!("{name} must be positive, got {v}")))
    }
}

/// Merges flags over the config file over defaults.
pub fn resolve(command: &str, args: &SharedArgs) -> CliResult<RunConfig> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => ConfigFile::default(),
    };
    let model = match (&args.model, &file.model) {
        (Some(s), _) => Some(load_model(s)?),
        (None, Some(Value::String(s))) => Some(load_model(s)?),
        (None, Some(v)) => {
            Some(serde_json::from_value(v.clone()).map_err(|e| config_error(format!("config model: {e}")))?)
        }
        (None, None) => None,
    };
    let defaults = FitOptions::default();
    let tolerances = Tolerances {
        tol_elbo: positive("tol_elbo", args.tol_elbo.or(file.tol_elbo).unwrap_or(defaults.tol_elbo))?,
        tol_grad: positive("tol_grad", args.tol_grad.or(file.tol_grad).unwrap_or(defaults.tol_grad))?,
        tol_eq: positive("tol_eq", args.tol_eq.or(file.tol_eq).unwrap_or(DEFAULT_EQUALITY_TOL))?,
        tol_criterion: positive(
            "tol_criterion",
            args.tol_criterion.or(file.tol_criterion).unwrap_or(DEFAULT_TOLERANCE),
        )?,
    };
    let threads = args.threads.or(file.threads);
    if threads == Some(0) {
        return Err(config_error("threads must be at least 1"));
    }
    let draws = args.draws.or(file.draws).unwrap_or(50);
    if draws == 0 {
        return Err(config_error("draws must be at least 1"));
    }
    Ok(RunConfig {
        command: command.to_string(),
        model,
        data_path: args.data.clone().or(file.data).map(|p| p.display().to_string()),
        fit_path: args.fit.clone().or(file.fit).map(|p| p.display().to_string()),
        seed: args.seed.or(file.seed).unwrap_or(0),
        n: args.n.or(file.n),
        tolerances,
        max_iters: args.max_iters.or(file.max_iters).unwrap_or(defaults.max_iters),
        method: args.method.or(file.method).unwrap_or(Method::Em),
        init: args.init.or(file.init).unwrap_or(Init::Seeded),
        accelerate: !(args.plain_em || file.plain_em.unwrap_or(false)),
        draws,
        output_path: args.out.clone().or(file.out),
        trajectory_csv: args.trajectory_csv.clone().or(file.trajectory_csv),
        threads,
    })
}

fn require_model(cfg: &RunConfig) -> CliResult<&ModelSpec> {
    cfg.model.as_ref().ok_or_else(|| config_error(format!("`{}` needs --model", cfg.command)))
}

fn require_out(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.output_path.as_deref().ok_or_else(|| config_error(format!("`{}` needs --out", cfg.command)))
}

fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    let path = cfg.data_path.as_ref().ok_or_else(|| config_error(format!("`{}` needs --data", cfg.command)))?;
    let path = Path::new(path);
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    Dataset::read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io(io) => io_error(path, io),
        other => config_error(format!("{}: {other}", path.display())),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = to_json_pretty(value)?;
    write_atomic(path, text.as_bytes()).map_err(|e| match e {
        Error::Io(io) => io_error(path, io),
        other => other.into(),
    })
}

fn config_value(cfg: &RunConfig) -> CliResult<Value> {
    Ok(serde_json::to_value(cfg).map_err(Error::from)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Artifact {
    Fit { config: RunConfig, seed: u64, report: FitReport },
    Verdict { config: RunConfig, seed: u64, verdict: VerificationVerdict, fit: FitReport },
    Certification { config: RunConfig, seed: u64, reports: Vec<CertificationReport>, counterexamples: Counterexamples, pass: bool },
}

/// The two broken maps; both are expected to fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexamples {
    pub part_a: PartACertificate,
    pub part_b: PartBCertificate,
    pub both_fail: bool,
}

fn generate(cfg: &RunConfig) -> CliResult<i32> {
    let model = require_model(cfg)?;
    let out = require_out(cfg)?;
    let n = cfg.n.ok_or_else(|| config_error("`gen` needs --n"))?;
    let data = model.sample(n, cfg.seed)?;
    let text = data.to_jsonl(Some(&config_value(cfg)?))?;
    write_atomic(out, text.as_bytes()).map_err(|e| match e {
        Error::Io(io) => io_error(out, io),
        other => other.into(),
    })?;
    Ok(EXIT_OK)
}

fn run_fit(cfg: &RunConfig, data: &Dataset) -> CliResult<FitReport> {
    let model = require_model(cfg)?;
    let opts = FitOptions {
        max_iters: cfg.max_iters,
        tol_elbo: cfg.tolerances.tol_elbo,
        tol_grad: cfg.tolerances.tol_grad,
        accelerate: cfg.accelerate,
    };
    match cfg.method {
        Method::ClosedForm => {
            let ModelSpec::LinearGaussian(m) = model else {
                return Err(config_error("closed-form fitting is only available for p-PCA"));
            };
            if m.parameterized_prior() || !matches!(m.noise(), Noise::Scalar { .. }) {
                return Err(config_error("closed-form fitting needs scalar noise and a standard prior"));
            }
            if data.family() != model.family() {
                return Err(config_error("data and model families differ"));
            }
            Ok(fit_ppca_report(data, m.latent_dim(), &opts)?)
        }
        Method::Em => {
            let init = match cfg.init {
                Init::Seeded => initialize(model, data, cfg.seed)?,
                Init::Model => model.clone(),
            };
            Ok(fit_em(&init, data, &opts)?)
        }
    }
}

fn write_trajectory(cfg: &RunConfig, report: &FitReport) -> CliResult<()> {
    if let Some(path) = &cfg.trajectory_csv {
        write_atomic(path, report.trajectory_csv().as_bytes()).map_err(|e| match e {
            Error::Io(io) => io_error(path, io),
            other => other.into(),
        })?;
    }
    Ok(())
}

fn fit(cfg: &RunConfig) -> CliResult<i32> {
    let out = require_out(cfg)?;
    let data = load_data(cfg)?;
    let report = run_fit(cfg, &data)?;
    write_trajectory(cfg, &report)?;
    write_json(out, &Artifact::Fit { config: cfg.clone(), seed: cfg.seed, report })?;
    Ok(EXIT_OK)
}

fn load_fit(path: &Path) -> CliResult<FitReport> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    match serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))? {
        Artifact::Fit { report, .. } | Artifact::Verdict { fit: report, .. } => Ok(report),
        Artifact::Certification { .. } => Err(config_error(format!("{} is not a fit artifact", path.display()))),
    }
}

fn verify(cfg: &RunConfig) -> CliResult<i32> {
    let out = require_out(cfg)?;
    let data = load_data(cfg)?;
    let report = match &cfg.fit_path {
        Some(p) => load_fit(Path::new(p))?,
        None => run_fit(cfg, &data)?,
    };
    write_trajectory(cfg, &report)?;
    let verdict = verify_stationary(&report, &data, cfg.tolerances.tol_eq)?;
    let pass = verdict.pass;
    write_json(out, &Artifact::Verdict { config: cfg.clone(), seed: cfg.seed, verdict, fit: report })?;
    Ok(if pass { EXIT_OK } else { EXIT_FAILED })
}

fn criterion(cfg: &RunConfig) -> CliResult<i32> {
    let out = require_out(cfg)?;
    let opts = CriterionOptions { tol: cfg.tolerances.tol_criterion, ..CriterionOptions::default() };
    let targets: Vec<(String, ModelSpec)> = match &cfg.model {
        Some(m) => vec![(m.family().name().to_string(), m.clone())],
        None => standard_templates().into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
    };
    let mut reports = Vec::with_capacity(targets.len());
    for (name, template) in &targets {
        reports.push(certify_model(name, template, cfg.draws, cfg.seed, &opts)?);
    }
    let (part_a, part_b) = counterexamples(opts.tol)?;
    let both_fail = !part_a.pass && !part_b.pass;
    let pass = reports.iter().all(|r| r.pass) && both_fail;
    write_json(
        out,
        &Artifact::Certification {
            config: cfg.clone(),
            seed: cfg.seed,
            reports,
            counterexamples: Counterexamples { part_a, part_b, both_fail },
            pass,
        },
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_FAILED })
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub source: String,
    pub name: String,
    pub metric: &'static str,
    pub value: f64,
    pub pass: bool,
}

fn summarize(path: &Path) -> CliResult<Vec<SummaryRow>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let artifact: Artifact =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(match artifact {
        Artifact::Verdict { verdict, fit, .. } => vec![SummaryRow {
            source,
            name: fit.final_params.family().name().to_string(),
            metric: "rel_gap",
            value: verdict.rel_gap,
            pass: verdict.pass,
        }],
        Artifact::Fit { report, .. } => vec![SummaryRow {
            source,
            name: report.final_params.family().name().to_string(),
            metric: "grad_inf_norm",
            value: report.stationarity.grad_inf_norm,
            pass: report.converged,
        }],
        Artifact::Certification { reports, counterexamples, .. } => {
            let mut rows: Vec<SummaryRow> = reports
                .iter()
                .map(|r| SummaryRow {
                    source: source.clone(),
                    name: r.name.clone(),
                    metric: "worst_residual",
                    value: worst_residual(r),
                    pass: r.pass,
                })
                .collect();
            rows.push(SummaryRow {
                source,
                name: "counterexamples".into(),
                metric: "min_residual",
                value: counterexamples.part_a.residual_rel.min(counterexamples.part_b.residual_rel),
                pass: counterexamples.both_fail,
            });
            rows
        }
    })
}

fn report(args: &ReportArgs) -> CliResult<i32> {
    let mut rows = Vec::new();
    for p in &args.inputs {
        rows.extend(summarize(p)?);
    }
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut text = format!("{:<width$}  {:<14}  {:>24}  {}\n", "name", "metric", "value", "result");
    let mut csv = String::from("source,name,metric,value,pass\n");
    for r in &rows {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        text.push_str(&format!("{:<width$}  {:<14}  {:>24.16e}  {verdict}\n", r.name, r.metric, r.value));
        csv.push_str(&format!("{},{},{},{:.16e},{}\n", r.source, r.name, r.metric, r.value, r.pass));
    }
    let all = rows.iter().all(|r| r.pass);
    text.push_str(&format!("{} of {} passed\n", rows.iter().filter(|r| r.pass).count(), rows.len()));
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes()).map_err(|e| match e {
            Error::Io(io) => io_error(p, io),
            other => other.into(),
        })?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.csv {
        write_atomic(p, csv.as_bytes()).map_err(|e| match e {
            Error::Io(io) => io_error(p, io),
            other => other.into(),
        })?;
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> SharedArgs {
        SharedArgs::default()
    }

    #[test]
    fn flags_override_config_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 5, "tol_eq": 1e-3, "model": "gaussian-mixture", "draws": 7}"#).unwrap();
        let mut a = args();
        a.config = Some(path);
        a.seed = Some(9);
        let cfg = resolve("fit", &a).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tolerances.tol_eq, 1e-3);
        assert_eq!(cfg.tolerances.tol_grad, 1e-8);
        assert_eq!(cfg.draws, 7);
        assert_eq!(cfg.model.unwrap().family().name(), "gaussian-mixture");
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let mut a = args();
        a.tol_eq = Some(-1.0);
        assert_eq!(resolve("verify", &a).unwrap_err().code, EXIT_CONFIG);
        let mut a = args();
        a.model = Some("{not json".into());
        assert_eq!(resolve("fit", &a).unwrap_err().code, EXIT_CONFIG);
        let mut a = args();
        a.model = Some("/nonexistent/model.json".into());
        assert_eq!(resolve("fit", &a).unwrap_err().code, EXIT_IO);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"sed": 5}"#).unwrap();
        let mut a = args();
        a.config = Some(path);
        assert_eq!(resolve("fit", &a).unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn embedded_config_omits_output_locations() {
        let mut a = args();
        a.out = Some("somewhere.json".into());
        a.threads = Some(1);
        let v = serde_json::to_value(resolve("fit", &a).unwrap()).unwrap();
        assert!(v.get("output_path").is_none() && v.get("threads").is_none());
        assert_eq!(v["seed"], 0);
    }

    #[test]
    fn parse_errors_exit_two() {
        assert_eq!(main_with_args(["entsum", "fit", "--seed", "x"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["entsum", "bogus"]), EXIT_CONFIG);
    }
}
