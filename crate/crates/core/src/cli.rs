//! Command-line entry points: estimation on user data, simulation
//! reproduction, flow diagnostics, and the true-value oracle.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure, 4 invariant
//! violation. All randomness flows from the single `--seed` flag. A JSON
//! config file (via `--config` or the `ULFS_KDPE_CONFIG` env var) may set any
//! option; explicit flags win over the file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::density::{NormalizationMode, WorkingDensity};
use crate::error::{Error, Result};
use crate::flow::{run_flow, verify_invariants, FlowConfig, FlowTrace, StopReason};
use crate::kernel::{median_heuristic, KernelConfig, Observation};
use crate::nuisance::NuisanceFit;
use crate::sims::{
    histogram_csv, load_or_compute_truths, run_monte_carlo, summary_csv, DgpId, McConfig,
    SigmaChoice,
};
use crate::stopping::{StopRule, StoppingConfig};
use crate::targets::{estimate_targets, TargetEstimates};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

const CONFIG_ENV: &str = "ULFS_KDPE_CONFIG";

#[derive(Parser, Debug)]
#[command(
    name = "ulfs-kdpe",
    version,
    about = "Kernel density-flow debiasing for causal effect estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate ATE, RR and OR from a CSV of observations.
    Estimate(EstimateArgs),
    /// Reproduce the simulation study for DGP1 or DGP2.
    Simulate(SimulateArgs),
    /// Run the flow with every invariant checked and report a pass/fail table.
    Diagnose(DiagnoseArgs),
    /// Print the quadrature truth values for a DGP.
    Truths(TruthsArgs),
}

/// Options shared by every flow-running command.
#[derive(Args, Debug, Clone)]
struct FlowFlags {
    /// Gaussian bandwidth: a number, or "median" for the median heuristic.
    #[arg(long)]
    sigma: Option<String>,
    /// Euler step size.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Hard score target; the flow stops once `s_t` falls below it.
    #[arg(long)]
    delta_n: Option<f64>,
    /// Comma-separated stopping rules among sc1..sc5; "none" disables all.
    #[arg(long)]
    stopping: Option<String>,
    /// Renormalization mode: "global" or "xfixed".
    #[arg(long)]
    norm_mode: Option<String>,
    /// Positivity floor on conditional probabilities.
    #[arg(long)]
    floor: Option<f64>,
    /// Scale applied to the binary coordinates in the kernel metric.
    #[arg(long)]
    binary_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Input CSV with header x1..xd,a,y.
    #[arg(long)]
    input: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    flow: FlowFlags,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    dgp: String,
    #[arg(long)]
    n: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output prefix: writes <prefix>.csv, <prefix>.json, <prefix>_hist.csv.
    #[arg(long, default_value = "simulation")]
    output: PathBuf,
    #[command(flatten)]
    flow: FlowFlags,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Negate the update direction (fault injection for testing the checks).
    #[arg(long, hide = true)]
    negate_direction: bool,
    #[command(flatten)]
    flow: FlowFlags,
}

#[derive(Args, Debug)]
struct TruthsArgs {
    #[arg(long)]
    dgp: String,
    /// Golden-file location; defaults to truths_<dgp>.json.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Optional values loadable from a JSON config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    sigma: Option<serde_json::Value>,
    delta: Option<f64>,
    max_iters: Option<usize>,
    delta_n: Option<f64>,
    stopping: Option<String>,
    norm_mode: Option<String>,
    floor: Option<f64>,
    binary_scale: Option<f64>,
    seed: Option<u64>,
    jobs: Option<usize>,
    n: Option<usize>,
    reps: Option<usize>,
    // Stopping-rule tolerances.
    delta_p: Option<f64>,
    delta_s: Option<f64>,
    delta_alpha: Option<f64>,
    delta_v: Option<f64>,
    delta_ell: Option<f64>,
    eif_c: Option<f64>,
    cum_multiplier: Option<f64>,
}

/// Fully resolved options: flag, then config file, then default.
#[derive(Debug, Clone)]
struct Resolved {
    sigma: SigmaChoice,
    delta: f64,
    max_iters: usize,
    delta_n: Option<f64>,
    stopping: StoppingConfig,
    norm_mode: Option<NormalizationMode>,
    floor: f64,
    binary_scale: f64,
    seed: u64,
    jobs: usize,
    n: Option<usize>,
    reps: Option<usize>,
}

fn parse_sigma(s: &str) -> Result<SigmaChoice> {
    if s.trim().eq_ignore_ascii_case("median") {
        return Ok(SigmaChoice::Median);
    }
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("--sigma expects a number or \"median\", got `{s}`")))?;
    if v <= 0.0 || v.is_nan() {
        return Err(Error::Input(format!("sigma must be positive, got {v}")));
    }
    Ok(SigmaChoice::Fixed(v))
}

fn parse_stopping(s: &str) -> Result<BTreeSet<StopRule>> {
    let trimmed = s.trim();
    if trimmed.eq_ignore_ascii_case("none") || trimmed.is_empty() {
        return Ok(BTreeSet::new());
    }
    trimmed
        .split(',')
        .map(|part| part.parse::<StopRule>().map_err(Error::Input))
        .collect()
}

fn parse_norm_mode(s: &str) -> Result<NormalizationMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "global" => Ok(NormalizationMode::Global),
        "xfixed" | "x-marginal-fixed" | "x_marginal_fixed" => Ok(NormalizationMode::XMarginalFixed),
        other => Err(Error::Input(format!(
            "unknown normalization mode `{other}` (expected global or xfixed)"
        ))),
    }
}

fn load_file_config(explicit: Option<&Path>) -> Result<FileConfig> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("invalid config {}: {e}", path.display())))
}

fn resolve(flags: &FlowFlags) -> Result<Resolved> {
    let file = load_file_config(flags.config.as_deref())?;
    let sigma = match (&flags.sigma, &file.sigma) {
        (Some(s), _) => parse_sigma(s)?,
        (None, Some(serde_json::Value::String(s))) => parse_sigma(s)?,
        (None, Some(serde_json::Value::Number(v))) => {
            let v = v
                .as_f64()
                .ok_or_else(|| Error::Input("config sigma is not a number".into()))?;
            parse_sigma(&v.to_string())?
        }
        (None, Some(other)) => {
            return Err(Error::Input(format!(
                "config sigma must be a number or \"median\", got {other}"
            )))
        }
        (None, None) => SigmaChoice::Median,
    };
    let enabled = match (&flags.stopping, &file.stopping) {
        (Some(s), _) => parse_stopping(s)?,
        (None, Some(s)) => parse_stopping(s)?,
        (None, None) => BTreeSet::from([StopRule::Sc1]),
    };
    let defaults = StoppingConfig::default();
    let stopping = StoppingConfig {
        delta_p: file.delta_p.unwrap_or(defaults.delta_p),
        delta_s: file.delta_s.unwrap_or(defaults.delta_s),
        delta_alpha: file.delta_alpha.unwrap_or(defaults.delta_alpha),
        delta_v: file.delta_v.unwrap_or(defaults.delta_v),
        delta_ell: file.delta_ell.unwrap_or(defaults.delta_ell),
        eif_c: file.eif_c.unwrap_or(defaults.eif_c),
        cum_multiplier: file.cum_multiplier.unwrap_or(defaults.cum_multiplier),
        enabled,
    };
    let norm_mode = match (&flags.norm_mode, &file.norm_mode) {
        (Some(s), _) => Some(parse_norm_mode(s)?),
        (None, Some(s)) => Some(parse_norm_mode(s)?),
        (None, None) => None,
    };
    Ok(Resolved {
        sigma,
        delta: flags.delta.or(file.delta).unwrap_or(0.01),
        max_iters: flags.max_iters.or(file.max_iters).unwrap_or(100),
        delta_n: flags.delta_n.or(file.delta_n),
        stopping,
        norm_mode,
        floor: flags.floor.or(file.floor).unwrap_or(1e-3),
        binary_scale: flags.binary_scale.or(file.binary_scale).unwrap_or(1.0),
        seed: flags.seed.or(file.seed).unwrap_or(1),
        jobs: file.jobs.unwrap_or(1),
        n: file.n,
        reps: file.reps,
    })
}

impl Resolved {
    fn flow_config(&self, default_mode: NormalizationMode) -> FlowConfig {
        FlowConfig {
            delta: self.delta,
            max_iters: self.max_iters,
            delta_n: self.delta_n,
            stopping: self.stopping.clone(),
            mode: self.norm_mode.unwrap_or(default_mode),
            enforce_invariants: true,
            negate_direction: false,
        }
    }
}

/// Reads an observation CSV with header `x1..xd,a,y`. Errors name the
/// offending 1-based line.
pub fn read_observations_csv(path: &Path) -> Result<Vec<Observation>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Input("empty input file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "a" || cols[cols.len() - 1] != "y" {
        return Err(Error::Input("header must be x1..xd,a,y (line 1)".into()));
    }
    let d = cols.len() - 2;
    for (j, col) in cols[..d].iter().enumerate() {
        let expected = format!("x{}", j + 1);
        if *col != expected {
            return Err(Error::Input(format!(
                "expected column `{expected}`, found `{col}` (line 1)"
            )));
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(Error::Input(format!(
                "expected {} fields, found {} (line {line_no})",
                d + 2,
                fields.len()
            )));
        }
        let mut x = Vec::with_capacity(d);
        for (j, f) in fields[..d].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::Input(format!(
                    "invalid number `{f}` in column x{} (line {line_no})",
                    j + 1
                ))
            })?;
            x.push(v);
        }
        let a = parse_binary(fields[d], "a", line_no)?;
        let y = parse_binary(fields[d + 1], "y", line_no)?;
        out.push(
            Observation::new(x, a, y).map_err(|e| Error::Input(format!("{e} (line {line_no})")))?,
        );
    }
    if out.len() < 2 {
        return Err(Error::Input("need at least 2 observations".into()));
    }
    Ok(out)
}

fn parse_binary(field: &str, name: &str, line_no: usize) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Input(format!(
            "column {name} must be 0 or 1, got `{other}` (line {line_no})"
        ))),
    }
}

/// JSON report produced by `estimate`.
#[derive(Debug, Serialize)]
struct EstimateReport {
    targets: TargetEstimates,
    stop_reason: StopReason,
    iterations: usize,
    sigma: f64,
    trace: Vec<crate::flow::TraceRow>,
    density: WorkingDensity,
}

fn prepare_flow(
    sample: &[Observation],
    resolved: &Resolved,
    default_mode: NormalizationMode,
    negate_direction: bool,
) -> Result<(WorkingDensity, KernelConfig, FlowConfig)> {
    let fit = NuisanceFit::fit_default(sample, resolved.seed)?;
    let xs: Vec<Vec<f64>> = sample.iter().map(|o| o.x().to_vec()).collect();
    let mut flow_cfg = resolved.flow_config(default_mode);
    flow_cfg.negate_direction = negate_direction;
    flow_cfg.enforce_invariants = !negate_direction && flow_cfg.enforce_invariants;
    let d0 = WorkingDensity::init_from_nuisance(&xs, &fit, resolved.floor, flow_cfg.mode)?;
    let sigma = match resolved.sigma {
        SigmaChoice::Median => median_heuristic(sample, resolved.binary_scale),
        SigmaChoice::Fixed(s) => s,
    };
    let kcfg = KernelConfig::with_binary_scale(sigma, resolved.binary_scale)?;
    Ok((d0, kcfg, flow_cfg))
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let sample = read_observations_csv(&args.input)?;
    let resolved = resolve(&args.flow)?;
    let (d0, kcfg, flow_cfg) = prepare_flow(&sample, &resolved, NormalizationMode::Global, false)?;
    let trace: FlowTrace = run_flow(d0, &sample, kcfg, &flow_cfg)?;
    let targets = estimate_targets(&trace.final_density)?;
    let report = EstimateReport {
        targets,
        stop_reason: trace.stop_reason,
        iterations: trace.iterations,
        sigma: kcfg.sigma,
        trace: trace.rows,
        density: trace.final_density,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let dgp: DgpId = args.dgp.parse().map_err(Error::Input)?;
    let resolved = resolve(&args.flow)?;
    let mc = McConfig {
        dgp,
        n: args.n.or(resolved.n).unwrap_or(300),
        reps: args.reps.or(resolved.reps).unwrap_or(500),
        seed: resolved.seed,
        flow: resolved.flow_config(NormalizationMode::XMarginalFixed),
        sigma: resolved.sigma,
        binary_scale: resolved.binary_scale,
        floor: resolved.floor,
        jobs: args.jobs.unwrap_or(resolved.jobs),
        ..McConfig::default()
    };
    let out = run_monte_carlo(&mc)?;

    let csv_path = args.output.with_extension("csv");
    let json_path = args.output.with_extension("json");
    let hist_path = {
        let mut stem = args.output.clone();
        stem.set_extension("");
        PathBuf::from(format!("{}_hist.csv", stem.display()))
    };
    std::fs::write(&csv_path, summary_csv(&out))?;
    std::fs::write(&json_path, serde_json::to_string(&out)?)?;
    std::fs::write(&hist_path, histogram_csv(&out))?;

    print!("{}", summary_csv(&out));
    eprintln!(
        "wrote {}, {}, {}",
        csv_path.display(),
        json_path.display(),
        hist_path.display()
    );
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let sample = read_observations_csv(&args.input)?;
    let resolved = resolve(&args.flow)?;
    let (d0, kcfg, mut flow_cfg) = prepare_flow(
        &sample,
        &resolved,
        NormalizationMode::Global,
        args.negate_direction,
    )?;
    // The diagnostics command evaluates the full table instead of failing
    // at the first violation.
    flow_cfg.enforce_invariants = false;
    let trace = run_flow(d0, &sample, kcfg, &flow_cfg)?;
    let reports = verify_invariants(&trace);
    println!(
        "{:<26} {:>6} {:>14} {:>12} {:>10}",
        "invariant", "status", "worst_value", "threshold", "iteration"
    );
    let mut failed: Option<(&'static str, usize)> = None;
    for rep in &reports {
        println!(
            "{:<26} {:>6} {:>14.3e} {:>12.3e} {:>10}",
            rep.name,
            if rep.passed { "pass" } else { "FAIL" },
            rep.worst_value,
            rep.threshold,
            rep.worst_iteration
        );
        if !rep.passed && failed.is_none() {
            failed = Some((rep.name, rep.worst_iteration));
        }
    }
    if let Some((name, iteration)) = failed {
        return Err(Error::Invariant {
            name,
            iteration,
            detail: "see diagnostics table".into(),
        });
    }
    println!(
        "stop_reason: {} after {} iterations",
        trace.stop_reason, trace.iterations
    );
    Ok(())
}

fn cmd_truths(args: &TruthsArgs) -> Result<()> {
    let dgp: DgpId = args.dgp.parse().map_err(Error::Input)?;
    let path = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("truths_{dgp}.json")));
    let golden = load_or_compute_truths(&path, dgp)?;
    println!("{}", serde_json::to_string_pretty(&golden)?);
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Input(_) | Error::Config(_) | Error::Lookup(_) | Error::Io(_) => EXIT_INPUT,
        Error::Invariant { .. } => EXIT_INVARIANT,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Truths(args) => cmd_truths(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_parsing() {
        assert!(matches!(
            parse_sigma("median").unwrap(),
            SigmaChoice::Median
        ));
        assert!(matches!(parse_sigma("0.5").unwrap(), SigmaChoice::Fixed(v) if v == 0.5));
        assert!(parse_sigma("-1").is_err());
        assert!(parse_sigma("abc").is_err());
    }

    #[test]
    fn stopping_parsing() {
        let set = parse_stopping("sc1,sc3").unwrap();
        assert!(set.contains(&StopRule::Sc1) && set.contains(&StopRule::Sc3));
        assert!(parse_stopping("none").unwrap().is_empty());
        assert!(parse_stopping("sc9").is_err());
    }

    #[test]
    fn norm_mode_parsing() {
        assert_eq!(
            parse_norm_mode("global").unwrap(),
            NormalizationMode::Global
        );
        assert_eq!(
            parse_norm_mode("xfixed").unwrap(),
            NormalizationMode::XMarginalFixed
        );
        assert!(parse_norm_mode("other").is_err());
    }

    #[test]
    fn csv_reader_errors_name_lines() {
        let dir = std::env::temp_dir().join("ulfs_kdpe_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "x1,a,y\n0.1,0,1\n0.2,2,0\n").unwrap();
        let err = read_observations_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "message was: {msg}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn csv_reader_accepts_valid() {
        let dir = std::env::temp_dir().join("ulfs_kdpe_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("good.csv");
        std::fs::write(&path, "x1,x2,a,y\n0.1,0.3,0,1\n0.2,0.8,1,0\n").unwrap();
        let obs = read_observations_csv(&path).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].x(), &[0.1, 0.3]);
        assert_eq!(obs[1].a(), 1);
        std::fs::remove_file(&path).unwrap();
    }
}
