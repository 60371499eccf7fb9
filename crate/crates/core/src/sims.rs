//! Data-generating processes, true-value quadrature oracles, and the seeded
//! Monte Carlo harness with its CSV/JSON reporting.
//!
//! Replicates are independent units of work driven by per-replicate RNG
//! streams split deterministically from the master seed, so the results do
//! not depend on the degree of parallelism. Aggregation uses pairwise
//! summation in replicate order for reproducible floating-point sums.

use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{initial_plugin, one_step_all, tmle_ate};
use crate::density::{NormalizationMode, WorkingDensity};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig, StopReason};
use crate::kernel::{median_heuristic, KernelConfig, Observation};
use crate::nuisance::NuisanceFit;
use crate::targets::{eif_target, estimate_targets, TargetEstimates, TargetKind};

/// Default quadrature resolution for the truth oracles.
pub const ORACLE_NODES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpId {
    Dgp1,
    Dgp2,
}

impl std::fmt::Display for DgpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DgpId::Dgp1 => write!(f, "dgp1"),
            DgpId::Dgp2 => write!(f, "dgp2"),
        }
    }
}

impl std::str::FromStr for DgpId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dgp1" | "1" => Ok(DgpId::Dgp1),
            "dgp2" | "2" => Ok(DgpId::Dgp2),
            other => Err(format!("unknown dgp `{other}` (expected dgp1 or dgp2)")),
        }
    }
}

fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `P(A = 1 | X = x)` under DGP1.
pub fn dgp1_propensity(x: f64) -> f64 {
    0.5 + (50.0 * x / std::f64::consts::PI).sin() / 3.0
}

/// `E[Y | A = a, X = x]` under DGP1.
pub fn dgp1_outcome_mean(a: u8, x: f64) -> f64 {
    0.4 + f64::from(a) * (x - 0.3) * (x - 0.3) + 0.25 * (40.0 * x / std::f64::consts::PI).sin()
}

/// `P(A = 1 | X = x)` under DGP2.
pub fn dgp2_propensity(x: f64) -> f64 {
    expit(4.0 * x)
}

/// `E[Y | A = a, X = x]` under DGP2.
pub fn dgp2_outcome_mean(a: u8, x: f64) -> f64 {
    expit(-0.5 + f64::from(a) + 0.5 * x)
}

/// Covariate density of DGP2's mixture `0.9 Unif(-1,1) + 0.1 Unif(-2,2)`.
/// The mixture support `[-2, 2]` is wider than the nominal covariate space;
/// the tail mass beyond +-1 is exactly what produces the positivity issue.
pub fn dgp2_covariate_density(x: f64) -> f64 {
    let inner = if (-1.0..=1.0).contains(&x) {
        0.9 * 0.5
    } else {
        0.0
    };
    let outer = if (-2.0..=2.0).contains(&x) {
        0.1 * 0.25
    } else {
        0.0
    };
    inner + outer
}

fn draw_bernoulli(rng: &mut ChaCha8Rng, p: f64, what: &str) -> Result<u8> {
    if p <= 0.0 || p >= 1.0 || p.is_nan() {
        return Err(Error::Domain(format!(
            "{what} produced a Bernoulli mean {p} outside (0,1)"
        )));
    }
    Ok(u8::from(rng.gen::<f64>() < p))
}

/// Draws `n` observations from DGP1; deterministic given the seed. Returns
/// the sample and the oracle truth.
pub fn sample_dgp1(n: usize, seed: u64) -> Result<(Vec<Observation>, TargetEstimates)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen();
        let a = draw_bernoulli(&mut rng, dgp1_propensity(x), "dgp1 propensity")?;
        let y = draw_bernoulli(&mut rng, dgp1_outcome_mean(a, x), "dgp1 outcome mean")?;
        sample.push(Observation::new(vec![x], a, y)?);
    }
    Ok((sample, true_value_oracle(DgpId::Dgp1)?))
}

/// Draws `n` observations from DGP2; deterministic given the seed.
pub fn sample_dgp2(n: usize, seed: u64) -> Result<(Vec<Observation>, TargetEstimates)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = if rng.gen::<f64>() < 0.9 {
            rng.gen_range(-1.0..1.0)
        } else {
            rng.gen_range(-2.0..2.0)
        };
        let a = draw_bernoulli(&mut rng, dgp2_propensity(x), "dgp2 propensity")?;
        let y = draw_bernoulli(&mut rng, dgp2_outcome_mean(a, x), "dgp2 outcome mean")?;
        sample.push(Observation::new(vec![x], a, y)?);
    }
    Ok((sample, true_value_oracle(DgpId::Dgp2)?))
}

pub fn sample_dgp(dgp: DgpId, n: usize, seed: u64) -> Result<(Vec<Observation>, TargetEstimates)> {
    match dgp {
        DgpId::Dgp1 => sample_dgp1(n, seed),
        DgpId::Dgp2 => sample_dgp2(n, seed),
    }
}

/// Composite-midpoint quadrature of the mean potential outcomes at the given
/// resolution.
pub fn true_value_oracle_with_nodes(dgp: DgpId, nodes: usize) -> Result<TargetEstimates> {
    let (lo, hi) = match dgp {
        DgpId::Dgp1 => (0.0, 1.0),
        DgpId::Dgp2 => (-2.0, 2.0),
    };
    let h = (hi - lo) / nodes as f64;
    let mut mu = [0.0f64; 2];
    for (a, mu_a) in mu.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..nodes {
            let x = lo + (k as f64 + 0.5) * h;
            let (q, density) = match dgp {
                DgpId::Dgp1 => (dgp1_outcome_mean(a as u8, x), 1.0),
                DgpId::Dgp2 => (dgp2_outcome_mean(a as u8, x), dgp2_covariate_density(x)),
            };
            acc += q * density;
        }
        *mu_a = acc * h;
    }
    TargetEstimates::from_means(mu[0], mu[1])
}

static DGP1_TRUTH: OnceLock<TargetEstimates> = OnceLock::new();
static DGP2_TRUTH: OnceLock<TargetEstimates> = OnceLock::new();

/// True parameter values at the default resolution, cached per process.
pub fn true_value_oracle(dgp: DgpId) -> Result<TargetEstimates> {
    let cell = match dgp {
        DgpId::Dgp1 => &DGP1_TRUTH,
        DgpId::Dgp2 => &DGP2_TRUTH,
    };
    if let Some(t) = cell.get() {
        return Ok(*t);
    }
    let t = true_value_oracle_with_nodes(dgp, ORACLE_NODES)?;
    Ok(*cell.get_or_init(|| t))
}

/// Cached truths with the quadrature resolution recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenTruths {
    pub dgp: DgpId,
    pub nodes: usize,
    pub estimates: TargetEstimates,
}

/// Reads truths from a golden file, regenerating (and writing) it if absent.
pub fn load_or_compute_truths(path: &Path, dgp: DgpId) -> Result<GoldenTruths> {
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let golden: GoldenTruths = serde_json::from_str(&text)?;
        if golden.dgp == dgp {
            return Ok(golden);
        }
    }
    let golden = GoldenTruths {
        dgp,
        nodes: ORACLE_NODES,
        estimates: true_value_oracle(dgp)?,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(&golden)?)?;
    Ok(golden)
}

/// SplitMix64-style derivation of per-replicate seeds from the master seed.
/// For a fixed master seed the map is injective in the replicate index.
pub fn replicate_seed(master: u64, replicate: u64) -> u64 {
    let mut z = master ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pairwise (cascade) summation in index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Kernel bandwidth choice for the harness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    UlfsKdpe,
    Initial,
    OneStep,
    TmleAte,
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodId::UlfsKdpe => write!(f, "ulfs_kdpe"),
            MethodId::Initial => write!(f, "initial"),
            MethodId::OneStep => write!(f, "one_step"),
            MethodId::TmleAte => write!(f, "tmle_ate"),
        }
    }
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpId,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<MethodId>,
    pub flow: FlowConfig,
    pub sigma: SigmaChoice,
    pub binary_scale: f64,
    pub floor: f64,
    pub jobs: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dgp: DgpId::Dgp1,
            n: 300,
            reps: 500,
            seed: 1,
            methods: vec![
                MethodId::UlfsKdpe,
                MethodId::Initial,
                MethodId::OneStep,
                MethodId::TmleAte,
            ],
            flow: FlowConfig {
                mode: NormalizationMode::XMarginalFixed,
                ..FlowConfig::default()
            },
            sigma: SigmaChoice::Median,
            binary_scale: 1.0,
            floor: 1e-3,
            jobs: 1,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "n must be at least 10, got {}",
                self.n
            )));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.floor <= 0.0 || self.floor >= 0.25 || self.floor.is_nan() {
            return Err(Error::Config(format!(
                "floor must lie in (0, 0.25), got {}",
                self.floor
            )));
        }
        if self.binary_scale <= 0.0 || self.binary_scale.is_nan() {
            return Err(Error::Config("binary_scale must be positive".into()));
        }
        if let SigmaChoice::Fixed(s) = self.sigma {
            if s <= 0.0 || s.is_nan() {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        self.flow.validate()
    }

    /// Label for the CSV `stopping_rule` column.
    pub fn stopping_label(&self) -> String {
        let rules: Vec<String> = self
            .flow
            .stopping
            .enabled
            .iter()
            .map(|r| r.to_string())
            .collect();
        if rules.is_empty() {
            if self.flow.delta_n.is_some() {
                "score_target".into()
            } else {
                "none".into()
            }
        } else {
            rules.join("+")
        }
    }
}

/// One method's estimates within a replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub method: MethodId,
    pub ate: Option<f64>,
    pub rr: Option<f64>,
    pub or_: Option<f64>,
    pub converged: bool,
}

impl EstimateRecord {
    pub fn get(&self, kind: TargetKind) -> Option<f64> {
        match kind {
            TargetKind::Ate => self.ate,
            TargetKind::Rr => self.rr,
            TargetKind::Or => self.or_,
        }
    }
}

/// Everything recorded for one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    pub estimates: Vec<EstimateRecord>,
    /// Number of flow executions in this replicate; the three parameters are
    /// all read off the single stopped density.
    pub flow_runs: usize,
    pub flow_iterations: usize,
    pub flow_stop: Option<StopReason>,
    /// `|P_n EIF_ATE|` at the initial density.
    pub eif_ate_initial: Option<f64>,
    /// `|P_n EIF_ATE|` at the stopped density.
    pub eif_ate_final: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated row matching the study tables: bias (x100), Monte Carlo
/// variance `(1/B) sum (psi_b - mean)^2`, and `rmse = sqrt(bias^2 + var)`
/// with the un-scaled bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub dgp: DgpId,
    pub method: MethodId,
    pub parameter: TargetKind,
    pub stopping_rule: String,
    pub n_converged: usize,
    pub bias_x100: f64,
    pub var: f64,
    pub rmse: f64,
    pub truth: f64,
    pub replicates: Vec<f64>,
}

/// Full output of a Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOutput {
    pub dgp: DgpId,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub stopping_rule: String,
    pub truth: TargetEstimates,
    pub summaries: Vec<SimulationSummary>,
    pub replicates: Vec<ReplicateReport>,
}

fn mean_abs(v: &[f64]) -> f64 {
    (pairwise_sum(v) / v.len() as f64).abs()
}

/// Runs one replicate: draw, fit nuisances, initialize, flow, baselines.
pub fn run_replicate(cfg: &McConfig, replicate: usize) -> ReplicateReport {
    let seed = replicate_seed(cfg.seed, replicate as u64);
    match run_replicate_inner(cfg, seed) {
        Ok(mut report) => {
            report.replicate = replicate;
            report
        }
        Err(e) => ReplicateReport {
            replicate,
            seed,
            estimates: Vec::new(),
            flow_runs: 0,
            flow_iterations: 0,
            flow_stop: None,
            eif_ate_initial: None,
            eif_ate_final: None,
            error: Some(e.to_string()),
        },
    }
}

fn run_replicate_inner(cfg: &McConfig, seed: u64) -> Result<ReplicateReport> {
    let (sample, _) = sample_dgp(cfg.dgp, cfg.n, seed)?;
    let fit = NuisanceFit::fit_default(&sample, replicate_seed(seed, 1))?;
    let xs: Vec<Vec<f64>> = sample.iter().map(|o| o.x().to_vec()).collect();
    let d0 = WorkingDensity::init_from_nuisance(&xs, &fit, cfg.floor, cfg.flow.mode)?;
    let sigma = match cfg.sigma {
        SigmaChoice::Median => median_heuristic(&sample, cfg.binary_scale),
        SigmaChoice::Fixed(s) => s,
    };
    let kcfg = KernelConfig::with_binary_scale(sigma, cfg.binary_scale)?;

    let mut estimates = Vec::new();
    let mut flow_runs = 0;
    let mut flow_iterations = 0;
    let mut flow_stop = None;
    let mut eif_initial = None;
    let mut eif_final = None;

    for method in &cfg.methods {
        match method {
            MethodId::UlfsKdpe => {
                let trace = run_flow(d0.clone(), &sample, kcfg, &cfg.flow)?;
                flow_runs += 1;
                flow_iterations = trace.iterations;
                flow_stop = Some(trace.stop_reason);
                let t = estimate_targets(&trace.final_density)?;
                eif_initial = Some(mean_abs(&eif_target(&d0, &sample, TargetKind::Ate)?));
                eif_final = Some(mean_abs(&eif_target(
                    &trace.final_density,
                    &sample,
                    TargetKind::Ate,
                )?));
                estimates.push(EstimateRecord {
                    method: MethodId::UlfsKdpe,
                    ate: Some(t.ate),
                    rr: Some(t.rr),
                    or_: Some(t.or_),
                    converged: trace.stop_reason.fired_before_limit(),
                });
            }
            MethodId::Initial => {
                let r = initial_plugin(&d0)?;
                estimates.push(EstimateRecord {
                    method: MethodId::Initial,
                    ate: r.ate,
                    rr: r.rr,
                    or_: r.or_,
                    converged: true,
                });
            }
            MethodId::OneStep => {
                let r = one_step_all(&d0, &sample)?;
                estimates.push(EstimateRecord {
                    method: MethodId::OneStep,
                    ate: r.ate,
                    rr: r.rr,
                    or_: r.or_,
                    converged: true,
                });
            }
            MethodId::TmleAte => {
                let r = tmle_ate(&d0, &sample, 20)?;
                estimates.push(EstimateRecord {
                    method: MethodId::TmleAte,
                    ate: r.ate,
                    rr: None,
                    or_: None,
                    converged: r.converged,
                });
            }
        }
    }
    Ok(ReplicateReport {
        replicate: 0,
        seed,
        estimates,
        flow_runs,
        flow_iterations,
        flow_stop,
        eif_ate_initial: eif_initial,
        eif_ate_final: eif_final,
        error: None,
    })
}

/// Runs the full study. Replicates run concurrently on `jobs` threads;
/// the result is identical for any job count.
pub fn run_monte_carlo(cfg: &McConfig) -> Result<McOutput> {
    cfg.validate()?;
    let truth = true_value_oracle(cfg.dgp)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool construction failed: {e}")))?;
    let replicates: Vec<ReplicateReport> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|b| run_replicate(cfg, b))
            .collect()
    });
    let summaries = summarize(cfg, &truth, &replicates);
    Ok(McOutput {
        dgp: cfg.dgp,
        n: cfg.n,
        reps: cfg.reps,
        seed: cfg.seed,
        stopping_rule: cfg.stopping_label(),
        truth,
        summaries,
        replicates,
    })
}

fn summarize(
    cfg: &McConfig,
    truth: &TargetEstimates,
    reports: &[ReplicateReport],
) -> Vec<SimulationSummary> {
    let mut out = Vec::new();
    for method in &cfg.methods {
        for kind in [TargetKind::Ate, TargetKind::Rr, TargetKind::Or] {
            let mut values = Vec::new();
            let mut n_converged = 0;
            for rep in reports {
                if rep.error.is_some() {
                    continue;
                }
                let Some(rec) = rep.estimates.iter().find(|e| e.method == *method) else {
                    continue;
                };
                let Some(v) = rec.get(kind) else { continue };
                values.push(v);
                if rec.converged {
                    n_converged += 1;
                }
            }
            if values.is_empty() {
                continue;
            }
            let b = values.len() as f64;
            let mean = pairwise_sum(&values) / b;
            let bias = mean - truth.get(kind);
            let sq_dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
            let var = pairwise_sum(&sq_dev) / b;
            let rmse = (bias * bias + var).sqrt();
            let stopping_rule = match method {
                MethodId::UlfsKdpe => cfg.stopping_label(),
                _ => "-".into(),
            };
            out.push(SimulationSummary {
                dgp: cfg.dgp,
                method: *method,
                parameter: kind,
                stopping_rule,
                n_converged,
                bias_x100: 100.0 * bias,
                var,
                rmse,
                truth: truth.get(kind),
                replicates: values,
            });
        }
    }
    out
}

/// Summary CSV with the documented column schema.
pub fn summary_csv(output: &McOutput) -> String {
    let mut s = String::from("dgp,method,parameter,stopping_rule,n_cov,bias_x100,var,rmse\n");
    for row in &output.summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.dgp,
            row.method,
            row.parameter,
            row.stopping_rule,
            row.n_converged,
            row.bias_x100,
            row.var,
            row.rmse
        ));
    }
    s
}

/// Histogram-ready CSV of per-replicate estimates, standardized by each
/// method's Monte Carlo standard deviation around the truth.
pub fn histogram_csv(output: &McOutput) -> String {
    let mut s = String::from("dgp,method,parameter,replicate,estimate,standardized\n");
    for row in &output.summaries {
        let sd = row.var.sqrt();
        let mut pos = 0usize;
        for rep in &output.replicates {
            if rep.error.is_some() {
                continue;
            }
            let Some(rec) = rep.estimates.iter().find(|e| e.method == row.method) else {
                continue;
            };
            let Some(v) = rec.get(row.parameter) else {
                continue;
            };
            debug_assert_eq!(row.replicates[pos], v);
            pos += 1;
            let z = if sd > 0.0 { (v - row.truth) / sd } else { 0.0 };
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.dgp, row.method, row.parameter, rep.replicate, v, z
            ));
        }
    }
    s
}
