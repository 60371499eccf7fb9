//! The density-flow update engine: centered Gram matrix, coefficient vector,
//! update direction, exponential-tilt Euler step, and the main loop.
//!
//! Each iteration recenters the kernel at the current distribution, forms
//! `alpha = (1/n) G 1` from the centered Gram matrix `G`, builds the
//! direction `D(o) = (1/n) sum_j alpha_j K_t(o, O_j)`, tilts the weights by
//! `exp(delta * D)` and renormalizes. The empirical log-likelihood is
//! nondecreasing along the flow and stationarity is equivalent to a vanishing
//! empirical mean embedding; both are checked at every iteration together
//! with the other per-iteration invariants.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::density::{NormalizationMode, WorkingDensity};
use crate::error::{Error, Result};
use crate::kernel::{BaseGram, CenteredKernel, KernelConfig, Observation};
use crate::stopping::{
    sc1_density_plateau, sc2_score_plateau, sc3_vanishing_direction, sc4_variance_dominated,
    sc5_eif_solved, StopRule, StoppingConfig,
};
use crate::targets::{eif_target, TargetKind};

/// `exp` overflows past this magnitude; the uniform direction bound keeps the
/// tilt exponent far below it at any sane step size.
const EXP_GUARD: f64 = 700.0;

/// Flow parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Euler step size.
    pub delta: f64,
    /// Iteration limit.
    pub max_iters: usize,
    /// Optional hard score target: stop as soon as `s_t` falls below it.
    pub delta_n: Option<f64>,
    pub stopping: StoppingConfig,
    pub mode: NormalizationMode,
    /// Fail the run on the first violated per-iteration invariant. Disabled
    /// by the diagnostics command, which wants the full table instead.
    #[serde(default = "default_true")]
    pub enforce_invariants: bool,
    /// Test hook: flips the sign of the update direction so the Lyapunov
    /// check must fail.
    #[serde(default, skip_serializing)]
    pub negate_direction: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            max_iters: 100,
            delta_n: None,
            stopping: StoppingConfig::default(),
            mode: NormalizationMode::Global,
            enforce_invariants: true,
            negate_direction: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 || !self.delta.is_finite() {
            return Err(Error::Config(format!(
                "step size must be nonnegative, got {}",
                self.delta
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if let Some(dn) = self.delta_n {
            if dn <= 0.0 || dn.is_nan() {
                return Err(Error::Config(format!("delta_n must be positive, got {dn}")));
            }
        }
        self.stopping.validate()
    }
}

/// Why the flow stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Sc1,
    Sc2,
    Sc3,
    Sc4,
    Sc5,
    ScoreTarget,
    MaxIters,
}

impl StopReason {
    pub fn fired_before_limit(self) -> bool {
        self != StopReason::MaxIters
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::Sc1 => "sc1",
            StopReason::Sc2 => "sc2",
            StopReason::Sc3 => "sc3",
            StopReason::Sc4 => "sc4",
            StopReason::Sc5 => "sc5",
            StopReason::ScoreTarget => "score_target",
            StopReason::MaxIters => "max_iters",
        };
        write!(f, "{s}")
    }
}

impl From<StopRule> for StopReason {
    fn from(rule: StopRule) -> Self {
        match rule {
            StopRule::Sc1 => StopReason::Sc1,
            StopRule::Sc2 => StopReason::Sc2,
            StopRule::Sc3 => StopReason::Sc3,
            StopRule::Sc4 => StopReason::Sc4,
            StopRule::Sc5 => StopReason::Sc5,
        }
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    n: usize,
    vals: Vec<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.vals[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vals[i * self.n..(i + 1) * self.n]
    }

    /// Mean over all entries, accumulated per row so the rounding pattern
    /// matches the column sums used for `alpha`.
    pub fn mean(&self) -> f64 {
        let total: f64 = (0..self.n).map(|i| self.row(i).iter().sum::<f64>()).sum();
        total / (self.n * self.n) as f64
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Centered Gram matrix `[K_t(O_i, O_j)]` at arbitrary sample points.
pub fn centered_gram(ck: &CenteredKernel, sample: &[Observation]) -> GramMatrix {
    let n = sample.len();
    let m: Vec<f64> = sample.iter().map(|o| ck.mean_embedding_at(o)).collect();
    let kappa = ck.kappa();
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let k = crate::kernel::gauss_kernel(&sample[i], &sample[j], ck.config());
            let v = k - m[i] * m[j] / kappa;
            vals[i * n + j] = v;
            vals[j * n + i] = v;
        }
    }
    GramMatrix { n, vals }
}

/// Centered Gram matrix at support atoms identified by index, reusing the
/// cached base Gram and mean-embedding values.
pub fn centered_gram_indexed(ck: &CenteredKernel, sample_idx: &[usize]) -> GramMatrix {
    let n = sample_idx.len();
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = ck.centered_eval_index(sample_idx[i], sample_idx[j]);
            vals[i * n + j] = v;
            vals[j * n + i] = v;
        }
    }
    GramMatrix { n, vals }
}

/// Coefficient vector `alpha = (1/n) G 1`; `alpha_j` equals the empirical
/// mean embedding evaluated at `O_j`.
pub fn compute_alpha(g: &GramMatrix) -> Vec<f64> {
    let n = g.n() as f64;
    (0..g.n())
        .map(|j| (0..g.n()).map(|i| g.get(i, j)).sum::<f64>() / n)
        .collect()
}

/// Update direction at an arbitrary point:
/// `D(o) = (1/n) sum_j alpha_j K_t(o, O_j)`.
pub fn direction_at(
    ck: &CenteredKernel,
    alpha: &[f64],
    sample: &[Observation],
    o: &Observation,
) -> f64 {
    let n = alpha.len() as f64;
    alpha
        .iter()
        .zip(sample.iter())
        .map(|(a, oj)| a * ck.centered_eval(o, oj))
        .sum::<f64>()
        / n
}

/// Empirical score `s_t = (1/n) sum_j alpha_j^2 = P_n[D]`.
pub fn empirical_score(alpha: &[f64]) -> f64 {
    if alpha.is_empty() {
        return 0.0;
    }
    alpha.iter().map(|a| a * a).sum::<f64>() / alpha.len() as f64
}

/// One flow iterate together with its per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub step: usize,
    pub density: WorkingDensity,
    pub ck: CenteredKernel,
    pub alpha: Vec<f64>,
    pub score: f64,
    /// `D` evaluated at every support atom.
    pub direction_atoms: Vec<f64>,
    /// Offset log-density at the observed sample points.
    pub log_density_sample: Vec<f64>,
    /// `P_n[log p_t]`.
    pub loglik: f64,
    pub mean_alpha: f64,
    /// `||m_n||^2` computed independently as the mean of the centered Gram.
    pub embedding_norm_sq: f64,
    /// `||D||^2 = (1/n^2) alpha^T G alpha`.
    pub dir_norm_sq: f64,
    /// `sum_atoms w * D`, which is zero for a mean-zero direction.
    pub direction_mass: f64,
    /// `|sum w - 1|` after renormalization.
    pub mass_error: f64,
    /// Worst per-group deviation from `1/n` (x-marginal-fixed mode only).
    pub group_mass_error: Option<f64>,
    pub max_abs_direction: f64,
    /// Pre-renormalization `|sum w' - 1|` of the step that produced this
    /// state; zero at the initial state.
    pub mass_drift: f64,
}

/// Serializable per-iteration record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub score: f64,
    pub loglik: f64,
    pub mean_alpha: f64,
    pub embedding_norm_sq: f64,
    pub dir_norm_sq: f64,
    pub direction_mass: f64,
    pub mass_error: f64,
    pub group_mass_error: Option<f64>,
    pub max_abs_direction: f64,
    pub mass_drift: f64,
    /// SC1/SC4 squared increment of the sample log-density.
    pub delta_p: Option<f64>,
    /// SC4 absolute mean increment.
    pub delta_ell: Option<f64>,
    /// Cumulative squared movement from the initial log-density.
    pub cum_sq: f64,
    /// Empirical mean of the ATE influence function, when tracked.
    pub eif_mean: Option<f64>,
}

/// Full record of a flow run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrace {
    pub rows: Vec<TraceRow>,
    pub stop_reason: StopReason,
    /// Euler steps executed.
    pub iterations: usize,
    pub final_density: WorkingDensity,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// One configured flow over a fixed support and sample.
pub struct Flow {
    support: Arc<Vec<Observation>>,
    gram: Arc<BaseGram>,
    sample: Vec<Observation>,
    sample_idx: Vec<usize>,
    kcfg: KernelConfig,
    cfg: FlowConfig,
}

impl Flow {
    pub fn new(
        initial: &WorkingDensity,
        sample: &[Observation],
        kcfg: KernelConfig,
        cfg: FlowConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if sample.len() != initial.n_obs() {
            return Err(Error::Config(format!(
                "sample size {} does not match density support n = {}",
                sample.len(),
                initial.n_obs()
            )));
        }
        let sample_idx = sample
            .iter()
            .enumerate()
            .map(|(i, o)| initial.sample_atom_index(i, o))
            .collect::<Result<Vec<_>>>()?;
        let support = Arc::clone(initial.atoms());
        let gram = Arc::new(BaseGram::compute(&support, &kcfg));
        Ok(Self {
            support,
            gram,
            sample: sample.to_vec(),
            sample_idx,
            kcfg,
            cfg,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_idx
    }

    /// Builds the flow state at a given density, computing all diagnostics.
    fn build_state(
        &self,
        density: WorkingDensity,
        t: f64,
        step: usize,
        mass_drift: f64,
    ) -> Result<FlowState> {
        if !Arc::ptr_eq(density.atoms(), &self.support) {
            return Err(Error::Config(
                "density support does not match the flow's support".into(),
            ));
        }
        let n = self.sample_idx.len();
        let ck = CenteredKernel::with_gram(
            self.kcfg,
            Arc::clone(&self.support),
            Arc::clone(&self.gram),
            density.weights().to_vec(),
        )?;
        let g = centered_gram_indexed(&ck, &self.sample_idx);
        let alpha = compute_alpha(&g);
        let score = empirical_score(&alpha);
        let mean_alpha = alpha.iter().sum::<f64>() / n as f64;
        let embedding_norm_sq = g.mean();
        let g_alpha = g.mul_vec(&alpha);
        let dir_norm_sq = alpha
            .iter()
            .zip(g_alpha.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n * n) as f64;

        // D at every atom: (1/n) [ sum_j alpha_j K(atom, O_j)
        //                          - m(atom) * (sum_j alpha_j m(O_j)) / kappa ].
        let kappa = ck.kappa();
        let s_alpha: f64 = self
            .sample_idx
            .iter()
            .zip(alpha.iter())
            .map(|(idx, a)| a * ck.m_at_index(*idx))
            .sum();
        let sign = if self.cfg.negate_direction { -1.0 } else { 1.0 };
        let inv_n = 1.0 / n as f64;
        let n_atoms = self.support.len();
        let mut direction_atoms = Vec::with_capacity(n_atoms);
        for k in 0..n_atoms {
            let row = self.gram.row(k);
            let mut acc = 0.0;
            for (idx, a) in self.sample_idx.iter().zip(alpha.iter()) {
                acc += a * row[*idx];
            }
            let d = inv_n * (acc - ck.m_at_index(k) * s_alpha / kappa);
            direction_atoms.push(sign * d);
        }

        let weights = density.weights();
        let direction_mass: f64 = weights
            .iter()
            .zip(direction_atoms.iter())
            .map(|(w, d)| w * d)
            .sum();
        let max_abs_direction = direction_atoms.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let mass_error = (weights.iter().sum::<f64>() - 1.0).abs();
        let group_mass_error = match density.mode() {
            NormalizationMode::XMarginalFixed => {
                let target = 1.0 / n as f64;
                Some(
                    (0..n)
                        .map(|i| (density.group_mass(i) - target).abs())
                        .fold(0.0f64, f64::max),
                )
            }
            NormalizationMode::Global => None,
        };

        let log_n = (n as f64).ln();
        let log_density_sample: Vec<f64> = self
            .sample_idx
            .iter()
            .map(|idx| weights[*idx].ln() + log_n)
            .collect();
        let loglik = log_density_sample.iter().sum::<f64>() / n as f64;

        Ok(FlowState {
            t,
            step,
            density,
            ck,
            alpha,
            score,
            direction_atoms,
            log_density_sample,
            loglik,
            mean_alpha,
            embedding_norm_sq,
            dir_norm_sq,
            direction_mass,
            mass_error,
            group_mass_error,
            max_abs_direction,
            mass_drift,
        })
    }

    pub fn initial_state(&self, density: WorkingDensity) -> Result<FlowState> {
        self.build_state(density, 0.0, 0, 0.0)
    }

    /// Multiplicative tilt `w <- w exp(delta * D)` followed by
    /// renormalization; rebuilds the centered kernel at the new weights.
    pub fn euler_step(&self, state: &FlowState) -> Result<FlowState> {
        let delta = self.cfg.delta;
        let max_exponent = delta
            * state
                .direction_atoms
                .iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
        if max_exponent > EXP_GUARD {
            // Unreachable at default settings: the direction is uniformly
            // bounded by 1 for the Gaussian kernel.
            return Err(Error::StepSize {
                magnitude: max_exponent,
            });
        }
        let tilted: Vec<f64> = state
            .density
            .weights()
            .iter()
            .zip(state.direction_atoms.iter())
            .map(|(w, d)| w * (delta * d).exp())
            .collect();
        let drift = (tilted.iter().sum::<f64>() - 1.0).abs();
        let renormalized = state.density.with_weights(tilted, self.cfg.mode)?;
        self.build_state(renormalized, state.t + delta, state.step + 1, drift)
    }

    fn trace_row(
        &self,
        state: &FlowState,
        prev_log: Option<&[f64]>,
        initial_log: &[f64],
        eif_mean: Option<f64>,
    ) -> TraceRow {
        let delta_p = prev_log.map(|p| {
            state
                .log_density_sample
                .iter()
                .zip(p.iter())
                .map(|(c, q)| (c - q) * (c - q))
                .sum::<f64>()
                / p.len() as f64
        });
        let delta_ell = prev_log.map(|p| {
            (state
                .log_density_sample
                .iter()
                .zip(p.iter())
                .map(|(c, q)| c - q)
                .sum::<f64>()
                / p.len() as f64)
                .abs()
        });
        let cum_sq = state
            .log_density_sample
            .iter()
            .zip(initial_log.iter())
            .map(|(c, q)| (c - q) * (c - q))
            .sum::<f64>()
            / initial_log.len() as f64;
        TraceRow {
            step: state.step,
            t: state.t,
            score: state.score,
            loglik: state.loglik,
            mean_alpha: state.mean_alpha,
            embedding_norm_sq: state.embedding_norm_sq,
            dir_norm_sq: state.dir_norm_sq,
            direction_mass: state.direction_mass,
            mass_error: state.mass_error,
            group_mass_error: state.group_mass_error,
            max_abs_direction: state.max_abs_direction,
            mass_drift: state.mass_drift,
            delta_p,
            delta_ell,
            cum_sq,
            eif_mean,
        }
    }

    /// Runs the discretized flow from `initial` until a stopping rule fires,
    /// the score target is met, or the iteration limit is reached.
    pub fn run(&self, initial: WorkingDensity) -> Result<FlowTrace> {
        let started = Instant::now();
        let scfg = &self.cfg.stopping;
        let track_eif = scfg.enabled.contains(&StopRule::Sc5);

        let mut state = self.initial_state(initial)?;
        let initial_log = state.log_density_sample.clone();
        let mut rows: Vec<TraceRow> = Vec::with_capacity(self.cfg.max_iters + 1);
        let mut prev_log: Option<Vec<f64>> = None;
        let mut prev_delta_p: Option<f64> = None;
        let mut prev_score: Option<f64> = None;
        let mut prev_eif: Option<Vec<f64>> = None;
        let stop_reason;

        loop {
            // SC5 monitors the ATE influence function at the current iterate;
            // when it cannot be evaluated the rule is simply inert.
            let eif_curr: Option<Vec<f64>> = if track_eif {
                eif_target(&state.density, &self.sample, TargetKind::Ate).ok()
            } else {
                None
            };
            let eif_mean = eif_curr
                .as_ref()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);

            let row = self.trace_row(&state, prev_log.as_deref(), &initial_log, eif_mean);
            if self.cfg.enforce_invariants {
                if let Some((name, detail)) = first_violation(&row, rows.last()) {
                    return Err(Error::Invariant {
                        name,
                        iteration: state.step,
                        detail,
                    });
                }
            }
            let delta_p_here = row.delta_p;
            rows.push(row);

            if state.step >= self.cfg.max_iters {
                stop_reason = StopReason::MaxIters;
                break;
            }

            // Stop checks in fixed priority: the hard score target first,
            // then SC3 > SC2 > SC1 > SC4 > SC5.
            if let Some(dn) = self.cfg.delta_n {
                if state.score <= dn {
                    stop_reason = StopReason::ScoreTarget;
                    break;
                }
            }
            let mut fired: Option<StopReason> = None;
            for rule in [
                StopRule::Sc3,
                StopRule::Sc2,
                StopRule::Sc1,
                StopRule::Sc4,
                StopRule::Sc5,
            ] {
                if !scfg.enabled.contains(&rule) {
                    continue;
                }
                let decision = match rule {
                    StopRule::Sc1 => sc1_density_plateau(
                        &state.log_density_sample,
                        prev_log.as_deref(),
                        prev_delta_p,
                        scfg,
                    ),
                    StopRule::Sc2 => sc2_score_plateau(state.score, prev_score, scfg),
                    StopRule::Sc3 => {
                        sc3_vanishing_direction(&state.ck, &state.alpha, &self.sample_idx, scfg)
                    }
                    StopRule::Sc4 => sc4_variance_dominated(
                        &state.log_density_sample,
                        prev_log.as_deref(),
                        &initial_log,
                        state.alpha.len(),
                        scfg,
                    ),
                    StopRule::Sc5 => match &eif_curr {
                        Some(curr) => {
                            sc5_eif_solved(curr, prev_eif.as_deref(), state.alpha.len(), scfg)
                        }
                        None => continue,
                    },
                };
                if decision.fired {
                    fired = Some(rule.into());
                    break;
                }
            }
            if let Some(reason) = fired {
                stop_reason = reason;
                break;
            }

            prev_log = Some(state.log_density_sample.clone());
            prev_delta_p = delta_p_here;
            prev_score = Some(state.score);
            prev_eif = eif_curr;
            state = self.euler_step(&state)?;
        }

        Ok(FlowTrace {
            rows,
            stop_reason,
            iterations: state.step,
            final_density: state.density,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }
}

/// Convenience wrapper: build a [`Flow`] and run it.
pub fn run_flow(
    initial: WorkingDensity,
    sample: &[Observation],
    kcfg: KernelConfig,
    cfg: &FlowConfig,
) -> Result<FlowTrace> {
    Flow::new(&initial, sample, kcfg, cfg.clone())?.run(initial)
}

/// Tolerances for the per-iteration invariants.
pub mod invariant {
    pub const LYAPUNOV_REL_TOL: f64 = 1e-9;
    pub const CENTERED_DIRECTION_TOL: f64 = 1e-8;
    pub const SCORE_BOUND_TOL: f64 = 1e-12;
    pub const STATIONARITY_TOL: f64 = 1e-10;
    /// `C^2` for the Gaussian kernel plus rounding slack.
    pub const DIRECTION_SUP_BOUND: f64 = 1.0 + 1e-9;
    pub const MASS_TOL: f64 = 1e-12;
    pub const GROUP_MASS_TOL: f64 = 1e-10;
}

/// Result of checking one invariant over a whole trace.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    pub name: &'static str,
    pub passed: bool,
    pub threshold: f64,
    /// Worst observed value (measured so that `value <= threshold` passes).
    pub worst_value: f64,
    pub worst_iteration: usize,
}

fn invariant_values(row: &TraceRow, prev: Option<&TraceRow>) -> Vec<(&'static str, f64, f64)> {
    let mut out = vec![
        (
            "centered_direction",
            row.direction_mass.abs(),
            invariant::CENTERED_DIRECTION_TOL,
        ),
        ("score_nonnegative", -row.score, 0.0),
        (
            "score_embedding_bound",
            row.mean_alpha * row.mean_alpha - row.score,
            invariant::SCORE_BOUND_TOL,
        ),
        (
            "stationarity_equivalence",
            (row.mean_alpha - row.embedding_norm_sq).abs(),
            invariant::STATIONARITY_TOL,
        ),
        (
            "direction_sup_bound",
            row.max_abs_direction,
            invariant::DIRECTION_SUP_BOUND,
        ),
        ("mass_conservation", row.mass_error, invariant::MASS_TOL),
    ];
    if let Some(g) = row.group_mass_error {
        out.push(("group_mass_conservation", g, invariant::GROUP_MASS_TOL));
    }
    if let Some(prev) = prev {
        let tol = invariant::LYAPUNOV_REL_TOL * (1.0 + prev.loglik.abs());
        out.push(("lyapunov_monotonicity", prev.loglik - row.loglik, tol));
    }
    out
}

fn first_violation(row: &TraceRow, prev: Option<&TraceRow>) -> Option<(&'static str, String)> {
    for (name, value, threshold) in invariant_values(row, prev) {
        if value > threshold {
            return Some((name, format!("value {value} exceeds tolerance {threshold}")));
        }
    }
    None
}

/// Evaluates every per-iteration invariant over a full trace.
pub fn verify_invariants(trace: &FlowTrace) -> Vec<InvariantReport> {
    let names = [
        "lyapunov_monotonicity",
        "centered_direction",
        "score_nonnegative",
        "score_embedding_bound",
        "stationarity_equivalence",
        "direction_sup_bound",
        "mass_conservation",
        "group_mass_conservation",
    ];
    let mut reports: Vec<InvariantReport> = Vec::new();
    for name in names {
        if name == "group_mass_conservation"
            && trace.rows.iter().all(|r| r.group_mass_error.is_none())
        {
            continue;
        }
        reports.push(InvariantReport {
            name,
            passed: true,
            threshold: 0.0,
            worst_value: f64::NEG_INFINITY,
            worst_iteration: 0,
        });
    }
    for (i, row) in trace.rows.iter().enumerate() {
        let prev = if i == 0 {
            None
        } else {
            Some(&trace.rows[i - 1])
        };
        for (name, value, threshold) in invariant_values(row, prev) {
            if let Some(rep) = reports.iter_mut().find(|r| r.name == name) {
                rep.threshold = threshold;
                // Headroom relative to the (possibly row-dependent) threshold.
                if value - threshold > rep.worst_value - rep.threshold
                    || rep.worst_value == f64::NEG_INFINITY
                {
                    rep.worst_value = value;
                    rep.worst_iteration = row.step;
                }
                if value > threshold {
                    rep.passed = false;
                }
            }
        }
    }
    for rep in &mut reports {
        if rep.worst_value == f64::NEG_INFINITY {
            rep.worst_value = 0.0;
        }
    }
    reports
}
