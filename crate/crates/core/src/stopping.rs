//! The five stopping criteria for the discretized flow, as pure rules over
//! iteration diagnostics. Plateau-style clauses are skipped on the first
//! iteration (no predecessor); absolute clauses still apply.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::kernel::CenteredKernel;

/// Rule identifiers. `Ord` gives a deterministic iteration order for
/// configured rule sets; firing priority is fixed separately by the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    Sc1,
    Sc2,
    Sc3,
    Sc4,
    Sc5,
}

impl std::fmt::Display for StopRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopRule::Sc1 => write!(f, "sc1"),
            StopRule::Sc2 => write!(f, "sc2"),
            StopRule::Sc3 => write!(f, "sc3"),
            StopRule::Sc4 => write!(f, "sc4"),
            StopRule::Sc5 => write!(f, "sc5"),
        }
    }
}

impl std::str::FromStr for StopRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sc1" => Ok(StopRule::Sc1),
            "sc2" => Ok(StopRule::Sc2),
            "sc3" => Ok(StopRule::Sc3),
            "sc4" => Ok(StopRule::Sc4),
            "sc5" => Ok(StopRule::Sc5),
            other => Err(format!("unknown stopping rule `{other}`")),
        }
    }
}

/// Tolerances and the enabled rule set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub delta_p: f64,
    pub delta_s: f64,
    pub delta_alpha: f64,
    pub delta_v: f64,
    pub delta_ell: f64,
    /// SC5 constant `c` in the threshold `c * n^{-1/2}`.
    pub eif_c: f64,
    /// Multiplier on `1/n` in SC4's cumulative-variability condition.
    pub cum_multiplier: f64,
    pub enabled: BTreeSet<StopRule>,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            delta_p: 1e-8,
            delta_s: 1e-8,
            delta_alpha: 1e-8,
            delta_v: 1e-8,
            delta_ell: 1e-8,
            eif_c: 1.0,
            cum_multiplier: 1.0,
            enabled: BTreeSet::from([StopRule::Sc1]),
        }
    }
}

impl StoppingConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        for (name, v) in [
            ("delta_p", self.delta_p),
            ("delta_s", self.delta_s),
            ("delta_alpha", self.delta_alpha),
            ("delta_v", self.delta_v),
            ("delta_ell", self.delta_ell),
            ("eif_c", self.eif_c),
            ("cum_multiplier", self.cum_multiplier),
        ] {
            if v <= 0.0 || v.is_nan() {
                return Err(crate::error::Error::Config(format!(
                    "stopping tolerance {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn none() -> Self {
        Self {
            enabled: BTreeSet::new(),
            ..Self::default()
        }
    }

    pub fn with_rules<I: IntoIterator<Item = StopRule>>(rules: I) -> Self {
        Self {
            enabled: rules.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// Outcome of evaluating one rule.
#[derive(Debug, Clone, Serialize)]
pub struct StopDecision {
    pub fired: bool,
    pub rule: StopRule,
    /// The quantity the rule compared against its tolerance, when defined.
    pub value: Option<f64>,
}

impl StopDecision {
    fn quiet(rule: StopRule, value: Option<f64>) -> Self {
        Self {
            fired: false,
            rule,
            value,
        }
    }

    fn fire(rule: StopRule, value: f64) -> Self {
        Self {
            fired: true,
            rule,
            value: Some(value),
        }
    }
}

fn mean_sq_diff(curr: &[f64], prev: &[f64]) -> f64 {
    let n = curr.len() as f64;
    curr.iter()
        .zip(prev.iter())
        .map(|(c, p)| (c - p) * (c - p))
        .sum::<f64>()
        / n
}

fn mean_diff(curr: &[f64], prev: &[f64]) -> f64 {
    let n = curr.len() as f64;
    curr.iter()
        .zip(prev.iter())
        .map(|(c, p)| c - p)
        .sum::<f64>()
        / n
}

/// SC1, density plateau: the mean squared increment of the sample
/// log-density is small, or has itself stopped changing.
pub fn sc1_density_plateau(
    curr_log: &[f64],
    prev_log: Option<&[f64]>,
    prev_delta: Option<f64>,
    cfg: &StoppingConfig,
) -> StopDecision {
    let Some(prev) = prev_log else {
        return StopDecision::quiet(StopRule::Sc1, None);
    };
    let delta_p = mean_sq_diff(curr_log, prev);
    if delta_p <= cfg.delta_p {
        return StopDecision::fire(StopRule::Sc1, delta_p);
    }
    if let Some(pd) = prev_delta {
        if (delta_p - pd).abs() <= 0.1 * cfg.delta_p {
            return StopDecision::fire(StopRule::Sc1, delta_p);
        }
    }
    StopDecision::quiet(StopRule::Sc1, Some(delta_p))
}

/// SC2, score plateau: `|s_t| <= delta_s` or `|s_t - s_{t-1}| <= 0.1 delta_s`.
pub fn sc2_score_plateau(s_t: f64, s_prev: Option<f64>, cfg: &StoppingConfig) -> StopDecision {
    if s_t.abs() <= cfg.delta_s {
        return StopDecision::fire(StopRule::Sc2, s_t);
    }
    if let Some(prev) = s_prev {
        if (s_t - prev).abs() <= 0.1 * cfg.delta_s {
            return StopDecision::fire(StopRule::Sc2, s_t);
        }
    }
    StopDecision::quiet(StopRule::Sc2, Some(s_t))
}

/// Squared RKHS norm of the update direction,
/// `||D||^2 = (1/n^2) alpha^T G alpha`, computed from the centered kernel at
/// the sample atoms.
pub fn direction_norm_sq(ck: &CenteredKernel, alpha: &[f64], sample_idx: &[usize]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for j in 0..n {
        let mut row = 0.0;
        for l in 0..n {
            row += alpha[l] * ck.centered_eval_index(sample_idx[j], sample_idx[l]);
        }
        quad += alpha[j] * row;
    }
    quad / (n as f64 * n as f64)
}

/// SC3, vanishing update direction: `(1/n) ||D||^2 <= delta_alpha`.
pub fn sc3_vanishing_direction(
    ck: &CenteredKernel,
    alpha: &[f64],
    sample_idx: &[usize],
    cfg: &StoppingConfig,
) -> StopDecision {
    let norm_sq = direction_norm_sq(ck, alpha, sample_idx);
    let value = norm_sq / alpha.len() as f64;
    if value <= cfg.delta_alpha {
        StopDecision::fire(StopRule::Sc3, value)
    } else {
        StopDecision::quiet(StopRule::Sc3, Some(value))
    }
}

/// SC4, variance-dominated updates: negligible incremental movement, or
/// nontrivial cumulative movement (`>= cum_multiplier / n`) with negligible
/// mean improvement.
pub fn sc4_variance_dominated(
    curr_log: &[f64],
    prev_log: Option<&[f64]>,
    initial_log: &[f64],
    n: usize,
    cfg: &StoppingConfig,
) -> StopDecision {
    let Some(prev) = prev_log else {
        return StopDecision::quiet(StopRule::Sc4, None);
    };
    let delta_v = mean_sq_diff(curr_log, prev);
    if delta_v <= cfg.delta_v {
        return StopDecision::fire(StopRule::Sc4, delta_v);
    }
    let cumulative = mean_sq_diff(curr_log, initial_log);
    let delta_ell = mean_diff(curr_log, prev).abs();
    if cumulative >= cfg.cum_multiplier / n as f64 && delta_ell <= cfg.delta_ell {
        return StopDecision::fire(StopRule::Sc4, delta_v);
    }
    StopDecision::quiet(StopRule::Sc4, Some(delta_v))
}

/// SC5, EIF approximately solved: requires the empirical mean of the EIF to
/// be below `c n^{-1/2}` while no longer improving on the previous iterate.
pub fn sc5_eif_solved(
    eif_curr: &[f64],
    eif_prev: Option<&[f64]>,
    n: usize,
    cfg: &StoppingConfig,
) -> StopDecision {
    let mean_curr = eif_curr.iter().sum::<f64>() / eif_curr.len() as f64;
    let Some(prev) = eif_prev else {
        return StopDecision::quiet(StopRule::Sc5, Some(mean_curr));
    };
    let mean_prev = prev.iter().sum::<f64>() / prev.len() as f64;
    let threshold = cfg.eif_c / (n as f64).sqrt();
    if mean_curr.abs() <= threshold && mean_curr.abs() >= mean_prev.abs() {
        StopDecision::fire(StopRule::Sc5, mean_curr)
    } else {
        StopDecision::quiet(StopRule::Sc5, Some(mean_curr))
    }
}
