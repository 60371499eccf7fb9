//! The discrete working distribution over sample atoms.
//!
//! The support is fixed at the `4n` atoms `(X_i, a, y)` for `a, y` in
//! `{0,1}`; only the weights evolve. Atom `(i, a, y)` lives at index
//! `4i + 2a + y`, so an atom's covariate group is `index / 4`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Observation;
use crate::nuisance::NuisanceFit;

/// Sum-to-one tolerance for the whole weight vector.
pub const MASS_TOL: f64 = 1e-12;
/// Per-group sum tolerance in x-marginal-fixed mode.
pub const GROUP_MASS_TOL: f64 = 1e-10;

/// How mass is restored after a tilt step.
///
/// `Global` rescales the whole vector; `XMarginalFixed` rescales within each
/// covariate group so that every group keeps mass `1/n`, which treats the
/// empirical distribution of `X` as fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    Global,
    XMarginalFixed,
}

impl std::fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormalizationMode::Global => write!(f, "global"),
            NormalizationMode::XMarginalFixed => write!(f, "xfixed"),
        }
    }
}

/// Discrete probability distribution over the `4n` sample atoms.
#[derive(Debug, Clone, Serialize)]
pub struct WorkingDensity {
    atoms: Arc<Vec<Observation>>,
    weights: Vec<f64>,
    n_obs: usize,
    floor: f64,
    mode: NormalizationMode,
}

#[derive(Deserialize)]
struct WorkingDensityRaw {
    atoms: Vec<Observation>,
    weights: Vec<f64>,
    n_obs: usize,
    floor: f64,
    mode: NormalizationMode,
}

impl<'de> Deserialize<'de> for WorkingDensity {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = WorkingDensityRaw::deserialize(deserializer)?;
        WorkingDensity::from_parts(raw.atoms, raw.weights, raw.n_obs, raw.floor, raw.mode)
            .map_err(serde::de::Error::custom)
    }
}

/// Atom index of `(i, a, y)` in the fixed support layout.
#[inline]
pub fn atom_index(i: usize, a: u8, y: u8) -> usize {
    4 * i + 2 * (a as usize) + (y as usize)
}

/// Covariate group of an atom index.
#[inline]
pub fn x_group(atom_idx: usize) -> usize {
    atom_idx / 4
}

impl WorkingDensity {
    /// Builds the working density from nuisance fits: the joint weight is
    /// `(1/n) * e(a|X_i) * q(y|a,X_i)` with both conditionals clamped to
    /// `[floor, 1-floor]` and re-standardized to sum to one.
    pub fn init_from_nuisance(
        xs: &[Vec<f64>],
        fit: &NuisanceFit,
        floor: f64,
        mode: NormalizationMode,
    ) -> Result<Self> {
        let n = xs.len();
        if n < 2 {
            return Err(Error::Initialization(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if floor <= 0.0 || floor >= 0.25 || floor.is_nan() {
            return Err(Error::Config(format!(
                "floor must lie in (0, 0.25), got {floor}"
            )));
        }
        let mut atoms = Vec::with_capacity(4 * n);
        let mut weights = Vec::with_capacity(4 * n);
        let inv_n = 1.0 / n as f64;
        for x in xs {
            let e1 = fit.propensity_at(x);
            if !e1.is_finite() {
                return Err(Error::Initialization(
                    "non-finite propensity prediction".into(),
                ));
            }
            let (e0, e1) = stabilize_pair(1.0 - e1, e1, floor);
            for a in 0..2u8 {
                let q1 = fit.outcome_at(x, a);
                if !q1.is_finite() {
                    return Err(Error::Initialization(
                        "non-finite outcome prediction".into(),
                    ));
                }
                let (q0, q1) = stabilize_pair(1.0 - q1, q1, floor);
                let e_a = if a == 0 { e0 } else { e1 };
                for y in 0..2u8 {
                    let q_y = if y == 0 { q0 } else { q1 };
                    atoms.push(Observation::new(x.clone(), a, y)?);
                    weights.push(inv_n * e_a * q_y);
                }
            }
        }
        Self::from_parts(atoms, weights, n, floor, mode)
    }

    /// Assembles a density from explicit parts, validating all invariants.
    pub fn from_parts(
        atoms: Vec<Observation>,
        weights: Vec<f64>,
        n_obs: usize,
        floor: f64,
        mode: NormalizationMode,
    ) -> Result<Self> {
        if atoms.len() != 4 * n_obs || weights.len() != atoms.len() {
            return Err(Error::Config(format!(
                "expected 4n = {} atoms and weights, got {} and {}",
                4 * n_obs,
                atoms.len(),
                weights.len()
            )));
        }
        for (idx, atom) in atoms.iter().enumerate() {
            let (a, y) = ((idx / 2) % 2, idx % 2);
            if atom.a() as usize != a || atom.y() as usize != y {
                return Err(Error::Config(format!(
                    "atom at index {idx} does not follow the (i, a, y) layout"
                )));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("weights sum to {total}, expected 1")));
        }
        let d = Self {
            atoms: Arc::new(atoms),
            weights,
            n_obs,
            floor,
            mode,
        };
        if mode == NormalizationMode::XMarginalFixed {
            let target = 1.0 / n_obs as f64;
            for i in 0..n_obs {
                let g = d.group_mass(i);
                if (g - target).abs() > GROUP_MASS_TOL {
                    return Err(Error::Domain(format!(
                        "group {i} mass {g} deviates from 1/n = {target}"
                    )));
                }
            }
        }
        Ok(d)
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn atoms(&self) -> &Arc<Vec<Observation>> {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    pub fn weight(&self, i: usize, a: u8, y: u8) -> f64 {
        self.weights[atom_index(i, a, y)]
    }

    /// Total mass of covariate group `i`.
    pub fn group_mass(&self, i: usize) -> f64 {
        let base = 4 * i;
        self.weights[base]
            + self.weights[base + 1]
            + self.weights[base + 2]
            + self.weights[base + 3]
    }

    /// Treatment probability `e(a | X_i)` implied by the current weights.
    pub fn implied_propensity(&self, i: usize, a: u8) -> f64 {
        let pair = self.weight(i, a, 0) + self.weight(i, a, 1);
        pair / self.group_mass(i)
    }

    /// Replaces the weight vector after a multiplicative update,
    /// renormalizing per `mode`.
    pub fn with_weights(&self, weights: Vec<f64>, mode: NormalizationMode) -> Result<Self> {
        let candidate = Self {
            atoms: Arc::clone(&self.atoms),
            weights,
            n_obs: self.n_obs,
            floor: self.floor,
            mode: self.mode,
        };
        candidate.renormalize(mode)
    }

    /// Rescales weights to restore total (or per-group) mass.
    pub fn renormalize(&self, mode: NormalizationMode) -> Result<Self> {
        if self.weights.iter().any(|w| *w <= 0.0 || w.is_nan()) {
            return Err(Error::Positivity(
                "renormalize requires strictly positive weights".into(),
            ));
        }
        let mut weights = self.weights.clone();
        match mode {
            NormalizationMode::Global => {
                let total: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= total;
                }
            }
            NormalizationMode::XMarginalFixed => {
                let target = 1.0 / self.n_obs as f64;
                for i in 0..self.n_obs {
                    let base = 4 * i;
                    let g: f64 = weights[base..base + 4].iter().sum();
                    let scale = target / g;
                    for w in &mut weights[base..base + 4] {
                        *w *= scale;
                    }
                }
            }
        }
        Ok(Self {
            atoms: Arc::clone(&self.atoms),
            weights,
            n_obs: self.n_obs,
            floor: self.floor,
            mode,
        })
    }

    /// Log weights at the observed atoms, offset by `log n` so the values are
    /// comparable to conditional log-densities (the fixed `1/n` X-marginal
    /// contributes a constant).
    pub fn log_density_at_sample(&self, sample: &[Observation]) -> Result<Vec<f64>> {
        if sample.len() != self.n_obs {
            return Err(Error::Lookup(format!(
                "sample has {} points, support has n = {}",
                sample.len(),
                self.n_obs
            )));
        }
        let log_n = (self.n_obs as f64).ln();
        let mut out = Vec::with_capacity(sample.len());
        for (i, o) in sample.iter().enumerate() {
            let idx = self.sample_atom_index(i, o)?;
            out.push(self.weights[idx].ln() + log_n);
        }
        Ok(out)
    }

    /// Index of the atom matching sample point `i`, verifying that its
    /// covariates agree with the support.
    pub fn sample_atom_index(&self, i: usize, o: &Observation) -> Result<usize> {
        let idx = atom_index(i, o.a(), o.y());
        if self.atoms[idx].x() != o.x() {
            return Err(Error::Lookup(format!(
                "sample point {i} does not match the support covariates"
            )));
        }
        Ok(idx)
    }

    /// `E[Y | A=a, X_i]` implied by the weights:
    /// `w(i,a,1) / (w(i,a,0) + w(i,a,1))`.
    pub fn conditional_outcome_mean(&self, a: u8, i: usize) -> Result<f64> {
        let w0 = self.weight(i, a, 0);
        let w1 = self.weight(i, a, 1);
        let denom = w0 + w1;
        if !(w0 > 0.0 && w1 > 0.0) {
            return Err(Error::Degenerate(format!(
                "conditional (a={a}, i={i}) has nonpositive weights"
            )));
        }
        Ok(w1 / denom)
    }
}

/// Clamps both components of a binary conditional to `[floor, 1-floor]` and
/// re-standardizes them to sum to one.
fn stabilize_pair(p0: f64, p1: f64, floor: f64) -> (f64, f64) {
    let c0 = p0.clamp(floor, 1.0 - floor);
    let c1 = p1.clamp(floor, 1.0 - floor);
    let s = c0 + c1;
    (c0 / s, c1 / s)
}
