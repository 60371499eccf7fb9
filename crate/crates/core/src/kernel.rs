//! Gaussian base kernel on the sample space, kernel mean embeddings under
//! discrete distributions, and the mean-zero projected kernel.
//!
//! The projected kernel of a distribution `P` is
//! `K_P(o, o') = K(o, o') - m_P(o) m_P(o') / kappa` with `kappa = ||m_P||^2`,
//! the reproducing kernel of the subspace of functions with zero mean under
//! `P`. Everything here is an exact finite sum because the distributions we
//! evaluate are atomic.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight sums must match a probability vector to this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// `kappa` below this is treated as a degenerate distribution.
pub const KAPPA_TOL: f64 = 1e-300;

/// One sample point `(x, a, y)`: continuous covariates, binary treatment,
/// binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObservationRaw")]
pub struct Observation {
    x: Vec<f64>,
    a: u8,
    y: u8,
}

#[derive(Deserialize)]
struct ObservationRaw {
    x: Vec<f64>,
    a: u8,
    y: u8,
}

impl TryFrom<ObservationRaw> for Observation {
    type Error = Error;
    fn try_from(raw: ObservationRaw) -> Result<Self> {
        Observation::new(raw.x, raw.a, raw.y)
    }
}

impl Observation {
    pub fn new(x: Vec<f64>, a: u8, y: u8) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "observation covariates".into(),
            });
        }
        if a > 1 {
            return Err(Error::Domain(format!("treatment must be 0 or 1, got {a}")));
        }
        if y > 1 {
            return Err(Error::Domain(format!("outcome must be 0 or 1, got {y}")));
        }
        Ok(Self { x, a, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn a(&self) -> u8 {
        self.a
    }

    pub fn y(&self) -> u8 {
        self.y
    }
}

/// Gaussian kernel parameters. Binary coordinates enter the Euclidean
/// distance as 0/1 values scaled by `binary_scale`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
    pub binary_scale: f64,
}

impl KernelConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        Self::with_binary_scale(sigma, 1.0)
    }

    pub fn with_binary_scale(sigma: f64, binary_scale: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if binary_scale <= 0.0 || !binary_scale.is_finite() {
            return Err(Error::Config(format!(
                "binary_scale must be positive, got {binary_scale}"
            )));
        }
        Ok(Self {
            sigma,
            binary_scale,
        })
    }
}

/// Squared Euclidean distance of the embedded vectors
/// `(x, binary_scale*a, binary_scale*y)`.
fn squared_distance(o: &Observation, o2: &Observation, binary_scale: f64) -> f64 {
    debug_assert_eq!(o.x.len(), o2.x.len(), "covariate dimensions must match");
    let mut d2 = 0.0;
    for (xi, xj) in o.x.iter().zip(o2.x.iter()) {
        let d = xi - xj;
        d2 += d * d;
    }
    let da = binary_scale * (f64::from(o.a) - f64::from(o2.a));
    let dy = binary_scale * (f64::from(o.y) - f64::from(o2.y));
    d2 + da * da + dy * dy
}

/// Gaussian kernel `exp(-||o - o'||^2 / (2 sigma^2))`; in (0, 1], equal to 1
/// iff the embedded vectors coincide.
pub fn gauss_kernel(o: &Observation, o2: &Observation, cfg: &KernelConfig) -> f64 {
    let d2 = squared_distance(o, o2, cfg.binary_scale);
    (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp()
}

/// Median of pairwise embedded distances over the sample. Falls back to 1.0
/// when fewer than two distinct points exist.
pub fn median_heuristic(sample: &[Observation], binary_scale: f64) -> f64 {
    let n = sample.len();
    if n < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(squared_distance(&sample[i], &sample[j], binary_scale).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Dense symmetric base-kernel matrix over a fixed support. Computed once
/// per support; the centered kernel is rebuilt from it each time the weights
/// change, which costs a matrix-vector product instead of `m^2` kernel
/// evaluations.
#[derive(Debug)]
pub struct BaseGram {
    n: usize,
    vals: Vec<f64>,
}

impl BaseGram {
    pub fn compute(support: &[Observation], cfg: &KernelConfig) -> Self {
        let n = support.len();
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            vals[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let k = gauss_kernel(&support[i], &support[j], cfg);
                vals[i * n + j] = k;
                vals[j * n + i] = k;
            }
        }
        Self { n, vals }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.vals[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.vals[i * self.n..(i + 1) * self.n]
    }

    /// `out = G w`, summed in index order.
    fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(w.iter()).map(|(g, wj)| g * wj).sum())
            .collect()
    }
}

/// Gaussian kernel centered at a discrete distribution: caches the mean
/// embedding values `m_P(atom_i)` and `kappa = ||m_P||^2`, and evaluates the
/// mean-zero projected kernel `K_P`.
///
/// A snapshot is immutable; any weight change requires building a new one.
#[derive(Debug, Clone)]
pub struct CenteredKernel {
    config: KernelConfig,
    support: Arc<Vec<Observation>>,
    weights: Vec<f64>,
    gram: Arc<BaseGram>,
    m_values: Vec<f64>,
    kappa: f64,
}

impl CenteredKernel {
    /// Builds the base Gram matrix for `support` and centers at `weights`.
    pub fn new(config: KernelConfig, support: Vec<Observation>, weights: Vec<f64>) -> Result<Self> {
        let gram = Arc::new(BaseGram::compute(&support, &config));
        Self::with_gram(config, Arc::new(support), gram, weights)
    }

    /// Centers at `weights` reusing a precomputed base Gram matrix.
    pub fn with_gram(
        config: KernelConfig,
        support: Arc<Vec<Observation>>,
        gram: Arc<BaseGram>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let m = support.len();
        if m == 0 {
            return Err(Error::Config("empty support".into()));
        }
        if weights.len() != m || gram.len() != m {
            return Err(Error::Config(format!(
                "support ({m}), weights ({}) and gram ({}) sizes must agree",
                weights.len(),
                gram.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Domain(format!("weights must sum to 1, got {total}")));
        }
        let m_values = gram.mul_vec(&weights);
        let kappa: f64 = weights
            .iter()
            .zip(m_values.iter())
            .map(|(w, m)| w * m)
            .sum();
        if kappa <= KAPPA_TOL || kappa.is_nan() {
            // Cannot happen for the Gaussian kernel with a valid weight vector.
            return Err(Error::Degenerate(format!("kappa = {kappa}")));
        }
        Ok(Self {
            config,
            support,
            weights,
            gram,
            m_values,
            kappa,
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn support(&self) -> &[Observation] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn base_gram(&self) -> &Arc<BaseGram> {
        &self.gram
    }

    /// `kappa = ||m_P||^2 = sum_ij w_i w_j K(atom_i, atom_j)`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Cached `m_P(atom_i)`.
    pub fn m_at_index(&self, i: usize) -> f64 {
        self.m_values[i]
    }

    pub fn m_values(&self) -> &[f64] {
        &self.m_values
    }

    /// `m_P(o) = sum_i w_i K(o, atom_i)` for an arbitrary point.
    pub fn mean_embedding_at(&self, o: &Observation) -> f64 {
        self.support
            .iter()
            .zip(self.weights.iter())
            .map(|(atom, w)| w * gauss_kernel(o, atom, &self.config))
            .sum()
    }

    /// Projected kernel `K_P(o, o') = K(o,o') - m_P(o) m_P(o') / kappa` at
    /// arbitrary points.
    pub fn centered_eval(&self, o: &Observation, o2: &Observation) -> f64 {
        let k = gauss_kernel(o, o2, &self.config);
        k - self.mean_embedding_at(o) * self.mean_embedding_at(o2) / self.kappa
    }

    /// Projected kernel between two support atoms, using the cached Gram and
    /// mean-embedding values.
    #[inline]
    pub fn centered_eval_index(&self, i: usize, j: usize) -> f64 {
        self.gram.get(i, j) - self.m_values[i] * self.m_values[j] / self.kappa
    }

    /// Base kernel between two support atoms.
    #[inline]
    pub fn base_eval_index(&self, i: usize, j: usize) -> f64 {
        self.gram.get(i, j)
    }
}
