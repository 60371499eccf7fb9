//! Initial estimators of the treatment and outcome mechanisms used to build
//! the starting working density: sample mean, logistic regression,
//! Nadaraya-Watson smoothing, and a cross-validated convex stack of them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Observation;

/// All fitted predictors clamp into this range.
pub const PRED_CLAMP: f64 = 1e-6;

const IRLS_MAX_ITERS: usize = 200;
const IRLS_GRAD_TOL: f64 = 1e-8;
const RIDGE_LAMBDA: f64 = 1e-4;
const EG_STEPS: usize = 500;
const EG_STEP_SIZE: f64 = 0.1;

/// A fitted probability model. `predict` always returns a value in
/// `[1e-6, 1 - 1e-6]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Predictor {
    /// Constant prediction.
    Mean(f64),
    /// Logistic regression; `coef[0]` is the intercept. `ridged` marks the
    /// separation fallback.
    Logistic { coef: Vec<f64>, ridged: bool },
    /// Nadaraya-Watson smoother with Gaussian weights over stored points.
    NadarayaWatson {
        points: Vec<Vec<f64>>,
        labels: Vec<f64>,
        bandwidth: f64,
    },
    /// Convex combination of member predictions.
    Stacked {
        members: Vec<Predictor>,
        weights: Vec<f64>,
    },
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Predictor {
    pub fn predict(&self, features: &[f64]) -> f64 {
        clamp_prob(self.predict_raw(features))
    }

    fn predict_raw(&self, features: &[f64]) -> f64 {
        match self {
            Predictor::Mean(m) => *m,
            Predictor::Logistic { coef, .. } => {
                let mut z = coef[0];
                for (c, f) in coef[1..].iter().zip(features.iter()) {
                    z += c * f;
                }
                expit(z)
            }
            Predictor::NadarayaWatson {
                points,
                labels,
                bandwidth,
            } => {
                let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                let mut num = 0.0;
                let mut den = 0.0;
                for (p, l) in points.iter().zip(labels.iter()) {
                    let mut d2 = 0.0;
                    for (a, b) in p.iter().zip(features.iter()) {
                        let d = a - b;
                        d2 += d * d;
                    }
                    let w = (-d2 * inv).exp();
                    num += w * l;
                    den += w;
                }
                if den > 0.0 {
                    num / den
                } else {
                    // Query too far from every training point: fall back to the
                    // global mean.
                    labels.iter().sum::<f64>() / labels.len() as f64
                }
            }
            Predictor::Stacked { members, weights } => members
                .iter()
                .zip(weights.iter())
                .map(|(m, w)| w * m.predict_raw(features))
                .sum(),
        }
    }
}

/// Constant predictor at the clamped sample mean.
pub fn fit_mean(labels: &[f64]) -> Result<Predictor> {
    if labels.is_empty() {
        return Err(Error::Input("fit_mean requires nonempty labels".into()));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    Ok(Predictor::Mean(clamp_prob(mean)))
}

/// Logistic regression by iteratively reweighted least squares, run to
/// mean-gradient infinity-norm `<= 1e-8` or 200 iterations. Separation or a
/// singular update triggers a ridge-regularized refit (`lambda = 1e-4`),
/// flagged through `ridged`. All-equal labels fall back to the mean model.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[f64]) -> Result<Predictor> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Input("features and labels must align".into()));
    }
    if features.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            context: "logistic features".into(),
        });
    }
    let first = labels[0];
    if labels.iter().all(|l| *l == first) {
        return fit_mean(labels);
    }
    match irls(features, labels, 0.0) {
        Ok(coef) => Ok(Predictor::Logistic {
            coef,
            ridged: false,
        }),
        Err(_) => {
            let coef = irls(features, labels, RIDGE_LAMBDA)?;
            Ok(Predictor::Logistic { coef, ridged: true })
        }
    }
}

fn irls(features: &[Vec<f64>], labels: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = features.len();
    let d = features[0].len() + 1;
    let mut beta = vec![0.0; d];
    for _ in 0..IRLS_MAX_ITERS {
        // Gradient (1/n) X^T (y - p) - lambda beta and Hessian
        // (1/n) X^T W X + lambda I.
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for (x, y) in features.iter().zip(labels.iter()) {
            let mut z = beta[0];
            for (b, f) in beta[1..].iter().zip(x.iter()) {
                z += b * f;
            }
            let p = expit(z);
            let r = y - p;
            let w = p * (1.0 - p);
            let row = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
            for j in 0..d {
                grad[j] += r * row(j);
                for k in 0..d {
                    hess[j * d + k] += w * row(j) * row(k);
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for j in 0..d {
            grad[j] = grad[j] * inv_n - lambda * beta[j];
            for k in 0..d {
                hess[j * d + k] *= inv_n;
            }
            hess[j * d + j] += lambda;
        }
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm <= IRLS_GRAD_TOL {
            return Ok(beta);
        }
        let step = solve_linear(&hess, &grad, d)
            .ok_or_else(|| Error::Numerical("singular IRLS system".into()))?;
        for j in 0..d {
            beta[j] += step[j];
        }
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 30.0) {
            // Coefficients running away indicate (quasi-)separation.
            return Err(Error::Numerical("logistic separation".into()));
        }
    }
    Ok(beta)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..d {
        let mut pivot = col;
        for r in (col + 1)..d {
            if m[r * d + col].abs() > m[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if m[pivot * d + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for c in 0..d {
                m.swap(col * d + c, pivot * d + c);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * d + col];
        for r in (col + 1)..d {
            let f = m[r * d + col] / diag;
            if f == 0.0 {
                continue;
            }
            for c in col..d {
                m[r * d + c] -= f * m[col * d + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; d];
    for col in (0..d).rev() {
        let mut acc = rhs[col];
        for c in (col + 1)..d {
            acc -= m[col * d + c] * x[c];
        }
        x[col] = acc / m[col * d + col];
    }
    Some(x)
}

/// Nadaraya-Watson estimate with Gaussian weights, clamped to (0, 1).
pub fn fit_nw_smoother(points: &[Vec<f64>], labels: &[f64], bandwidth: f64) -> Result<Predictor> {
    if points.is_empty() || labels.len() != points.len() {
        return Err(Error::Input("points and labels must align".into()));
    }
    if bandwidth <= 0.0 || bandwidth.is_nan() {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(Predictor::NadarayaWatson {
        points: points.to_vec(),
        labels: labels.to_vec(),
        bandwidth,
    })
}

/// Candidate learner for the stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LearnerSpec {
    Mean,
    Logistic,
    NadarayaWatson { bandwidth: f64 },
}

impl LearnerSpec {
    pub fn name(&self) -> String {
        match self {
            LearnerSpec::Mean => "mean".into(),
            LearnerSpec::Logistic => "logistic".into(),
            LearnerSpec::NadarayaWatson { bandwidth } => format!("nw({bandwidth:.4})"),
        }
    }

    fn fit(&self, features: &[Vec<f64>], labels: &[f64]) -> Result<Predictor> {
        match self {
            LearnerSpec::Mean => fit_mean(labels),
            LearnerSpec::Logistic => fit_logistic(features, labels),
            LearnerSpec::NadarayaWatson { bandwidth } => {
                fit_nw_smoother(features, labels, *bandwidth)
            }
        }
    }
}

/// Outcome of a stacked fit: the combined predictor plus diagnostics.
#[derive(Debug, Clone)]
pub struct StackFit {
    pub predictor: Predictor,
    pub weights: Vec<f64>,
    pub cv_logloss: f64,
    pub excluded: Vec<String>,
}

fn logloss(preds: &[f64], labels: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, y) in preds.iter().zip(labels.iter()) {
        let p = clamp_prob(*p);
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    acc / labels.len() as f64
}

/// Convex stack of `learners` with weights chosen to minimize k-fold
/// cross-validated log-loss over the simplex by exponentiated-gradient
/// iterations. Fold assignment is a seeded permutation, so the fit is
/// deterministic given `(data, seed)`. Learners that fail on any fold are
/// excluded and reported. The returned weights are the better of the EG
/// solution and the best single learner, so the stack's CV loss never
/// exceeds the best member's.
pub fn fit_stacked(
    features: &[Vec<f64>],
    labels: &[f64],
    learners: &[LearnerSpec],
    k_folds: usize,
    seed: u64,
) -> Result<StackFit> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Input("features and labels must align".into()));
    }
    if k_folds < 2 {
        return Err(Error::Config(format!(
            "k_folds must be >= 2, got {k_folds}"
        )));
    }
    if learners.is_empty() {
        return Err(Error::Config("stack needs at least one learner".into()));
    }
    let k_folds = k_folds.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, idx) in order.iter().enumerate() {
        fold_of[*idx] = pos % k_folds;
    }

    // Out-of-fold predictions per learner; a learner failing on any fold is
    // dropped from the stack.
    let mut kept: Vec<&LearnerSpec> = Vec::new();
    let mut excluded = Vec::new();
    let mut oof: Vec<Vec<f64>> = Vec::new();
    'learners: for spec in learners {
        let mut preds = vec![0.0; n];
        for fold in 0..k_folds {
            let mut train_x = Vec::new();
            let mut train_y = Vec::new();
            for i in 0..n {
                if fold_of[i] != fold {
                    train_x.push(features[i].clone());
                    train_y.push(labels[i]);
                }
            }
            let fitted = match spec.fit(&train_x, &train_y) {
                Ok(p) => p,
                Err(_) => {
                    excluded.push(spec.name());
                    continue 'learners;
                }
            };
            for i in 0..n {
                if fold_of[i] == fold {
                    preds[i] = fitted.predict(&features[i]);
                }
            }
        }
        kept.push(spec);
        oof.push(preds);
    }
    if kept.is_empty() {
        return Err(Error::Numerical("every stack learner failed".into()));
    }

    let l = kept.len();
    let stack_loss = |w: &[f64]| -> f64 {
        let preds: Vec<f64> = (0..n)
            .map(|i| (0..l).map(|j| w[j] * oof[j][i]).sum())
            .collect();
        logloss(&preds, labels)
    };

    // Exponentiated gradient on the simplex.
    let mut w = vec![1.0 / l as f64; l];
    for _ in 0..EG_STEPS {
        let mut grad = vec![0.0; l];
        for i in 0..n {
            let p = clamp_prob((0..l).map(|j| w[j] * oof[j][i]).sum());
            let factor = (p - labels[i]) / (p * (1.0 - p));
            for j in 0..l {
                grad[j] += factor * oof[j][i];
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for j in 0..l {
            w[j] *= (-EG_STEP_SIZE * grad[j] * inv_n).exp();
            total += w[j];
        }
        for wj in &mut w {
            *wj /= total;
        }
    }

    // Guard against finite-step EG falling short of the best vertex.
    let mut best_w = w.clone();
    let mut best_loss = stack_loss(&w);
    for j in 0..l {
        let mut vertex = vec![0.0; l];
        vertex[j] = 1.0;
        let loss = stack_loss(&vertex);
        if loss < best_loss {
            best_loss = loss;
            best_w = vertex;
        }
    }

    let members: Vec<Predictor> = kept
        .iter()
        .map(|spec| spec.fit(features, labels))
        .collect::<Result<_>>()?;
    Ok(StackFit {
        predictor: Predictor::Stacked {
            members,
            weights: best_w.clone(),
        },
        weights: best_w,
        cv_logloss: best_loss,
        excluded,
    })
}

/// Fitted treatment mechanism `e(1|x)` and outcome regression `q(1|a,x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceFit {
    propensity: Predictor,
    outcome: Predictor,
    pub learner_id: String,
}

impl NuisanceFit {
    pub fn new(propensity: Predictor, outcome: Predictor, learner_id: String) -> Self {
        Self {
            propensity,
            outcome,
            learner_id,
        }
    }

    /// `e(1 | x)`, clamped into (0, 1).
    pub fn propensity_at(&self, x: &[f64]) -> f64 {
        self.propensity.predict(x)
    }

    /// `q(1 | a, x)`, clamped into (0, 1). Outcome features are `[x..., a]`.
    pub fn outcome_at(&self, x: &[f64], a: u8) -> f64 {
        let mut feats = Vec::with_capacity(x.len() + 1);
        feats.extend_from_slice(x);
        feats.push(f64::from(a));
        self.outcome.predict(&feats)
    }

    /// Default stacked fit used by the simulation harness:
    /// {mean, logistic, two Nadaraya-Watson bandwidths} with 5-fold CV.
    pub fn fit_default(sample: &[Observation], seed: u64) -> Result<NuisanceFit> {
        let n = sample.len();
        if n < 4 {
            return Err(Error::Input("need at least 4 observations".into()));
        }
        let xs: Vec<Vec<f64>> = sample.iter().map(|o| o.x().to_vec()).collect();
        let a_labels: Vec<f64> = sample.iter().map(|o| f64::from(o.a())).collect();
        let y_labels: Vec<f64> = sample.iter().map(|o| f64::from(o.y())).collect();
        let xa: Vec<Vec<f64>> = sample
            .iter()
            .map(|o| {
                let mut f = o.x().to_vec();
                f.push(f64::from(o.a()));
                f
            })
            .collect();

        // Bandwidths on the scale of the covariate spread, shrinking with n.
        let spread = mean_feature_sd(&xs).max(1e-3);
        let rate = (n as f64).powf(-0.2);
        let learners = vec![
            LearnerSpec::Mean,
            LearnerSpec::Logistic,
            LearnerSpec::NadarayaWatson {
                bandwidth: 0.5 * spread * rate,
            },
            LearnerSpec::NadarayaWatson {
                bandwidth: 1.5 * spread * rate,
            },
        ];
        let prop = fit_stacked(&xs, &a_labels, &learners, 5, seed)?;
        let out = fit_stacked(&xa, &y_labels, &learners, 5, seed.wrapping_add(1))?;
        Ok(NuisanceFit::new(
            prop.predictor,
            out.predictor,
            "stack(mean,logistic,nw,nw)".into(),
        ))
    }
}

fn mean_feature_sd(xs: &[Vec<f64>]) -> f64 {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut acc = 0.0;
    for j in 0..d {
        let mean = xs.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    acc / d as f64
}
