//! Comparator estimators: the un-flowed plug-in, the one-step correction,
//! and TMLE for the average treatment effect.

use serde::{Deserialize, Serialize};

use crate::density::WorkingDensity;
use crate::error::{Error, Result};
use crate::kernel::Observation;
use crate::targets::{eif_target, estimate_targets, TargetKind};

const TMLE_EPS_TOL: f64 = 1e-6;
const TMLE_EIF_RESIDUAL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Initial,
    OneStep,
    TmleAte,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineMethod::Initial => write!(f, "initial"),
            BaselineMethod::OneStep => write!(f, "one_step"),
            BaselineMethod::TmleAte => write!(f, "tmle_ate"),
        }
    }
}

/// Estimates produced by a baseline; TMLE only targets the ATE, one-step
/// corrects the requested functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub ate: Option<f64>,
    pub rr: Option<f64>,
    pub or_: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BaselineResult {
    pub fn get(&self, kind: TargetKind) -> Option<f64> {
        match kind {
            TargetKind::Ate => self.ate,
            TargetKind::Rr => self.rr,
            TargetKind::Or => self.or_,
        }
    }
}

/// Plug-in estimates at the un-flowed initial density.
pub fn initial_plugin(d0: &WorkingDensity) -> Result<BaselineResult> {
    let t = estimate_targets(d0)?;
    Ok(BaselineResult {
        method: BaselineMethod::Initial,
        ate: Some(t.ate),
        rr: Some(t.rr),
        or_: Some(t.or_),
        iterations: 0,
        converged: true,
    })
}

/// One-step correction: initial plug-in plus the empirical mean of the
/// influence function for the requested functional.
pub fn one_step(
    d0: &WorkingDensity,
    sample: &[Observation],
    which: TargetKind,
) -> Result<BaselineResult> {
    let t = estimate_targets(d0)?;
    let phi = eif_target(d0, sample, which)?;
    let correction = phi.iter().sum::<f64>() / phi.len() as f64;
    let value = t.get(which) + correction;
    let mut result = BaselineResult {
        method: BaselineMethod::OneStep,
        ate: None,
        rr: None,
        or_: None,
        iterations: 0,
        converged: true,
    };
    match which {
        TargetKind::Ate => result.ate = Some(value),
        TargetKind::Rr => result.rr = Some(value),
        TargetKind::Or => result.or_ = Some(value),
    }
    Ok(result)
}

/// One-step corrections of all three functionals from the same density.
pub fn one_step_all(d0: &WorkingDensity, sample: &[Observation]) -> Result<BaselineResult> {
    let mut combined = BaselineResult {
        method: BaselineMethod::OneStep,
        ate: None,
        rr: None,
        or_: None,
        iterations: 0,
        converged: true,
    };
    for kind in [TargetKind::Ate, TargetKind::Rr, TargetKind::Or] {
        let single = one_step(d0, sample, kind)?;
        match kind {
            TargetKind::Ate => combined.ate = single.ate,
            TargetKind::Rr => combined.rr = single.rr,
            TargetKind::Or => combined.or_ = single.or_,
        }
    }
    Ok(combined)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// TMLE for the ATE via the standard clever-covariate logistic fluctuation
/// of the outcome regression: offset `logit(Qbar)`, covariate
/// `H(a, x) = (2a - 1) / g_a(x)`, scalar `eps` fit by maximum likelihood.
/// Iterates until `|eps| <= 1e-6` or `max_fluct` rounds; at convergence the
/// empirical mean of the ATE influence function at the fluctuated fit is
/// below `1e-4`.
pub fn tmle_ate(
    d0: &WorkingDensity,
    sample: &[Observation],
    max_fluct: usize,
) -> Result<BaselineResult> {
    let n = d0.n_obs();
    if sample.len() != n {
        return Err(Error::Input(format!(
            "sample size {} does not match density n = {}",
            sample.len(),
            n
        )));
    }
    for (i, o) in sample.iter().enumerate() {
        d0.sample_atom_index(i, o)?;
    }

    // Initial outcome regression and propensities from the working density.
    let mut qbar: Vec<[f64; 2]> = (0..n)
        .map(|i| -> Result<[f64; 2]> {
            Ok([
                d0.conditional_outcome_mean(0, i)?,
                d0.conditional_outcome_mean(1, i)?,
            ])
        })
        .collect::<Result<_>>()?;
    let g1: Vec<f64> = (0..n).map(|i| d0.implied_propensity(i, 1)).collect();
    let clever = |a: u8, i: usize| -> f64 {
        if a == 1 {
            1.0 / g1[i]
        } else {
            -1.0 / (1.0 - g1[i])
        }
    };

    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_fluct {
        iterations += 1;
        // One-dimensional MLE for eps by safeguarded Newton.
        let mut eps = 0.0f64;
        let mut ok = true;
        for _ in 0..100 {
            let mut grad = 0.0;
            let mut hess = 0.0;
            for (i, o) in sample.iter().enumerate() {
                let h = clever(o.a(), i);
                let base = logit(qbar[i][o.a() as usize].clamp(1e-9, 1.0 - 1e-9));
                let p = expit(base + eps * h);
                grad += h * (f64::from(o.y()) - p);
                hess -= h * h * p * (1.0 - p);
            }
            grad /= n as f64;
            hess /= n as f64;
            if grad.abs() <= 1e-12 {
                break;
            }
            if hess.abs() < 1e-300 {
                ok = false;
                break;
            }
            eps -= grad / hess;
            if !eps.is_finite() || eps.abs() > 50.0 {
                ok = false;
                break;
            }
        }
        if !ok {
            return Ok(BaselineResult {
                method: BaselineMethod::TmleAte,
                ate: Some(plugin_ate(&qbar)),
                rr: None,
                or_: None,
                iterations,
                converged: false,
            });
        }
        // Fluctuate both arms with the fitted eps.
        for (i, q) in qbar.iter_mut().enumerate() {
            for (a, qa) in q.iter_mut().enumerate() {
                let base = logit(qa.clamp(1e-9, 1.0 - 1e-9));
                *qa = expit(base + eps * clever(a as u8, i));
            }
        }
        if eps.abs() <= TMLE_EPS_TOL {
            converged = true;
            break;
        }
    }

    let ate = plugin_ate(&qbar);
    if converged {
        // Post-condition: the EIF estimating equation is solved.
        let mut residual = 0.0;
        for (i, o) in sample.iter().enumerate() {
            let h = clever(o.a(), i);
            residual += h * (f64::from(o.y()) - qbar[i][o.a() as usize]) + qbar[i][1] - qbar[i][0];
        }
        residual = residual / n as f64 - ate;
        if residual.abs() > TMLE_EIF_RESIDUAL_TOL {
            return Err(Error::Numerical(format!(
                "TMLE converged but EIF residual {residual} exceeds {TMLE_EIF_RESIDUAL_TOL}"
            )));
        }
    }
    Ok(BaselineResult {
        method: BaselineMethod::TmleAte,
        ate: Some(ate),
        rr: None,
        or_: None,
        iterations,
        converged,
    })
}

fn plugin_ate(qbar: &[[f64; 2]]) -> f64 {
    qbar.iter().map(|q| q[1] - q[0]).sum::<f64>() / qbar.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::NormalizationMode;
    use crate::nuisance::{NuisanceFit, Predictor};
    use rand::{Rng, SeedableRng};

    fn obs(x: f64, a: u8, y: u8) -> Observation {
        Observation::new(vec![x], a, y).unwrap()
    }

    fn uniform_density(n: usize) -> WorkingDensity {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let fit = NuisanceFit::new(
            Predictor::Mean(0.5),
            Predictor::Mean(0.5),
            "constant".into(),
        );
        WorkingDensity::init_from_nuisance(&xs, &fit, 1e-3, NormalizationMode::XMarginalFixed)
            .unwrap()
    }

    fn sample_for(n: usize) -> Vec<Observation> {
        (0..n)
            .map(|i| obs(i as f64 / n as f64, (i % 2) as u8, ((i / 3) % 2) as u8))
            .collect()
    }

    #[test]
    fn initial_plugin_uniform_density() {
        let d = uniform_density(4);
        let r = initial_plugin(&d).unwrap();
        assert!((r.ate.unwrap() - 0.0).abs() < 1e-12);
        assert!((r.rr.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.or_.unwrap() - 1.0).abs() < 1e-12);
        // Matches the targets module exactly.
        let t = estimate_targets(&d).unwrap();
        assert_eq!(r.ate.unwrap(), t.ate);
    }

    #[test]
    fn one_step_equals_initial_plus_mean_eif() {
        let d = uniform_density(6);
        let sample = sample_for(6);
        let t = estimate_targets(&d).unwrap();
        for kind in [TargetKind::Ate, TargetKind::Rr, TargetKind::Or] {
            let phi = eif_target(&d, &sample, kind).unwrap();
            let mean = phi.iter().sum::<f64>() / 6.0;
            let r = one_step(&d, &sample, kind).unwrap();
            let got = r.get(kind).unwrap();
            assert!(
                (got - (t.get(kind) + mean)).abs() < 1e-14,
                "one-step identity failed for {kind}"
            );
        }
    }

    #[test]
    fn one_step_zero_mean_eif_equals_initial() {
        // A sample drawn to match the density's conditionals exactly in
        // proportions yields EIF mean ~ 0 for the ATE; instead test the
        // algebraic zero-correction case directly: with Qbar correct and a
        // balanced sample the ATE correction vanishes.
        let n = 4;
        let d = uniform_density(n);
        // Balanced: every (a,y) cell equally represented.
        let sample = vec![
            obs(0.0, 0, 0),
            obs(0.25, 0, 1),
            obs(0.5, 1, 0),
            obs(0.75, 1, 1),
        ];
        let r = one_step(&d, &sample, TargetKind::Ate).unwrap();
        let t = estimate_targets(&d).unwrap();
        assert!((r.ate.unwrap() - t.ate).abs() < 1e-12);
    }

    #[test]
    fn tmle_fixed_point_when_already_solved() {
        // Balanced sample and matching Qbar: eps ~ 0 and estimate unchanged.
        let n = 4;
        let d = uniform_density(n);
        let sample = vec![
            obs(0.0, 0, 0),
            obs(0.25, 0, 1),
            obs(0.5, 1, 0),
            obs(0.75, 1, 1),
        ];
        let r = tmle_ate(&d, &sample, 20).unwrap();
        assert!(r.converged);
        let t = estimate_targets(&d).unwrap();
        assert!((r.ate.unwrap() - t.ate).abs() < 1e-8);
    }

    #[test]
    fn tmle_zero_fluctuation_rounds() {
        // max_fluct = 1 with a solvable score still produces one round and a
        // finite estimate.
        let n = 8;
        let d = uniform_density(n);
        let sample = sample_for(n);
        let r = tmle_ate(&d, &sample, 1).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.ate.unwrap().is_finite());
    }

    #[test]
    fn tmle_solves_eif_equation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>()]).collect();
        let fit = NuisanceFit::new(
            Predictor::Mean(0.45),
            Predictor::Mean(0.4),
            "constant".into(),
        );
        let d =
            WorkingDensity::init_from_nuisance(&xs, &fit, 1e-3, NormalizationMode::XMarginalFixed)
                .unwrap();
        let sample: Vec<Observation> = xs
            .iter()
            .map(|x| {
                let a = u8::from(rng.gen::<f64>() < 0.5);
                let y = u8::from(rng.gen::<f64>() < 0.3 + 0.3 * f64::from(a));
                Observation::new(x.clone(), a, y).unwrap()
            })
            .collect();
        let r = tmle_ate(&d, &sample, 20).unwrap();
        assert!(r.converged, "TMLE did not converge");
        // The post-condition check inside tmle_ate would have errored if the
        // estimating equation were unsolved; also sanity-check the estimate.
        assert!(r.ate.unwrap().abs() < 1.0);
    }
}
