//! Plug-in target functionals (ATE, RR, OR) evaluated on a working density,
//! and their efficient influence functions used by the optional EIF stopping
//! rule, the baselines, and diagnostics. All three functionals read off the
//! same fitted distribution.

use serde::{Deserialize, Serialize};

use crate::density::{NormalizationMode, WorkingDensity};
use crate::error::{Error, Result};
use crate::kernel::Observation;

/// Which causal parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Ate,
    Rr,
    Or,
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetKind::Ate => write!(f, "ate"),
            TargetKind::Rr => write!(f, "rr"),
            TargetKind::Or => write!(f, "or"),
        }
    }
}

/// Mean potential outcomes and the three derived functionals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetEstimates {
    pub mu0: f64,
    pub mu1: f64,
    pub ate: f64,
    pub rr: f64,
    pub or_: f64,
}

impl TargetEstimates {
    pub fn from_means(mu0: f64, mu1: f64) -> Result<Self> {
        if !(mu0 > 0.0 && mu0 < 1.0 && mu1 > 0.0 && mu1 < 1.0) {
            return Err(Error::Domain(format!(
                "mean outcomes must lie in (0,1); got mu0 = {mu0}, mu1 = {mu1}"
            )));
        }
        Ok(Self {
            mu0,
            mu1,
            ate: mu1 - mu0,
            rr: mu1 / mu0,
            or_: (mu1 / (1.0 - mu1)) / (mu0 / (1.0 - mu0)),
        })
    }

    pub fn get(&self, kind: TargetKind) -> f64 {
        match kind {
            TargetKind::Ate => self.ate,
            TargetKind::Rr => self.rr,
            TargetKind::Or => self.or_,
        }
    }
}

/// X-marginal mass of group `i` per the density's normalization mode.
fn x_marginal_mass(d: &WorkingDensity, i: usize) -> f64 {
    match d.mode() {
        NormalizationMode::XMarginalFixed => 1.0 / d.n_obs() as f64,
        NormalizationMode::Global => d.group_mass(i),
    }
}

/// Mean potential outcome `mu_a = sum_i P_X(X_i) * E[Y | A=a, X_i]`.
pub fn mu_a(d: &WorkingDensity, a: u8) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..d.n_obs() {
        acc += x_marginal_mass(d, i) * d.conditional_outcome_mean(a, i)?;
    }
    Ok(acc)
}

/// All three functionals from one density.
pub fn estimate_targets(d: &WorkingDensity) -> Result<TargetEstimates> {
    let mu0 = mu_a(d, 0)?;
    let mu1 = mu_a(d, 1)?;
    TargetEstimates::from_means(mu0, mu1)
}

/// Efficient influence function of `mu_a` at the working density, evaluated
/// at the sample (the standard AIPW form):
/// `1{A_i=a}/g_a(X_i) * (Y_i - Qbar(a,X_i)) + Qbar(a,X_i) - mu_a`,
/// with `g_a` read off the density itself.
pub fn eif_mu_a(d: &WorkingDensity, sample: &[Observation], a: u8) -> Result<Vec<f64>> {
    let mu = mu_a(d, a)?;
    let floor = d.floor();
    let mut out = Vec::with_capacity(sample.len());
    for (i, o) in sample.iter().enumerate() {
        d.sample_atom_index(i, o)?;
        let g = d.implied_propensity(i, a);
        if g < floor * floor {
            return Err(Error::Positivity(format!(
                "implied propensity {g} below floor^2 at observation {i}"
            )));
        }
        let qbar = d.conditional_outcome_mean(a, i)?;
        let indicator = if o.a() == a { 1.0 } else { 0.0 };
        out.push(indicator / g * (f64::from(o.y()) - qbar) + qbar - mu);
    }
    Ok(out)
}

/// Delta-method gradient of the functional in `(mu0, mu1)`.
fn target_gradient(kind: TargetKind, est: &TargetEstimates) -> (f64, f64) {
    match kind {
        TargetKind::Ate => (-1.0, 1.0),
        TargetKind::Rr => (-est.mu1 / (est.mu0 * est.mu0), 1.0 / est.mu0),
        TargetKind::Or => (
            -est.or_ / (est.mu0 * (1.0 - est.mu0)),
            est.or_ / (est.mu1 * (1.0 - est.mu1)),
        ),
    }
}

/// Efficient influence function of the chosen functional via the delta
/// method on `(mu0, mu1)`.
pub fn eif_target(
    d: &WorkingDensity,
    sample: &[Observation],
    kind: TargetKind,
) -> Result<Vec<f64>> {
    let est = estimate_targets(d)?;
    let (g0, g1) = target_gradient(kind, &est);
    let phi0 = eif_mu_a(d, sample, 0)?;
    let phi1 = eif_mu_a(d, sample, 1)?;
    Ok(phi0
        .iter()
        .zip(phi1.iter())
        .map(|(p0, p1)| g0 * p0 + g1 * p1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::NormalizationMode;
    use crate::nuisance::{NuisanceFit, Predictor};

    fn xs(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 / n as f64]).collect()
    }

    fn density(e1: f64, q1: f64, n: usize) -> WorkingDensity {
        let fit = NuisanceFit::new(Predictor::Mean(e1), Predictor::Mean(q1), "constant".into());
        WorkingDensity::init_from_nuisance(&xs(n), &fit, 1e-3, NormalizationMode::XMarginalFixed)
            .unwrap()
    }

    #[test]
    fn constant_outcome_gives_constant_mu() {
        // q(1|a,x) = 0.7 everywhere: mu_a = 0.7 regardless of propensity.
        let d = density(0.23, 0.7, 4);
        assert!((mu_a(&d, 0).unwrap() - 0.7).abs() < 1e-12);
        assert!((mu_a(&d, 1).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mu_is_average_of_conditionals() {
        // n = 2 with Qbar(a, X_1) = 0.2, Qbar(a, X_2) = 0.6, uniform X: 0.4.
        let xs = vec![vec![0.0], vec![1.0]];
        let fit = NuisanceFit::new(
            Predictor::Mean(0.5),
            Predictor::NadarayaWatson {
                points: vec![vec![0.0], vec![1.0]],
                labels: vec![0.2, 0.6],
                bandwidth: 0.05,
            },
            "nw".into(),
        );
        let d =
            WorkingDensity::init_from_nuisance(&xs, &fit, 1e-3, NormalizationMode::XMarginalFixed)
                .unwrap();
        // The NW smoother ignores the appended treatment coordinate only
        // approximately, but both arms share labels, so Qbar is 0.2 and 0.6.
        for a in 0..2u8 {
            assert!((mu_a(&d, a).unwrap() - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn mu_matches_joint_table_oracle() {
        let d = density(0.37, 0.58, 6);
        for a in 0..2u8 {
            let mut oracle = 0.0;
            for i in 0..6 {
                let w1 = d.weight(i, a, 1);
                let w0 = d.weight(i, a, 0);
                oracle += d.group_mass(i) * (w1 / (w0 + w1));
            }
            // x-fixed mode: group mass equals 1/n, so the joint-table oracle
            // coincides with the marginal form.
            assert!((mu_a(&d, a).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn null_effect_targets() {
        let d = density(0.5, 0.5, 3);
        let t = estimate_targets(&d).unwrap();
        assert!((t.ate - 0.0).abs() < 1e-12);
        assert!((t.rr - 1.0).abs() < 1e-12);
        assert!((t.or_ - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_arithmetic() {
        let t = TargetEstimates::from_means(0.4, 0.6).unwrap();
        assert!((t.ate - 0.2).abs() < 1e-14);
        assert!((t.rr - 1.5).abs() < 1e-14);
        assert!((t.or_ - 2.25).abs() < 1e-14);
    }

    #[test]
    fn target_identities_hold() {
        let t = TargetEstimates::from_means(0.123, 0.789).unwrap();
        assert!((t.ate - (t.mu1 - t.mu0)).abs() < 1e-14);
        assert!((t.rr - t.mu1 / t.mu0).abs() < 1e-14);
        assert!((t.or_ - (t.mu1 / (1.0 - t.mu1)) / (t.mu0 / (1.0 - t.mu0))).abs() < 1e-14);
    }

    #[test]
    fn boundary_means_rejected() {
        assert!(TargetEstimates::from_means(0.0, 0.5).is_err());
        assert!(TargetEstimates::from_means(0.5, 1.0).is_err());
    }

    fn obs(x: f64, a: u8, y: u8) -> Observation {
        Observation::new(vec![x], a, y).unwrap()
    }

    #[test]
    fn eif_indicator_structure() {
        // No observation has A = 1, so phi_1 reduces to Qbar(1, X_i) - mu_1.
        let d = density(0.5, 0.6, 3);
        let sample = vec![obs(0.0, 0, 1), obs(1.0 / 3.0, 0, 0), obs(2.0 / 3.0, 0, 1)];
        let phi1 = eif_mu_a(&d, &sample, 1).unwrap();
        let mu1 = mu_a(&d, 1).unwrap();
        for (i, v) in phi1.iter().enumerate() {
            let qbar = d.conditional_outcome_mean(1, i).unwrap();
            assert!((v - (qbar - mu1)).abs() < 1e-12);
        }
    }

    #[test]
    fn eif_matches_hand_computed_aipw() {
        // Three observations, constant fit: e(1|x) = 0.5, q(1|a,x) = 0.6.
        let d = density(0.5, 0.6, 3);
        let sample = vec![obs(0.0, 1, 1), obs(1.0 / 3.0, 0, 0), obs(2.0 / 3.0, 1, 0)];
        let phi1 = eif_mu_a(&d, &sample, 1).unwrap();
        // Hand computation: mu1 = 0.6, g = 0.5, Qbar = 0.6.
        // i=0: 1/0.5*(1-0.6) + 0.6 - 0.6 = 0.8
        // i=1: 0 + 0.6 - 0.6 = 0.0
        // i=2: 1/0.5*(0-0.6) + 0.0 = -1.2
        assert!((phi1[0] - 0.8).abs() < 1e-10);
        assert!(phi1[1].abs() < 1e-10);
        assert!((phi1[2] + 1.2).abs() < 1e-10);
    }

    #[test]
    fn eif_mean_zero_under_generating_density() {
        // Sampling exactly from the density's conditionals makes the mean
        // EIF shrink toward zero as n grows.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 4000;
        let e1 = 0.45;
        let q1 = 0.62;
        let covs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let fit = NuisanceFit::new(Predictor::Mean(e1), Predictor::Mean(q1), "constant".into());
        let d = WorkingDensity::init_from_nuisance(
            &covs,
            &fit,
            1e-3,
            NormalizationMode::XMarginalFixed,
        )
        .unwrap();
        let sample: Vec<Observation> = covs
            .iter()
            .map(|x| {
                let a = u8::from(rng.gen::<f64>() < e1);
                let y = u8::from(rng.gen::<f64>() < q1);
                Observation::new(x.clone(), a, y).unwrap()
            })
            .collect();
        let phi = eif_mu_a(&d, &sample, 1).unwrap();
        let mean = phi.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "EIF mean {mean} not near zero");
    }

    #[test]
    fn ate_eif_is_difference() {
        let d = density(0.44, 0.55, 4);
        let sample = vec![
            obs(0.0, 0, 1),
            obs(0.25, 1, 0),
            obs(0.5, 1, 1),
            obs(0.75, 0, 0),
        ];
        let ate = eif_target(&d, &sample, TargetKind::Ate).unwrap();
        let phi0 = eif_mu_a(&d, &sample, 0).unwrap();
        let phi1 = eif_mu_a(&d, &sample, 1).unwrap();
        for i in 0..4 {
            assert!((ate[i] - (phi1[i] - phi0[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn delta_method_matches_finite_differences() {
        // Central finite differences of RR and OR in (mu0, mu1) at h = 1e-6.
        let h = 1e-6;
        for (m0, m1) in [(0.4, 0.6), (0.2, 0.35), (0.55, 0.48)] {
            let est = TargetEstimates::from_means(m0, m1).unwrap();
            for kind in [TargetKind::Rr, TargetKind::Or] {
                let f = |a: f64, b: f64| -> f64 {
                    TargetEstimates::from_means(a, b).unwrap().get(kind)
                };
                let fd0 = (f(m0 + h, m1) - f(m0 - h, m1)) / (2.0 * h);
                let fd1 = (f(m0, m1 + h) - f(m0, m1 - h)) / (2.0 * h);
                let (g0, g1) = target_gradient(kind, &est);
                assert!(
                    ((g0 - fd0) / fd0).abs() < 1e-4,
                    "{kind}: d/dmu0 {g0} vs fd {fd0}"
                );
                assert!(
                    ((g1 - fd1) / fd1).abs() < 1e-4,
                    "{kind}: d/dmu1 {g1} vs fd {fd1}"
                );
            }
        }
    }
}
