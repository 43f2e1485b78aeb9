//! Differentially private release of per-window zero proportions through the
//! Gaussian mechanism, with exact calibration and conversion to μ-GDP.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Window, N_WINDOWS, WEEKS};
use crate::error::{Error, Result};
use crate::normal;
use crate::seed;
use crate::tradeoff::budget_of_gdp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdpParam {
    pub mu: f64,
}

/// Noised per-window zero proportions plus everything needed to audit how
/// they were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSummary {
    pub zero_props: [f64; N_WINDOWS],
    pub sigma: f64,
    pub sensitivity: f64,
    pub budget: PrivacyBudget,
    pub seed: u64,
}

impl DpSummary {
    pub fn zero_prop(&self, window: Window) -> f64 {
        self.zero_props[window.index()]
    }
}

/// Fraction of zero cells among the `n × 17` cells of each window.
pub fn zero_proportions(cohort: &Cohort) -> [f64; N_WINDOWS] {
    let mut zeros = [0usize; N_WINDOWS];
    for r in cohort.records() {
        for w in Window::ALL {
            zeros[w.index()] += r.series(w).iter().filter(|&&m| m == 0).count();
        }
    }
    let cells = (cohort.n() * WEEKS) as f64;
    zeros.map(|z| z as f64 / cells)
}

/// L2 sensitivity of [`zero_proportions`] under replace-one adjacency:
/// each coordinate moves by at most `1/n`, so the vector moves by `2/n`.
pub fn l2_sensitivity(n: usize) -> f64 {
    assert!(n >= 1, "sensitivity needs at least one record");
    2.0 / n as f64
}

/// Exact δ achieved by the Gaussian mechanism with noise `sigma` at `epsilon`:
/// `Φ(Δ/2σ − εσ/Δ) − e^ε Φ(−Δ/2σ − εσ/Δ)`.
pub fn gaussian_delta(epsilon: f64, sigma: f64, sensitivity: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    normal::cdf(a - b) - epsilon.exp() * normal::cdf(-a - b)
}

/// Smallest σ whose exact δ does not exceed the budget's δ.
pub fn calibrate_gaussian(budget: &PrivacyBudget, sensitivity: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    let (eps, delta) = (budget.epsilon, budget.delta);
    let satisfied = |s: f64| gaussian_delta(eps, s, sensitivity) <= delta;

    let mut hi = sensitivity;
    let mut doublings = 0;
    while !satisfied(hi) {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::NonConvergence(format!("no sigma satisfies epsilon={eps}, delta={delta}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..2000 {
        if hi - lo <= hi * 1e-15 {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(hi);
        }
        if satisfied(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NonConvergence(format!("bisection stalled for epsilon={eps}, delta={delta}")))
}

/// `values + N(0, σ²I)` before clamping, drawn from `seed`.
pub fn add_gaussian_noise(values: [f64; N_WINDOWS], sigma: f64, seed: u64) -> [f64; N_WINDOWS] {
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    values.map(|v| v + noise.sample(&mut rng))
}

pub fn release_summary(cohort: &Cohort, budget: &PrivacyBudget, seed: u64) -> Result<DpSummary> {
    let sensitivity = l2_sensitivity(cohort.n());
    let sigma = calibrate_gaussian(budget, sensitivity)?;
    let noised = add_gaussian_noise(zero_proportions(cohort), sigma, seed);
    Ok(DpSummary { zero_props: noised.map(|v| v.clamp(0.0, 1.0)), sigma, sensitivity, budget: *budget, seed })
}

/// The μ for which a μ-GDP mechanism has exactly the budget's δ at its ε.
pub fn gdp_of_budget(budget: &PrivacyBudget) -> GdpParam {
    let (eps, delta) = (budget.epsilon, budget.delta);
    let mut hi = 1.0;
    while budget_of_gdp(hi, eps) < delta && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 || mid <= lo || mid >= hi {
            break;
        }
        if budget_of_gdp(mid, eps) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    GdpParam { mu: 0.5 * (lo + hi) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AchievementLabel, StudentRecord, N_WINDOWS};
    use approx::assert_abs_diff_eq;

    fn cohort_of(grids: Vec<[[u32; WEEKS]; N_WINDOWS]>) -> Cohort {
        let records = grids
            .into_iter()
            .enumerate()
            .map(|(i, g)| StudentRecord::new(format!("s{i}"), g, AchievementLabel::Low).unwrap())
            .collect();
        Cohort::new("t", records).unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1e-3).is_ok());
    }

    #[test]
    fn zero_proportion_examples() {
        let zero = cohort_of(vec![[[0; WEEKS]; N_WINDOWS]; 3]);
        assert_eq!(zero_proportions(&zero), [1.0; 4]);
        let full = cohort_of(vec![[[5; WEEKS]; N_WINDOWS]; 3]);
        assert_eq!(zero_proportions(&full), [0.0; 4]);
        let half = cohort_of(vec![[[0; WEEKS]; N_WINDOWS], [[9; WEEKS]; N_WINDOWS]]);
        assert_eq!(zero_proportions(&half), [0.5; 4]);
    }

    #[test]
    fn sensitivity_formula() {
        assert_abs_diff_eq!(l2_sensitivity(120), 1.0 / 60.0, epsilon = 1e-15);
        assert_eq!(l2_sensitivity(1), 2.0);
    }

    #[test]
    fn calibration_examples() {
        let b = PrivacyBudget::new(1.0, 1e-3).unwrap();
        let s = calibrate_gaussian(&b, 1.0).unwrap();
        let classic = (2.0 * (1.25f64 / 1e-3).ln()).sqrt();
        assert!(s <= classic);
        assert!(gaussian_delta(1.0, s, 1.0) <= 1e-3 + 1e-9);
        assert!(gaussian_delta(1.0, s * (1.0 - 1e-6), 1.0) > 1e-3);

        // σ shrinks toward 0 as δ approaches 1
        let mut prev = s;
        for d in [0.9, 0.999, 0.999_999, 1.0 - 1e-12] {
            let loose = PrivacyBudget::new(1.0, d).unwrap();
            let s_loose = calibrate_gaussian(&loose, 1.0).unwrap();
            assert!(s_loose > 0.0 && s_loose < prev);
            prev = s_loose;
        }
        assert!(prev < 0.1);
        assert!(calibrate_gaussian(&b, 0.0).is_err());
    }

    #[test]
    fn release_is_deterministic_and_clamped() {
        let c = cohort_of(vec![[[0; WEEKS]; N_WINDOWS], [[1; WEEKS]; N_WINDOWS]]);
        let b = PrivacyBudget::new(0.1, 1e-5).unwrap();
        let a1 = release_summary(&c, &b, 3).unwrap();
        let a2 = release_summary(&c, &b, 3).unwrap();
        assert_eq!(a1, a2);
        for s in 0..200 {
            let r = release_summary(&c, &b, s).unwrap();
            assert!(r.zero_props.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gdp_round_trip() {
        let delta = budget_of_gdp(1.0, 1.0);
        let b = PrivacyBudget::new(1.0, delta).unwrap();
        assert_abs_diff_eq!(gdp_of_budget(&b).mu, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gdp_matches_sensitivity_over_sigma() {
        let b = PrivacyBudget::new(1.0, 1e-3).unwrap();
        let delta_n = l2_sensitivity(120);
        let sigma = calibrate_gaussian(&b, delta_n).unwrap();
        assert_abs_diff_eq!(gdp_of_budget(&b).mu, delta_n / sigma, epsilon = 1e-6);
    }
}
