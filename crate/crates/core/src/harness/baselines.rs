//! Myopic acquisition-function baselines.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::{GpHyperparams, History};
use crate::lipschitz::ActionModel;
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyKind {
    Pi,
    Ei,
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyParams {
    /// Improvement margin ξ for PI and EI.
    #[serde(default)]
    pub xi: f64,
    /// Exploration weight β for UCB.
    #[serde(default)]
    pub beta: f64,
}

impl Default for GreedyParams {
    fn default() -> Self {
        Self { xi: 0.0, beta: 0.0 }
    }
}

/// `Φ((μ − z⁺ − ξ)/σ)`; the improvement indicator when `σ = 0`.
pub fn probability_of_improvement(mean: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    let d = mean - best - xi;
    if sigma > 0.0 {
        normal::cdf(d / sigma)
    } else if d > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `(μ − z⁺ − ξ)Φ(u) + σφ(u)` with `u = (μ − z⁺ − ξ)/σ`; `max(d, 0)` when `σ = 0`.
pub fn expected_improvement(mean: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    let d = mean - best - xi;
    if sigma > 0.0 {
        let u = d / sigma;
        d * normal::cdf(u) + sigma * normal::pdf(u)
    } else {
        d.max(0.0)
    }
}

pub fn upper_confidence_bound(mean: f64, sigma: f64, beta: f64) -> f64 {
    mean + beta * sigma
}

/// Best measurement so far, or the prior mean before any observation.
pub fn incumbent(history: &History, hyper: &GpHyperparams) -> f64 {
    history
        .measurements()
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, z| Some(acc.map_or(z, |a| a.max(z))))
        .unwrap_or(hyper.prior_mean)
}

/// One-step acquisition argmax over `A(here)`; ties go to the lowest index.
pub fn greedy_action(
    kind: GreedyKind,
    params: &GreedyParams,
    history: &History,
    here: usize,
    actions: &ActionModel,
    hyper: &GpHyperparams,
) -> Result<usize> {
    let best = incumbent(history, hyper);
    let mut choice = None;
    for &s in actions.actions(here) {
        let post = history.posterior(actions.location(s), hyper)?;
        let sigma = post.std_dev();
        let score = match kind {
            GreedyKind::Pi => probability_of_improvement(post.mean, sigma, best, params.xi),
            GreedyKind::Ei => expected_improvement(post.mean, sigma, best, params.xi),
            GreedyKind::Ucb => upper_confidence_bound(post.mean, sigma, params.beta),
        };
        if choice.is_none_or(|(_, b)| score > b) {
            choice = Some((s, score));
        }
    }
    Ok(choice.expect("action sets are nonempty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Location;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn pi_at_incumbent_is_half() {
        assert_eq!(probability_of_improvement(0.7, 0.3, 0.7, 0.0), 0.5);
        assert_eq!(probability_of_improvement(0.8, 0.0, 0.7, 0.0), 1.0);
        assert_eq!(probability_of_improvement(0.6, 0.0, 0.7, 0.0), 0.0);
        assert_eq!(expected_improvement(0.6, 0.0, 0.7, 0.0), 0.0);
        assert!((expected_improvement(0.9, 0.0, 0.7, 0.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let (mean, sigma, best) = (0.2, 0.8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let e: f64 = rng.sample(StandardNormal);
            let v = (mean + sigma * e - best).max(0.0);
            sum += v;
            sq += v * v;
        }
        let m = sum / draws as f64;
        let se = ((sq / draws as f64 - m * m) / (draws as f64 - 1.0)).sqrt();
        let ei = expected_improvement(mean, sigma, best, 0.0);
        assert!((ei - m).abs() < 3.0 * se, "{ei} vs {m} ± {se}");
    }

    #[test]
    fn ucb_zero_beta_picks_largest_mean() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.01, [0.5, 0.5]).unwrap();
        let locs: Vec<Location> = (0..3).map(|i| Location::new(i as f64 * 0.3, 0.0, i)).collect();
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h = History::from_observations(&locs[2..], &[2.0], &hyper).unwrap();
        let a = greedy_action(GreedyKind::Ucb, &GreedyParams::default(), &h, 0, &actions, &hyper).unwrap();
        assert_eq!(a, 2);
        assert_eq!(incumbent(&h, &hyper), 2.0);
        assert_eq!(incumbent(&History::empty(), &hyper), 0.0);
    }
}
