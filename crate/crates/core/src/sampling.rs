//! Deterministic partitions of a Gaussian predictive distribution.
//!
//! The measurement space of `N(μ, σ²)` is cut into `n` intervals: two infinite
//! tails beyond `μ ± τσ` and `n − 2` equal-width intervals between them. Each
//! interval contributes one sample (tail samples sit on the inner boundary,
//! interior samples at the centre) weighted by its probability mass.
//!
//! `Λ(n, τ)` bounds the error of the resulting weighted sum for a function
//! with unit Lipschitz constant, in units of σ.

use serde::{Deserialize, Serialize};

use crate::error::{GppError, Result};
use crate::normal;

/// Upper end of the τ search range for [`feasible_n_capped`]; `Φ(−10)` is
/// already below 1e-23.
pub const TAU_SEARCH_MAX: f64 = 10.0;
pub const TAU_SEARCH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub samples: Vec<f64>,
    pub weights: Vec<f64>,
    pub n: usize,
    pub tau: f64,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index of the median sample, `⌊n/2⌋` (0 for the one-sample partition).
    pub fn median_index(&self) -> usize {
        self.len() / 2
    }

    /// Σ wⁱ f(zⁱ).
    pub fn expectation<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.samples
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// A `(τ, n)` choice for a given per-stage tolerance λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetChoice {
    pub tau: f64,
    pub n: usize,
    pub lambda: f64,
}

fn valid_pair(n: usize, tau: f64) -> bool {
    tau.is_finite() && ((tau == 0.0 && n >= 1) || (tau > 0.0 && n > 2))
}

pub fn build_partition(mean: f64, sigma: f64, n: usize, tau: f64) -> Result<Partition> {
    if !valid_pair(n, tau) || !(sigma > 0.0) || !mean.is_finite() {
        return Err(GppError::InvalidPartition { n, tau });
    }
    if tau == 0.0 {
        return Ok(Partition {
            samples: vec![mean],
            weights: vec![1.0],
            n: 1,
            tau: 0.0,
        });
    }
    let inner = (n - 2) as f64;
    let half_width = tau * sigma;
    let mut samples = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let tail = normal::cdf(-tau);
    samples.push(mean - half_width);
    weights.push(tail);
    for i in 1..=n - 2 {
        // Offsets are computed from the nearer end so the partition is exactly
        // symmetric about the mean.
        let offset = (2.0 * i as f64 - 1.0 - inner) / inner;
        samples.push(mean + offset * half_width);
        let lo = tau * (2.0 * (i - 1) as f64 - inner) / inner;
        let hi = tau * (2.0 * i as f64 - inner) / inner;
        weights.push(normal::interval_mass(lo, hi));
    }
    samples.push(mean + half_width);
    weights.push(tail);
    Ok(Partition {
        samples,
        weights,
        n,
        tau,
    })
}

/// `κ(τ) = √(2/π) e^{−τ²/2} − 2τΦ(−τ)`: the tail part of Λ.
pub fn kappa(tau: f64) -> f64 {
    normal::sqrt_2_over_pi() * (-0.5 * tau * tau).exp() - 2.0 * tau * normal::cdf(-tau)
}

/// `η(n, τ) = 2τ(½ − Φ(−τ)) / (n − 2)`: the interior part of Λ.
pub fn eta(n: usize, tau: f64) -> f64 {
    2.0 * tau * (0.5 - normal::cdf(-tau)) / (n as f64 - 2.0)
}

/// `Λ(n, τ)`; defined for `(n ≥ 2, τ = 0)` and `(n > 2, τ > 0)` only.
pub fn lambda_coefficient(n: usize, tau: f64) -> Result<f64> {
    if tau == 0.0 && n >= 2 {
        Ok(normal::sqrt_2_over_pi())
    } else if tau > 0.0 && tau.is_finite() && n > 2 {
        Ok(kappa(tau) + eta(n, tau))
    } else {
        Err(GppError::InvalidPartition { n, tau })
    }
}

/// Closed-form feasible `(τ, n)` for `λ ≥ Λ(n, τ) σ (ℓ₁ + L)`.
///
/// Zero Lipschitz mass needs no sampling and yields `(0, 1)`; a tolerance of
/// at least `2√(2/π) σ (ℓ₁ + L)` yields the single-sample `(0, 2)` choice.
pub fn feasible_tau_n(lambda: f64, sigma: f64, l1_plus_l: f64) -> Result<BudgetChoice> {
    if !(lambda > 0.0) || !(sigma > 0.0) || !(l1_plus_l >= 0.0) || !l1_plus_l.is_finite() {
        return Err(GppError::InvalidParam(format!(
            "feasible_tau_n needs lambda > 0, sigma > 0, l1 + L >= 0 (got {lambda}, {sigma}, {l1_plus_l})"
        )));
    }
    if l1_plus_l == 0.0 {
        return Ok(BudgetChoice { tau: 0.0, n: 1, lambda });
    }
    let scale = sigma * l1_plus_l;
    if lambda >= 2.0 * normal::sqrt_2_over_pi() * scale {
        return Ok(BudgetChoice { tau: 0.0, n: 2, lambda });
    }
    let root_half_pi = (std::f64::consts::PI / 2.0).sqrt();
    let tau = (-2.0 * (root_half_pi * lambda / (2.0 * scale)).ln()).sqrt();
    let n_real = 2.0 + tau * root_half_pi * (0.5 * tau * tau).exp();
    if !n_real.is_finite() || n_real > u32::MAX as f64 {
        return Err(GppError::Budget(format!(
            "closed-form sample size {n_real:e} is not representable"
        )));
    }
    let n = (n_real.ceil() as usize).max(3);
    let choice = BudgetChoice { tau, n, lambda };
    debug_assert!(lambda_coefficient(n, tau)? * scale <= lambda * (1.0 + 1e-12));
    Ok(choice)
}

/// Golden-section minimum of a unimodal function on `[lo, hi]`.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Smallest `n < n_max` whose `min_τ Λ(n, τ)` meets the tolerance.
pub fn feasible_n_capped(
    lambda: f64,
    sigma: f64,
    l1_plus_l: f64,
    n_max: usize,
) -> Option<BudgetChoice> {
    feasible_n_capped_with(
        |n, tau| lambda_coefficient(n, tau).unwrap_or(f64::INFINITY),
        lambda,
        sigma,
        l1_plus_l,
        n_max,
    )
}

/// [`feasible_n_capped`] with a caller-supplied coefficient function.
pub fn feasible_n_capped_with<C: Fn(usize, f64) -> f64>(
    coefficient: C,
    lambda: f64,
    sigma: f64,
    l1_plus_l: f64,
    n_max: usize,
) -> Option<BudgetChoice> {
    if n_max < 2 || !(lambda > 0.0) || !(sigma > 0.0) || !(l1_plus_l >= 0.0) {
        return None;
    }
    let scale = sigma * l1_plus_l;
    if scale == 0.0 {
        return Some(BudgetChoice { tau: 0.0, n: 1, lambda });
    }
    if coefficient(2, 0.0) * scale <= lambda {
        return Some(BudgetChoice { tau: 0.0, n: 2, lambda });
    }
    (3..n_max).find_map(|n| {
        let tau = golden_section(
            |t| {
                if t <= 0.0 {
                    coefficient(2, 0.0)
                } else {
                    coefficient(n, t)
                }
            },
            0.0,
            TAU_SEARCH_MAX,
            TAU_SEARCH_TOL,
        );
        (tau > 0.0 && coefficient(n, tau) * scale <= lambda).then_some(BudgetChoice {
            tau,
            n,
            lambda,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_partition() {
        let p = build_partition(0.0, 1.0, 5, 3.0).unwrap();
        assert_eq!(p.samples, vec![-3.0, -2.0, 0.0, 2.0, 3.0]);
        let expected = [
            0.001_349_898_031_630_093_3,
            0.157_305_355_899_826_97,
            0.682_689_492_137_085_9,
            0.157_305_355_899_826_97,
            0.001_349_898_031_630_093_3,
        ];
        for (w, e) in p.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.median_index(), 2);
    }

    #[test]
    fn tau_zero_collapses() {
        for n in [1, 2, 7] {
            let p = build_partition(1.25, 0.4, n, 0.0).unwrap();
            assert_eq!((p.samples.as_slice(), p.weights.as_slice()), (&[1.25][..], &[1.0][..]));
            assert_eq!(p.median_index(), 0);
        }
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(build_partition(0.0, 1.0, 2, 0.5).is_err());
        assert!(build_partition(0.0, 1.0, 0, 0.0).is_err());
        assert!(build_partition(0.0, 0.0, 5, 1.0).is_err());
        assert!(lambda_coefficient(2, 1.0).is_err());
        assert!(lambda_coefficient(1, 0.0).is_err());
    }

    #[test]
    fn lambda_values() {
        assert!((lambda_coefficient(2, 0.0).unwrap() - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((lambda_coefficient(5, 3.0).unwrap() - 0.998_064_512_570_835_4).abs() < 1e-12);
        assert!((kappa(0.0) - normal::sqrt_2_over_pi()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_example() {
        let c = feasible_tau_n(0.1, 1.0, 1.0).unwrap();
        assert!((c.tau - 2.353_695_358_753_661_5).abs() < 1e-12);
        assert_eq!(c.n, 50);
        assert!(lambda_coefficient(c.n, c.tau).unwrap() <= 0.1);
        assert_eq!(feasible_tau_n(0.1, 1.0, 0.0).unwrap().n, 1);
        let loose = feasible_tau_n(10.0, 1.0, 1.0).unwrap();
        assert_eq!((loose.tau, loose.n), (0.0, 2));
    }

    #[test]
    fn capped_edges() {
        let generous = feasible_n_capped(1.0, 1.0, 1.0, 10).unwrap();
        assert_eq!((generous.tau, generous.n), (0.0, 2));
        assert!(feasible_n_capped(0.01, 1.0, 1.0, 2).is_none());
        let c = feasible_n_capped(0.1, 1.0, 1.0, 100).unwrap();
        assert!(lambda_coefficient(c.n, c.tau).unwrap() <= 0.1);
        // Numerical minimisation can only beat the closed form.
        assert!(c.n <= 50);
    }

    proptest! {
        #[test]
        fn partitions_are_symmetric_distributions(
            mean in -50.0f64..50.0, sigma in 1e-3f64..10.0, n in 3usize..80, tau in 1e-3f64..6.0
        ) {
            let p = build_partition(mean, sigma, n, tau).unwrap();
            prop_assert_eq!(p.len(), n);
            prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.weights.iter().all(|w| *w >= 0.0));
            prop_assert!(p.samples.windows(2).all(|w| w[0] <= w[1]));
            for i in 0..n {
                let j = n - 1 - i;
                let tol = 1e-12 * (1.0 + mean.abs() + sigma * tau);
                prop_assert!(((p.samples[i] - mean) + (p.samples[j] - mean)).abs() < tol);
                prop_assert!((p.weights[i] - p.weights[j]).abs() < 1e-15);
            }
        }

        #[test]
        fn lambda_decreases_in_n(tau in 1e-2f64..6.0, n in 3usize..500) {
            let a = lambda_coefficient(n, tau).unwrap();
            let b = lambda_coefficient(n + 1, tau).unwrap();
            prop_assert!(b < a);
            prop_assert!(a > kappa(tau));
        }
    }
}
