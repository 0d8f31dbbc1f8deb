//! Gaussian quadrature rules.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of an interpolatory quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ wᵢ f(xᵢ).
    pub fn sum<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gauss–Legendre rule on [-1, 1].
///
/// Roots of Pₙ are polished by Newton's method from the Tricomi initial
/// guess; weights are `2 / ((1 - x²) P'ₙ(x)²)`.
pub fn gauss_legendre(n: usize) -> GaussRule {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    GaussRule { nodes, weights }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let (pn, pn1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
    let d = n as f64 * (x * pn - pn1) / (x * x - 1.0);
    (pn, d)
}

/// Gauss–Hermite rule for the standard normal weight: Σ wᵢ f(xᵢ) ≈ E[f(Y)],
/// Y ~ N(0, 1). Weights sum to one.
///
/// Built by Golub–Welsch on the probabilists' Hermite Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> GaussRule {
    assert!(n >= 1, "gauss_hermite_normal needs at least one node");
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Exact antisymmetry keeps odd moments at zero.
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 64, 2000] {
            let rule = gauss_legendre(n);
            assert!((rule.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12, "n = {n}");
            if n >= 3 {
                // ∫ x⁴ = 2/5
                assert!((rule.sum(|x| x.powi(4)) - 0.4).abs() < 1e-12, "n = {n}");
            }
        }
    }

    #[test]
    fn hermite_matches_normal_moments() {
        let rule = gauss_hermite_normal(64);
        assert!((rule.sum(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(rule.sum(|x| x).abs() < 1e-14);
        assert!((rule.sum(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((rule.sum(|x| x.powi(4)) - 3.0).abs() < 1e-10);
        assert!((rule.sum(|x| x.cos()) - (-0.5f64).exp()).abs() < 1e-13);
    }
}
