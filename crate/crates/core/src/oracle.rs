//! Reference recursions used to check the planners.
//!
//! [`BruteForce`] evaluates the optimal value recursion with every stage-wise
//! expectation replaced by Gauss–Legendre quadrature over `μ ± 8σ`; the last
//! stage uses the reward's own convolution. [`MeanSubstitution`] plans as if
//! every future measurement equalled its posterior mean.

use crate::epsilon::argmax;
use crate::error::{GppError, Result};
use crate::gp::{GpHyperparams, History};
use crate::lipschitz::ActionModel;
use crate::normal;
use crate::quadrature::{gauss_legendre, GaussRule};
use crate::reward::RewardSpec;

/// Largest accepted `(b q)^H`.
pub const ORACLE_LIMIT: f64 = 1e8;

/// Half-width of the quadrature window in posterior standard deviations.
pub const ORACLE_WINDOW: f64 = 8.0;

pub struct BruteForce<'a> {
    hyper: &'a GpHyperparams,
    reward: &'a RewardSpec,
    actions: &'a ActionModel,
    start: usize,
    horizon: usize,
    /// Gauss–Legendre rule on `[-1, 1]` used on every panel.
    panel_rule: GaussRule,
    panels: usize,
}

/// Nodes per quadrature panel.
pub const PANEL_NODES: usize = 20;

impl<'a> BruteForce<'a> {
    pub fn new(
        hyper: &'a GpHyperparams,
        reward: &'a RewardSpec,
        actions: &'a ActionModel,
        start: usize,
        horizon: usize,
        quad_nodes: usize,
    ) -> Result<Self> {
        if horizon == 0 || quad_nodes == 0 {
            return Err(GppError::InvalidParam("horizon and quad_nodes must be positive".into()));
        }
        let b = actions.max_branching() as f64;
        let cost = (b * quad_nodes as f64).powi(horizon as i32);
        if cost > ORACLE_LIMIT {
            return Err(GppError::Budget(format!(
                "oracle would visit {cost:e} nodes (limit {ORACLE_LIMIT:e})"
            )));
        }
        let per_panel = PANEL_NODES.min(quad_nodes);
        Ok(Self {
            hyper,
            reward,
            actions,
            start,
            horizon,
            panel_rule: gauss_legendre(per_panel),
            panels: quad_nodes.div_ceil(per_panel),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn here(&self, path: &[usize]) -> usize {
        path.last().copied().unwrap_or(self.start)
    }

    /// `E[f(X)]`, `X ~ N(0, 1)`, by a composite rule over equal panels of
    /// `[-8, 8]`. `f` also reports the decision taken at the child; panels are
    /// split at `R₁` breakpoints and at located decision switches, where the
    /// integrand has kinks or jumps.
    fn integrate<F>(&self, mean: f64, sigma: f64, mut f: F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<(f64, usize)>,
    {
        let width = 2.0 * ORACLE_WINDOW / self.panels as f64;
        let kinks: Vec<f64> = self
            .reward
            .r1_breakpoints()
            .iter()
            .map(|b| (b - mean) / sigma)
            .filter(|x| x.abs() < ORACLE_WINDOW)
            .collect();
        let mut segments = Vec::with_capacity(self.panels + kinks.len());
        for p in 0..self.panels {
            let lo = -ORACLE_WINDOW + width * p as f64;
            let hi = if p + 1 == self.panels { ORACLE_WINDOW } else { lo + width };
            let mut edges = vec![lo];
            edges.extend(kinks.iter().copied().filter(|&x| x > lo && x < hi));
            edges.push(hi);
            edges.sort_by(f64::total_cmp);
            segments.extend(edges.windows(2).map(|e| (e[0], e[1])));
        }

        let mut samples = Vec::with_capacity(segments.len() * self.panel_rule.len());
        let mut totals = Vec::with_capacity(segments.len());
        for (k, &(a, b)) in segments.iter().enumerate() {
            let mut total = 0.0;
            for (x, w) in self.segment_nodes(a, b) {
                let (v, d) = f(x)?;
                total += w * v;
                samples.push((x, d, k));
            }
            totals.push(total);
        }

        let mut splits: Vec<Vec<f64>> = vec![Vec::new(); segments.len()];
        for pair in samples.windows(2) {
            let ((mut lo, d_lo, _), (mut hi, d_hi, _)) = (pair[0], pair[1]);
            if d_lo == d_hi {
                continue;
            }
            for _ in 0..80 {
                if hi - lo < 1e-13 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if f(mid)?.1 == d_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = 0.5 * (lo + hi);
            if let Some(k) = segments.iter().position(|&(a, b)| x > a && x < b) {
                splits[k].push(x);
            }
        }
        for (k, cuts) in splits.iter_mut().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let (a, b) = segments[k];
            cuts.sort_by(f64::total_cmp);
            let mut edges = vec![a];
            edges.extend(cuts.iter().copied());
            edges.push(b);
            let mut total = 0.0;
            for e in edges.windows(2) {
                for (x, w) in self.segment_nodes(e[0], e[1]) {
                    total += w * f(x)?.0;
                }
            }
            totals[k] = total;
        }
        Ok(totals.iter().sum())
    }

    fn segment_nodes(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.panel_rule
            .nodes
            .iter()
            .zip(&self.panel_rule.weights)
            .map(move |(u, w)| {
                let x = mid + half * u;
                (x, half * w * normal::pdf(x))
            })
    }

    /// `V*_t` at `history` after `path` (`t = path.len()`).
    pub fn value(&self, history: &History, path: &[usize]) -> Result<f64> {
        Ok(self.decide(history, path)?.0)
    }

    /// `(V*_t, argmax action)`; `(0, 0)` at the horizon.
    fn decide(&self, history: &History, path: &[usize]) -> Result<(f64, usize)> {
        if path.len() >= self.horizon {
            return Ok((0.0, 0));
        }
        let (s, v) = argmax(&self.q_values(history, path)?);
        Ok((v, s))
    }

    /// `Q*_t` for every action at the node, ascending location index.
    pub fn q_values(&self, history: &History, path: &[usize]) -> Result<Vec<(usize, f64)>> {
        let mut scratch = path.to_vec();
        self.actions
            .actions(self.here(path))
            .iter()
            .map(|&s| Ok((s, self.q_with(history, &mut scratch, s, &|h, p| self.decide(h, p))?)))
            .collect()
    }

    /// `V^π_t` for a policy mapping `(history, path)` to a location index.
    pub fn policy_value<P>(&self, history: &History, path: &[usize], policy: &P) -> Result<f64>
    where
        P: Fn(&History, &[usize]) -> Result<usize>,
    {
        Ok(self.follow(history, path, policy)?.0)
    }

    fn follow<P>(&self, history: &History, path: &[usize], policy: &P) -> Result<(f64, usize)>
    where
        P: Fn(&History, &[usize]) -> Result<usize>,
    {
        if path.len() >= self.horizon {
            return Ok((0.0, 0));
        }
        let s = policy(history, path)?;
        if !self.actions.actions(self.here(path)).contains(&s) {
            return Err(GppError::ActionModel(format!("policy chose unreachable location {s}")));
        }
        let mut scratch = path.to_vec();
        let v = self.q_with(history, &mut scratch, s, &|h, p| self.follow(h, p, policy))?;
        Ok((v, s))
    }

    /// Immediate expected reward plus the expectation of
    /// `R₁(z) + future(history ⊕ (s, z))`.
    fn q_with<F>(&self, history: &History, path: &mut Vec<usize>, s: usize, future: &F) -> Result<f64>
    where
        F: Fn(&History, &[usize]) -> Result<(f64, usize)>,
    {
        let loc = self.actions.location(s);
        let post = history.posterior(loc, self.hyper)?;
        let sigma = post.std_dev();
        let mut visited = history.locations().to_vec();
        visited.push(*loc);
        let immediate = self.reward.g_sigma(post.mean, sigma) + self.reward.r3(&visited, post.variance);
        if path.len() + 1 == self.horizon {
            return Ok(immediate + self.reward.h_sigma(post.mean, sigma)?);
        }
        path.push(s);
        let path_ref: &[usize] = path;
        let expected = self.integrate(post.mean, sigma, |x| {
            let z = post.mean + sigma * x;
            let child = history.extend(loc, z, self.hyper)?;
            let (v, d) = future(&child, path_ref)?;
            Ok((self.reward.r1(z) + v, d))
        });
        path.pop();
        Ok(immediate + expected?)
    }
}

/// Planner that substitutes the posterior mean for every future measurement.
pub struct MeanSubstitution<'a> {
    pub hyper: &'a GpHyperparams,
    pub reward: &'a RewardSpec,
    pub actions: &'a ActionModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSubstitutionPlan {
    pub action: usize,
    pub value: f64,
    pub per_action_q: Vec<(usize, f64)>,
    pub nodes: u64,
}

impl MeanSubstitution<'_> {
    /// Plans `horizon` stages ahead from location `here`.
    pub fn plan(&self, history: &History, here: usize, horizon: usize) -> Result<MeanSubstitutionPlan> {
        if horizon == 0 {
            return Err(GppError::InvalidParam("horizon must be at least 1".into()));
        }
        let mut nodes = 0;
        let mut per_action_q = Vec::new();
        for &s in self.actions.actions(here) {
            per_action_q.push((s, self.q(history, s, horizon, &mut nodes)?));
        }
        let (action, value) = argmax(&per_action_q);
        Ok(MeanSubstitutionPlan {
            action,
            value,
            per_action_q,
            nodes,
        })
    }

    fn value(&self, history: &History, here: usize, remaining: usize, nodes: &mut u64) -> Result<f64> {
        if remaining == 0 {
            return Ok(0.0);
        }
        let mut best = f64::NEG_INFINITY;
        for &s in self.actions.actions(here) {
            best = best.max(self.q(history, s, remaining, nodes)?);
        }
        Ok(best)
    }

    fn q(&self, history: &History, s: usize, remaining: usize, nodes: &mut u64) -> Result<f64> {
        *nodes += 1;
        let loc = self.actions.location(s);
        let post = history.posterior(loc, self.hyper)?;
        let child = history.extend(loc, post.mean, self.hyper)?;
        let immediate = self.reward.g_sigma(post.mean, post.std_dev())
            + self.reward.r3(child.locations(), post.variance);
        let future = self.value(&child, s, remaining - 1, nodes)?;
        Ok(immediate + (self.reward.r1(post.mean) + future))
    }
}
