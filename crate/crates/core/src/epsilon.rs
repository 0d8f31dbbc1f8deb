//! The ε-optimal planner: an H-stage recursion over deterministic partitions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GppError, Result};
use crate::gp::{GpHyperparams, History, Location};
use crate::lipschitz::{ActionModel, LipschitzTable};
use crate::reward::RewardSpec;
use crate::sampling::{self, BudgetChoice, Partition};

/// How `(τ, n)` is chosen at each node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BudgetMode {
    /// Closed-form choice meeting the per-stage tolerance.
    Analytic,
    /// Smallest `n < n_max` meeting the tolerance with `τ` optimised.
    Capped { n_max: usize },
    /// The same partition everywhere; carries no accuracy guarantee.
    Fixed { tau: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub epsilon: f64,
    /// Per-stage tolerance λ.
    pub lambda: f64,
    pub budget: BudgetMode,
}

impl PlannerConfig {
    /// `λ = ε / (H(H+1))`.
    pub fn from_epsilon(horizon: usize, epsilon: f64, budget: BudgetMode) -> Result<Self> {
        if horizon == 0 {
            return Err(GppError::InvalidParam("horizon must be at least 1".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(GppError::InvalidParam(format!("epsilon must be positive, got {epsilon}")));
        }
        let h = horizon as f64;
        let cfg = Self {
            horizon,
            epsilon,
            lambda: epsilon / (h * (h + 1.0)),
            budget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit λ; `epsilon` is back-filled as `λH(H+1)`.
    pub fn from_lambda(horizon: usize, lambda: f64, budget: BudgetMode) -> Result<Self> {
        let h = horizon as f64;
        Self::from_epsilon(horizon, lambda * h * (h + 1.0), budget).map(|c| Self { lambda, ..c })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(GppError::InvalidParam("horizon must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(GppError::InvalidParam(format!("lambda must be positive, got {}", self.lambda)));
        }
        match self.budget {
            BudgetMode::Capped { n_max } if n_max < 2 => Err(GppError::InvalidParam(format!(
                "n_max must be at least 2, got {n_max}"
            ))),
            BudgetMode::Fixed { tau, n } => sampling::lambda_coefficient(n.max(2), tau)
                .map(|_| ())
                .and_then(|_| {
                    if tau > 0.0 && n <= 2 {
                        Err(GppError::InvalidPartition { n, tau })
                    } else {
                        Ok(())
                    }
                }),
            _ => Ok(()),
        }
    }
}

/// Picks `(τ, n)` for a node with predictive deviation `sigma` and
/// `l1_plus_l = ℓ₁ + L_{t+1}`.
pub fn choose_budget(mode: BudgetMode, lambda: f64, sigma: f64, l1_plus_l: f64) -> Result<BudgetChoice> {
    match mode {
        BudgetMode::Analytic => sampling::feasible_tau_n(lambda, sigma, l1_plus_l),
        BudgetMode::Capped { n_max } => sampling::feasible_n_capped(lambda, sigma, l1_plus_l, n_max)
            .ok_or(GppError::Infeasible {
                lambda,
                sigma,
                lipschitz: l1_plus_l,
                n_max,
            }),
        BudgetMode::Fixed { tau, n } => Ok(BudgetChoice { tau, n, lambda }),
    }
}

/// Range of partitions built during one planning call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetStats {
    pub partitions: u64,
    pub min_n: usize,
    pub max_n: usize,
    pub min_tau: f64,
    pub max_tau: f64,
}

impl Default for BudgetStats {
    fn default() -> Self {
        Self {
            partitions: 0,
            min_n: usize::MAX,
            max_n: 0,
            min_tau: f64::INFINITY,
            max_tau: f64::NEG_INFINITY,
        }
    }
}

impl BudgetStats {
    pub fn record(&mut self, p: &Partition) {
        self.partitions += 1;
        self.min_n = self.min_n.min(p.n);
        self.max_n = self.max_n.max(p.n);
        self.min_tau = self.min_tau.min(p.tau);
        self.max_tau = self.max_tau.max(p.tau);
    }

    pub fn merge(&mut self, other: &BudgetStats) {
        if other.partitions == 0 {
            return;
        }
        self.partitions += other.partitions;
        self.min_n = self.min_n.min(other.min_n);
        self.max_n = self.max_n.max(other.max_n);
        self.min_tau = self.min_tau.min(other.min_tau);
        self.max_tau = self.max_tau.max(other.max_tau);
    }
}

/// Replacement for `Λ(n, τ)` in capped budget mode.
pub type CoefficientFn = fn(usize, f64) -> f64;

/// Read-only state shared by every node of a planning call.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub hyper: &'a GpHyperparams,
    pub reward: &'a RewardSpec,
    pub actions: &'a ActionModel,
    pub table: &'a LipschitzTable,
    /// Used instead of [`sampling::lambda_coefficient`] by capped mode when set.
    pub coefficient: Option<CoefficientFn>,
}

impl<'a> PlanContext<'a> {
    pub fn new(
        hyper: &'a GpHyperparams,
        reward: &'a RewardSpec,
        actions: &'a ActionModel,
        table: &'a LipschitzTable,
    ) -> Self {
        Self {
            hyper,
            reward,
            actions,
            table,
            coefficient: None,
        }
    }

    pub fn with_coefficient(self, coefficient: CoefficientFn) -> Self {
        Self {
            coefficient: Some(coefficient),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// Index of the chosen location.
    pub action: usize,
    pub location: Location,
    /// `V^ε` at the planning node.
    pub value: f64,
    /// `(location index, Q^ε)` in ascending index order.
    pub per_action_q: Vec<(usize, f64)>,
    pub nodes_expanded: u64,
    pub budget: BudgetStats,
}

/// Everything an action needs before its children are evaluated.
pub(crate) struct ActionSetup {
    pub partition: Partition,
    /// `g_σ(μ) + R₃`.
    pub immediate: f64,
    pub next_lipschitz: f64,
    pub design: Arc<crate::gp::Design>,
    pub posterior: crate::gp::Posterior,
}

pub(crate) fn setup_action(
    history: &History,
    path: &[usize],
    action: usize,
    cfg: &PlannerConfig,
    ctx: &PlanContext<'_>,
) -> Result<ActionSetup> {
    let succ = ctx.table.successor(path, action)?;
    let pred = history.predict(ctx.actions.location(action), ctx.hyper);
    let post = history.posterior_from(&pred, ctx.hyper);
    let sigma = post.std_dev();
    let design = Arc::new(history.design().extend(&pred)?);
    let l1_plus_l = ctx.reward.l1() + succ.next_lipschitz;
    let choice = match (cfg.budget, ctx.coefficient) {
        (BudgetMode::Capped { n_max }, Some(coefficient)) => {
            sampling::feasible_n_capped_with(coefficient, cfg.lambda, sigma, l1_plus_l, n_max).ok_or(
                GppError::Infeasible {
                    lambda: cfg.lambda,
                    sigma,
                    lipschitz: l1_plus_l,
                    n_max,
                },
            )?
        }
        _ => choose_budget(cfg.budget, cfg.lambda, sigma, l1_plus_l)?,
    };
    let partition = sampling::build_partition(post.mean, sigma, choice.n, choice.tau)?;
    let immediate = ctx.reward.g_sigma(post.mean, sigma) + ctx.reward.r3(design.locations(), post.variance);
    Ok(ActionSetup {
        partition,
        immediate,
        next_lipschitz: succ.next_lipschitz,
        design,
        posterior: post,
    })
}

pub(crate) fn check_horizon(path: &[usize], cfg: &PlannerConfig, ctx: &PlanContext<'_>) -> Result<()> {
    cfg.validate()?;
    if ctx.table.horizon() != cfg.horizon {
        return Err(GppError::InvalidParam(format!(
            "Lipschitz table built for horizon {} but planner horizon is {}",
            ctx.table.horizon(),
            cfg.horizon
        )));
    }
    if path.len() > cfg.horizon {
        return Err(GppError::UnknownPath(path.to_vec()));
    }
    Ok(())
}

/// Actions available at the node reached by `path`, in ascending index order.
pub(crate) fn successors(path: &[usize], ctx: &PlanContext<'_>) -> Result<Vec<usize>> {
    Ok(ctx.table.entry(path)?.successors.iter().map(|s| s.location).collect())
}

struct Recursion<'a, 'c> {
    cfg: &'a PlannerConfig,
    ctx: &'a PlanContext<'c>,
    nodes: u64,
    stats: BudgetStats,
}

impl Recursion<'_, '_> {
    fn value(&mut self, history: &History, path: &mut Vec<usize>) -> Result<f64> {
        if path.len() == self.cfg.horizon {
            return Ok(0.0);
        }
        let mut best = f64::NEG_INFINITY;
        for s in successors(path, self.ctx)? {
            best = best.max(self.q(history, path, s)?);
        }
        Ok(best)
    }

    fn q(&mut self, history: &History, path: &mut Vec<usize>, s: usize) -> Result<f64> {
        let setup = setup_action(history, path, s, self.cfg, self.ctx)?;
        self.stats.record(&setup.partition);
        self.nodes += setup.partition.len() as u64;
        let terminal = path.len() + 1 == self.cfg.horizon;
        let mut sum = 0.0;
        path.push(s);
        for (&z, &w) in setup.partition.samples.iter().zip(&setup.partition.weights) {
            let future = if terminal {
                0.0
            } else {
                let child = history.child(setup.design.clone(), &setup.posterior, z);
                self.value(&child, path)?
            };
            sum += w * (self.ctx.reward.r1(z) + future);
        }
        path.pop();
        Ok(setup.immediate + sum)
    }
}

/// `V^ε_t` at `history`, where `path` is the sequence of locations visited
/// since the table's start (`t = path.len()`).
pub fn value_epsilon(
    history: &History,
    path: &[usize],
    cfg: &PlannerConfig,
    ctx: &PlanContext<'_>,
) -> Result<f64> {
    check_horizon(path, cfg, ctx)?;
    let mut rec = Recursion {
        cfg,
        ctx,
        nodes: 0,
        stats: BudgetStats::default(),
    };
    rec.value(history, &mut path.to_vec())
}

/// Argmax of `Q^ε_t` at the node reached by `path`.
pub fn plan_at(
    history: &History,
    path: &[usize],
    cfg: &PlannerConfig,
    ctx: &PlanContext<'_>,
) -> Result<PlanResult> {
    check_horizon(path, cfg, ctx)?;
    if path.len() == cfg.horizon {
        return Err(GppError::InvalidParam("no stages left to plan".into()));
    }
    let mut rec = Recursion {
        cfg,
        ctx,
        nodes: 0,
        stats: BudgetStats::default(),
    };
    let mut scratch = path.to_vec();
    let mut per_action_q = Vec::new();
    for s in successors(path, ctx)? {
        per_action_q.push((s, rec.q(history, &mut scratch, s)?));
    }
    let (action, value) = argmax(&per_action_q);
    Ok(PlanResult {
        action,
        location: *ctx.actions.location(action),
        value,
        per_action_q,
        nodes_expanded: rec.nodes,
        budget: rec.stats,
    })
}

pub fn plan(history: &History, cfg: &PlannerConfig, ctx: &PlanContext<'_>) -> Result<PlanResult> {
    plan_at(history, &[], cfg, ctx)
}

/// First maximum; callers pass candidates in ascending index order.
pub fn argmax(values: &[(usize, f64)]) -> (usize, f64) {
    let mut best = values[0];
    for &(s, q) in &values[1..] {
        if q > best.1 {
            best = (s, q);
        }
    }
    best
}

/// `Σ_{t=1}^{H} (b n)^t`: nodes visited by a full expansion with fixed
/// branching `b` and partition size `n`.
pub fn full_expansion_nodes(branching: usize, n: usize, horizon: usize) -> u64 {
    let bn = (branching * n) as u64;
    (1..=horizon as u32).map(|t| bn.pow(t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipschitz::precompute;
    use crate::reward::{make_reward, RewardKind};
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn line(n: usize, spacing: f64) -> Vec<Location> {
        (0..n).map(|i| Location::new(i as f64 * spacing, 0.0, i)).collect()
    }

    #[test]
    fn lambda_from_epsilon() {
        let cfg = PlannerConfig::from_epsilon(3, 1.2, BudgetMode::Analytic).unwrap();
        assert!((cfg.lambda - 0.1).abs() < 1e-15);
        assert!(PlannerConfig::from_epsilon(0, 1.0, BudgetMode::Analytic).is_err());
        assert!(PlannerConfig::from_epsilon(2, 0.0, BudgetMode::Analytic).is_err());
        assert!(PlannerConfig::from_epsilon(2, 1.0, BudgetMode::Fixed { tau: 1.0, n: 2 }).is_err());
        assert!(PlannerConfig::from_epsilon(2, 1.0, BudgetMode::Fixed { tau: 0.0, n: 1 }).is_ok());
    }

    #[test]
    fn one_step_identity_reward_is_max_mean() {
        let hyper = GpHyperparams::new(0.5, 1.0, 0.01, [1.0, 1.0]).unwrap();
        let locs = line(3, 0.7);
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h0 = History::from_observations(&locs[..1], &[1.3], &hyper).unwrap();
        let reward = make_reward(RewardKind::Ucb, &params(&[("beta", 0.0)])).unwrap();
        let table = precompute(&h0, 0, &actions, 1, &hyper, &reward).unwrap();
        let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
        let max_mean = locs
            .iter()
            .map(|l| h0.posterior(l, &hyper).unwrap().mean)
            .fold(f64::NEG_INFINITY, f64::max);
        for budget in [
            BudgetMode::Analytic,
            BudgetMode::Fixed { tau: 0.0, n: 1 },
            BudgetMode::Fixed { tau: 2.0, n: 7 },
        ] {
            let cfg = PlannerConfig::from_epsilon(1, 0.1, budget).unwrap();
            let v = value_epsilon(&h0, &[], &cfg, &ctx).unwrap();
            assert!((v - max_mean).abs() < 1e-12, "{budget:?}: {v} vs {max_mean}");
        }
    }

    #[test]
    fn symmetric_instance_ties_to_lower_index() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.01, [1.0, 1.0]).unwrap();
        let locs = vec![
            Location::new(-1.0, 0.0, 0),
            Location::new(1.0, 0.0, 1),
            Location::new(0.0, 0.0, 2),
        ];
        let adjacency = vec![vec![0, 1], vec![0, 1], vec![0, 1]];
        let actions = ActionModel::new(locs.clone(), adjacency).unwrap();
        let h0 = History::from_observations(&locs[2..], &[0.4], &hyper).unwrap();
        let reward = make_reward(RewardKind::LogEnergy, &BTreeMap::new()).unwrap();
        let table = precompute(&h0, 2, &actions, 2, &hyper, &reward).unwrap();
        let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
        let cfg = PlannerConfig::from_epsilon(2, 0.5, BudgetMode::Fixed { tau: 2.0, n: 5 }).unwrap();
        let res = plan(&h0, &cfg, &ctx).unwrap();
        assert!((res.per_action_q[0].1 - res.per_action_q[1].1).abs() < 1e-10);
        assert_eq!(res.action, 0);
        assert_eq!(res.value, res.per_action_q.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn single_action_domain() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.1, [1.0, 1.0]).unwrap();
        let locs = line(1, 1.0);
        let actions = ActionModel::complete(locs).unwrap();
        let reward = make_reward(RewardKind::Mes, &BTreeMap::new()).unwrap();
        let table = precompute(&History::empty(), 0, &actions, 2, &hyper, &reward).unwrap();
        let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
        let cfg = PlannerConfig::from_epsilon(2, 1.0, BudgetMode::Analytic).unwrap();
        let res = plan(&History::empty(), &cfg, &ctx).unwrap();
        assert_eq!(res.action, 0);
        assert_eq!(res.value, value_epsilon(&History::empty(), &[], &cfg, &ctx).unwrap());
    }

    #[test]
    fn node_count_matches_closed_form() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.05, [1.0, 1.0]).unwrap();
        let locs = line(3, 0.5);
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h0 = History::from_observations(&locs[..1], &[0.2], &hyper).unwrap();
        let reward = make_reward(RewardKind::Step, &params(&[("a", 0.0)])).unwrap();
        for (h, tau, n) in [(1, 0.0, 1), (2, 1.5, 4), (3, 2.0, 3), (3, 0.0, 1)] {
            let table = precompute(&h0, 0, &actions, h, &hyper, &reward).unwrap();
            let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
            let cfg = PlannerConfig::from_epsilon(h, 1.0, BudgetMode::Fixed { tau, n }).unwrap();
            let res = plan(&h0, &cfg, &ctx).unwrap();
            assert_eq!(res.nodes_expanded, full_expansion_nodes(3, n, h));
            assert_eq!((res.budget.min_n, res.budget.max_n), (n, n));
        }
    }

    #[test]
    fn deterministic_and_unknown_path() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.05, [0.8, 0.8]).unwrap();
        let locs = line(2, 0.5);
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h0 = History::from_observations(&locs[..1], &[0.2], &hyper).unwrap();
        let reward = make_reward(RewardKind::Gaussian, &BTreeMap::new()).unwrap();
        let table = precompute(&h0, 0, &actions, 2, &hyper, &reward).unwrap();
        let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
        let cfg = PlannerConfig::from_epsilon(2, 0.05, BudgetMode::Analytic).unwrap();
        let a = plan(&h0, &cfg, &ctx).unwrap();
        let b = plan(&h0, &cfg, &ctx).unwrap();
        assert_eq!(a, b);
        assert!(matches!(value_epsilon(&h0, &[9], &cfg, &ctx), Err(GppError::UnknownPath(_))));
        let wrong = PlannerConfig::from_epsilon(3, 0.05, BudgetMode::Analytic).unwrap();
        assert!(plan(&h0, &wrong, &ctx).is_err());
    }

    #[test]
    fn capped_mode_reports_infeasible() {
        let hyper = GpHyperparams::new(0.0, 1.0, 0.05, [1.0, 1.0]).unwrap();
        let locs = line(2, 0.3);
        let actions = ActionModel::complete(locs.clone()).unwrap();
        let h0 = History::from_observations(&locs[..1], &[0.0], &hyper).unwrap();
        let reward = make_reward(RewardKind::LogEnergy, &BTreeMap::new()).unwrap();
        let table = precompute(&h0, 0, &actions, 2, &hyper, &reward).unwrap();
        let ctx = PlanContext::new(&hyper, &reward, &actions, &table);
        let cfg = PlannerConfig::from_epsilon(2, 1e-6, BudgetMode::Capped { n_max: 4 }).unwrap();
        assert!(matches!(plan(&h0, &cfg, &ctx), Err(GppError::Infeasible { .. })));
    }
}
