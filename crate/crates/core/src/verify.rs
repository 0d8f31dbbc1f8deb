//! Tiny-instance checks of the planners' guarantees against the quadrature
//! oracle.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anytime::{anytime_plan_at, AnytimeTree, StopCondition};
use crate::epsilon::{plan, plan_at, BudgetMode, CoefficientFn, PlanContext, PlannerConfig};
use crate::error::Result;
use crate::gp::{sample_field, GpHyperparams, GridSpec, History, Location};
use crate::harness::episode::{run_episode, EpisodeConfig, PolicyKind};
use crate::harness::GreedyParams;
use crate::lipschitz::{precompute, ActionModel, LipschitzTable};
use crate::normal;
use crate::oracle::BruteForce;
use crate::reward::{RewardConfig, RewardKind, RewardSpec};
use crate::sampling::{self, build_partition, feasible_tau_n, lambda_coefficient};

/// A small fully specified planning problem; serializable for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub seed: u64,
    pub hyper: GpHyperparams,
    /// `(x, y)` of every location; location 0 holds the prior observation.
    pub points: Vec<(f64, f64)>,
    pub prior_measurement: f64,
    pub reward: RewardConfig,
    pub horizon: usize,
}

/// Instance with everything the planners need.
pub struct Built {
    pub hyper: GpHyperparams,
    pub actions: ActionModel,
    pub history: History,
    pub reward: RewardSpec,
    pub table: LipschitzTable,
    pub horizon: usize,
}

impl Built {
    pub fn ctx(&self) -> PlanContext<'_> {
        PlanContext::new(&self.hyper, &self.reward, &self.actions, &self.table)
    }

    pub fn oracle(&self, quad_nodes: usize) -> Result<BruteForce<'_>> {
        BruteForce::new(&self.hyper, &self.reward, &self.actions, 0, self.horizon, quad_nodes)
    }
}

impl TinyInstance {
    /// Random instance with 2..=max_locations locations; the reward kind is
    /// given by the caller.
    pub fn random(seed: u64, kind: RewardKind, max_locations: usize, horizon: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..=max_locations.max(2));
        let points = (0..k)
            .map(|_| (rng.random_range(0.0..1.2), rng.random_range(0.0..1.2)))
            .collect();
        let hyper = GpHyperparams {
            prior_mean: rng.random_range(-0.5..1.5),
            signal_variance: rng.random_range(0.5..1.5),
            noise_variance: rng.random_range(0.02..0.2),
            length_scales: [rng.random_range(0.4..1.2), rng.random_range(0.4..1.2)],
        };
        let sd = (hyper.signal_variance + hyper.noise_variance).sqrt();
        let prior_measurement = hyper.prior_mean + sd * rng.sample::<f64, _>(StandardNormal);
        let mut params = BTreeMap::new();
        match kind {
            RewardKind::Ucb => {
                params.insert("beta".to_string(), rng.random_range(0.0..1.0));
            }
            RewardKind::Step => {
                params.insert("a".to_string(), rng.random_range(-0.5..1.0));
            }
            _ => {}
        }
        Self {
            seed,
            hyper,
            points,
            prior_measurement,
            reward: RewardConfig { kind, params },
            horizon,
        }
    }

    pub fn build(&self) -> Result<Built> {
        self.hyper.validate()?;
        let locs: Vec<Location> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Location::new(x, y, i))
            .collect();
        let actions = ActionModel::complete(locs.clone())?;
        let history = History::from_observations(&locs[..1], &[self.prior_measurement], &self.hyper)?;
        let reward = self.reward.build()?;
        let table = precompute(&history, 0, &actions, self.horizon, &self.hyper, &reward)?;
        Ok(Built {
            hyper: self.hyper,
            actions,
            history,
            reward,
            table,
            horizon: self.horizon,
        })
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub violations: usize,
    /// Largest observed error relative to its bound (≤ 1 means within bound).
    pub worst_ratio: f64,
    pub detail: String,
    pub failing: Option<TinyInstance>,
}

impl CheckOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            violations: 0,
            worst_ratio: 0.0,
            detail: String::new(),
            failing: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.cases > 0
    }

    /// Records `error ≤ bound`.
    fn record(&mut self, error: f64, bound: f64, instance: Option<&TinyInstance>) {
        self.cases += 1;
        let ratio = if bound > 0.0 {
            error / bound
        } else if error <= 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio.is_nan() || ratio > 1.0 {
            self.violations += 1;
            if self.failing.is_none() {
                self.failing = instance.cloned();
            }
        }
        self.worst_ratio = self.worst_ratio.max(ratio);
    }

    fn fail(&mut self, instance: Option<&TinyInstance>, why: String) {
        self.cases += 1;
        self.violations += 1;
        if self.failing.is_none() {
            self.failing = instance.cloned();
        }
        if self.detail.is_empty() {
            self.detail = why;
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} cases, {} violations, worst error/bound {:.4}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.violations,
            self.worst_ratio
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Instances cycling through every built-in reward kind.
pub fn instance_suite(count: usize, base_seed: u64, max_locations: usize, horizon: usize) -> Vec<TinyInstance> {
    (0..count)
        .map(|i| {
            let kind = RewardKind::CATALOG[i % RewardKind::CATALOG.len()];
            TinyInstance::random(base_seed + i as u64, kind, max_locations, horizon)
        })
        .collect()
}

/// `|V^ε₀ − V*₀| ≤ λH`.
pub fn check_value_bound(
    instances: &[TinyInstance],
    epsilon: f64,
    budget: BudgetMode,
    quad_nodes: usize,
    coefficient: Option<CoefficientFn>,
) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("value bound |V_eps - V*| <= lambda H");
    for inst in instances {
        let b = inst.build()?;
        let cfg = PlannerConfig::from_epsilon(b.horizon, epsilon, budget)?;
        let mut ctx = b.ctx();
        ctx.coefficient = coefficient;
        let v_eps = plan(&b.history, &cfg, &ctx)?.value;
        let v_star = b.oracle(quad_nodes)?.value(&b.history, &[])?;
        out.record((v_eps - v_star).abs(), cfg.lambda * b.horizon as f64, Some(inst));
    }
    Ok(out)
}

/// `V*₀ − V^{π^ε}₀ ≤ ε + 1e-6` with the policy value from quadrature rollout.
pub fn check_policy_loss(instances: &[TinyInstance], epsilon: f64, quad_nodes: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("policy loss V* - V^pi_eps <= eps");
    for inst in instances {
        let b = inst.build()?;
        let cfg = PlannerConfig::from_epsilon(b.horizon, epsilon, BudgetMode::Analytic)?;
        let ctx = b.ctx();
        let oracle = b.oracle(quad_nodes)?;
        let v_star = oracle.value(&b.history, &[])?;
        let policy = |h: &History, p: &[usize]| Ok(plan_at(h, p, &cfg, &ctx)?.action);
        let v_pi = oracle.policy_value(&b.history, &[], &policy)?;
        out.record(v_star - v_pi, epsilon + 1e-6, Some(inst));
    }
    Ok(out)
}

/// `|V*_t(z) − V*_t(z′)| ≤ L_t ‖z − z′‖` at `t = 0` and `t = 1`; half of the
/// perturbations touch a single component.
pub fn check_lipschitz(
    instances: &[TinyInstance],
    perturbations: usize,
    quad_nodes: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("Lipschitz |V*(z) - V*(z')| <= L ||z - z'||");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in instances {
        let b = inst.build()?;
        let oracle = b.oracle(quad_nodes)?;
        let sd = (b.hyper.signal_variance + b.hyper.noise_variance).sqrt();
        let next = rng.random_range(0..b.actions.len());
        let z1 = b.hyper.prior_mean + sd * rng.sample::<f64, _>(StandardNormal);
        let h1 = b.history.extend(b.actions.location(next), z1, &b.hyper)?;
        let stages: [(&History, Vec<usize>); 2] = [(&b.history, vec![]), (&h1, vec![next])];
        for (t, (hist, path)) in stages.iter().enumerate() {
            if t >= b.horizon {
                continue;
            }
            let lipschitz = b.table.lookup(path)?;
            let base = hist.measurements().to_vec();
            for p in 0..perturbations / 2 {
                let scale = 10f64.powf(rng.random_range(-2.0..0.5)) * sd;
                let mut z = base.clone();
                let mut z2 = base.clone();
                for v in z.iter_mut() {
                    *v += sd * rng.sample::<f64, _>(StandardNormal);
                }
                z2.clone_from(&z);
                if p % 2 == 0 {
                    let i = rng.random_range(0..z.len());
                    z2[i] += scale * rng.sample::<f64, _>(StandardNormal);
                } else {
                    for v in z2.iter_mut() {
                        *v += scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let va = oracle.value(&hist.with_measurements(&z, &b.hyper)?, path)?;
                let vb = oracle.value(&hist.with_measurements(&z2, &b.hyper)?, path)?;
                let dist = z.iter().zip(&z2).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                out.record((va - vb).abs(), lipschitz * dist + 1e-9, Some(inst));
            }
        }
    }
    Ok(out)
}

/// Anytime planner: sandwich around the exact ε value at every iteration,
/// monotone bounds, matching action at full expansion, and rollout loss
/// `≤ αH` for a budget-limited run.
pub fn check_anytime(
    instances: &[TinyInstance],
    epsilon: f64,
    quad_nodes: usize,
    limited: StopCondition,
) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("anytime sandwich, monotone gap, action, loss <= alpha H");
    for inst in instances {
        let b = inst.build()?;
        let cfg = PlannerConfig::from_epsilon(b.horizon, epsilon, BudgetMode::Analytic)?;
        let ctx = b.ctx();
        let exact = plan(&b.history, &cfg, &ctx)?;
        let mut tree = AnytimeTree::new(&b.history, &[], &cfg, &ctx)?;
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        loop {
            let (u, l, g) = (tree.upper(), tree.lower(), tree.gap());
            let sandwich = l - 1e-9 <= exact.value && exact.value <= u + 1e-9;
            let monotone = u <= prev.0 && l >= prev.1 && g <= prev.2;
            if !sandwich || !monotone {
                out.fail(
                    Some(inst),
                    format!(
                        "iteration {}: lower {l} exact {} upper {u}",
                        tree.iterations(),
                        exact.value
                    ),
                );
                break;
            }
            prev = (u, l, g);
            if !tree.iterate()? {
                break;
            }
        }
        let full = tree.result(Vec::new());
        if full.action != exact.action {
            out.fail(Some(inst), format!("action {} vs exact {}", full.action, exact.action));
            continue;
        }

        let oracle = b.oracle(quad_nodes)?;
        let v_star = oracle.value(&b.history, &[])?;
        let alpha = Cell::new(0.0f64);
        let policy = |h: &History, p: &[usize]| {
            let r = anytime_plan_at(h, p, &cfg, &limited, &ctx, false)?;
            alpha.set(alpha.get().max(r.gap));
            Ok(r.action)
        };
        let v_pi = oracle.policy_value(&b.history, &[], &policy)?;
        out.record(v_star - v_pi, alpha.get() * b.horizon as f64 + 1e-6, Some(inst));
    }
    Ok(out)
}

/// Fixed `(τ = 0, n = 1)` ε planner against the mean-substitution planner:
/// identical action sequences over seeded episodes.
pub fn check_degeneracy(episodes: u64, horizon: usize, steps: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("tau = 0 planner equals mean-substitution planner");
    let grid = GridSpec::new(6, 6, 0.1)?;
    let hyper = GpHyperparams::new(0.0, 1.0, 1e-3, [0.25, 0.25])?;
    for seed in 0..episodes {
        let field = sample_field(&grid, &hyper, seed, "unit")?;
        let kind = RewardKind::CATALOG[seed as usize % RewardKind::CATALOG.len()];
        let mut params = BTreeMap::new();
        match kind {
            RewardKind::Ucb => {
                params.insert("beta".to_string(), 0.5);
            }
            RewardKind::Step => {
                params.insert("a".to_string(), 0.3);
            }
            _ => {}
        }
        let cfg = |policy| EpisodeConfig {
            steps,
            horizon,
            policy,
            reward: RewardConfig {
                kind,
                params: params.clone(),
            },
            epsilon: 1.0,
            budget: BudgetMode::Fixed { tau: 0.0, n: 1 },
            stop: StopCondition::default(),
            greedy: GreedyParams::default(),
            noise_seed: 100 + seed,
            initial_observation: true,
            timing: false,
            trace: false,
        };
        let start = grid.center().index;
        let a = run_episode(&field, &cfg(PolicyKind::EpsilonGpp), &hyper, start)?;
        let b = run_episode(&field, &cfg(PolicyKind::MlObs), &hyper, start)?;
        let sa: Vec<usize> = a.steps.iter().map(|s| s.location).collect();
        let sb: Vec<usize> = b.steps.iter().map(|s| s.location).collect();
        if sa == sb {
            out.record(0.0, 1.0, None);
        } else {
            out.fail(None, format!("seed {seed}: {sa:?} vs {sb:?}"));
        }
    }
    Ok(out)
}

/// Worked partition `(μ = 0, σ = 1, τ = 3, n = 5)` and `Λ(n, 0)`.
pub fn check_partition() -> CheckOutcome {
    let mut out = CheckOutcome::new("partition samples, weights and Lambda(n, 0)");
    match build_partition(0.0, 1.0, 5, 3.0) {
        Ok(p) => {
            for (z, want) in p.samples.iter().zip([-3.0, -2.0, 0.0, 2.0, 3.0]) {
                out.record((z - want).abs(), 1e-12, None);
            }
            out.record((p.weights.iter().sum::<f64>() - 1.0).abs(), 1e-12, None);
        }
        Err(e) => out.fail(None, e.to_string()),
    }
    for n in [2, 3, 10, 1000] {
        match lambda_coefficient(n, 0.0) {
            Ok(c) => out.record((c - (2.0 / std::f64::consts::PI).sqrt()).abs(), 1e-12, None),
            Err(e) => out.fail(None, e.to_string()),
        }
    }
    out
}

/// Closed-form `(τ, n)` on random `(λ, σ, ℓ₁ + L)` triples: feasible, and `n`
/// equal to the ceiled formula.
pub fn check_feasibility(count: usize, seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("closed-form (tau, n) feasibility");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..count {
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let sigma = 10f64.powf(rng.random_range(-2.0..0.5));
        let l = 10f64.powf(rng.random_range(-2.0..2.0));
        let Ok(choice) = feasible_tau_n(lambda, sigma, l) else {
            out.fail(None, format!("no choice for ({lambda}, {sigma}, {l})"));
            continue;
        };
        let coeff = if choice.tau == 0.0 {
            normal::sqrt_2_over_pi()
        } else {
            sampling::kappa(choice.tau) + sampling::eta(choice.n, choice.tau)
        };
        out.record(coeff * sigma * l, lambda * (1.0 + 1e-12), None);
        let ratio = (std::f64::consts::PI / 2.0).sqrt() * lambda / (2.0 * sigma * l);
        let expected_n = if ratio >= 1.0 {
            2
        } else {
            let tau = (-2.0 * ratio.ln()).sqrt();
            (2.0 + tau * (std::f64::consts::PI / 2.0).sqrt() * (tau * tau / 2.0).exp()).ceil() as usize
        };
        if expected_n != choice.n {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        out.violations += mismatches;
        out.detail = format!("{mismatches} sample sizes differ from the ceiled formula");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub instances: usize,
    pub quad_nodes: usize,
    pub perturbations: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            quad_nodes: 400,
            perturbations: 40,
            epsilon: 0.3,
            seed: 2016,
        }
    }
}

/// The full smoke suite behind `gpp verify`.
pub fn run_suite(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let tiny = instance_suite(opts.instances, opts.seed, 4, 2);
    let pairs = instance_suite(opts.instances.min(10), opts.seed + 10_000, 2, 2);
    let limited = StopCondition {
        max_nodes: None,
        max_iterations: Some(2),
        gap_target: 0.0,
    };
    Ok(vec![
        check_partition(),
        check_feasibility(1000, opts.seed),
        check_lipschitz(&pairs[..pairs.len().min(3)], opts.perturbations, opts.quad_nodes, opts.seed)?,
        check_value_bound(&tiny, opts.epsilon, BudgetMode::Analytic, opts.quad_nodes, None)?,
        check_policy_loss(&pairs, opts.epsilon, opts.quad_nodes)?,
        check_anytime(&pairs, opts.epsilon, opts.quad_nodes, limited)?,
        check_degeneracy(4, 3, 6)?,
    ])
}

/// `Λ` scaled down a hundredfold; a planner using it under-samples.
pub fn corrupted_coefficient(n: usize, tau: f64) -> f64 {
    0.01 * lambda_coefficient(n, tau).unwrap_or(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible_and_roundtrip() {
        let a = TinyInstance::random(3, RewardKind::Step, 4, 2);
        assert_eq!(a, TinyInstance::random(3, RewardKind::Step, 4, 2));
        let json = serde_json::to_string(&a).unwrap();
        let back: TinyInstance = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!((2..=4).contains(&a.points.len()));
        a.build().unwrap();
    }

    #[test]
    fn sampling_checks_pass() {
        assert!(check_partition().passed());
        let f = check_feasibility(300, 1);
        assert!(f.passed(), "{f}");
    }

    #[test]
    fn corrupted_coefficient_is_caught() {
        let inst = instance_suite(10, 77, 3, 2);
        let cap = BudgetMode::Capped { n_max: 1000 };
        let honest = check_value_bound(&inst, 0.3, cap, 200, None).unwrap();
        assert!(honest.passed(), "{honest}");
        let bad = check_value_bound(&inst, 0.3, cap, 200, Some(corrupted_coefficient)).unwrap();
        assert!(!bad.passed(), "{bad}");
        assert!(bad.failing.is_some());
    }
}
