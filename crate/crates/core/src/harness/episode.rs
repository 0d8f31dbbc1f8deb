//! Receding-horizon episodes on a known field.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anytime::{anytime_plan_at, StopCondition, TraceRecord};
use crate::epsilon::{plan, BudgetMode, BudgetStats, PlanContext, PlannerConfig};
use crate::error::{GppError, Result};
use crate::gp::{GpHyperparams, GridSpec, History};
use crate::harness::baselines::{greedy_action, GreedyKind, GreedyParams};
use crate::harness::field::FieldGrid;
use crate::lipschitz::{precompute, ActionModel};
use crate::oracle::MeanSubstitution;
use crate::reward::{RewardConfig, RewardSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EpsilonGpp,
    Anytime,
    MlObs,
    GreedyPi,
    GreedyEi,
    GreedyUcb,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::EpsilonGpp,
        PolicyKind::Anytime,
        PolicyKind::MlObs,
        PolicyKind::GreedyPi,
        PolicyKind::GreedyEi,
        PolicyKind::GreedyUcb,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::EpsilonGpp => "epsilon_gpp",
            PolicyKind::Anytime => "anytime",
            PolicyKind::MlObs => "ml_obs",
            PolicyKind::GreedyPi => "greedy_pi",
            PolicyKind::GreedyEi => "greedy_ei",
            PolicyKind::GreedyUcb => "greedy_ucb",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = GppError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| GppError::InvalidParam(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub steps: usize,
    /// Online planning horizon H′.
    pub horizon: usize,
    pub policy: PolicyKind,
    pub reward: RewardConfig,
    pub epsilon: f64,
    pub budget: BudgetMode,
    pub stop: StopCondition,
    pub greedy: GreedyParams,
    pub noise_seed: u64,
    /// Observe the start location before the first step.
    pub initial_observation: bool,
    /// Record wall-clock time per step (otherwise reported as 0).
    pub timing: bool,
    /// Keep the anytime planner's per-iteration bounds.
    pub trace: bool,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.horizon == 0 {
            return Err(GppError::InvalidParam("steps and horizon must be at least 1".into()));
        }
        PlannerConfig::from_epsilon(self.horizon, self.epsilon, self.budget)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub location: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reward: f64,
    pub reward_normalized: f64,
    pub cum_reward: f64,
    pub max_reward: f64,
    pub tree_nodes: u64,
    pub cum_tree_nodes: u64,
    pub wall_ms: f64,
    /// Horizon used at this step, `min(H′, steps remaining)`.
    pub horizon: usize,
    /// Per-stage tolerance for planner policies.
    pub lambda: Option<f64>,
    pub budget: Option<BudgetStats>,
    /// Anytime iterations, when tracing.
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub policy: PolicyKind,
    pub start: usize,
    pub initial_measurement: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub total_reward: f64,
    pub max_reward: f64,
    pub total_nodes: u64,
}

/// Start cell rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Cell `(⌊w/2⌋, ⌊h/2⌋)`.
    Center,
    /// Uniform over cells, drawn from the given seed.
    Random,
}

pub fn start_index(grid: &GridSpec, rule: StartRule, seed: u64) -> usize {
    match rule {
        StartRule::Center => grid.center().index,
        StartRule::Random => ChaCha8Rng::seed_from_u64(seed).random_range(0..grid.len()),
    }
}

/// `steps + 1` draws of `N(0, σ_n²)`; entry 0 belongs to the initial observation.
pub fn noise_stream(seed: u64, steps: usize, noise_variance: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = noise_variance.sqrt();
    (0..=steps)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Decision {
    action: usize,
    nodes: u64,
    lambda: Option<f64>,
    budget: Option<BudgetStats>,
    trace: Vec<TraceRecord>,
}

fn decide(
    cfg: &EpisodeConfig,
    history: &History,
    here: usize,
    horizon: usize,
    actions: &ActionModel,
    hyper: &GpHyperparams,
    reward: &RewardSpec,
) -> Result<Decision> {
    let greedy = |kind| {
        Ok(Decision {
            action: greedy_action(kind, &cfg.greedy, history, here, actions, hyper)?,
            nodes: 0,
            lambda: None,
            budget: None,
            trace: Vec::new(),
        })
    };
    match cfg.policy {
        PolicyKind::GreedyPi => greedy(GreedyKind::Pi),
        PolicyKind::GreedyEi => greedy(GreedyKind::Ei),
        PolicyKind::GreedyUcb => greedy(GreedyKind::Ucb),
        PolicyKind::MlObs => {
            let ml = MeanSubstitution {
                hyper,
                reward,
                actions,
            };
            let p = ml.plan(history, here, horizon)?;
            Ok(Decision {
                action: p.action,
                nodes: p.nodes,
                lambda: None,
                budget: None,
                trace: Vec::new(),
            })
        }
        PolicyKind::EpsilonGpp | PolicyKind::Anytime => {
            let pc = PlannerConfig::from_epsilon(horizon, cfg.epsilon, cfg.budget)?;
            let table = precompute(history, here, actions, horizon, hyper, reward)?;
            let ctx = PlanContext::new(hyper, reward, actions, &table);
            let (action, nodes, budget, trace) = if cfg.policy == PolicyKind::EpsilonGpp {
                let r = plan(history, &pc, &ctx)?;
                (r.action, r.nodes_expanded, r.budget, Vec::new())
            } else {
                let r = anytime_plan_at(history, &[], &pc, &cfg.stop, &ctx, cfg.trace)?;
                (r.action, r.nodes, r.budget, r.trace)
            };
            Ok(Decision {
                action,
                nodes,
                lambda: Some(pc.lambda),
                budget: Some(budget),
                trace,
            })
        }
    }
}

/// Plans, moves, observes and records for `cfg.steps` steps, replanning with
/// horizon `min(H′, steps remaining)` each time.
pub fn run_episode(
    field: &FieldGrid,
    cfg: &EpisodeConfig,
    hyper: &GpHyperparams,
    start: usize,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    hyper.validate()?;
    let grid = field.grid();
    if start >= grid.len() {
        return Err(GppError::InvalidParam(format!("start {start} is outside the grid")));
    }
    let actions = ActionModel::grid4(grid);
    let reward = cfg.reward.build()?;
    let noise = noise_stream(cfg.noise_seed, cfg.steps, hyper.noise_variance);
    let start_loc = grid.location(start);
    let (mut history, initial_measurement) = if cfg.initial_observation {
        let z0 = field.value(&start_loc) + noise[0];
        (History::from_observations(&[start_loc], &[z0], hyper)?, Some(z0))
    } else {
        (History::empty(), None)
    };

    let mut here = start;
    let mut records = Vec::with_capacity(cfg.steps);
    let (mut cum, mut best, mut cum_nodes) = (0.0, f64::NEG_INFINITY, 0u64);
    for step in 1..=cfg.steps {
        let wrap = |e: GppError| GppError::Episode {
            step,
            source: Box::new(e),
        };
        let horizon = cfg.horizon.min(cfg.steps - step + 1);
        let clock = cfg.timing.then(Instant::now);
        let d = decide(cfg, &history, here, horizon, &actions, hyper, &reward).map_err(wrap)?;
        let wall_ms = clock.map_or(0.0, |c| c.elapsed().as_secs_f64() * 1e3);
        let loc = grid.location(d.action);
        let variance = history.posterior(&loc, hyper).map_err(wrap)?.variance;
        let z = field.value(&loc) + noise[step];
        history = history.extend(&loc, z, hyper).map_err(wrap)?;
        let r = reward.realized(z, history.locations(), variance);
        cum += r;
        best = best.max(r);
        cum_nodes += d.nodes;
        records.push(StepRecord {
            step,
            location: d.action,
            x: loc.x,
            y: loc.y,
            z,
            reward: r,
            reward_normalized: r - hyper.prior_mean,
            cum_reward: cum,
            max_reward: best,
            tree_nodes: d.nodes,
            cum_tree_nodes: cum_nodes,
            wall_ms,
            horizon,
            lambda: d.lambda,
            budget: d.budget,
            trace: d.trace,
        });
        here = d.action;
    }
    Ok(EpisodeResult {
        policy: cfg.policy,
        start,
        initial_measurement,
        total_reward: records.iter().map(|r| r.reward).sum(),
        max_reward: best,
        total_nodes: cum_nodes,
        steps: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardKind;
    use std::collections::BTreeMap;

    fn config(policy: PolicyKind, steps: usize, horizon: usize) -> EpisodeConfig {
        let mut params = BTreeMap::new();
        params.insert("beta".to_string(), 0.0);
        EpisodeConfig {
            steps,
            horizon,
            policy,
            reward: RewardConfig {
                kind: RewardKind::Ucb,
                params,
            },
            epsilon: 5.0,
            budget: BudgetMode::Analytic,
            stop: StopCondition::default(),
            greedy: GreedyParams::default(),
            noise_seed: 3,
            initial_observation: true,
            timing: false,
            trace: false,
        }
    }

    #[test]
    fn constant_field_total_is_steps_times_value() {
        let grid = GridSpec::new(3, 3, 1.0).unwrap();
        let field = FieldGrid::new(grid, "u", vec![1.5; 9]).unwrap();
        let hyper = GpHyperparams::new(1.5, 1.0, 1e-12, [1.0, 1.0]).unwrap();
        for policy in PolicyKind::ALL {
            let r = run_episode(&field, &config(policy, 4, 2), &hyper, 4).unwrap();
            assert!((r.total_reward - 6.0).abs() < 1e-5, "{policy}: {}", r.total_reward);
            let sum: f64 = r.steps.iter().map(|s| s.reward).sum();
            assert!((sum - r.total_reward).abs() < 1e-9);
            assert!(r.steps.iter().all(|s| (s.reward_normalized - (s.reward - 1.5)).abs() < 1e-15));
        }
    }

    #[test]
    fn seeded_episodes_repeat_and_horizon_shrinks() {
        let grid = GridSpec::new(5, 5, 0.25).unwrap();
        let hyper = GpHyperparams::new(0.0, 1.0, 0.01, [0.5, 0.5]).unwrap();
        let field = crate::gp::sample_field(&grid, &hyper, 9, "u").unwrap();
        let cfg = config(PolicyKind::EpsilonGpp, 4, 3);
        let a = run_episode(&field, &cfg, &hyper, 12).unwrap();
        let b = run_episode(&field, &cfg, &hyper, 12).unwrap();
        assert_eq!(a, b);
        let horizons: Vec<usize> = a.steps.iter().map(|s| s.horizon).collect();
        assert_eq!(horizons, vec![3, 3, 2, 1]);
        assert_eq!(a.total_nodes, a.steps.iter().map(|s| s.tree_nodes).sum::<u64>());
        for w in a.steps.windows(2) {
            assert!(grid.neighbors4(w[0].location).contains(&w[1].location));
        }
    }

    #[test]
    fn noise_is_shared_across_policies() {
        let a = noise_stream(5, 10, 0.01);
        assert_eq!(a, noise_stream(5, 10, 0.01));
        assert_eq!(a.len(), 11);
        assert_ne!(a, noise_stream(6, 10, 0.01));
    }

    #[test]
    fn errors_carry_step() {
        let grid = GridSpec::new(2, 1, 1.0).unwrap();
        let field = FieldGrid::new(grid, "u", vec![0.0, 1.0]).unwrap();
        let hyper = GpHyperparams::new(0.0, 1.0, 0.01, [1.0, 1.0]).unwrap();
        let mut cfg = config(PolicyKind::EpsilonGpp, 2, 2);
        cfg.budget = BudgetMode::Capped { n_max: 3 };
        cfg.epsilon = 1e-9;
        cfg.reward = RewardConfig {
            kind: RewardKind::LogEnergy,
            params: BTreeMap::new(),
        };
        let err = run_episode(&field, &cfg, &hyper, 0).unwrap_err();
        assert!(matches!(err, GppError::Episode { step: 1, .. }), "{err}");
        assert!(run_episode(&field, &cfg, &hyper, 7).is_err());
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.as_str().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("nope".parse::<PolicyKind>().is_err());
    }
}
