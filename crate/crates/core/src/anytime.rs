//! Anytime branch-and-bound variant of the ε-optimal planner.
//!
//! The tree grows one expansion per iteration. Every node keeps upper and
//! lower bounds on its value; unexpanded siblings inherit bounds from an
//! expanded one through the value function's Lipschitz constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::epsilon::{check_horizon, setup_action, successors, BudgetStats, PlanContext, PlannerConfig};
use crate::error::{GppError, Result};
use crate::gp::{Design, History, Location, Posterior};
use crate::sampling::Partition;

/// Node cap used by default (the tree size of the reference anytime runs).
pub const DEFAULT_MAX_NODES: u64 = 50_000;

/// Any-of stop rule; the search also stops once the tree is fully expanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    pub max_nodes: Option<u64>,
    pub max_iterations: Option<u64>,
    #[serde(default)]
    pub gap_target: f64,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            max_nodes: Some(DEFAULT_MAX_NODES),
            max_iterations: None,
            gap_target: 0.0,
        }
    }
}

impl StopCondition {
    pub fn unlimited() -> Self {
        Self {
            max_nodes: None,
            max_iterations: None,
            gap_target: 0.0,
        }
    }

    fn reached(&self, nodes: u64, iterations: u64, gap: f64) -> bool {
        self.max_nodes.is_some_and(|m| nodes >= m)
            || self.max_iterations.is_some_and(|m| iterations >= m)
            || gap <= self.gap_target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub nodes: u64,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnytimeResult {
    /// Location index maximising the lower action bound.
    pub action: usize,
    pub location: Location,
    pub upper: f64,
    pub lower: f64,
    /// `upper − lower`.
    pub gap: f64,
    pub iterations: u64,
    pub nodes: u64,
    /// `(location index, Q̄, Q̲)` in ascending index order.
    pub per_action: Vec<(usize, f64, f64)>,
    pub saturated: bool,
    pub budget: BudgetStats,
    pub trace: Vec<TraceRecord>,
}

type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Child {
    Unexpanded,
    /// Depth `H`: value exactly 0.
    Terminal,
    Node(NodeId),
}

struct Branch {
    action: usize,
    partition: Partition,
    immediate: f64,
    next_lipschitz: f64,
    design: Arc<Design>,
    posterior: Posterior,
    upper: Vec<f64>,
    lower: Vec<f64>,
    children: Vec<Child>,
    q_upper: f64,
    q_lower: f64,
}

struct Node {
    history: History,
    path: Vec<usize>,
    branches: Vec<Branch>,
    upper: f64,
    lower: f64,
    saturated: bool,
}

/// Search tree for one planning call.
pub struct AnytimeTree<'a, 'c> {
    cfg: &'a PlannerConfig,
    ctx: &'a PlanContext<'c>,
    nodes: Vec<Node>,
    expanded: u64,
    iterations: u64,
    stats: BudgetStats,
}

impl<'a, 'c> AnytimeTree<'a, 'c> {
    /// Builds the root and runs the first iteration (a full-height expansion
    /// of the root).
    pub fn new(
        history: &History,
        path: &[usize],
        cfg: &'a PlannerConfig,
        ctx: &'a PlanContext<'c>,
    ) -> Result<Self> {
        check_horizon(path, cfg, ctx)?;
        if path.len() == cfg.horizon {
            return Err(GppError::InvalidParam("no stages left to plan".into()));
        }
        let mut tree = Self {
            cfg,
            ctx,
            nodes: Vec::new(),
            expanded: 0,
            iterations: 0,
            stats: BudgetStats::default(),
        };
        let root = tree.new_node(history.clone(), path.to_vec());
        // Only nodes below the root are counted.
        tree.expanded = 0;
        tree.expand(root)?;
        tree.iterations = 1;
        Ok(tree)
    }

    pub fn upper(&self) -> f64 {
        self.nodes[0].upper
    }

    pub fn lower(&self) -> f64 {
        self.nodes[0].lower
    }

    pub fn gap(&self) -> f64 {
        self.upper() - self.lower()
    }

    pub fn nodes(&self) -> u64 {
        self.expanded
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn is_saturated(&self) -> bool {
        self.nodes[0].saturated
    }

    pub fn trace_record(&self) -> TraceRecord {
        TraceRecord {
            iteration: self.iterations,
            nodes: self.expanded,
            upper: self.upper(),
            lower: self.lower(),
            gap: self.gap(),
        }
    }

    fn new_node(&mut self, history: History, path: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            history,
            path,
            branches: Vec::new(),
            upper: f64::INFINITY,
            lower: f64::NEG_INFINITY,
            saturated: false,
        });
        self.expanded += 1;
        self.nodes.len() - 1
    }

    /// Builds every action's partition and expands the median child of each to
    /// full height.
    fn expand(&mut self, id: NodeId) -> Result<()> {
        let (history, path) = (self.nodes[id].history.clone(), self.nodes[id].path.clone());
        let terminal = path.len() + 1 == self.cfg.horizon;
        for s in successors(&path, self.ctx)? {
            let setup = setup_action(&history, &path, s, self.cfg, self.ctx)?;
            self.stats.record(&setup.partition);
            let n = setup.partition.len();
            let mut branch = Branch {
                action: s,
                partition: setup.partition,
                immediate: setup.immediate,
                next_lipschitz: setup.next_lipschitz,
                design: setup.design,
                posterior: setup.posterior,
                upper: vec![f64::INFINITY; n],
                lower: vec![f64::NEG_INFINITY; n],
                children: vec![Child::Unexpanded; n],
                q_upper: f64::INFINITY,
                q_lower: f64::NEG_INFINITY,
            };
            if terminal {
                branch.upper.fill(0.0);
                branch.lower.fill(0.0);
                branch.children.fill(Child::Terminal);
                self.expanded += n as u64;
            } else {
                let k = branch.partition.median_index();
                let child = self.spawn_child(&history, &path, &branch, k);
                self.expand(child)?;
                branch.children[k] = Child::Node(child);
                branch.upper[k] = self.nodes[child].upper;
                branch.lower[k] = self.nodes[child].lower;
                refine_bounds(&mut branch, k);
            }
            self.refresh_q(&mut branch);
            self.nodes[id].branches.push(branch);
        }
        self.refresh_node(id);
        Ok(())
    }

    fn spawn_child(&mut self, history: &History, path: &[usize], branch: &Branch, i: usize) -> NodeId {
        let z = branch.partition.samples[i];
        let child = history.child(branch.design.clone(), &branch.posterior, z);
        let mut child_path = path.to_vec();
        child_path.push(branch.action);
        self.new_node(child, child_path)
    }

    fn refresh_q(&self, branch: &mut Branch) {
        let lambda = self.cfg.lambda;
        let (mut up, mut lo) = (0.0, 0.0);
        for (i, (&z, &w)) in branch.partition.samples.iter().zip(&branch.partition.weights).enumerate() {
            let r1 = self.ctx.reward.r1(z);
            up += w * (r1 + branch.upper[i]);
            lo += w * (r1 + branch.lower[i]);
        }
        branch.q_upper = branch.q_upper.min(branch.immediate + up + lambda);
        branch.q_lower = branch.q_lower.max(branch.immediate + lo - lambda);
    }

    fn child_saturated(&self, child: Child) -> bool {
        match child {
            Child::Unexpanded => false,
            Child::Terminal => true,
            Child::Node(id) => self.nodes[id].saturated,
        }
    }

    fn refresh_node(&mut self, id: NodeId) {
        let node = &self.nodes[id];
        let up = node.branches.iter().map(|b| b.q_upper).fold(f64::NEG_INFINITY, f64::max);
        let lo = node.branches.iter().map(|b| b.q_lower).fold(f64::NEG_INFINITY, f64::max);
        let saturated = node
            .branches
            .iter()
            .all(|b| b.children.iter().all(|&c| self.child_saturated(c)));
        let node = &mut self.nodes[id];
        node.upper = node.upper.min(up);
        node.lower = node.lower.max(lo);
        node.saturated = saturated;
    }

    /// Picks `(branch, child)` to descend into: the action with the largest
    /// upper bound that still has an unsaturated child, then the child with the
    /// largest weighted gap.
    fn select(&self, id: NodeId) -> Option<(usize, usize)> {
        let node = &self.nodes[id];
        let mut order: Vec<usize> = (0..node.branches.len()).collect();
        order.sort_by(|&a, &b| {
            node.branches[b]
                .q_upper
                .total_cmp(&node.branches[a].q_upper)
                .then(a.cmp(&b))
        });
        order.into_iter().find_map(|b| {
            let branch = &node.branches[b];
            let mut best: Option<(usize, f64)> = None;
            for (i, &c) in branch.children.iter().enumerate() {
                if self.child_saturated(c) {
                    continue;
                }
                let score = branch.partition.weights[i] * (branch.upper[i] - branch.lower[i]);
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((i, score));
                }
            }
            best.map(|(i, _)| (b, i))
        })
    }

    /// One descent, expansion and backup. Returns `false` when the tree was
    /// already fully expanded.
    pub fn iterate(&mut self) -> Result<bool> {
        if self.is_saturated() {
            return Ok(false);
        }
        let mut trail = Vec::new();
        let mut id = 0;
        loop {
            let Some((b, i)) = self.select(id) else {
                // Unreachable while the node is unsaturated.
                return Err(GppError::Numeric("no expandable child under an open node".into()));
            };
            trail.push((id, b, i));
            match self.nodes[id].branches[b].children[i] {
                Child::Node(next) => id = next,
                Child::Unexpanded => {
                    let (history, path) = (self.nodes[id].history.clone(), self.nodes[id].path.clone());
                    let child = {
                        let branch = &self.nodes[id].branches[b];
                        let z = branch.partition.samples[i];
                        let h = history.child(branch.design.clone(), &branch.posterior, z);
                        let mut p = path;
                        p.push(branch.action);
                        (h, p)
                    };
                    let child = self.new_node(child.0, child.1);
                    self.expand(child)?;
                    self.nodes[id].branches[b].children[i] = Child::Node(child);
                    break;
                }
                Child::Terminal => {
                    return Err(GppError::Numeric("selected a terminal child".into()));
                }
            }
        }
        for &(id, b, i) in trail.iter().rev() {
            let Child::Node(child) = self.nodes[id].branches[b].children[i] else {
                unreachable!("descent only passes through expanded children");
            };
            let (cu, cl) = (self.nodes[child].upper, self.nodes[child].lower);
            let mut branch = std::mem::replace(&mut self.nodes[id].branches[b], placeholder());
            branch.upper[i] = branch.upper[i].min(cu);
            branch.lower[i] = branch.lower[i].max(cl);
            refine_bounds(&mut branch, i);
            self.refresh_q(&mut branch);
            self.nodes[id].branches[b] = branch;
            self.refresh_node(id);
        }
        self.iterations += 1;
        Ok(true)
    }

    pub fn result(&self, trace: Vec<TraceRecord>) -> AnytimeResult {
        let root = &self.nodes[0];
        let mut best = &root.branches[0];
        for b in &root.branches[1..] {
            if b.q_lower > best.q_lower {
                best = b;
            }
        }
        AnytimeResult {
            action: best.action,
            location: *self.ctx.actions.location(best.action),
            upper: root.upper,
            lower: root.lower,
            gap: root.upper - root.lower,
            iterations: self.iterations,
            nodes: self.expanded,
            per_action: root
                .branches
                .iter()
                .map(|b| (b.action, b.q_upper, b.q_lower))
                .collect(),
            saturated: root.saturated,
            budget: self.stats,
            trace,
        }
    }
}

fn placeholder() -> Branch {
    Branch {
        action: 0,
        partition: Partition {
            samples: Vec::new(),
            weights: Vec::new(),
            n: 0,
            tau: 0.0,
        },
        immediate: 0.0,
        next_lipschitz: 0.0,
        design: Arc::new(Design::empty()),
        posterior: Posterior {
            mean: 0.0,
            variance: 0.0,
        },
        upper: Vec::new(),
        lower: Vec::new(),
        children: Vec::new(),
        q_upper: 0.0,
        q_lower: 0.0,
    }
}

/// Transfers the pivot child's bounds to its siblings:
/// `V̄ᵢ ← min(V̄ᵢ, V̄ₖ + L|zⁱ − zᵏ|)`, `V̲ᵢ ← max(V̲ᵢ, V̲ₖ − L|zⁱ − zᵏ|)`.
fn refine_bounds(branch: &mut Branch, k: usize) {
    let (uk, lk, zk) = (branch.upper[k], branch.lower[k], branch.partition.samples[k]);
    let l = branch.next_lipschitz;
    for i in 0..branch.partition.len() {
        if i == k {
            continue;
        }
        let dz = (branch.partition.samples[i] - zk).abs();
        branch.upper[i] = branch.upper[i].min(uk + l * dz);
        branch.lower[i] = branch.lower[i].max(lk - l * dz);
    }
}

/// Runs iterations until `stop` holds or the tree is fully expanded.
pub fn anytime_plan_at(
    history: &History,
    path: &[usize],
    cfg: &PlannerConfig,
    stop: &StopCondition,
    ctx: &PlanContext<'_>,
    keep_trace: bool,
) -> Result<AnytimeResult> {
    let mut tree = AnytimeTree::new(history, path, cfg, ctx)?;
    let mut trace = Vec::new();
    if keep_trace {
        trace.push(tree.trace_record());
    }
    while !tree.is_saturated() && !stop.reached(tree.nodes(), tree.iterations(), tree.gap()) {
        tree.iterate()?;
        if keep_trace {
            trace.push(tree.trace_record());
        }
    }
    Ok(tree.result(trace))
}

pub fn anytime_plan(
    history: &History,
    cfg: &PlannerConfig,
    stop: &StopCondition,
    ctx: &PlanContext<'_>,
) -> Result<AnytimeResult> {
    anytime_plan_at(history, &[], cfg, stop, ctx, false)
}
