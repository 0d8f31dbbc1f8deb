//! Lipschitz continuous rewards `R(z, s) = R₁(z) + R₂(z) + R₃(s)`.
//!
//! `R₁` is Lipschitz with constant `ℓ₁`; `R₂` only has to be Lipschitz after
//! convolution with a Gaussian (`g_σ`, constant `ℓ₂(σ)`); `R₃` depends on the
//! visited locations, which for every catalog entry enters through the
//! posterior variance of the newly visited location.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GppError, Result};
use crate::gp::{Location, Posterior};
use crate::normal;
use crate::quadrature::{gauss_hermite_normal, gauss_legendre, GaussRule};

/// Default node count for numeric `h_σ`.
pub const DEFAULT_H_NODES: usize = 64;

/// Half-width, in standard deviations, of the window used by the
/// breakpoint-aware `h_σ` quadrature.
pub const H_WINDOW_SIGMAS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Ucb,
    LogEnergy,
    Step,
    Gaussian,
    Mes,
    Custom,
}

impl RewardKind {
    pub const CATALOG: [RewardKind; 5] = [
        RewardKind::Ucb,
        RewardKind::LogEnergy,
        RewardKind::Step,
        RewardKind::Gaussian,
        RewardKind::Mes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::Ucb => "ucb",
            RewardKind::LogEnergy => "log_energy",
            RewardKind::Step => "step",
            RewardKind::Gaussian => "gaussian",
            RewardKind::Mes => "mes",
            RewardKind::Custom => "custom",
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardKind {
    type Err = GppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ucb" => Ok(RewardKind::Ucb),
            "log_energy" => Ok(RewardKind::LogEnergy),
            "step" => Ok(RewardKind::Step),
            "gaussian" => Ok(RewardKind::Gaussian),
            "mes" => Ok(RewardKind::Mes),
            "custom" => Ok(RewardKind::Custom),
            other => Err(GppError::UnknownRewardKind(other.to_string())),
        }
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type ConvolvedFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type LocationFn = Arc<dyn Fn(&[Location], f64) -> f64 + Send + Sync>;

/// User-supplied reward pieces.
#[derive(Clone)]
pub struct CustomReward {
    pub r1: ScalarFn,
    /// Points where `R₁` is not smooth; numeric `h_σ` splits its quadrature there.
    pub r1_breakpoints: Vec<f64>,
    pub l1: f64,
    pub r2: ScalarFn,
    /// `g_σ(u)` as `(u, σ) -> value`.
    pub g_sigma: ConvolvedFn,
    pub l2_of_sigma: ScalarFn,
    /// `(visited locations, posterior variance) -> R₃`.
    pub r3: LocationFn,
}

#[derive(Clone)]
enum Body {
    Ucb { beta: f64 },
    LogEnergy { cut_in: f64 },
    Step { threshold: f64 },
    Gaussian,
    Mes,
    Custom(CustomReward),
}

/// Serializable reward selection, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl RewardConfig {
    pub fn build(&self) -> Result<RewardSpec> {
        make_reward(self.kind, &self.params)
    }
}

/// A reward of the Lipschitz class with its convolutions and constants.
#[derive(Clone)]
pub struct RewardSpec {
    kind: RewardKind,
    params: BTreeMap<String, f64>,
    body: Body,
    h_nodes: usize,
    legendre: Arc<GaussRule>,
    hermite: Arc<GaussRule>,
}

impl fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardSpec")
            .field("kind", &self.kind)
            .field("params", &self.params)
            .field("h_nodes", &self.h_nodes)
            .finish()
    }
}

fn take_param(
    kind: RewardKind,
    params: &BTreeMap<String, f64>,
    name: &str,
    default: Option<f64>,
) -> Result<f64> {
    match params.get(name) {
        Some(v) if v.is_finite() => Ok(*v),
        Some(v) => Err(GppError::InvalidParam(format!("{kind}.{name} = {v} is not finite"))),
        None => default.ok_or_else(|| GppError::MissingParam {
            kind: kind.to_string(),
            param: name.to_string(),
        }),
    }
}

/// Builds a catalog reward.
///
/// | kind | params |
/// |------|--------|
/// | `ucb` | `beta` (required, ≥ 0) |
/// | `log_energy` | `cut_in` (default 1) |
/// | `step` | `a` (required) |
/// | `gaussian`, `mes` | none |
pub fn make_reward(kind: RewardKind, params: &BTreeMap<String, f64>) -> Result<RewardSpec> {
    make_reward_with_nodes(kind, params, DEFAULT_H_NODES)
}

pub fn make_reward_with_nodes(
    kind: RewardKind,
    params: &BTreeMap<String, f64>,
    h_nodes: usize,
) -> Result<RewardSpec> {
    let allowed: &[&str] = match kind {
        RewardKind::Ucb => &["beta"],
        RewardKind::LogEnergy => &["cut_in"],
        RewardKind::Step => &["a"],
        RewardKind::Gaussian | RewardKind::Mes => &[],
        RewardKind::Custom => {
            return Err(GppError::InvalidParam(
                "custom rewards are built with RewardSpec::custom".into(),
            ))
        }
    };
    if let Some(unknown) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(GppError::InvalidParam(format!(
            "unknown parameter `{unknown}` for reward kind `{kind}`"
        )));
    }
    let body = match kind {
        RewardKind::Ucb => {
            let beta = take_param(kind, params, "beta", None)?;
            if beta < 0.0 {
                return Err(GppError::InvalidParam("ucb.beta must be >= 0".into()));
            }
            Body::Ucb { beta }
        }
        RewardKind::LogEnergy => {
            let cut_in = take_param(kind, params, "cut_in", Some(1.0))?;
            if cut_in <= 0.0 {
                return Err(GppError::InvalidParam("log_energy.cut_in must be > 0".into()));
            }
            Body::LogEnergy { cut_in }
        }
        RewardKind::Step => Body::Step {
            threshold: take_param(kind, params, "a", None)?,
        },
        RewardKind::Gaussian => Body::Gaussian,
        RewardKind::Mes => Body::Mes,
        RewardKind::Custom => unreachable!(),
    };
    let spec = RewardSpec::assemble(kind, params.clone(), body, h_nodes)?;
    spec.check_h_convergence();
    Ok(spec)
}

impl RewardSpec {
    fn assemble(
        kind: RewardKind,
        params: BTreeMap<String, f64>,
        body: Body,
        h_nodes: usize,
    ) -> Result<Self> {
        if h_nodes < 2 {
            return Err(GppError::InvalidParam("h_sigma needs at least 2 nodes".into()));
        }
        Ok(Self {
            kind,
            params,
            body,
            h_nodes,
            legendre: Arc::new(gauss_legendre(h_nodes)),
            hermite: Arc::new(gauss_hermite_normal(h_nodes)),
        })
    }

    /// Wraps user-supplied pieces. `g_σ` Lipschitz continuity cannot be proven
    /// symbolically; it is probed on a grid and a warning is logged when the
    /// probe exceeds `ℓ₂(σ)`.
    pub fn custom(reward: CustomReward) -> Result<Self> {
        if !(reward.l1 >= 0.0) {
            return Err(GppError::InvalidParam("custom l1 must be >= 0".into()));
        }
        let spec = Self::assemble(
            RewardKind::Custom,
            BTreeMap::new(),
            Body::Custom(reward),
            DEFAULT_H_NODES,
        )?;
        spec.check_h_convergence();
        spec.probe_g_lipschitz();
        Ok(spec)
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn h_nodes(&self) -> usize {
        self.h_nodes
    }

    pub fn l1(&self) -> f64 {
        match &self.body {
            Body::LogEnergy { cut_in } => 1.0 / cut_in,
            Body::Custom(c) => c.l1,
            _ => 0.0,
        }
    }

    pub fn l2(&self, sigma: f64) -> f64 {
        match &self.body {
            Body::Ucb { .. } | Body::Mes => 1.0,
            Body::LogEnergy { .. } => 0.0,
            Body::Step { .. } => normal::INV_SQRT_2PI / sigma,
            Body::Gaussian => normal::INV_SQRT_2PI * (-0.5f64).exp() / (1.0 + sigma * sigma),
            Body::Custom(c) => (c.l2_of_sigma)(sigma),
        }
    }

    /// Whether `R₁ ≡ 0`.
    pub fn r1_is_zero(&self) -> bool {
        !matches!(self.body, Body::LogEnergy { .. } | Body::Custom(_))
    }

    pub fn r1(&self, z: f64) -> f64 {
        match &self.body {
            Body::LogEnergy { cut_in } => {
                if z > *cut_in {
                    (z / cut_in).ln()
                } else {
                    0.0
                }
            }
            Body::Custom(c) => (c.r1)(z),
            _ => 0.0,
        }
    }

    pub fn r1_breakpoints(&self) -> &[f64] {
        match &self.body {
            Body::LogEnergy { cut_in } => std::slice::from_ref(cut_in),
            Body::Custom(c) => &c.r1_breakpoints,
            _ => &[],
        }
    }

    pub fn r2(&self, z: f64) -> f64 {
        match &self.body {
            Body::Ucb { .. } | Body::Mes => z,
            Body::LogEnergy { .. } => 0.0,
            Body::Step { threshold } => {
                if z > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Body::Gaussian => normal::pdf(z),
            Body::Custom(c) => (c.r2)(z),
        }
    }

    /// `R₃` given the visited locations (ending with the new one) and the
    /// posterior variance of the new location before it was observed.
    pub fn r3(&self, visited: &[Location], variance: f64) -> f64 {
        match &self.body {
            Body::Ucb { beta } => beta * variance.sqrt(),
            Body::Mes => 0.5 * (2.0 * PI * E * variance).ln(),
            Body::Custom(c) => (c.r3)(visited, variance),
            _ => 0.0,
        }
    }

    /// `g_σ(u) = (R₂ ∗ N(0, σ²))(u)`.
    pub fn g_sigma(&self, u: f64, sigma: f64) -> f64 {
        match &self.body {
            Body::Ucb { .. } | Body::Mes => u,
            Body::LogEnergy { .. } => 0.0,
            Body::Step { threshold } => normal::cdf((u - threshold) / sigma),
            Body::Gaussian => {
                let v = 1.0 + sigma * sigma;
                (2.0 * PI * v).powf(-0.5) * (-u * u / (2.0 * v)).exp()
            }
            Body::Custom(c) => (c.g_sigma)(u, sigma),
        }
    }

    /// `h_σ(u) = (R₁ ∗ N(0, σ²))(u)`.
    pub fn h_sigma(&self, u: f64, sigma: f64) -> Result<f64> {
        if self.r1_is_zero() {
            return Ok(0.0);
        }
        let breakpoints = self.r1_breakpoints();
        if breakpoints.is_empty() {
            hermite_expectation(&self.hermite, |z| self.r1(z), u, sigma)
        } else {
            piecewise_expectation(&self.legendre, |z| self.r1(z), breakpoints, u, sigma)
        }
    }

    /// `(h_σ + g_σ)(μ) + R₃` with `σ = √variance`.
    pub fn expected_immediate_reward(&self, post: &Posterior, visited: &[Location]) -> Result<f64> {
        if !(post.variance > 0.0) {
            return Err(GppError::Numeric(format!(
                "posterior variance {} is not positive",
                post.variance
            )));
        }
        let sigma = post.std_dev();
        let h = self.h_sigma(post.mean, sigma)?;
        Ok(h + self.g_sigma(post.mean, sigma) + self.r3(visited, post.variance))
    }

    /// `R(z, s)` for a realized measurement.
    pub fn realized(&self, z: f64, visited: &[Location], variance: f64) -> f64 {
        self.r1(z) + self.r2(z) + self.r3(visited, variance)
    }

    /// Logs a warning when doubling the `h_σ` node count moves the result by
    /// more than 1e-8 at a few probe points.
    fn check_h_convergence(&self) -> bool {
        if self.r1_is_zero() {
            return true;
        }
        let Ok(doubled) = Self::assemble(
            self.kind,
            self.params.clone(),
            self.body.clone(),
            self.h_nodes * 2,
        ) else {
            return false;
        };
        let anchor = self.r1_breakpoints().first().copied().unwrap_or(0.0);
        let mut ok = true;
        for du in [-1.0, 0.0, 0.5, 3.0] {
            for sigma in [0.05, 1.0] {
                let u = anchor + du;
                match (self.h_sigma(u, sigma), doubled.h_sigma(u, sigma)) {
                    (Ok(a), Ok(b)) if (a - b).abs() < 1e-8 => {}
                    _ => ok = false,
                }
            }
        }
        if !ok {
            log::warn!(
                "h_sigma for `{}` has not converged at {} nodes",
                self.kind,
                self.h_nodes
            );
        }
        ok
    }

    fn probe_g_lipschitz(&self) -> bool {
        let mut ok = true;
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            let l2 = self.l2(sigma);
            let mut prev = (-5.0, self.g_sigma(-5.0, sigma));
            for k in 1..=200 {
                let u = -5.0 + 0.05 * k as f64;
                let g = self.g_sigma(u, sigma);
                if (g - prev.1).abs() > l2 * (u - prev.0) * (1.0 + 1e-9) + 1e-12 {
                    ok = false;
                }
                prev = (u, g);
            }
        }
        if !ok {
            log::warn!("custom reward: g_sigma exceeds its declared Lipschitz constant on the probe grid");
        }
        ok
    }
}

fn hermite_expectation<F: Fn(f64) -> f64>(
    rule: &GaussRule,
    f: F,
    u: f64,
    sigma: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for (&y, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(u + sigma * y);
        if !v.is_finite() {
            return Err(GppError::Numeric(format!("non-finite integrand at z = {}", u + sigma * y)));
        }
        acc += w * v;
    }
    Ok(acc)
}

fn piecewise_expectation<F: Fn(f64) -> f64>(
    rule: &GaussRule,
    f: F,
    breakpoints: &[f64],
    u: f64,
    sigma: f64,
) -> Result<f64> {
    let mut cuts = vec![-H_WINDOW_SIGMAS];
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .map(|b| (b - u) / sigma)
        .filter(|y| y.abs() < H_WINDOW_SIGMAS)
        .collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(H_WINDOW_SIGMAS);
    let mut acc = 0.0;
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let y = mid + half * x;
            let v = f(u + sigma * y);
            if !v.is_finite() {
                return Err(GppError::Numeric(format!(
                    "non-finite integrand at z = {}",
                    u + sigma * y
                )));
            }
            acc += half * w * normal::pdf(y) * v;
        }
    }
    Ok(acc)
}

/// Gauss–Hermite approximation of `∫ R₁(u + σy) φ(y) dy`.
pub fn h_sigma_numeric<F: Fn(f64) -> f64>(r1: F, u: f64, sigma: f64, nodes: usize) -> Result<f64> {
    if !(sigma > 0.0) || nodes < 2 {
        return Err(GppError::InvalidParam(format!(
            "h_sigma_numeric needs sigma > 0 and nodes >= 2 (got {sigma}, {nodes})"
        )));
    }
    hermite_expectation(&gauss_hermite_normal(nodes), r1, u, sigma)
}

/// Breakpoint-aware variant: Gauss–Legendre with `nodes` points on each piece
/// of `[u − 10σ, u + 10σ]` cut at the breakpoints.
pub fn h_sigma_piecewise<F: Fn(f64) -> f64>(
    r1: F,
    breakpoints: &[f64],
    u: f64,
    sigma: f64,
    nodes: usize,
) -> Result<f64> {
    if !(sigma > 0.0) || nodes < 2 {
        return Err(GppError::InvalidParam(format!(
            "h_sigma_piecewise needs sigma > 0 and nodes >= 2 (got {sigma}, {nodes})"
        )));
    }
    piecewise_expectation(&gauss_legendre(nodes), r1, breakpoints, u, sigma)
}

pub fn expected_immediate_reward(
    spec: &RewardSpec,
    post: &Posterior,
    visited: &[Location],
) -> Result<f64> {
    spec.expected_immediate_reward(post, visited)
}
