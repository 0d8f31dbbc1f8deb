//! Experiment configuration (TOML).
//!
//! ```toml
//! [field]
//! mode = "generate"
//! width = 20
//! height = 20
//! cell_size = 0.05
//! units = "km"
//! seed = 0
//!
//! [gp]
//! prior_mean = 0.0
//! signal_variance = 1.0
//! noise_variance = 1e-5
//! length_scales = [0.2236, 0.2236]
//!
//! [planner]
//! policies = ["epsilon_gpp", "greedy_ucb"]
//! horizon = 3
//! epsilon = 30.0
//! reward = { kind = "ucb", params = { beta = 0.0 } }
//!
//! [run]
//! steps = 20
//! seeds = 20
//! noise_seed = 1000
//! output = "results"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anytime::StopCondition;
use crate::epsilon::BudgetMode;
use crate::error::{GppError, Result};
use crate::gp::{sample_field, GpHyperparams, GridSpec};
use crate::harness::episode::{EpisodeConfig, PolicyKind, StartRule};
use crate::harness::{FieldGrid, GreedyParams};
use crate::reward::RewardConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSection {
    /// A GP realization drawn with the `[gp]` hyperparameters.
    Generate {
        width: usize,
        height: usize,
        cell_size: f64,
        #[serde(default = "default_units")]
        units: String,
        /// Base field seed; episode `k` uses `seed + k`.
        #[serde(default)]
        seed: u64,
        #[serde(default = "center")]
        start: StartRule,
    },
    Load {
        path: PathBuf,
        #[serde(default = "random")]
        start: StartRule,
        /// Seed for random start cells; episode `k` uses `start_seed + k`.
        #[serde(default)]
        start_seed: u64,
    },
}

fn default_units() -> String {
    "unit".to_string()
}

fn center() -> StartRule {
    StartRule::Center
}

fn random() -> StartRule {
    StartRule::Random
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub policies: Vec<PolicyKind>,
    /// Online horizon H′.
    pub horizon: usize,
    pub epsilon: f64,
    pub reward: RewardConfig,
    #[serde(default = "analytic")]
    pub budget: BudgetMode,
    #[serde(default)]
    pub stop: StopCondition,
    #[serde(default)]
    pub greedy: GreedyParams,
    #[serde(default = "default_true")]
    pub initial_observation: bool,
}

fn analytic() -> BudgetMode {
    BudgetMode::Analytic
}

/// Either a count (`0..count`) or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn values(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub seeds: Seeds,
    /// Base noise seed; episode `k` uses `noise_seed + k`.
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub timing: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub field: FieldSection,
    pub gp: GpHyperparams,
    pub planner: PlannerSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses and validates; relative field paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let FieldSection::Load { path: field, .. } = &mut cfg.field {
            if field.is_relative() {
                if let Some(dir) = path.parent() {
                    *field = dir.join(&*field);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GppError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gp.validate().map_err(|e| GppError::Config(e.to_string()))?;
        match &self.field {
            FieldSection::Generate {
                width,
                height,
                cell_size,
                ..
            } => {
                GridSpec::new(*width, *height, *cell_size).map_err(|e| GppError::Config(e.to_string()))?;
            }
            FieldSection::Load { path, .. } => {
                if !path.exists() {
                    return Err(GppError::Config(format!("field file {} does not exist", path.display())));
                }
            }
        }
        if self.planner.policies.is_empty() {
            return Err(GppError::Config("planner.policies is empty".into()));
        }
        if self.run.seeds.values().is_empty() {
            return Err(GppError::Config("run.seeds selects no seeds".into()));
        }
        self.planner
            .reward
            .build()
            .map_err(|e| GppError::Config(e.to_string()))?;
        for &policy in &self.planner.policies {
            self.episode_config(policy, 0)
                .validate()
                .map_err(|e| GppError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn episode_config(&self, policy: PolicyKind, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            steps: self.run.steps,
            horizon: self.planner.horizon,
            policy,
            reward: self.planner.reward.clone(),
            epsilon: self.planner.epsilon,
            budget: self.planner.budget,
            stop: self.planner.stop,
            greedy: self.planner.greedy,
            noise_seed: self.run.noise_seed.wrapping_add(seed),
            initial_observation: self.planner.initial_observation,
            timing: self.run.timing,
            trace: false,
        }
    }

    /// Field for episode `seed` (generated fields differ per seed).
    pub fn field_for(&self, seed: u64) -> Result<FieldGrid> {
        match &self.field {
            FieldSection::Generate {
                width,
                height,
                cell_size,
                units,
                seed: base,
                ..
            } => {
                let grid = GridSpec::new(*width, *height, *cell_size)?;
                sample_field(&grid, &self.gp, base.wrapping_add(seed), units)
            }
            FieldSection::Load { path, .. } => FieldGrid::load_csv(path),
        }
    }

    pub fn start_for(&self, grid: &GridSpec, seed: u64) -> usize {
        match &self.field {
            FieldSection::Generate { start, seed: base, .. } => {
                crate::harness::start_index(grid, *start, base.wrapping_add(seed))
            }
            FieldSection::Load {
                start, start_seed, ..
            } => crate::harness::start_index(grid, *start, start_seed.wrapping_add(seed)),
        }
    }

    /// Field seed base, recorded in run metadata.
    pub fn field_seed(&self) -> u64 {
        match &self.field {
            FieldSection::Generate { seed, .. } => *seed,
            FieldSection::Load { start_seed, .. } => *start_seed,
        }
    }
}

/// Hex SHA-256 over the git blob framing `"blob <len>\0" + content`.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[field]
mode = "generate"
width = 6
height = 5
cell_size = 0.05

[gp]
prior_mean = 0.0
signal_variance = 1.0
noise_variance = 1e-5
length_scales = [0.2236, 0.2236]

[planner]
policies = ["epsilon_gpp", "greedy_ucb"]
horizon = 3
epsilon = 30.0
reward = { kind = "ucb", params = { beta = 0.0 } }
budget = { mode = "capped", n_max = 16 }
stop = { max_nodes = 1000 }

[run]
steps = 4
seeds = [1, 4]
"#;

    #[test]
    fn parse_serialize_parse_is_identity() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.run.seeds.values(), vec![1, 4]);
        assert_eq!(cfg.planner.stop.max_nodes, Some(1000));
        assert_eq!(cfg.planner.budget, BudgetMode::Capped { n_max: 16 });
    }

    #[test]
    fn unknown_keys_are_errors() {
        let typo = SAMPLE.replace("epsilon = 30.0", "epsilon = 30.0\nepslion = 3.0");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(GppError::Config(_))));
        let gp_typo = SAMPLE.replace("prior_mean", "prior_mu");
        assert!(ExperimentConfig::parse(&gp_typo).is_err());
    }

    #[test]
    fn missing_field_file_fails_validation() {
        let text = SAMPLE.replace(
            "mode = \"generate\"\nwidth = 6\nheight = 5\ncell_size = 0.05",
            "mode = \"load\"\npath = \"/nonexistent/field.csv\"",
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(GppError::Config(_))));
    }

    #[test]
    fn fields_and_seeds_derive_from_base_seeds() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        let a = cfg.field_for(1).unwrap();
        assert_eq!(a, cfg.field_for(1).unwrap());
        assert_ne!(a, cfg.field_for(2).unwrap());
        assert_eq!(cfg.start_for(a.grid(), 1), a.grid().center().index);
        assert_eq!(cfg.episode_config(PolicyKind::EpsilonGpp, 4).noise_seed, 4);
    }

    #[test]
    fn hash_matches_git_blob_framing() {
        let h = content_hash(b"hello\n");
        assert_eq!(h.len(), 64);
        assert_eq!(h, content_hash(b"hello\n"));
        assert_ne!(h, content_hash(b"hello"));
    }
}
