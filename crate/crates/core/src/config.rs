//! Experiment configuration: the ablation mode matrix and the TOML schema.
//!
//! A mode fixes the critic arrangement and the curiosity wiring:
//!
//! | mode                     | critic      | curiosity                        |
//! |--------------------------|-------------|----------------------------------|
//! | `IC_IC`                  | independent | independent, state keys          |
//! | `CC_IC`                  | centralized | independent, state keys          |
//! | `CC_CC_sh`               | centralized | centralized, state keys          |
//! | `CC_CC_sh_action`        | centralized | centralized, state-action keys   |
//! | `CC_CC_sh_action_filter` | centralized | centralized, state-action, filter|
//!
//! An optional `[curiosity]` section may restate the wiring; any clash with
//! the mode is rejected as inconsistent.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::curiosity::{CuriosityConfig, KeyMode, Sharing};
use crate::env::{self, GridMap, MapError};
use crate::ppo::PpoConfig;
use crate::skills::{self, Action, ActionUniverse, SkillError, SkillProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("inconsistent config: {0}")]
    InconsistentConfig(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error("cannot load map: {0}")]
    Map(#[from] MapError),
}

/// The five experiment wirings of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "IC_IC")]
    IcIc,
    #[serde(rename = "CC_IC")]
    CcIc,
    #[serde(rename = "CC_CC_sh")]
    CcCcSh,
    #[serde(rename = "CC_CC_sh_action")]
    CcCcShAction,
    #[serde(rename = "CC_CC_sh_action_filter")]
    CcCcShActionFilter,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::IcIc,
        AblationMode::CcIc,
        AblationMode::CcCcSh,
        AblationMode::CcCcShAction,
        AblationMode::CcCcShActionFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::IcIc => "IC_IC",
            AblationMode::CcIc => "CC_IC",
            AblationMode::CcCcSh => "CC_CC_sh",
            AblationMode::CcCcShAction => "CC_CC_sh_action",
            AblationMode::CcCcShActionFilter => "CC_CC_sh_action_filter",
        }
    }

    pub fn centralized_critic(self) -> bool {
        !matches!(self, AblationMode::IcIc)
    }

    /// The curiosity wiring this mode prescribes.
    pub fn curiosity(self, normalize: bool) -> CuriosityConfig {
        let (sharing, key_mode, filter) = match self {
            AblationMode::IcIc | AblationMode::CcIc => {
                (Sharing::Independent, KeyMode::State, false)
            }
            AblationMode::CcCcSh => (Sharing::Centralized, KeyMode::State, false),
            AblationMode::CcCcShAction => (Sharing::Centralized, KeyMode::StateAction, false),
            AblationMode::CcCcShActionFilter => (Sharing::Centralized, KeyMode::StateAction, true),
        };
        CuriosityConfig {
            sharing,
            key_mode,
            filter,
            normalize,
        }
    }
}

fn default_runners() -> usize {
    3
}
fn default_max_steps() -> u32 {
    600
}
fn default_beta() -> f64 {
    1.0 / 3.0
}
fn default_seed() -> u64 {
    1
}
fn default_bucket() -> usize {
    500
}

/// Agent declaration in the config file: id plus action names.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: usize,
    pub actions: Vec<String>,
}

/// Optional explicit curiosity wiring; must agree with the mode.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CuriositySpec {
    pub sharing: Option<String>,
    pub key_mode: Option<String>,
    pub filter: Option<bool>,
    pub normalize: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: AblationMode,
    #[serde(default = "default_runners")]
    pub runners_per_agent: usize,
    /// Episode budget per agent, summed over that agent's runners.
    pub episodes: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps_per_episode: u32,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Episode index after which beta is forced to 0 (0 disables curiosity
    /// from the very first update).
    #[serde(default)]
    pub curiosity_cutoff_episode: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub map_path: PathBuf,
    /// Episode width of the advantage-dominance map buckets.
    #[serde(default = "default_bucket")]
    pub dominance_bucket_episodes: usize,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub curiosity: Option<CuriositySpec>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        Ok(config)
    }

    fn profiles(&self) -> Result<Vec<SkillProfile>, ConfigError> {
        if self.agents.is_empty() {
            return Ok(skills::default_profiles());
        }
        let mut profiles = Vec::with_capacity(self.agents.len());
        for spec in &self.agents {
            let actions: Vec<Action> = spec
                .actions
                .iter()
                .map(|n| Action::from_name(n))
                .collect::<Result<_, _>>()?;
            profiles.push(SkillProfile::new(spec.id, &actions)?);
        }
        Ok(profiles)
    }

    fn resolve_curiosity(&self) -> Result<CuriosityConfig, ConfigError> {
        let spec = self.curiosity.clone().unwrap_or_default();
        let normalize = spec.normalize.unwrap_or(true);
        let derived = self.mode.curiosity(normalize);
        if let Some(sharing) = &spec.sharing {
            let parsed = match sharing.as_str() {
                "independent" => Sharing::Independent,
                "centralized" => Sharing::Centralized,
                other => {
                    return Err(ConfigError::Invalid(format!("unknown sharing `{other}`")));
                }
            };
            if parsed != derived.sharing {
                return Err(ConfigError::InconsistentConfig(format!(
                    "sharing `{sharing}` clashes with mode {}",
                    self.mode.name()
                )));
            }
        }
        if let Some(key_mode) = &spec.key_mode {
            let parsed = match key_mode.as_str() {
                "state" => KeyMode::State,
                "state_action" => KeyMode::StateAction,
                other => {
                    return Err(ConfigError::Invalid(format!("unknown key_mode `{other}`")));
                }
            };
            if parsed != derived.key_mode {
                return Err(ConfigError::InconsistentConfig(format!(
                    "key_mode `{key_mode}` clashes with mode {}",
                    self.mode.name()
                )));
            }
        }
        if let Some(filter) = spec.filter {
            if filter != derived.filter {
                return Err(ConfigError::InconsistentConfig(format!(
                    "filter = {filter} clashes with mode {}",
                    self.mode.name()
                )));
            }
        }
        derived
            .validate()
            .map_err(|e| ConfigError::InconsistentConfig(e.to_string()))?;
        Ok(derived)
    }

    /// Validates the whole config and loads the map. Relative map paths are
    /// resolved against `base_dir` when given (the CLI passes the current
    /// working directory).
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<ResolvedExperiment, ConfigError> {
        if self.runners_per_agent == 0 {
            return Err(ConfigError::Invalid("runners_per_agent must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(ConfigError::Invalid("episodes must be >= 1".into()));
        }
        if self.max_steps_per_episode == 0 {
            return Err(ConfigError::Invalid("max_steps_per_episode must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(ConfigError::Invalid("beta must be >= 0".into()));
        }
        if let Some(cutoff) = self.curiosity_cutoff_episode {
            if cutoff > self.episodes {
                return Err(ConfigError::Invalid(format!(
                    "curiosity_cutoff_episode {cutoff} exceeds the episode budget {}",
                    self.episodes
                )));
            }
        }
        if self.dominance_bucket_episodes == 0 {
            return Err(ConfigError::Invalid("dominance_bucket_episodes must be >= 1".into()));
        }
        self.ppo.validate().map_err(ConfigError::Invalid)?;

        let profiles = self.profiles()?;
        let universe = ActionUniverse::from_profiles(&profiles)?;
        let mutual = skills::mutual_action_space(&profiles)?;
        let curiosity = self.resolve_curiosity()?;

        let map_path = match base_dir {
            Some(dir) if self.map_path.is_relative() => dir.join(&self.map_path),
            _ => self.map_path.clone(),
        };
        let map_text = std::fs::read_to_string(&map_path)?;
        let map = env::parse_map(&map_text)?;

        Ok(ResolvedExperiment {
            config: self.clone(),
            map,
            profiles,
            universe,
            mutual,
            curiosity,
        })
    }
}

/// A validated experiment: parsed map, profiles, and the concrete curiosity
/// wiring.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub map: GridMap,
    pub profiles: Vec<SkillProfile>,
    pub universe: ActionUniverse,
    pub mutual: Vec<Action>,
    pub curiosity: CuriosityConfig,
}
