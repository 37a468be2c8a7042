//! Run configuration: one JSON document covering data generation, model
//! training, policy training and evaluation.

use std::path::{Path, PathBuf};

use drl_core::agents::AgentConfig;
use drl_core::envs::GenConfig;
use drl_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

const DESK_PROFILE: &str = include_str!("../profiles/desk.json");
const PAPER_PROFILE: &str = include_str!("../profiles/paper.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub env: GenConfig,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            env: GenConfig::default(),
            model: ModelSection::default(),
            policy: PolicySection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `include_u` is set by `train-model --variant`.
    pub net: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub episodes: usize,
    pub steps: usize,
    pub agent: AgentConfig,
    pub eval_episodes: usize,
    pub eval_steps: usize,
    pub eval_seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            episodes: 300,
            steps: 50,
            agent: AgentConfig::default(),
            eval_episodes: 100,
            eval_steps: 50,
            eval_seed: 0,
        }
    }
}

/// Default locations, relative to `--workdir`, used when a command's path
/// flag is omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub policy_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            data_dir: "data".into(),
            model_dir: "model".into(),
            policy_dir: "policy".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Usage(format!("config {origin}: {e}")))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "config {origin}: format_version {} (expected {CONFIG_FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn profile(p: Profile) -> Self {
        let (text, name) = match p {
            Profile::Desk => (DESK_PROFILE, "desk profile"),
            Profile::Paper => (PAPER_PROFILE, "paper profile"),
        };
        RunConfig::parse(text, name).expect("bundled profiles parse")
    }

    /// Load `path` if given, otherwise the named profile; then apply the
    /// seed override, if any.
    pub fn load(path: Option<&Path>, profile: Profile, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text, &p.display().to_string())?
            }
            None => RunConfig::profile(profile),
        };
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    /// One seed for every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.env.seed = seed;
        self.model.train.seed = seed;
        self.policy.agent.seed = seed;
        self.policy.eval_seed = seed;
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RESOLVED_CONFIG);
        let mut text = serde_json::to_string_pretty(self).map_err(CliError::runtime)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(CliError::runtime)?;
        Ok(path)
    }
}

/// `--seed` wins over `DRL_SEED`, which wins over the config file.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("DRL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("DRL_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
