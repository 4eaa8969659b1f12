//! Experiment configuration: a TOML document with `env`, `dataset`,
//! `pretrain`, `finetune` and `eval` sections. Unknown keys are rejected;
//! every artifact written by a run embeds the hash of the fully-resolved
//! config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgi_core::agent::{FinetuneConfig, PretrainConfig, Scheme};
use sgi_core::augment::AugmentConfig;
use sgi_core::collect::EpsSchedule;
use sgi_core::nets::EncoderSpec;
use sgi_core::objectives::{GoalConfig, LossWeights, ObjectiveMask};
use sgi_core::optim::AdamConfig;

use crate::{CliError, Result};

fn default_schema() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// Layout seed: fixes walls, key, door, hazard and the canonical start.
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection { seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "random", "policy" or "mixed".
    pub regime: String,
    pub transitions: usize,
    pub seed: u64,
    /// Re-seeded start cells per episode (exploratory-data analogue).
    pub vary_start: bool,
    /// Policy regime: checkpoint path and epsilon decay.
    pub checkpoint: Option<String>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_horizon: u64,
    /// Mixed regime: checkpoint paths, per-checkpoint transition count
    /// (0 means transitions / #checkpoints) and collection epsilon.
    pub checkpoints: Vec<String>,
    pub per_checkpoint: usize,
    pub mixed_epsilon: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            regime: "random".into(),
            transitions: 20_000,
            seed: 0,
            vary_start: false,
            checkpoint: None,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_horizon: 10_000,
            checkpoints: Vec::new(),
            per_checkpoint: 0,
            mixed_epsilon: 0.1,
        }
    }
}

impl DatasetSection {
    pub fn eps_schedule(&self) -> EpsSchedule {
        EpsSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            horizon: self.epsilon_horizon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// "default" (three convs, D_z 800) or "small" (two convs, D_z 144).
    pub encoder: String,
    pub epochs: u32,
    /// Explicit step budget; 0 means derive from epochs.
    pub steps: u32,
    pub batch_size: usize,
    pub depth: usize,
    pub tau: f64,
    pub seed: u64,
    pub objectives: String,
    pub lambda_spr: f64,
    pub lambda_goal: f64,
    pub lambda_inverse: f64,
    pub lambda_bc: f64,
    pub base_lr: f64,
    pub gamma: f64,
    pub log_every: u32,
    pub pad: usize,
    pub jitter: f64,
    pub goal_horizon: usize,
    pub alpha_max: f64,
    pub permute_prob: f64,
    pub negate_goal_reward: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            encoder: "default".into(),
            epochs: p.epochs,
            steps: 0,
            batch_size: p.batch_size,
            depth: p.depth,
            tau: p.tau,
            seed: p.seed,
            objectives: "S,G,I".into(),
            lambda_spr: p.weights.spr,
            lambda_goal: p.weights.goal,
            lambda_inverse: p.weights.inverse,
            lambda_bc: p.weights.bc,
            base_lr: p.adam.base_lr,
            gamma: p.gamma,
            log_every: p.log_every,
            pad: p.augment.pad,
            jitter: p.augment.jitter,
            goal_horizon: p.goal.horizon,
            alpha_max: p.goal.alpha_max,
            permute_prob: p.goal.permute_prob,
            negate_goal_reward: p.goal.negate_reward,
        }
    }
}

pub fn parse_encoder(name: &str) -> Result<EncoderSpec> {
    match name {
        "default" => Ok(EncoderSpec::default_pixel()),
        "small" => Ok(EncoderSpec::small_pixel()),
        other => Err(CliError::Config(format!(
            "unknown encoder preset '{other}' (expected 'default' or 'small')"
        ))),
    }
}

impl PretrainSection {
    pub fn to_core(&self, objectives_override: Option<&str>) -> Result<(PretrainConfig, EncoderSpec)> {
        let mask_text = objectives_override.unwrap_or(&self.objectives);
        let mask = ObjectiveMask::parse(mask_text).map_err(CliError::Core)?;
        let cfg = PretrainConfig {
            epochs: self.epochs,
            steps: if self.steps == 0 { None } else { Some(self.steps) },
            batch_size: self.batch_size,
            depth: self.depth,
            tau: self.tau,
            weights: LossWeights {
                spr: self.lambda_spr,
                goal: self.lambda_goal,
                inverse: self.lambda_inverse,
                bc: self.lambda_bc,
            },
            mask,
            goal: GoalConfig {
                horizon: self.goal_horizon,
                alpha_max: self.alpha_max,
                permute_prob: self.permute_prob,
                negate_reward: self.negate_goal_reward,
                ..GoalConfig::default()
            },
            augment: AugmentConfig {
                pad: self.pad,
                jitter: self.jitter,
            },
            adam: AdamConfig {
                base_lr: self.base_lr,
                ..AdamConfig::default()
            },
            gamma: self.gamma,
            log_every: self.log_every,
            seed: self.seed,
        };
        Ok((cfg, parse_encoder(&self.encoder)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub budget: u32,
    pub warmup: u32,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
    /// 0 means budget-sized.
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub aux_batch_size: usize,
    pub depth: usize,
    pub update_every: u32,
    pub target_period: u32,
    pub tau: f64,
    pub scheme: String,
    /// Self-supervised losses during finetuning ("S", "S,G,I", or "" for
    /// plain DQN).
    pub ssl: String,
    pub seeds: Vec<u64>,
    pub base_lr: f64,
    pub gamma: f64,
    pub double_dqn: bool,
    pub eval_episodes: u32,
    pub log_every: u32,
    /// Encoder preset for scratch runs.
    pub encoder: String,
    pub lambda_spr: f64,
    pub pad: usize,
    pub jitter: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            budget: f.budget,
            warmup: f.warmup,
            eps_start: f.eps_start,
            eps_end: f.eps_end,
            eps_fraction: f.eps_fraction,
            replay_capacity: 0,
            batch_size: f.batch_size,
            aux_batch_size: f.aux_batch_size,
            depth: f.depth,
            update_every: f.update_every,
            target_period: f.target_period,
            tau: f.tau,
            scheme: "reduced".into(),
            ssl: "S".into(),
            seeds: vec![0],
            base_lr: f.adam.base_lr,
            gamma: f.gamma,
            double_dqn: f.double_dqn,
            eval_episodes: f.eval_episodes,
            log_every: f.log_every,
            encoder: "default".into(),
            lambda_spr: f.weights.spr,
            pad: f.augment.pad,
            jitter: f.augment.jitter,
        }
    }
}

impl FinetuneSection {
    pub fn to_core(&self, scheme_override: Option<&str>, seed: u64) -> Result<FinetuneConfig> {
        let scheme = Scheme::parse(scheme_override.unwrap_or(&self.scheme)).map_err(CliError::Core)?;
        let ssl = if self.ssl.trim().is_empty() {
            ObjectiveMask::default()
        } else {
            ObjectiveMask::parse(&self.ssl).map_err(CliError::Core)?
        };
        Ok(FinetuneConfig {
            budget: self.budget,
            warmup: self.warmup,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_fraction: self.eps_fraction,
            replay_capacity: if self.replay_capacity == 0 {
                self.budget as usize
            } else {
                self.replay_capacity
            },
            batch_size: self.batch_size,
            aux_batch_size: self.aux_batch_size,
            depth: self.depth,
            update_every: self.update_every,
            target_period: self.target_period,
            tau: self.tau,
            scheme,
            ssl,
            weights: LossWeights {
                spr: self.lambda_spr,
                ..LossWeights::default()
            },
            goal: GoalConfig::default(),
            augment: AugmentConfig {
                pad: self.pad,
                jitter: self.jitter,
            },
            adam: AdamConfig {
                base_lr: self.base_lr,
                ..AdamConfig::default()
            },
            gamma: self.gamma,
            double_dqn: self.double_dqn,
            eval_episodes: self.eval_episodes,
            log_every: self.log_every,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bootstrap_resamples: u32,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bootstrap_resamples: 5000,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != 1 {
            return Err(CliError::Config(format!(
                "unsupported schema_version {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Hash of the fully-resolved config (after defaults), embedded in
    /// every artifact the run writes.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        crate::sha256_hex(canonical.as_bytes())
    }

    /// Hash of the env section alone; the checkpoint fingerprint checked
    /// at finetune time.
    pub fn env_fingerprint(&self) -> String {
        let canonical = toml::to_string(&self.env).expect("env serializes");
        crate::sha256_hex(canonical.as_bytes())
    }

    pub fn dataset(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [dataset] section".into()))
    }

    pub fn pretrain(&self) -> Result<&PretrainSection> {
        self.pretrain
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [pretrain] section".into()))
    }

    pub fn finetune(&self) -> Result<&FinetuneSection> {
        self.finetune
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [finetune] section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[env]\nseed = 3\n").unwrap();
        assert_eq!(cfg.env.seed, 3);
        assert_eq!(cfg.schema_version, 1);
        assert!(cfg.dataset.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> =
            toml::from_str("[env]\nseed = 1\nturbo = true\n");
        assert!(r.is_err());
        let r: std::result::Result<ExperimentConfig, _> = toml::from_str("[mystery]\nx = 1\n");
        assert!(r.is_err());
    }

    #[test]
    fn hash_is_stable_and_distinguishes_configs() {
        let a: ExperimentConfig = toml::from_str("[env]\nseed = 1\n").unwrap();
        let b: ExperimentConfig = toml::from_str("[env]\nseed = 1\n").unwrap();
        let c: ExperimentConfig = toml::from_str("[env]\nseed = 2\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_ne!(a.env_fingerprint(), c.env_fingerprint());
    }

    #[test]
    fn sections_translate_to_core_configs() {
        let text = r#"
[env]
seed = 5
[pretrain]
objectives = "S,I"
batch_size = 16
steps = 10
encoder = "small"
[finetune]
scheme = "frozen"
seeds = [0, 1]
ssl = ""
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let (p, spec) = cfg.pretrain().unwrap().to_core(None).unwrap();
        assert!(p.mask.s && p.mask.i && !p.mask.g);
        assert_eq!(p.steps, Some(10));
        assert_eq!(spec.latent_dim().unwrap(), 144);
        let f = cfg.finetune().unwrap().to_core(None, 1).unwrap();
        assert_eq!(f.scheme, Scheme::Frozen);
        assert!(!f.ssl.any());
        assert_eq!(f.replay_capacity, f.budget as usize);
        // override wins
        let f2 = cfg.finetune().unwrap().to_core(Some("naive"), 1).unwrap();
        assert_eq!(f2.scheme, Scheme::Naive);
    }
}
