//! Run configuration: one sectioned, human-readable file drives every
//! component. Unknown keys are rejected; a fully-defaulted file is valid.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Result, SdpError};
use crate::numerics::{stream_hash, Precision};
use crate::percept::EncoderConfig;
use crate::router::RouterConfig;
use crate::skillspace::SkillConfig;
use crate::world::{TaskKind, WorldConfig, ALL_TASK_KINDS};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Steps between in-training evaluations; 0 disables them.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once in-training evaluation reaches this success rate; 0 disables.
    pub early_stop_success: f64,
    pub n_chains: usize,
    pub chain_length: usize,
    pub demos_per_task: usize,
    /// Task kinds to train and evaluate on; `["all"]` expands to every kind.
    pub tasks: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.0,
            gamma: 0.01,
            eval_every: 0,
            eval_episodes: 20,
            early_stop_success: 0.0,
            n_chains: 100,
            chain_length: 5,
            demos_per_task: 50,
            tasks: vec!["all".to_string()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: PrecisionField,
    pub world: WorldConfig,
    pub skills: SkillConfig,
    pub encoder: EncoderConfig,
    pub router: RouterConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainConfig,
}

/// Wrapper so the default precision is f32 without implementing `Default`
/// upstream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionField(pub Precision);

impl Default for PrecisionField {
    fn default() -> Self {
        PrecisionField(Precision::F32)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SdpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdpError::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable identifier of the producing configuration, stamped into every
    /// artifact.
    pub fn hash(&self) -> u64 {
        stream_hash(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        self.world_checks()?;
        self.skills.validate()?;
        self.encoder.validate(self.world.raster_size)?;
        self.denoiser.validate()?;
        self.diffusion.validate()?;
        if self.trainer.batch_size == 0 {
            return Err(SdpError::Config("batch size must be at least 1".into()));
        }
        if self.trainer.gamma < 0.0 {
            return Err(SdpError::Config("gamma must be nonnegative".into()));
        }
        if self.trainer.chain_length == 0 || self.trainer.chain_length > 5 {
            return Err(SdpError::Config("chain length must be in 1..=5".into()));
        }
        self.task_kinds()?;
        Ok(())
    }

    fn world_checks(&self) -> Result<()> {
        let w = &self.world;
        if !(w.grasp_radius > 0.0)
            || !(w.translation_step > 0.0)
            || !(w.rotation_step > 0.0)
            || !(w.aperture_rate > 0.0)
        {
            return Err(SdpError::Config("world step sizes must be positive".into()));
        }
        if w.episode_cap == 0 {
            return Err(SdpError::Config("episode cap must be positive".into()));
        }
        Ok(())
    }

    pub fn task_kinds(&self) -> Result<Vec<TaskKind>> {
        let names = &self.trainer.tasks;
        if names.is_empty() {
            return Err(SdpError::Config("task list is empty".into()));
        }
        if names.len() == 1 && names[0] == "all" {
            return Ok(ALL_TASK_KINDS.to_vec());
        }
        names
            .iter()
            .map(|n| {
                TaskKind::parse(n)
                    .ok_or_else(|| SdpError::Config(format!("unknown task kind `{n}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaulted_config_is_valid() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.trainer.batch_size, 64);
        assert_eq!(cfg.trainer.lr, 1e-4);
        assert_eq!(cfg.trainer.gamma, 0.01);
        assert_eq!(cfg.diffusion.n_steps, 4);
        assert_eq!(cfg.denoiser.lora_rank, 16);
        assert_eq!(cfg.trainer.demos_per_task, 50);
        assert_eq!(cfg.task_kinds().unwrap().len(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_toml("[trainer]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn sections_round_trip() {
        let text = "seed = 9\n[denoiser]\nblocks = 2\nwidth = 64\n[trainer]\ntasks = [\"lift\"]\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.denoiser.blocks, 2);
        assert_eq!(cfg.task_kinds().unwrap(), vec![TaskKind::Lift]);
        let re = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(re.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml("seed = 1").unwrap();
        let b = RunConfig::from_toml("seed = 2").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
