//! Run configuration: one JSON document with sections, patched by
//! `COCO_<SECTION>_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use cocobot::diffusion::ScheduleConfig;
use cocobot::evalsuite::EvalConfig;
use cocobot::sampler::SamplerConfig;
use cocobot::synthworld::WorldConfig;
use cocobot::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const ENV_PREFIX: &str = "COCO_";
const SECTIONS: [&str; 6] = ["world", "train", "model", "schedule", "sampler", "eval"];
const SCALARS: [&str; 2] = ["seed", "out"];

/// `train.seed` is ignored in favour of the top-level `seed`, which drives
/// network initialization and data. `world.seed` fixes the concept
/// geometry and `sampler.seed` the base seed of sampling runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `text`, applies `env` overrides and validates every section.
    pub fn parse(text: &str, origin: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig =
            serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::config(format!("{origin}: {}", describe(&e))))?;
        let overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        if !overrides.is_empty() {
            let mut value = serde_json::to_value(&cfg).expect("config serializes");
            for (var, raw) in &overrides {
                apply_override(&mut value, var, raw)?;
            }
            cfg = serde_path_to_error::deserialize(value)
                .map_err(|e| CliError::config(format!("after environment overrides: {}", describe(&e))))?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::env(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string(), std::env::vars())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        cocobot::synthworld::World::new(self.world.clone()).map_err(|e| CliError::config(format!("world: {e}")))?;
        self.train.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        let schedule = self.schedule.build().map_err(|e| CliError::config(format!("schedule: {e}")))?;
        self.model
            .architecture(self.world.latent_dim, schedule.timesteps())
            .validate()
            .map_err(|e| CliError::config(format!("model: {e}")))?;
        self.sampler.validate(schedule.timesteps()).map_err(|e| CliError::config(format!("sampler: {e}")))?;
        Ok(())
    }
}

fn describe(e: &serde_path_to_error::Error<serde_json::Error>) -> String {
    let path = e.path().to_string();
    if path == "." {
        e.inner().to_string()
    } else {
        format!("{path}: {}", e.inner())
    }
}

/// `COCO_TRAIN_LEARNING_RATE=3e-4` sets `train.learning_rate`; `COCO_SEED`
/// sets the top-level seed. Values are read as JSON, falling back to a
/// plain string.
fn apply_override(root: &mut Value, var: &str, raw: &str) -> Result<(), CliError> {
    let rest = var[ENV_PREFIX.len()..].to_ascii_lowercase();
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if SCALARS.contains(&rest.as_str()) {
        root[rest.as_str()] = parsed;
        return Ok(());
    }
    let (section, key) = rest
        .split_once('_')
        .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
        .ok_or_else(|| CliError::config(format!("{var}: not a known COCO_<SECTION>_<KEY> override")))?;
    let obj = root
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| CliError::config(format!("{var}: section `{section}` is not an object")))?;
    obj.insert(key.to_string(), parsed);
    Ok(())
}
