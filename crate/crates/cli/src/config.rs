//! The merged run configuration and `key=value` overrides.

use std::path::Path;

use maediff_core::manifest::DataConfig;
use maediff_core::{DiffusionConfig, PatchGeometry, PatchPlan, PostprocessConfig, SimplexParams};
use maediff_model::{MaeConfig, ModelConfig, TrainConfig, UNetConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Draw one noise field per patch instead of one per image.
    pub per_patch_noise: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            per_patch_noise: false,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub diffusion: DiffusionConfig,
    pub simplex: SimplexParams,
    pub plan: PatchGeometry,
    pub unet: UNetConfig,
    pub mae: MaeConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub postprocess: PostprocessConfig,
    pub data: DataConfig,
    pub init_seed: u64,
}


impl RunConfig {
    /// Loads `path` (or defaults) and applies `key=value` overrides, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::resolve_str(Some(&text), overrides)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
            None => Self::resolve_str(None, overrides),
        }
    }

    /// As [`resolve`](Self::resolve) for configuration text already in memory.
    pub fn resolve_str(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::from_str::<Value>(t).map_err(|e| CliError::Config(e.to_string()))?,
            None => Value::Object(Default::default()),
        };
        // fill in defaults first so overrides can target any key
        let base: RunConfig = serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        value = serde_json::to_value(&base).map_err(|e| CliError::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: String| CliError::Config(e);
        self.diffusion.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.simplex.validate().map_err(|e| cfg_err(e.to_string()))?;
        PatchPlan::new(self.plan).map_err(|e| cfg_err(e.to_string()))?;
        self.postprocess.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.model().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.train
            .validate(self.diffusion.timesteps)
            .map_err(|e| cfg_err(e.to_string()))?;
        if (self.data.height, self.data.width) != (self.plan.height, self.plan.width) {
            return Err(cfg_err(format!(
                "data size {}x{} differs from plan size {}x{}",
                self.data.height, self.data.width, self.plan.height, self.plan.width
            )));
        }
        if self.inference.batch_size == 0 {
            return Err(cfg_err("inference.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            geometry: self.plan,
            unet: self.unet.clone(),
            mae: self.mae.clone(),
            init_seed: self.init_seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Sets a dotted key. The value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("'{key}': '{part}' is not inside an object")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown configuration key '{key}'")))?;
        if i + 1 == parts.len() {
            *slot = parsed;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::resolve(None, &["train.batch_size=8".into(), "unet.use_mae=false".into(), "mae.block_map=[2,1]".into(), "mae.dec_blocks=2".into()]).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert!(!cfg.unet.use_mae);
        assert_eq!(cfg.mae.block_map, Some(vec![2, 1]));
        assert!(RunConfig::resolve(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.batch_size".into()]).is_err());
        assert!(RunConfig::resolve(None, &["plan.stride=7".into()]).is_err());
    }
}
