//! The serializable description of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    /// Synthetic training scenes use seeds `scene.seed .. scene.seed + train_scenes`.
    pub train_scenes: usize,
    /// Held-out scenes scored after training.
    pub eval_scenes: usize,
    /// Held-out seeds start at `scene.seed + eval_seed_offset`.
    pub eval_seed_offset: u64,
    /// Train on an exported dataset directory instead of synthetic scenes.
    pub dataset: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            train_scenes: 4000,
            eval_scenes: 100,
            eval_seed_offset: 1_000_000,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        self.data.scene.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.data.scene.canvas != self.model.input_size {
            return Err(Error::Config(format!(
                "scene canvas {:?} differs from model input {:?}",
                self.data.scene.canvas, self.model.input_size
            )));
        }
        if self.data.scene.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "scene classes {} differ from model classes {}",
                self.data.scene.num_classes, self.model.num_classes
            )));
        }
        if self.data.dataset.is_none() && self.data.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
