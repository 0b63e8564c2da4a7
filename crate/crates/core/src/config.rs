//! One TOML file drives a whole experiment. Every section and key is
//! optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablate::AblateConfig;
use crate::backbone::BackboneConfig;
use crate::cascade::CascadeConfig;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::roi::RoiConfig;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub backbone: BackboneConfig,
    pub cascade: CascadeConfig,
    pub roi: RoiConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::default(),
            backbone: BackboneConfig::default(),
            cascade: CascadeConfig::default(),
            roi: RoiConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            cascade: self.cascade.clone(),
            roi: self.roi.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.backbone.validate()?;
        self.cascade.validate()?;
        self.roi.validate()?;
        self.train.validate()?;
        if self.scene.image_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "scene.image_size {} differs from backbone.input_size {}",
                self.scene.image_size, self.backbone.input_size
            )));
        }
        if self.scene.classes.len() != self.roi.num_classes {
            return Err(Error::Config(format!(
                "scene has {} classes but roi.num_classes is {}",
                self.scene.classes.len(),
                self.roi.num_classes
            )));
        }
        Ok(())
    }
}
