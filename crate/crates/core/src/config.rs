//! Merged run configuration loaded from JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::{LmConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub lm: LmConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads and validates a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.lm.validate()?;
        self.train.validate()?;
        if self.data.patch_size != self.model.encoder.patch_size {
            return Err(Error::Config(format!(
                "data.patch_size {} differs from model.encoder.patch_size {}",
                self.data.patch_size, self.model.encoder.patch_size
            )));
        }
        if self.model.encoder.trainable != self.train.finetune_vision {
            return Err(Error::Config("model.encoder.trainable must equal train.finetune_vision".into()));
        }
        if self.model.decoder.frozen != self.train.freeze_lm {
            return Err(Error::Config("model.decoder.frozen must equal train.freeze_lm".into()));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        Variant {
            use_cfe: self.train.use_cfe,
            use_cdh: self.train.use_cdh,
            image_token_mode: self.train.image_token_mode,
        }
    }

    /// Sets the encoder fine-tune toggle in both places it appears.
    pub fn set_finetune_vision(&mut self, on: bool) {
        self.train.finetune_vision = on;
        self.model.encoder.trainable = on;
    }

    /// Sets the language-model freeze toggle in both places it appears.
    pub fn set_freeze_lm(&mut self, on: bool) {
        self.train.freeze_lm = on;
        self.model.decoder.frozen = on;
    }
}
