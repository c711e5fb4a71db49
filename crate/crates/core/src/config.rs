//! One JSON document holding every setting of a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::FrontendConfig;
use crate::error::{Error, Result};
use crate::evaluator::{DecodeConfig, EventMatchConfig};
use crate::model::{CnnBlock, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub run: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub matching: EventMatchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small enough to train all ablations on one CPU core in minutes:
    /// 32 mel bands at a 4x coarser hop (160 frames per clip), a narrow
    /// CRNN with 4x time pooling, and batches of 32.
    pub fn desk() -> Self {
        Self {
            frontend: FrontendConfig {
                hop_len: 1380,
                n_frames: 160,
                n_mels: 32,
                ..FrontendConfig::default()
            },
            model: ModelConfig {
                cnn_blocks: vec![
                    CnnBlock { channels: 8, freq_pool: 4 },
                    CnnBlock { channels: 16, freq_pool: 4 },
                    CnnBlock { channels: 16, freq_pool: 2 },
                ],
                gru_hidden: 16,
                time_pool_factor: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 32,
                // Stronger reversal overwhelms a network this small.
                alpha: 0.3,
                ..TrainConfig::default()
            },
            decode: DecodeConfig {
                median_filter_frames: 3,
                ..DecodeConfig::default()
            },
            matching: EventMatchConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Full-size front-end (640 x 128) and the seven-block CRNN.
    pub fn full() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            model: ModelConfig::full_scale(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            matching: EventMatchConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected desk or full)"))),
        }
    }

    /// `overlay` applied key by key on top of `self`; unknown keys are
    /// rejected.
    pub fn merged(&self, overlay: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate()?;
        self.model.pooled_bins(self.frontend.n_mels)?;
        if self.frontend.n_frames < self.model.time_pool_factor {
            return Err(Error::Config("fewer frames than the time pooling factor".into()));
        }
        self.train.validate()?;
        self.decode.validate()?;
        self.matching.validate()
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
