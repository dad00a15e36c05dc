//! Experiment configuration: one JSON document drives dataset generation,
//! pre-training, fine-tuning, and sweeps. Precedence is file < environment
//! overrides (MACL_ prefix) < command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{FixAugmentCfg, VarAugmentRanges};
use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::SynthConfig;
use crate::train::{FinetuneConfig, PretrainConfig};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub volumes: usize,
    pub depth: usize,
    pub height: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Volume-granularity train/holdout split.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            volumes: 10,
            depth: 16,
            height: 64,
            classes: 3,
            noise_sigma: 0.2,
            train_fraction: 0.8,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            depth: self.depth,
            height: self.height,
            classes: self.classes,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        if self.volumes < 2 {
            return config_err("need at least 2 volumes for a train/holdout split");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return config_err("train_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentConfig {
    pub fix: FixAugmentCfg,
    pub var: VarAugmentRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Component toggles: global-only, +decoder, +feature-consistency, full.
    pub components: bool,
    /// Decoder block counts to sweep.
    pub blocks: Vec<usize>,
    /// Dense-loss weight grid.
    pub lambda2_grid: Vec<f64>,
    pub connection_modes: bool,
    pub stages: bool,
    /// Run sweep cells on worker threads (results are identical either way).
    pub parallel: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            components: true,
            blocks: vec![0, 1, 2, 3],
            lambda2_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            connection_modes: true,
            stages: true,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale profile: small synthetic volumes, short schedules. The
    /// default for tests and local runs.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            deterministic: true,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// The published training recipe: 100-epoch pre-training with batches of
    /// 16 slices, SGD from 0.1 with cosine decay to 0, weights {1, 0.5, 1},
    /// temperature 0.1, a two-block decoder, then 100 Adam epochs from 5e-4.
    /// Data stays synthetic; this profile pins the hyperparameters only.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.data.volumes = 20;
        cfg.data.depth = 32;
        cfg.model.levels = 5;
        cfg.model.decoder_blocks = 2;
        cfg.pretrain.epochs = 100;
        cfg.pretrain.batch_size = 16;
        cfg.pretrain.lr0 = 0.1;
        cfg.pretrain.lr_min = 0.0;
        cfg.finetune.epochs = 100;
        cfg.finetune.batch_size = 5;
        cfg.finetune.lr0 = 5e-4;
        cfg.finetune.lr_min = 5e-6;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => config_err(format!("unknown profile {other}; expected desk or paper")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Content hash over the canonical JSON rendering.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.augment.var.validate()?;
        self.pretrain.validate(&self.model)?;
        self.finetune.validate()?;
        // Input resolution must survive the encoder after downsampling.
        let div = (1usize << (self.model.levels - 1 + self.model.decoder_blocks)).max(1);
        if self.data.height % div != 0 {
            return config_err(format!(
                "height {} must divide 2^(levels-1+blocks) = {div}",
                self.data.height
            ));
        }
        Ok(())
    }

    /// Apply `MACL_`-prefixed overrides. Key segments are separated by `__`
    /// and matched case-insensitively against the JSON tree, e.g.
    /// `MACL_PRETRAIN__EPOCHS=3` or `MACL_PRETRAIN__WEIGHTS__LAMBDA2=0.7`.
    /// Values parse as JSON, falling back to plain strings.
    pub fn apply_env_overrides<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut tree = self.to_value();
        for (key, raw) in vars {
            let Some(path) = key.strip_prefix("MACL_") else {
                continue;
            };
            if path.is_empty() {
                continue;
            }
            let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
            let value: serde_json::Value = serde_json::from_str(&raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let mut node = &mut tree;
            for (i, seg) in segments.iter().enumerate() {
                if !node.as_object().is_some_and(|o| o.contains_key(seg)) {
                    return Err(Error::Config(format!(
                        "override {key}: unknown field {seg}"
                    )));
                }
                if i + 1 == segments.len() {
                    node.as_object_mut()
                        .expect("checked above")
                        .insert(seg.clone(), value.clone());
                } else {
                    node = node.get_mut(seg).expect("checked above");
                }
            }
        }
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("environment overrides: {e}")))?;
        Ok(())
    }
}
