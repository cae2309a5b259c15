//! Run configuration: a TOML file with `[dataset]`, `[encoder]`, `[augment]`
//! and `[train]` sections. Every field has a default, unknown keys are
//! rejected, and the resolved config can be echoed back as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderConfig;
use crate::synthdata::{AugmentationSpec, DatasetConfig};

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Strict mode: drop wall-clock fields from metrics so reruns are
    /// byte-identical.
    pub strict: bool,
    /// Default output directory; the CLI `--out` flag takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Square canvas edge in pixels.
    pub canvas: usize,
    /// Square patch edge in pixels; must divide `canvas`.
    pub patch: usize,
    pub train_samples: usize,
    pub probe_train_samples: usize,
    pub probe_eval_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub keypoint_count: usize,
    pub proj_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub crop_min_frac: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub color_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Weight on the keypoint-denoising loss.
    pub lambda1: f64,
    /// Weight on the coefficient-map denoising loss.
    pub lambda2: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Momentum-encoder EMA coefficient.
    pub momentum: f64,
    /// Uniform feature-noise scale, relative to each tensor's max |value|.
    pub noise_scale: f64,
    /// Coordinate-classification upsampling factor (bins per pixel).
    pub simcc_k: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier for the annotation encoders and denoising
    /// decoders. The contrastive path tolerates far smaller steps than the
    /// reconstruction heads need, so the two groups get separate rates.
    pub head_lr_mult: f64,
    pub sgd_momentum: f64,
    pub seed: u64,
    pub queue_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strict: false,
            out: None,
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            augment: AugmentSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            canvas: 64,
            patch: 8,
            train_samples: 64,
            probe_train_samples: 48,
            probe_eval_samples: 16,
            seed: 7,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { embed_dim: 64, depth: 2, heads: 4, keypoint_count: 14, proj_dim: 32 }
    }
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { crop_min_frac: 0.6, flip_prob: 0.5, brightness: 0.2, color_jitter: 0.1 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.2,
            tau: 0.2,
            momentum: 0.999,
            noise_scale: 0.3,
            simcc_k: 2,
            stage1_epochs: 50,
            stage2_epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            head_lr_mult: 1.0,
            sgd_momentum: 0.9,
            seed: 0,
            queue_capacity: 4096,
        }
    }
}

fn unit_interval(field: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(ConfigError::Invalid { field, reason: format!("{v} is not in [0, 1]") });
    }
    Ok(())
}

fn nonneg_finite(field: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(ConfigError::Invalid {
            field,
            reason: format!("{v} is not a finite non-negative number"),
        });
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.canvas == 0 || d.patch == 0 {
            return Err(ConfigError::Invalid {
                field: "dataset.canvas/patch",
                reason: "must be nonzero".into(),
            });
        }
        if d.canvas % d.patch != 0 {
            return Err(ConfigError::Invalid {
                field: "dataset.patch",
                reason: format!("patch {} does not divide canvas {}", d.patch, d.canvas),
            });
        }
        if d.probe_train_samples == 0 || d.probe_eval_samples == 0 {
            return Err(ConfigError::Invalid {
                field: "dataset.probe_train_samples",
                reason: "probe splits must be nonzero".into(),
            });
        }

        self.encoder_config()
            .validate()
            .map_err(|e| ConfigError::Invalid { field: "encoder", reason: e.to_string() })?;

        let a = &self.augment;
        if !a.crop_min_frac.is_finite() || !(0.0 < a.crop_min_frac && a.crop_min_frac <= 1.0) {
            return Err(ConfigError::Invalid {
                field: "augment.crop_min_frac",
                reason: format!("{} is not in (0, 1]", a.crop_min_frac),
            });
        }
        unit_interval("augment.flip_prob", a.flip_prob)?;
        nonneg_finite("augment.brightness", a.brightness)?;
        nonneg_finite("augment.color_jitter", a.color_jitter)?;

        let t = &self.train;
        nonneg_finite("train.lambda1", t.lambda1)?;
        nonneg_finite("train.lambda2", t.lambda2)?;
        if !t.tau.is_finite() || t.tau <= 0.0 {
            return Err(ConfigError::Invalid {
                field: "train.tau",
                reason: format!("{} is not a positive temperature", t.tau),
            });
        }
        unit_interval("train.momentum", t.momentum)?;
        nonneg_finite("train.noise_scale", t.noise_scale)?;
        if t.simcc_k < 2 {
            return Err(ConfigError::Invalid {
                field: "train.simcc_k",
                reason: format!("{} is below the minimum of 2", t.simcc_k),
            });
        }
        if t.batch_size == 0 {
            return Err(ConfigError::Invalid {
                field: "train.batch_size",
                reason: "must be nonzero".into(),
            });
        }
        if t.queue_capacity == 0 {
            return Err(ConfigError::Invalid {
                field: "train.queue_capacity",
                reason: "must be nonzero".into(),
            });
        }
        if t.batch_size > t.queue_capacity {
            return Err(ConfigError::Invalid {
                field: "train.batch_size",
                reason: format!(
                    "batch {} exceeds queue capacity {}",
                    t.batch_size, t.queue_capacity
                ),
            });
        }
        if !t.learning_rate.is_finite() || t.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid {
                field: "train.learning_rate",
                reason: format!("{} is not a positive rate", t.learning_rate),
            });
        }
        if !t.head_lr_mult.is_finite() || t.head_lr_mult <= 0.0 {
            return Err(ConfigError::Invalid {
                field: "train.head_lr_mult",
                reason: format!("{} is not a positive multiplier", t.head_lr_mult),
            });
        }
        if !t.sgd_momentum.is_finite() || !(0.0..1.0).contains(&t.sgd_momentum) {
            return Err(ConfigError::Invalid {
                field: "train.sgd_momentum",
                reason: format!("{} is not in [0, 1)", t.sgd_momentum),
            });
        }
        if (t.stage1_epochs > 0 || t.stage2_epochs > 0) && d.train_samples < t.batch_size {
            return Err(ConfigError::Invalid {
                field: "dataset.train_samples",
                reason: format!(
                    "{} samples cannot fill a batch of {}",
                    d.train_samples, t.batch_size
                ),
            });
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let grid = self.dataset.canvas / self.dataset.patch.max(1);
        EncoderConfig {
            embed_dim: self.encoder.embed_dim,
            depth: self.encoder.depth,
            heads: self.encoder.heads,
            token_grid: (grid, grid),
            keypoint_count: self.encoder.keypoint_count,
            patch: self.dataset.patch,
            proj_dim: self.encoder.proj_dim,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            canvas: self.dataset.canvas,
            patch: self.dataset.patch,
            seed: self.dataset.seed,
        }
    }

    pub fn augment_spec(&self, seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            crop_min_frac: self.augment.crop_min_frac,
            flip_prob: self.augment.flip_prob,
            brightness: self.augment.brightness,
            color_jitter: self.augment.color_jitter,
            seed,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}
