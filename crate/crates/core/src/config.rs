//! Model and training hyperparameters.
//!
//! Config files are TOML documents whose keys are exactly the field names
//! of [`ModelConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Joints per skeleton (J).
    pub joints: usize,
    /// Frames per sequence after padding / sampling (T).
    pub frames: usize,
    /// Embedding and RRN node width (M).
    pub embed_dim: usize,
    /// Message-passing rounds (E).
    pub rrn_iterations: usize,
    /// Stacked LSTM layers (H); must equal `layer_widths.len()`.
    pub lstm_layers: usize,
    /// Width of the reduced per-frame feature (A).
    pub attention_dim: usize,
    pub layer_widths: Vec<usize>,
    /// Number of action classes (K).
    pub classes: usize,
    /// Joint-stream fusion weight.
    pub alpha: f64,
    /// Line-stream fusion weight.
    pub beta: f64,
    /// When false the mask is fixed at ones and excluded from training.
    #[serde(default = "default_true")]
    pub attention: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Joints averaged to obtain the normalization origin.
    pub hip_joints: Vec<usize>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_epsilon: f64,
}

fn default_true() -> bool {
    true
}
fn default_decay() -> f64 {
    0.1
}
fn default_patience() -> usize {
    5
}
fn default_batch() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

pub const PRESET_NAMES: [&str; 5] = ["ntu_rgbd", "florence3d", "msraction3d", "tiny", "synthetic"];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "ntu_rgbd" => include_str!("../presets/ntu_rgbd.toml"),
        "florence3d" => include_str!("../presets/florence3d.toml"),
        "msraction3d" => include_str!("../presets/msraction3d.toml"),
        "tiny" => include_str!("../presets/tiny.toml"),
        "synthetic" => include_str!("../presets/synthetic.toml"),
        _ => return None,
    })
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name).ok_or_else(|| {
            Error::Config(format!("unknown preset `{name}`; known: {PRESET_NAMES:?}"))
        })?;
        ModelConfig::from_toml(src)
    }

    /// The gradient-check model: J=4, T=3, M=6, E=2, H=2, widths [8, 8], K=3.
    pub fn tiny() -> Self {
        ModelConfig::preset("tiny").expect("bundled preset")
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(name) = path.to_str().and_then(|p| p.strip_prefix("preset:")) {
            return ModelConfig::preset(name);
        }
        ModelConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.joints < 2 {
            return fail(format!(
                "joints must be >= 2 (line features), got {}",
                self.joints
            ));
        }
        for (name, v) in [
            ("frames", self.frames),
            ("embed_dim", self.embed_dim),
            ("rrn_iterations", self.rrn_iterations),
            ("lstm_layers", self.lstm_layers),
            ("attention_dim", self.attention_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.layer_widths.len() != self.lstm_layers {
            return fail(format!(
                "layer_widths has {} entries but lstm_layers = {}",
                self.layer_widths.len(),
                self.lstm_layers
            ));
        }
        if self.layer_widths.contains(&0) {
            return fail("layer_widths entries must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha + self.beta - 1.0).abs() > 1e-12
        {
            return fail(format!(
                "alpha and beta must be non-negative and sum to 1, got {} + {}",
                self.alpha, self.beta
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_epsilon <= 0.0
        {
            return fail("adam_beta1/adam_beta2 must be in [0, 1) and adam_epsilon > 0".into());
        }
        self.dataset_spec().validate()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_joints: self.joints,
            num_classes: self.classes,
            hip_reference_indices: self.hip_joints.clone(),
        }
    }

    pub fn final_width(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }
}
