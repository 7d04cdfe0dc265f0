//! Experiment configuration and its canonical JSON encoding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy1d::{GenerationConfig, Split};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// Pre-norm transformer block without conditioning.
    #[serde(rename = "standard")]
    Standard,
    /// Sensory block conditioned on the measurement channel.
    #[serde(rename = "M")]
    Measurement,
    /// Sensory block conditioned on the state at the Core input.
    #[serde(rename = "S")]
    State,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateActivation {
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateRegularizer {
    None,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SaveMethod {
    Replace,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallSpec {
    pub stride: usize,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub external: f64,
    pub measurement: f64,
    pub recall: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            external: 1.0,
            measurement: 1.0,
            recall: 1.0,
        }
    }
}

/// Training-protocol switches and their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_segment: usize,
    pub fast_forward: bool,
    pub sensory_masking: bool,
    pub state_save_method: SaveMethod,
    pub check_input_masks: bool,
    pub state_activation: StateActivation,
    pub state_regularizer: StateRegularizer,
    pub regularizer_weight: f64,
    pub block_configuration: Vec<BlockKind>,
    pub noise_state: Option<NoiseSpec>,
    pub noise_measurement: Option<NoiseSpec>,
    pub recall_future: Option<RecallSpec>,
    pub recall_past: Option<RecallSpec>,
    pub local_chance: f64,
    pub loss_weights: LossWeights,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ProtocolConfig {
    /// State discovery only.
    pub fn base() -> Self {
        Self {
            n_segment: 1,
            fast_forward: false,
            sensory_masking: false,
            state_save_method: SaveMethod::Replace,
            check_input_masks: false,
            state_activation: StateActivation::Tanh,
            state_regularizer: StateRegularizer::None,
            regularizer_weight: 1e-2,
            block_configuration: vec![BlockKind::Measurement, BlockKind::Measurement],
            noise_state: None,
            noise_measurement: None,
            recall_future: None,
            recall_past: None,
            local_chance: 0.0,
            loss_weights: LossWeights::default(),
        }
    }

    /// State discovery plus sensory masking.
    pub fn sensory_mask() -> Self {
        Self {
            sensory_masking: true,
            ..Self::base()
        }
    }

    /// Every protocol step: masking with mask-checked state saves, sequence
    /// breaking with fast forward, measurement noise, one future and one
    /// past recall channel, and local mode.
    pub fn complete() -> Self {
        Self {
            n_segment: 2,
            fast_forward: true,
            sensory_masking: true,
            check_input_masks: true,
            noise_measurement: Some(NoiseSpec::default()),
            recall_future: Some(RecallSpec { stride: 1, n: 1 }),
            recall_past: Some(RecallSpec { stride: 1, n: 1 }),
            local_chance: 0.25,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segment == 0 {
            return Err(Error::config("protocol.n_segment", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.local_chance) {
            return Err(Error::config("protocol.local_chance", "must lie in [0, 1]"));
        }
        if self.block_configuration.is_empty() {
            return Err(Error::config(
                "protocol.block_configuration",
                "needs at least one block",
            ));
        }
        if !(self.regularizer_weight >= 0.0) {
            return Err(Error::config("protocol.regularizer_weight", "must be non-negative"));
        }
        for (field, noise) in [
            ("protocol.noise_state", self.noise_state),
            ("protocol.noise_measurement", self.noise_measurement),
        ] {
            if let Some(n) = noise {
                if !(n.std >= 0.0) || !n.mean.is_finite() {
                    return Err(Error::config(field, "std must be non-negative and mean finite"));
                }
            }
        }
        for (field, recall) in [
            ("protocol.recall_future", self.recall_future),
            ("protocol.recall_past", self.recall_past),
        ] {
            if let Some(r) = recall {
                if r.stride == 0 || r.n == 0 {
                    return Err(Error::config(field, "stride and n must be at least 1"));
                }
            }
        }
        let w = &self.loss_weights;
        if [w.external, w.measurement, w.recall].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("protocol.loss_weights", "weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 3e-4,
            lr_min: 0.0,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub max_sequences: Option<usize>,
    pub batch_size: usize,
    pub mask_seed: u64,
    pub sdtw_gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_sequences: None,
            batch_size: 256,
            mask_seed: 0,
            sdtw_gamma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    /// Seeds weight init, the state store and all protocol randomness.
    pub seed: u64,
    pub data_seed: u64,
    pub dataset: GenerationConfig,
    pub model: ModelDims,
    pub protocol: ProtocolConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    /// Full-scale settings: d = 128, four heads, two measurement blocks,
    /// batch 256, 100 epochs on the 40,000-sequence dataset.
    pub fn paper() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: "base".into(),
            seed: 0,
            data_seed: 0,
            dataset: GenerationConfig::full(),
            model: ModelDims {
                d_model: 128,
                n_heads: 4,
                ffn_mult: 4,
            },
            protocol: ProtocolConfig::base(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }

    /// Laptop-scale preset: 2,000 sequences of length 64, d = 32, 50 epochs.
    pub fn desk() -> Self {
        let paper = Self::paper();
        Self {
            dataset: GenerationConfig::desk(),
            model: ModelDims {
                d_model: 32,
                ..paper.model
            },
            schedule: ScheduleConfig {
                epochs: 50,
                batch_size: 32,
                lr: 2e-3,
                lr_min: 1e-5,
                ..ScheduleConfig::default()
            },
            ..paper
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("expected {CONFIG_VERSION}, got {}", self.version),
            ));
        }
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                "d_model must be a positive multiple of n_heads",
            ));
        }
        if m.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be at least 1"));
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if !(s.lr >= 0.0) || !(s.lr_min >= 0.0) {
            return Err(Error::config("schedule.lr", "learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            return Err(Error::config("schedule.warmup_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&s.beta1) || !(0.0..1.0).contains(&s.beta2) {
            return Err(Error::config("schedule.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eval.sdtw_gamma > 0.0) {
            return Err(Error::config("eval.sdtw_gamma", "must be positive"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        self.dataset.validate()?;
        self.protocol.validate()
    }

    /// Sorted-key JSON; equal configs encode to identical bytes.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_json()?).map_err(Error::io(path))
    }
}

/// Serializes through `serde_json::Value`, whose object map keeps keys
/// sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

/// Parses JSON, naming the offending field in errors.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::config(json_field(&e), e.to_string()))
}

fn json_field(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "<document>".into()
}
