//! The latent-state world model: pre-encoders, the Core and per-channel
//! decoders.
//!
//! The Core maps a sequence of input world states to a sequence of predicted
//! states: output position `i` is the state for step `i + 1`. Decoding a
//! state for step `t` yields the sensory data of step `t`.

mod alibi;
pub mod checkpoint;
mod forward;
mod session;

use wm_kernel::{ParamSet, Scalar, Tensor};

use crate::config::{BlockKind, ExperimentConfig, ProtocolConfig, StateActivation};
use crate::error::{Error, Result};
use crate::rng::{self, Prng};

pub use alibi::{alibi_bias, alibi_slopes};
pub use forward::{Bound, Conditioning, CoreOutput, Sensory};
pub use session::Session;

pub const MEASUREMENT: &str = "measurement";
pub const EXTERNAL: &str = "external";
pub const MEASUREMENT_DIM: usize = 2;
pub const EXTERNAL_DIM: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallDirection {
    Past,
    Future,
}

impl RecallDirection {
    pub fn name(self) -> &'static str {
        match self {
            Self::Past => "past",
            Self::Future => "future",
        }
    }
}

pub fn recall_channel_name(direction: RecallDirection, k: usize) -> String {
    format!("recall_{}_{k}", direction.name())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSpec {
    pub name: String,
    pub dim: usize,
}

impl ChannelSpec {
    fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub blocks: Vec<BlockKind>,
    pub activation: StateActivation,
    pub inputs: Vec<ChannelSpec>,
    pub outputs: Vec<ChannelSpec>,
}

impl ModelConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        let p = &cfg.protocol;
        let mut outputs = vec![
            ChannelSpec::new(EXTERNAL, EXTERNAL_DIM),
            ChannelSpec::new(MEASUREMENT, MEASUREMENT_DIM),
        ];
        outputs.extend(
            recall_outputs(p)
                .into_iter()
                .map(|name| ChannelSpec::new(name, MEASUREMENT_DIM)),
        );
        Self {
            d_model: cfg.model.d_model,
            n_heads: cfg.model.n_heads,
            ffn_mult: cfg.model.ffn_mult,
            blocks: p.block_configuration.clone(),
            activation: p.state_activation,
            inputs: vec![ChannelSpec::new(MEASUREMENT, MEASUREMENT_DIM)],
            outputs,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn input_dim(&self, channel: &str) -> Result<usize> {
        find(&self.inputs, channel)
    }

    pub fn output_dim(&self, channel: &str) -> Result<usize> {
        find(&self.outputs, channel)
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ffn_width();
        let mut out = Vec::new();
        let mut linear = |name: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.w"), vec![fan_in, fan_out]));
            out.push((format!("{name}.b"), vec![fan_out]));
        };
        for c in &self.inputs {
            linear(format!("pre.{}", c.name), c.dim, d);
        }
        for (i, kind) in self.blocks.iter().enumerate() {
            if *kind != BlockKind::Standard {
                linear(format!("block{i}.mod"), d, 6 * d);
            }
            for proj in ["q", "k", "v", "o"] {
                linear(format!("block{i}.attn.{proj}"), d, d);
            }
            linear(format!("block{i}.ffn.up"), d, f);
            linear(format!("block{i}.ffn.down"), f, d);
        }
        for c in &self.outputs {
            linear(format!("dec.{}", c.name), d, c.dim);
        }
        out
    }
}

fn find(channels: &[ChannelSpec], name: &str) -> Result<usize> {
    channels
        .iter()
        .find(|c| c.name == name)
        .map(|c| c.dim)
        .ok_or_else(|| Error::UnknownChannel(name.to_string()))
}

/// Names of the recall output channels a protocol configures.
pub fn recall_outputs(p: &ProtocolConfig) -> Vec<String> {
    let mut names = Vec::new();
    for (dir, spec) in [
        (RecallDirection::Future, p.recall_future),
        (RecallDirection::Past, p.recall_past),
    ] {
        if let Some(spec) = spec {
            names.extend((1..=spec.n).map(|k| recall_channel_name(dir, k)));
        }
    }
    names
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Linear layers draw weights and biases from U(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)); modulation heads start at zero.
    pub fn init(config: ModelConfig, rng: &mut Prng) -> Self {
        let mut params = ParamSet::new();
        // Each bias follows its weight, which sets the fan-in.
        let mut fan_in = 1;
        for (name, shape) in config.param_shapes() {
            if shape.len() == 2 {
                fan_in = shape[0];
            }
            let tensor = if name.contains(".mod.") {
                Tensor::zeros(shape)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng::uniform(rng, -bound, bound)))
            };
            params.insert(name, tensor);
        }
        Self { config, params }
    }

    /// Wraps an existing parameter set after checking every expected name
    /// and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Format {
                what: "model parameters",
                msg: format!("expected {} tensors, found {}", expected.len(), params.len()),
            });
        }
        for (name, shape) in &expected {
            let t = params.get(name).map_err(|_| Error::Format {
                what: "model parameters",
                msg: format!("missing tensor {name}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    what: "model parameters",
                    msg: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.params.get(name)?)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
