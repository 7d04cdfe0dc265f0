#![allow(dead_code)]

use wm_kernel::{Scalar, Tensor};
use world_machine::config::{BlockKind, ExperimentConfig, StateActivation};
use world_machine::model::{Model, ModelConfig};
use world_machine::rng::{self, Prng};

pub fn small_config(blocks: Vec<BlockKind>, activation: StateActivation) -> ModelConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model.d_model = 8;
    cfg.model.n_heads = 2;
    cfg.model.ffn_mult = 2;
    cfg.protocol.block_configuration = blocks;
    cfg.protocol.state_activation = activation;
    ModelConfig::from_experiment(&cfg)
}

/// A freshly initialized model whose modulation heads are also randomized,
/// so every parameter influences the output.
pub fn random_model<T: Scalar>(config: ModelConfig, seed: u64) -> Model<T> {
    let mut r = rng::seeded(seed);
    let mut model = Model::init(config, &mut r);
    for (name, t) in model.params_mut().tensors_mut() {
        if name.contains(".mod.") {
            for v in t.data_mut() {
                *v = T::from_f64_lossy(rng::uniform(&mut r, -0.3, 0.3));
            }
        }
    }
    model
}

pub fn uniform<T: Scalar>(r: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng::uniform(r, lo, hi)))
}

pub fn bits(r: &mut Prng, n: usize, p_present: f64) -> Vec<bool> {
    (0..n).map(|_| rng::bernoulli(r, p_present)).collect()
}
