//! AdamW with decoupled weight decay.

use crate::error::{mismatch, KernelError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| p.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            first: zeros(params),
            second: zeros(params),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads` is aligned with the
    /// parameter order of `params`. Parameters are left untouched when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(KernelError::Invalid {
                op: "adamw_step",
                msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(mismatch("adamw_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(KernelError::NonFiniteGradient { name: name.to_string() });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let (lr_t, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(c.eps));

        for (i, (_, p)) in params.tensors_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                *w = *w * decay;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
/// `step` is clamped into `[0, total_steps]`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return lr_min;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
