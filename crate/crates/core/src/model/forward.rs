//! Differentiable forward pass recorded on a [`Tape`].

use wm_kernel::{Scalar, Tape, Tensor, Var};

use super::{alibi_bias, Model, MEASUREMENT};
use crate::config::{BlockKind, StateActivation};
use crate::error::{Error, Result};

/// Parameter handles on one tape, aligned with the model's parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-step conditioning vectors `[batch, seq, d]`; rows whose `present`
/// flag is cleared are absent and carry no information.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub values: Var,
    pub present: Vec<bool>,
}

/// Measurement input `[batch, seq, 2]` with one presence bit per
/// `(sequence, step)`.
#[derive(Clone, Debug)]
pub struct Sensory {
    pub data: Var,
    pub present: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct CoreOutput {
    /// Emitted states, after the state activation when it is enabled.
    pub states: Var,
    /// Output of the last block before any activation.
    pub raw: Var,
}

impl<T: Scalar> Model<T> {
    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params()
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        Ok(bound.vars[self.params().index_of(name)?])
    }

    fn linear(&self, tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = self.var(bound, &format!("{name}.w"))?;
        let b = self.var(bound, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Affine map from the channel's dimension to `d` at present steps.
    pub fn pre_encode(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        channel: &str,
        data: Var,
        present: &[bool],
    ) -> Result<Conditioning> {
        let dim = self.config().input_dim(channel)?;
        if tape.shape(data).last() != Some(&dim) {
            return Err(Error::Invalid(format!(
                "channel {channel} expects width {dim}, got shape {:?}",
                tape.shape(data)
            )));
        }
        let d = self.config().d_model;
        // Absent inputs are blanked before and after the map so nothing
        // about them can leak through values or gradients.
        let data = tape.mask_rows(data, present, &vec![T::zero(); dim])?;
        let encoded = self.linear(tape, bound, &format!("pre.{channel}"), data)?;
        let values = tape.mask_rows(encoded, present, &vec![T::zero(); d])?;
        Ok(Conditioning {
            values,
            present: present.to_vec(),
        })
    }

    /// Affine map from states to the channel's dimension.
    pub fn decode(&self, tape: &mut Tape<T>, bound: &Bound, states: Var, channel: &str) -> Result<Var> {
        self.config().output_dim(channel)?;
        self.linear(tape, bound, &format!("dec.{channel}"), states)
    }

    /// Attention sublayer. In local mode the output is the output projection
    /// of the value projection, so positions never mix.
    pub fn attention(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: usize,
        x: Var,
        bias: &Tensor<T>,
        local: bool,
    ) -> Result<Var> {
        let p = format!("block{block}.attn");
        let v = self.linear(tape, bound, &format!("{p}.v"), x)?;
        let mixed = if local {
            v
        } else {
            let q = self.linear(tape, bound, &format!("{p}.q"), x)?;
            let k = self.linear(tape, bound, &format!("{p}.k"), x)?;
            tape.attention(q, k, v, bias, self.config().n_heads)?
        };
        self.linear(tape, bound, &format!("{p}.o"), mixed)
    }

    fn ffn(&self, tape: &mut Tape<T>, bound: &Bound, block: usize, x: Var) -> Result<Var> {
        let up = self.linear(tape, bound, &format!("block{block}.ffn.up"), x)?;
        let act = tape.gelu(up);
        self.linear(tape, bound, &format!("block{block}.ffn.down"), act)
    }

    /// One pre-norm residual block. With conditioning it is an adaLN-Zero
    /// block: the modulation head yields `(γ1, β1, g1, γ2, β2, g2)` and
    /// absent steps fall back to `γ = β = 0, g = 1`, the plain block.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: usize,
        x: Var,
        cond: Option<&Conditioning>,
        bias: &Tensor<T>,
        local: bool,
    ) -> Result<Var> {
        let d = self.config().d_model;
        let modulation = match cond {
            None => None,
            Some(c) => {
                if tape.shape(c.values) != tape.shape(x) {
                    return Err(Error::Invalid(format!(
                        "block {block}: conditioning shape {:?} does not match states {:?}",
                        tape.shape(c.values),
                        tape.shape(x)
                    )));
                }
                let m = self.linear(tape, bound, &format!("block{block}.mod"), c.values)?;
                let mut fallback = vec![T::zero(); 6 * d];
                fallback[2 * d..3 * d].fill(T::one());
                fallback[5 * d..].fill(T::one());
                let m = tape.mask_rows(m, &c.present, &fallback)?;
                let mut parts = Vec::with_capacity(6);
                for i in 0..6 {
                    parts.push(tape.slice(m, 2, i * d, (i + 1) * d)?);
                }
                Some(parts)
            }
        };

        let h = tape.layer_norm(x, 2)?;
        let h = match &modulation {
            Some(m) => {
                let scale = tape.affine(m[0], T::one(), T::one());
                tape.scale_shift(h, scale, m[1])?
            }
            None => h,
        };
        let a = self.attention(tape, bound, block, h, bias, local)?;
        let a = match &modulation {
            Some(m) => tape.mul(m[2], a)?,
            None => a,
        };
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x, 2)?;
        let h = match &modulation {
            Some(m) => {
                let scale = tape.affine(m[3], T::one(), T::one());
                tape.scale_shift(h, scale, m[4])?
            }
            None => h,
        };
        let f = self.ffn(tape, bound, block, h)?;
        let f = match &modulation {
            Some(m) => tape.mul(m[5], f)?,
            None => f,
        };
        Ok(tape.add(x, f)?)
    }

    /// Runs every block over `states` (`[batch, seq, d]`) and applies the
    /// state activation. `S` blocks are conditioned on `states` themselves.
    pub fn core_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        states: Var,
        sensory: Option<&Sensory>,
        local: bool,
    ) -> Result<CoreOutput> {
        let shape = tape.shape(states).to_vec();
        let d = self.config().d_model;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::Invalid(format!(
                "core input must be [batch, seq, {d}], got {shape:?}"
            )));
        }
        let rows = shape[0] * shape[1];
        let bias = alibi_bias(shape[1], self.config().n_heads);

        let needs_measurement = self.config().blocks.contains(&BlockKind::Measurement);
        let measurement = match (needs_measurement, sensory) {
            (true, Some(s)) => Some(self.pre_encode(tape, bound, MEASUREMENT, s.data, &s.present)?),
            // No sensory bundle means every step is absent.
            (true, None) => {
                let values = tape.constant(Tensor::zeros(shape.clone()));
                Some(Conditioning {
                    values,
                    present: vec![false; rows],
                })
            }
            (false, _) => None,
        };
        let state_cond = Conditioning {
            values: states,
            present: vec![true; rows],
        };

        let mut x = states;
        for (i, kind) in self.config().blocks.iter().enumerate() {
            let cond = match kind {
                BlockKind::Standard => None,
                BlockKind::Measurement => measurement.as_ref(),
                BlockKind::State => Some(&state_cond),
            };
            x = self.block(tape, bound, i, x, cond, &bias, local)?;
        }
        let states = match self.config().activation {
            StateActivation::Tanh => tape.tanh(x),
            StateActivation::None => x,
        };
        Ok(CoreOutput { states, raw: x })
    }
}
