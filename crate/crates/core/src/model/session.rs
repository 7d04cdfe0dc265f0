//! Incremental, gradient-free inference for autoregressive rollouts.
//!
//! A session advances a batch of sequences one step at a time and caches
//! each block's keys and values, so step `t` costs `O(t)` attention work
//! instead of a full forward over the prefix. It computes the same function
//! as [`Model::core_forward`] restricted to the newest position.

use wm_kernel::functional::{gelu, layer_norm_row};
use wm_kernel::{Scalar, Tensor};

use super::alibi::bias_entry;
use super::{alibi_slopes, Model, MEASUREMENT};
use crate::config::{BlockKind, StateActivation};
use crate::error::{Error, Result};

pub struct Session<'m, T: Scalar = f32> {
    model: &'m Model<T>,
    batch: usize,
    local: bool,
    steps: usize,
    slopes: Vec<f64>,
    // Per block, per sequence: flattened `[step, d]` keys and values.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

impl<'m, T: Scalar> Session<'m, T> {
    /// A session over `batch` sequences. A local session keeps no context:
    /// each step sees only its own input state.
    pub fn new(model: &'m Model<T>, batch: usize, local: bool) -> Self {
        let blocks = model.config().blocks.len();
        Self {
            model,
            batch,
            local,
            steps: 0,
            slopes: alibi_slopes(model.config().n_heads),
            keys: vec![vec![Vec::new(); batch]; blocks],
            values: vec![vec![Vec::new(); batch]; blocks],
        }
    }

    /// Number of positions already in the context.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Feeds one input state per sequence (`[batch, d]`) with optional
    /// measurements (`[batch, 2]` plus presence bits) and returns the
    /// emitted next states.
    pub fn step(&mut self, states: &Tensor<T>, sensory: Option<(&Tensor<T>, &[bool])>) -> Result<Tensor<T>> {
        let m = self.model;
        let cfg = m.config();
        let d = cfg.d_model;
        if states.shape() != [self.batch, d] {
            return Err(Error::Invalid(format!(
                "session expects states [{}, {d}], got {:?}",
                self.batch,
                states.shape()
            )));
        }

        let measurement = if cfg.blocks.contains(&BlockKind::Measurement) {
            match sensory {
                Some((data, present)) => {
                    if data.shape() != [self.batch, cfg.input_dim(MEASUREMENT)?] || present.len() != self.batch {
                        return Err(Error::Invalid(format!(
                            "session sensory shape {:?} does not match batch {}",
                            data.shape(),
                            self.batch
                        )));
                    }
                    let mut blanked = data.clone();
                    blank_rows(&mut blanked, present);
                    let mut enc = linear(m, &format!("pre.{MEASUREMENT}"), &blanked)?;
                    blank_rows(&mut enc, present);
                    Some((enc, present.to_vec()))
                }
                None => Some((Tensor::zeros([self.batch, d]), vec![false; self.batch])),
            }
        } else {
            None
        };
        let all_present = vec![true; self.batch];

        let mut x = states.clone();
        for (bi, kind) in cfg.blocks.iter().enumerate() {
            let cond = match kind {
                BlockKind::Standard => None,
                BlockKind::Measurement => measurement.as_ref().map(|(v, p)| (v, p.as_slice())),
                BlockKind::State => Some((states, all_present.as_slice())),
            };
            x = self.block(bi, &x, cond)?;
        }
        if !self.local {
            self.steps += 1;
        }
        Ok(match cfg.activation {
            StateActivation::Tanh => x.map(|v| v.tanh()),
            StateActivation::None => x,
        })
    }

    fn block(&mut self, bi: usize, x: &Tensor<T>, cond: Option<(&Tensor<T>, &[bool])>) -> Result<Tensor<T>> {
        let m = self.model;
        let d = m.config().d_model;
        let modulation = match cond {
            None => None,
            Some((values, present)) => {
                let mut md = linear(m, &format!("block{bi}.mod"), values)?;
                for (r, _) in present.iter().enumerate().filter(|(_, &on)| !on) {
                    let row = md.row_mut(r);
                    row.fill(T::zero());
                    row[2 * d..3 * d].fill(T::one());
                    row[5 * d..].fill(T::one());
                }
                Some(md)
            }
        };

        let mut h = x.clone();
        for r in 0..self.batch {
            layer_norm_row(h.row_mut(r));
        }
        if let Some(md) = &modulation {
            modulate(&mut h, md, 0, d);
        }
        let a = self.attention(bi, &h)?;
        let mut x = x.clone();
        residual(&mut x, &a, modulation.as_ref().map(|md| (md, 2 * d)), d);

        let mut h = x.clone();
        for r in 0..self.batch {
            layer_norm_row(h.row_mut(r));
        }
        if let Some(md) = &modulation {
            modulate(&mut h, md, 3 * d, d);
        }
        let up = linear(m, &format!("block{bi}.ffn.up"), &h)?.map(gelu);
        let f = linear(m, &format!("block{bi}.ffn.down"), &up)?;
        residual(&mut x, &f, modulation.as_ref().map(|md| (md, 5 * d)), d);
        Ok(x)
    }

    fn attention(&mut self, bi: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.model;
        let p = format!("block{bi}.attn");
        let v = linear(m, &format!("{p}.v"), h)?;
        if self.local {
            return linear(m, &format!("{p}.o"), &v);
        }
        let q = linear(m, &format!("{p}.q"), h)?;
        let k = linear(m, &format!("{p}.k"), h)?;
        let d = m.config().d_model;
        let heads = m.config().n_heads;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let i = self.steps;
        let mut mixed = Tensor::zeros([self.batch, d]);
        let mut logits = vec![T::zero(); i + 1];

        for b in 0..self.batch {
            self.keys[bi][b].extend_from_slice(k.row(b));
            self.values[bi][b].extend_from_slice(v.row(b));
            let (keys, values) = (&self.keys[bi][b], &self.values[bi][b]);
            let qb = q.row(b);
            let out = mixed.row_mut(b);
            for (hd, &slope) in self.slopes.iter().enumerate() {
                let col = hd * dh;
                let qi = &qb[col..col + dh];
                let mut max = T::neg_infinity();
                for (j, logit) in logits.iter_mut().enumerate() {
                    let kj = &keys[j * d + col..j * d + col + dh];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum();
                    *logit = dot * scale + bias_entry::<T>(slope, i, j);
                    if *logit > max {
                        max = *logit;
                    }
                }
                let mut total = T::zero();
                for logit in logits.iter_mut() {
                    *logit = (*logit - max).exp();
                    total = total + *logit;
                }
                let o = &mut out[col..col + dh];
                for (j, &w) in logits.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let p = w / total;
                    let vj = &values[j * d + col..j * d + col + dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc = *oc + p * vc;
                    }
                }
            }
        }
        linear(m, &format!("{p}.o"), &mixed)
    }
}

impl<T: Scalar> Model<T> {
    /// Gradient-free decoder for `[rows, d]` states.
    pub fn decode_values(&self, channel: &str, states: &Tensor<T>) -> Result<Tensor<T>> {
        self.config().output_dim(channel)?;
        linear(self, &format!("dec.{channel}"), states)
    }
}

fn linear<T: Scalar>(model: &Model<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = model.param(&format!("{name}.w"))?;
    let b = model.param(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.zip_broadcast(b, "add", |a, c| a + c)?)
}

fn blank_rows<T: Scalar>(t: &mut Tensor<T>, present: &[bool]) {
    for (r, _) in present.iter().enumerate().filter(|(_, &on)| !on) {
        t.row_mut(r).fill(T::zero());
    }
}

/// `h <- h * (1 + γ) + β` with `γ, β` read from `md` at `offset`.
fn modulate<T: Scalar>(h: &mut Tensor<T>, md: &Tensor<T>, offset: usize, d: usize) {
    for r in 0..h.rows() {
        let mrow = md.row(r);
        for (c, v) in h.row_mut(r).iter_mut().enumerate() {
            let scale = mrow[offset + c] + T::one();
            *v = *v * scale + mrow[offset + d + c];
        }
    }
}

/// `x <- x + g ⊙ y`, or `x + y` without a gate.
fn residual<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>, gate: Option<(&Tensor<T>, usize)>, d: usize) {
    for r in 0..x.rows() {
        let yr = y.row(r);
        let g = gate.map(|(md, off)| &md.row(r)[off..off + d]);
        for (c, v) in x.row_mut(r).iter_mut().enumerate() {
            let term = match g {
                Some(g) => g[c] * yr[c],
                None => yr[c],
            };
            *v = *v + term;
        }
    }
}
