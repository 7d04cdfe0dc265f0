//! The state-discovery training protocol and its optional steps.

mod train;

use std::ops::Range;

use wm_kernel::{Scalar, Tensor};

use crate::config::{NoiseSpec, RecallSpec, SaveMethod};
use crate::error::{Error, Result};
use crate::model::RecallDirection;
use crate::rng::{self, Prng};

pub use train::{run_segments, train_loss, write_epoch_log, EpochStats, TrainOutcome, Trainer};

/// Latent states for every sequence of one split, `[count, seq_len, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateStore {
    seq_len: usize,
    d: usize,
    states: Vec<f32>,
}

impl StateStore {
    /// Uniform(-1, 1) everywhere except the null first position.
    pub fn new(count: usize, seq_len: usize, d: usize, rng: &mut Prng) -> Self {
        let mut states: Vec<f32> = (0..count * seq_len * d)
            .map(|_| rng::uniform(rng, -1.0, 1.0) as f32)
            .collect();
        for seq in states.chunks_mut(seq_len * d) {
            seq[..d].fill(0.0);
        }
        Self { seq_len, d, states }
    }

    pub fn len(&self) -> usize {
        self.states.len() / (self.seq_len * self.d).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sequence(&self, slot: usize) -> &[f32] {
        let n = self.seq_len * self.d;
        &self.states[slot * n..(slot + 1) * n]
    }

    pub fn state(&self, slot: usize, step: usize) -> &[f32] {
        &self.sequence(slot)[step * self.d..(step + 1) * self.d]
    }

    /// Stacks the given slots into a `[slots.len(), seq_len, d]` tensor.
    pub fn gather(&self, slots: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(slots.len() * self.seq_len * self.d);
        for &s in slots {
            data.extend_from_slice(self.sequence(s));
        }
        Tensor::new([slots.len(), self.seq_len, self.d], data).expect("consistent store shape")
    }

    /// State-discovery write-back for one sequence. `predictions` holds the
    /// Core output (`[seq_len, d]`), where position `i - 1` is the state for
    /// step `i`. With `keep` set, steps flagged in it retain their old state.
    pub fn update(
        &mut self,
        slot: usize,
        predictions: &[f32],
        method: SaveMethod,
        keep: Option<&[bool]>,
    ) -> Result<()> {
        let (l, d) = (self.seq_len, self.d);
        if predictions.len() != l * d || keep.is_some_and(|k| k.len() != l) {
            return Err(Error::Invalid(format!(
                "state update expects {l}x{d} predictions, got {} values",
                predictions.len()
            )));
        }
        let n = l * d;
        let seq = &mut self.states[slot * n..(slot + 1) * n];
        for i in 1..l {
            if keep.is_some_and(|k| k[i]) {
                continue;
            }
            let cand = &predictions[(i - 1) * d..i * d];
            let old = &mut seq[i * d..(i + 1) * d];
            match method {
                SaveMethod::Replace => old.copy_from_slice(cand),
                SaveMethod::Mean => {
                    for (o, &c) in old.iter_mut().zip(cand) {
                        *o = (*o + c) / 2.0;
                    }
                }
            }
        }
        seq[..d].fill(0.0);
        Ok(())
    }
}

/// Draws `p ~ U(0, 1)` and hides each of `count` entries with probability
/// `p`. Returns `p` and the presence bits.
pub fn mask_sensory(rng: &mut Prng, count: usize) -> (f64, Vec<bool>) {
    let p = rng::unit(rng);
    let present = (0..count).map(|_| !(rng::unit(rng) < p)).collect();
    (p, present)
}

/// Splits `0..len` into `n_segment` nonempty, ordered ranges at cut points
/// drawn uniformly without replacement.
pub fn break_sequence(len: usize, n_segment: usize, rng: &mut Prng) -> Result<Vec<Range<usize>>> {
    if n_segment == 0 || n_segment > len {
        return Err(Error::Invalid(format!(
            "cannot break a length-{len} sequence into {n_segment} segments"
        )));
    }
    let mut candidates: Vec<usize> = (1..len).collect();
    rng::shuffle(rng, &mut candidates);
    let mut cuts = candidates[..n_segment - 1].to_vec();
    cuts.sort_unstable();
    Ok(segments_from_cuts(len, &cuts))
}

pub fn segments_from_cuts(len: usize, cuts: &[usize]) -> Vec<Range<usize>> {
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(len);
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

/// Adds i.i.d. Gaussian noise in place.
pub fn add_noise<T: Scalar>(values: &mut [T], spec: NoiseSpec, rng: &mut Prng) {
    if spec.std == 0.0 && spec.mean == 0.0 {
        return;
    }
    for v in values {
        *v = *v + T::from_f64_lossy(spec.mean + spec.std * rng::standard_normal(rng));
    }
}

/// Frozen random projection for the recall channels of one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallProjector {
    pub direction: RecallDirection,
    pub spec: RecallSpec,
    pub matrix: [[f64; 2]; 2],
}

impl RecallProjector {
    pub fn draw(direction: RecallDirection, spec: RecallSpec, rng: &mut Prng) -> Self {
        let mut matrix = [[0.0; 2]; 2];
        for v in matrix.iter_mut().flatten() {
            *v = rng::uniform(rng, -1.0, 1.0);
        }
        Self {
            direction,
            spec,
            matrix,
        }
    }

    /// Source step for channel `k` (1-based) at step `t`, if in range.
    pub fn source_step(&self, k: usize, t: usize, len: usize) -> Option<usize> {
        let offset = k * self.spec.stride;
        match self.direction {
            RecallDirection::Future => Some(t + offset).filter(|&s| s < len),
            RecallDirection::Past => t.checked_sub(offset),
        }
    }

    /// Targets (`len x 2`) and presence bits for channels `1..=n` given one
    /// sequence's measurements (`len x 2`).
    pub fn build(&self, measurement: &[f32], len: usize) -> Vec<(Vec<f32>, Vec<bool>)> {
        (1..=self.spec.n)
            .map(|k| {
                let mut values = vec![0.0f32; len * 2];
                let mut present = vec![false; len];
                for t in 0..len {
                    if let Some(s) = self.source_step(k, t, len) {
                        let src = [measurement[s * 2] as f64, measurement[s * 2 + 1] as f64];
                        for r in 0..2 {
                            values[t * 2 + r] = (self.matrix[r][0] * src[0] + self.matrix[r][1] * src[1]) as f32;
                        }
                        present[t] = true;
                    }
                }
                (values, present)
            })
            .collect()
    }
}
