//! The training loop: per batch, mask sensory data, build recall targets,
//! add noise, break into segments, run the Core per segment (optionally in
//! local mode, optionally fast-forwarding the last state), decode, take an
//! AdamW step and write the predictions back into the state store.

use std::ops::Range;
use std::time::Instant;

use serde::Serialize;

use wm_kernel::{cosine_warmup_lr, AdamW, AdamWConfig, KernelError, Scalar, Tape, Tensor, Var};

use super::{add_noise, break_sequence, mask_sensory, RecallProjector, StateStore};
use crate::config::{ExperimentConfig, StateRegularizer};
use crate::error::{Error, Result};
use crate::model::{recall_channel_name, Bound, Model, ModelConfig, RecallDirection, Sensory, EXTERNAL, MEASUREMENT};
use crate::rng::{self, Prng};
use crate::toy1d::{Split, Toy1DDataset};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Wall time of the training pass (validation excluded).
    #[serde(rename = "epoch_seconds")]
    pub seconds: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

/// Writes the per-epoch CSV log.
pub fn write_epoch_log<W: std::io::Write>(out: W, epochs: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Sequences of one batch together with their state-store slots.
struct Batch<'a> {
    seqs: &'a [usize],
    slots: &'a [usize],
}

struct Forward {
    loss: Var,
    outputs: Var,
    present: Vec<bool>,
}

pub struct Trainer<'d> {
    cfg: ExperimentConfig,
    data: &'d Toy1DDataset,
    model: Model<f32>,
    optimizer: AdamW<f32>,
    train_seqs: Vec<usize>,
    val_seqs: Vec<usize>,
    train_store: StateStore,
    val_store: StateStore,
    projectors: Vec<RecallProjector>,
    rng: Prng,
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: ExperimentConfig, data: &'d Toy1DDataset) -> Result<Self> {
        cfg.validate()?;
        let l = data.seq_len();
        if cfg.protocol.n_segment > l {
            return Err(Error::config(
                "protocol.n_segment",
                format!("exceeds sequence length {l}"),
            ));
        }
        let mut streams = rng::streams(cfg.seed, 4).into_iter();
        let mut init_rng = streams.next().expect("stream");
        let mut store_rng = streams.next().expect("stream");
        let mut proj_rng = streams.next().expect("stream");
        let rng = streams.next().expect("stream");

        let model = Model::init(ModelConfig::from_experiment(&cfg), &mut init_rng);
        let s = &cfg.schedule;
        let optimizer = AdamW::new(
            AdamWConfig {
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
                weight_decay: s.weight_decay,
            },
            model.params(),
        );
        let train_seqs = data.indices(Split::Train);
        let val_seqs = data.indices(Split::Val);
        if train_seqs.is_empty() {
            return Err(Error::Invalid("dataset has no training sequences".into()));
        }
        let d = cfg.model.d_model;
        let train_store = StateStore::new(train_seqs.len(), l, d, &mut store_rng);
        let val_store = StateStore::new(val_seqs.len(), l, d, &mut store_rng);

        let mut projectors = Vec::new();
        for (dir, spec) in [
            (RecallDirection::Future, cfg.protocol.recall_future),
            (RecallDirection::Past, cfg.protocol.recall_past),
        ] {
            if let Some(spec) = spec {
                projectors.push(RecallProjector::draw(dir, spec, &mut proj_rng));
            }
        }

        let batches = train_seqs.len().div_ceil(s.batch_size);
        let total_steps = batches * s.epochs;
        let warmup_steps = (s.warmup_fraction * total_steps as f64).round() as usize;
        Ok(Self {
            cfg,
            data,
            model,
            optimizer,
            train_seqs,
            val_seqs,
            train_store,
            val_store,
            projectors,
            rng,
            step: 0,
            total_steps,
            warmup_steps,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn train_store(&self) -> &StateStore {
        &self.train_store
    }

    pub fn projectors(&self) -> &[RecallProjector] {
        &self.projectors
    }

    /// Learning rate for the next optimizer step.
    pub fn current_lr(&self) -> f64 {
        let s = &self.cfg.schedule;
        cosine_warmup_lr(self.step, self.total_steps, self.warmup_steps, s.lr, s.lr_min)
    }

    /// One pass over the training split followed by a clean validation pass.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        self.epoch += 1;
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.train_seqs.len()).collect();
        rng::shuffle(&mut self.rng, &mut order);
        let mut total = 0.0;
        let mut diverged = false;
        for slots in order.chunks(self.cfg.schedule.batch_size) {
            let seqs: Vec<usize> = slots.iter().map(|&s| self.train_seqs[s]).collect();
            match self.train_batch(&seqs, slots)? {
                Some(loss) => total += loss * slots.len() as f64,
                None => {
                    diverged = true;
                    break;
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let train_loss = if diverged {
            f64::NAN
        } else {
            total / self.train_seqs.len() as f64
        };
        let val_loss = if diverged { f64::NAN } else { self.validate()? };
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss,
            val_loss,
            seconds,
            diverged: diverged || !val_loss.is_finite(),
        })
    }

    /// Runs all configured epochs, stopping at the first divergence.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
        let mut epochs = Vec::with_capacity(self.cfg.schedule.epochs);
        for _ in 0..self.cfg.schedule.epochs {
            let stats = self.train_epoch()?;
            on_epoch(&stats);
            let diverged = stats.diverged;
            epochs.push(stats);
            if diverged {
                return Ok(TrainOutcome { epochs, diverged: true });
            }
        }
        Ok(TrainOutcome {
            epochs,
            diverged: false,
        })
    }

    /// Returns `None` when the loss or a gradient is not finite.
    fn train_batch(&mut self, seqs: &[usize], slots: &[usize]) -> Result<Option<f64>> {
        let lr = self.current_lr();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let batch = Batch { seqs, slots };
        let fwd = forward_batch(
            &self.model,
            &self.cfg,
            self.data,
            &self.train_store,
            &self.projectors,
            &batch,
            Some(&mut self.rng),
            &mut tape,
            &bound,
        )?;
        let loss = tape.value(fwd.loss).item() as f64;
        if !loss.is_finite() {
            return Ok(None);
        }
        let mut grads = tape.backward(fwd.loss)?;
        let grads: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        match self.optimizer.step(self.model.params_mut(), &grads, lr) {
            Ok(()) => {}
            Err(KernelError::NonFiniteGradient { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        self.step += 1;

        let p = &self.cfg.protocol;
        let keep_masked = p.check_input_masks && p.sensory_masking;
        write_back(
            &mut self.train_store,
            tape.value(fwd.outputs),
            &fwd.present,
            slots,
            p.state_save_method,
            keep_masked,
        )?;
        Ok(Some(loss))
    }

    /// Clean loss over the validation split (no masking, noise, breaking
    /// or local mode); its own store advances by state discovery.
    pub fn validate(&mut self) -> Result<f64> {
        if self.val_seqs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let slots: Vec<usize> = (0..self.val_seqs.len()).collect();
        for chunk in slots.chunks(self.cfg.eval.batch_size) {
            let seqs: Vec<usize> = chunk.iter().map(|&s| self.val_seqs[s]).collect();
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false);
            let batch = Batch {
                seqs: &seqs,
                slots: chunk,
            };
            let fwd = forward_batch(
                &self.model,
                &self.cfg,
                self.data,
                &self.val_store,
                &self.projectors,
                &batch,
                None,
                &mut tape,
                &bound,
            )?;
            total += tape.value(fwd.loss).item() as f64 * chunk.len() as f64;
            let method = self.cfg.protocol.state_save_method;
            write_back(
                &mut self.val_store,
                tape.value(fwd.outputs),
                &fwd.present,
                chunk,
                method,
                false,
            )?;
        }
        Ok(total / self.val_seqs.len() as f64)
    }

    /// Training-split loss without perturbations and without touching the
    /// store.
    pub fn clean_train_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        let slots: Vec<usize> = (0..self.train_seqs.len()).collect();
        for chunk in slots.chunks(self.cfg.eval.batch_size) {
            let seqs: Vec<usize> = chunk.iter().map(|&s| self.train_seqs[s]).collect();
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false);
            let batch = Batch {
                seqs: &seqs,
                slots: chunk,
            };
            let fwd = forward_batch(
                &self.model,
                &self.cfg,
                self.data,
                &self.train_store,
                &self.projectors,
                &batch,
                None,
                &mut tape,
                &bound,
            )?;
            total += tape.value(fwd.loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / self.train_seqs.len() as f64)
    }
}

fn write_back(
    store: &mut StateStore,
    outputs: &Tensor<f32>,
    present: &[bool],
    slots: &[usize],
    method: crate::config::SaveMethod,
    keep_masked: bool,
) -> Result<()> {
    let l = store.seq_len();
    let n = l * store.dim();
    for (b, &slot) in slots.iter().enumerate() {
        let keep: Option<Vec<bool>> = keep_masked.then(|| present[b * l..(b + 1) * l].iter().map(|p| !p).collect());
        store.update(slot, &outputs.data()[b * n..(b + 1) * n], method, keep.as_deref())?;
    }
    Ok(())
}

/// `Σ w_c · MSE_c`, plus `weight · mean(states²)` when a state regularizer
/// is given.
pub fn train_loss<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, f64)], regularizer: Option<(Var, f64)>) -> Result<Var> {
    let mut loss = tape.constant(Tensor::scalar(T::zero()));
    for &(mse, w) in terms {
        let term = tape.affine(mse, T::from_f64_lossy(w), T::zero());
        loss = tape.add(loss, term)?;
    }
    if let Some((states, w)) = regularizer {
        let sq = tape.mul(states, states)?;
        let ms = tape.mean(sq);
        let term = tape.affine(ms, T::from_f64_lossy(w), T::zero());
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Runs the Core over each segment of `states` / `meas` (`[batch, len, ..]`)
/// and concatenates the outputs in order. With `fast_forward`, a segment's
/// first input state is the previous segment's last output, kept on the
/// tape so gradients flow through it.
#[allow(clippy::too_many_arguments)]
pub fn run_segments(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    states: Var,
    meas: Var,
    present: &[bool],
    segments: &[Range<usize>],
    locals: &[bool],
    fast_forward: bool,
) -> Result<Var> {
    let shape = tape.shape(states).to_vec();
    let (bsz, l) = (shape[0], shape[1]);
    if present.len() != bsz * l || locals.len() != segments.len() {
        return Err(Error::Invalid("segment inputs disagree in size".into()));
    }
    let mut outs = Vec::with_capacity(segments.len());
    let mut prev: Option<Var> = None;
    for (seg, &local) in segments.iter().zip(locals) {
        let input = match prev {
            Some(last) if fast_forward => {
                let n = tape.shape(last)[1];
                let carried = tape.slice(last, 1, n - 1, n)?;
                if seg.len() == 1 {
                    carried
                } else {
                    let rest = tape.slice(states, 1, seg.start + 1, seg.end)?;
                    tape.concat(&[carried, rest], 1)?
                }
            }
            _ => tape.slice(states, 1, seg.start, seg.end)?,
        };
        let seg_meas = tape.slice(meas, 1, seg.start, seg.end)?;
        let seg_present: Vec<bool> = (0..bsz)
            .flat_map(|b| present[b * l + seg.start..b * l + seg.end].iter().copied())
            .collect();
        let sensory = Sensory {
            data: seg_meas,
            present: seg_present,
        };
        let out = model.core_forward(tape, bound, input, Some(&sensory), local)?;
        outs.push(out.states);
        prev = Some(out.states);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(tape.concat(&outs, 1)?)
    }
}

/// Stacks one column group of the dataset into `[batch, len, width]`
/// starting at step `from`.
fn gather(data: &Toy1DDataset, seqs: &[usize], cols: std::ops::Range<usize>, from: usize) -> Tensor<f32> {
    let l = data.seq_len();
    let w = cols.len();
    let mut out = Vec::with_capacity(seqs.len() * (l - from) * w);
    for &s in seqs {
        let seq = data.sequence(s);
        for t in from..l {
            out.extend_from_slice(&seq[t * 3 + cols.start..t * 3 + cols.end]);
        }
    }
    Tensor::new([seqs.len(), l - from, w], out).expect("dataset layout")
}

/// Records one batch's forward pass and loss. `rng` enables the protocol
/// perturbations; without it the pass is clean and unbroken.
#[allow(clippy::too_many_arguments)]
fn forward_batch(
    model: &Model<f32>,
    cfg: &ExperimentConfig,
    data: &Toy1DDataset,
    store: &StateStore,
    projectors: &[RecallProjector],
    batch: &Batch,
    mut rng: Option<&mut Prng>,
    tape: &mut Tape<f32>,
    bound: &Bound,
) -> Result<Forward> {
    let p = &cfg.protocol;
    let l = data.seq_len();
    let bsz = batch.seqs.len();

    let mut states = store.gather(batch.slots);
    let mut meas = gather(data, batch.seqs, 1..3, 0);
    let present = match rng.as_deref_mut() {
        Some(r) if p.sensory_masking => mask_sensory(r, bsz * l).1,
        _ => vec![true; bsz * l],
    };
    if let Some(r) = rng.as_deref_mut() {
        if let Some(noise) = p.noise_state {
            add_noise(states.data_mut(), noise, r);
        }
        if let Some(noise) = p.noise_measurement {
            add_noise(meas.data_mut(), noise, r);
        }
    }
    let segments = match rng.as_deref_mut() {
        Some(r) => break_sequence(l, p.n_segment, r)?,
        #[allow(clippy::single_range_in_vec_init)]
        None => vec![0..l],
    };
    let locals: Vec<bool> = segments
        .iter()
        .map(|_| match rng.as_deref_mut() {
            Some(r) if p.local_chance > 0.0 => rng::bernoulli(r, p.local_chance),
            _ => false,
        })
        .collect();

    let states = tape.constant(states);
    let meas = tape.constant(meas);
    let outputs = run_segments(
        model,
        tape,
        bound,
        states,
        meas,
        &present,
        &segments,
        &locals,
        p.fast_forward,
    )?;

    // Output position i predicts step i + 1.
    let pred = tape.slice(outputs, 1, 0, l - 1)?;
    let w = &p.loss_weights;
    let ext_target = tape.constant(gather(data, batch.seqs, 0..1, 1));
    let meas_target = tape.constant(gather(data, batch.seqs, 1..3, 1));
    let ext = model.decode(tape, bound, pred, EXTERNAL)?;
    let mse_ext = tape.mse(ext, ext_target)?;
    let m = model.decode(tape, bound, pred, MEASUREMENT)?;
    let mse_m = tape.mse(m, meas_target)?;
    let mut terms = vec![(mse_ext, w.external), (mse_m, w.measurement)];

    for proj in projectors {
        let mut targets: Vec<(Vec<f32>, Vec<bool>)> = (0..proj.spec.n)
            .map(|_| (Vec::with_capacity(bsz * (l - 1) * 2), Vec::with_capacity(bsz * (l - 1))))
            .collect();
        for &s in batch.seqs {
            let source: Vec<f32> = data.sequence(s).chunks(3).flat_map(|c| [c[1], c[2]]).collect();
            for (k, (values, present)) in proj.build(&source, l).into_iter().enumerate() {
                targets[k].0.extend_from_slice(&values[2..]);
                targets[k].1.extend_from_slice(&present[1..]);
            }
        }
        for (k, (values, present)) in targets.into_iter().enumerate() {
            let name = recall_channel_name(proj.direction, k + 1);
            let target = tape.constant(Tensor::new([bsz, l - 1, 2], values)?);
            let y = model.decode(tape, bound, pred, &name)?;
            terms.push((tape.masked_mse(y, target, &present)?, w.recall));
        }
    }

    let regularizer = (p.state_regularizer == StateRegularizer::Mse).then_some((outputs, p.regularizer_weight));
    let loss = train_loss(tape, &terms, regularizer)?;
    Ok(Forward { loss, outputs, present })
}
