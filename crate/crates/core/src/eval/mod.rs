//! Evaluation tasks over a frozen model, their metrics and the divergence
//! rule used when comparing many trained variations.

mod sdtw;

use std::fmt;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use wm_kernel::{Tape, Tensor};

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Session, EXTERNAL, MEASUREMENT};
use crate::rng;
use crate::toy1d::Toy1DDataset;

pub use sdtw::soft_dtw;

/// Evaluated output channels and their columns in a dataset step.
const CHANNELS: [(&str, Range<usize>); 2] = [(EXTERNAL, 0..1), (MEASUREMENT, 1..3)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Normal,
    UseState,
    Prediction,
    PredictionShallow,
    PredictionLocal,
    /// Percentage of hidden sensory entries, `0..=100`.
    MaskSensory(f64),
}

pub const TASK_NAMES: [&str; 6] = [
    "normal",
    "use_state",
    "prediction",
    "prediction_shallow",
    "prediction_local",
    "mask_sensory",
];

impl Task {
    pub fn all(mask_x: f64) -> Vec<Task> {
        vec![
            Task::Normal,
            Task::UseState,
            Task::Prediction,
            Task::PredictionShallow,
            Task::PredictionLocal,
            Task::MaskSensory(mask_x),
        ]
    }

    /// Parses one task name; `mask_sensory` takes its percentage from `mask_x`
    /// unless written as `mask_sensory@x`.
    pub fn parse(name: &str, mask_x: f64) -> Result<Task> {
        let unknown = || Error::UnknownTask {
            name: name.to_string(),
            valid: format!("{}, all", TASK_NAMES.join(", ")),
        };
        let (base, x) = match name.split_once('@') {
            Some((b, x)) => (b, Some(x.parse::<f64>().map_err(|_| unknown())?)),
            None => (name, None),
        };
        let task = match base {
            "normal" => Task::Normal,
            "use_state" => Task::UseState,
            "prediction" => Task::Prediction,
            "prediction_shallow" => Task::PredictionShallow,
            "prediction_local" => Task::PredictionLocal,
            "mask_sensory" => Task::MaskSensory(x.unwrap_or(mask_x)),
            _ => return Err(unknown()),
        };
        if x.is_some() && !matches!(task, Task::MaskSensory(_)) {
            return Err(unknown());
        }
        task.validate()?;
        Ok(task)
    }

    /// Comma-separated task names, or `all`.
    pub fn parse_list(list: &str, mask_x: f64) -> Result<Vec<Task>> {
        let mut tasks = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if name == "all" {
                tasks.extend(Task::all(mask_x));
            } else {
                tasks.push(Task::parse(name, mask_x)?);
            }
        }
        if tasks.is_empty() {
            return Err(Error::UnknownTask {
                name: list.to_string(),
                valid: format!("{}, all", TASK_NAMES.join(", ")),
            });
        }
        for t in &tasks {
            t.validate()?;
        }
        Ok(tasks)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Task::MaskSensory(x) if !(0.0..=100.0).contains(&x) => {
                Err(Error::Invalid(format!("mask percentage must be in [0, 100], got {x}")))
            }
            _ => Ok(()),
        }
    }

    /// Steps scored for a sequence of length `len`.
    pub fn steps(&self, len: usize) -> Range<usize> {
        let h = len / 2;
        match self {
            Task::Normal | Task::MaskSensory(_) => 0..len,
            Task::UseState => 0..h,
            Task::Prediction | Task::PredictionShallow | Task::PredictionLocal => h..len,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::MaskSensory(x) => write!(f, "mask_sensory@{x}"),
            Task::Normal => f.write_str(TASK_NAMES[0]),
            Task::UseState => f.write_str(TASK_NAMES[1]),
            Task::Prediction => f.write_str(TASK_NAMES[2]),
            Task::PredictionShallow => f.write_str(TASK_NAMES[3]),
            Task::PredictionLocal => f.write_str(TASK_NAMES[4]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScore {
    pub channel: String,
    pub mse: f64,
    pub sdtw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: Task,
    pub steps: Range<usize>,
    pub sequences: usize,
    pub channels: Vec<ChannelScore>,
}

impl TaskResult {
    /// Sum over channels, the same combination the training loss uses.
    pub fn composite_mse(&self) -> f64 {
        self.channels.iter().map(|c| c.mse).sum()
    }

    pub fn composite_sdtw(&self) -> f64 {
        self.channels.iter().map(|c| c.sdtw).sum()
    }

    /// False when any metric is NaN or infinite.
    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(|c| c.mse.is_finite() && c.sdtw.is_finite())
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelScore> {
        self.channels.iter().find(|c| c.channel == name)
    }
}

/// One row of the task-results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variation_id: String,
    pub task: String,
    pub channel: String,
    pub mse: f64,
    pub sdtw: f64,
    pub diverged: bool,
}

/// Per-channel rows plus a `composite` row for every result.
pub fn result_rows(variation_id: &str, results: &[TaskResult], diverged: bool) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in results {
        let mut push = |channel: &str, mse: f64, sdtw: f64| {
            rows.push(ResultRow {
                variation_id: variation_id.to_string(),
                task: r.task.to_string(),
                channel: channel.to_string(),
                mse,
                sdtw,
                diverged,
            })
        };
        for c in &r.channels {
            push(&c.channel, c.mse, c.sdtw);
        }
        push("composite", r.composite_mse(), r.composite_sdtw());
    }
    rows
}

pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Flags variations whose metrics are NaN or exceed three standard
/// deviations of their column. `table[v][m]` is metric `m` of variation
/// `v`; each column's spread is the population standard deviation over
/// its finite entries, and the threshold applies to the raw value.
pub fn detect_divergence(table: &[Vec<f64>]) -> Vec<bool> {
    let cols = table.first().map_or(0, Vec::len);
    let mut flags: Vec<bool> = table
        .iter()
        .map(|row| row.len() != cols || row.iter().any(|v| v.is_nan()))
        .collect();
    for m in 0..cols {
        let finite: Vec<f64> = table
            .iter()
            .filter_map(|row| row.get(m).copied())
            .filter(|v| v.is_finite())
            .collect();
        let sigma = population_std(&finite);
        for (flag, row) in flags.iter_mut().zip(table) {
            if let Some(&v) = row.get(m) {
                if v == f64::INFINITY || (sigma > 0.0 && v > 3.0 * sigma) {
                    *flag = true;
                }
            }
        }
    }
    flags
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Runs tasks on a fixed set of sequences of one dataset.
pub struct Evaluator<'a> {
    model: &'a Model<f32>,
    data: &'a Toy1DDataset,
    seqs: Vec<usize>,
    cfg: EvalConfig,
}

impl<'a> Evaluator<'a> {
    /// Evaluates the configured split, truncated to `max_sequences`.
    pub fn new(model: &'a Model<f32>, data: &'a Toy1DDataset, cfg: &EvalConfig) -> Result<Self> {
        let mut seqs = data.indices(cfg.split);
        if let Some(n) = cfg.max_sequences {
            seqs.truncate(n);
        }
        Self::with_sequences(model, data, seqs, cfg)
    }

    pub fn with_sequences(
        model: &'a Model<f32>,
        data: &'a Toy1DDataset,
        seqs: Vec<usize>,
        cfg: &EvalConfig,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("no sequences to evaluate".into()));
        }
        if let Some(&s) = seqs.iter().find(|&&s| s >= data.len()) {
            return Err(Error::Invalid(format!("sequence {s} is outside the dataset")));
        }
        if data.seq_len() < 2 {
            return Err(Error::Invalid("evaluation needs sequences of length 2 or more".into()));
        }
        if !(cfg.sdtw_gamma > 0.0) || cfg.batch_size == 0 {
            return Err(Error::config("eval", "sdtw_gamma and batch_size must be positive"));
        }
        Ok(Self {
            model,
            data,
            seqs,
            cfg: cfg.clone(),
        })
    }

    pub fn sequences(&self) -> &[usize] {
        &self.seqs
    }

    fn half(&self) -> usize {
        self.data.seq_len() / 2
    }

    pub fn run_all(&self, tasks: &[Task]) -> Result<Vec<TaskResult>> {
        tasks.iter().map(|&t| self.run(t)).collect()
    }

    pub fn run(&self, task: Task) -> Result<TaskResult> {
        task.validate()?;
        let steps = task.steps(self.data.seq_len());
        let r = steps.len();
        let mut sq = [0.0f64; 2];
        let mut sdtw = [0.0f64; 2];
        for chunk in self.seqs.chunks(self.cfg.batch_size) {
            let states = self.predicted_states(task, chunk)?;
            let d = self.model.config().d_model;
            let states = Tensor::new([chunk.len() * r, d], states)?;
            for (c, (name, cols)) in CHANNELS.iter().enumerate() {
                let pred = self.model.decode_values(name, &states)?;
                let w = cols.len();
                for (b, &s) in chunk.iter().enumerate() {
                    let seq = self.data.sequence(s);
                    let mut p = Vec::with_capacity(r * w);
                    let mut y = Vec::with_capacity(r * w);
                    for (i, t) in steps.clone().enumerate() {
                        let row = pred.row(b * r + i);
                        for (k, col) in cols.clone().enumerate() {
                            let (pv, yv) = (row[k] as f64, seq[t * 3 + col] as f64);
                            sq[c] += (pv - yv) * (pv - yv);
                            p.push(pv);
                            y.push(yv);
                        }
                    }
                    sdtw[c] += soft_dtw(&p, &y, w, self.cfg.sdtw_gamma)?;
                }
            }
        }
        let n = self.seqs.len() as f64;
        let channels = CHANNELS
            .iter()
            .enumerate()
            .map(|(c, (name, cols))| ChannelScore {
                channel: name.to_string(),
                mse: sq[c] / (n * r as f64 * cols.len() as f64),
                sdtw: sdtw[c] / n,
            })
            .collect();
        Ok(TaskResult {
            task,
            steps,
            sequences: self.seqs.len(),
            channels,
        })
    }

    /// Autoregressive rollout from the null state with every measurement
    /// present. Returns the input states of steps `0..half`, `[B, half, d]`.
    pub fn encode_first_half(&self, seqs: &[usize]) -> Result<Vec<f32>> {
        let h = self.half();
        let all = vec![true; seqs.len() * self.data.seq_len()];
        let states = self.rollout(seqs, self.null(seqs.len()), h - 1, Some((0, &all)), false)?;
        Ok(flatten(&states))
    }

    /// States the task decodes for its scored steps, `[B, steps, d]`.
    pub fn predicted_states(&self, task: Task, seqs: &[usize]) -> Result<Vec<f32>> {
        let l = self.data.seq_len();
        let h = self.half();
        let bsz = seqs.len();
        let d = self.model.config().d_model;
        match task {
            Task::Normal => {
                let all = vec![true; bsz * l];
                Ok(flatten(&self.rollout(
                    seqs,
                    self.null(bsz),
                    l - 1,
                    Some((0, &all)),
                    false,
                )?))
            }
            Task::MaskSensory(x) => {
                let present = self.sensory_mask(seqs, x);
                Ok(flatten(&self.rollout(
                    seqs,
                    self.null(bsz),
                    l - 1,
                    Some((0, &present)),
                    false,
                )?))
            }
            Task::Prediction => {
                let present: Vec<bool> = seqs.iter().flat_map(|_| (0..l).map(|t| t < h)).collect();
                let states = self.rollout(seqs, self.null(bsz), l - 1, Some((0, &present)), false)?;
                Ok(flatten(&states[h..]))
            }
            Task::PredictionShallow | Task::PredictionLocal => {
                let encoded = self.encode_first_half(seqs)?;
                let mut last = Vec::with_capacity(bsz * d);
                for b in 0..bsz {
                    last.extend_from_slice(&encoded[(b * h + h - 1) * d..(b * h + h) * d]);
                }
                let start = Tensor::new([bsz, d], last)?;
                let local = task == Task::PredictionLocal;
                let states = self.rollout(seqs, start, l - h, None, local)?;
                Ok(flatten(&states[1..]))
            }
            Task::UseState => {
                let encoded = self.encode_first_half(seqs)?;
                let mut tape = Tape::new();
                let bound = self.model.bind(&mut tape, false);
                let input = tape.constant(Tensor::new([bsz, h, d], encoded)?);
                let out = self.model.core_forward(&mut tape, &bound, input, None, false)?;
                let out = tape.value(out.states).data();
                // Step 0 keeps the null state; output i is the state for step i + 1.
                let mut states = vec![0.0f32; bsz * h * d];
                for b in 0..bsz {
                    let dst = &mut states[b * h * d..(b + 1) * h * d];
                    dst[d..].copy_from_slice(&out[b * h * d..(b * h + h - 1) * d]);
                }
                Ok(states)
            }
        }
    }

    /// Presence bits (`[B, L]`) for the mask task: each sequence draws from
    /// its own stream derived from the evaluation seed and its index.
    pub fn sensory_mask(&self, seqs: &[usize], x: f64) -> Vec<bool> {
        let p = x / 100.0;
        let l = self.data.seq_len();
        seqs.iter()
            .flat_map(|&s| {
                let mut r = rng::seeded(rng::derive_seed(self.cfg.mask_seed, s as u64));
                (0..l).map(move |_| !(rng::unit(&mut r) < p))
            })
            .collect()
    }

    fn null(&self, bsz: usize) -> Tensor<f32> {
        Tensor::zeros([bsz, self.model.config().d_model])
    }

    /// Feeds `start` and then each emitted state for `steps` steps. With
    /// sensory `(t0, present)`, rollout step `j` sees the measurement of
    /// dataset step `t0 + j`, where `present` is `[B, L]`. Returns all
    /// `steps + 1` input states in order.
    fn rollout(
        &self,
        seqs: &[usize],
        start: Tensor<f32>,
        steps: usize,
        sensory: Option<(usize, &[bool])>,
        local: bool,
    ) -> Result<Vec<Tensor<f32>>> {
        let l = self.data.seq_len();
        let bsz = seqs.len();
        let mut session = Session::new(self.model, bsz, local);
        let mut states = Vec::with_capacity(steps + 1);
        states.push(start);
        for j in 0..steps {
            let input = states.last().expect("start state");
            let next = match sensory {
                Some((t0, present)) => {
                    let t = t0 + j;
                    let mut m = Vec::with_capacity(bsz * 2);
                    let mut bits = Vec::with_capacity(bsz);
                    for (b, &s) in seqs.iter().enumerate() {
                        m.extend_from_slice(&self.data.measurement(s, t));
                        bits.push(present[b * l + t]);
                    }
                    session.step(input, Some((&Tensor::new([bsz, 2], m)?, &bits)))?
                }
                None => session.step(input, None)?,
            };
            states.push(next);
        }
        Ok(states)
    }
}

/// Interleaves per-step `[B, d]` tensors into `[B, steps, d]`.
fn flatten(states: &[Tensor<f32>]) -> Vec<f32> {
    let Some(first) = states.first() else {
        return Vec::new();
    };
    let (bsz, d) = (first.shape()[0], first.shape()[1]);
    let mut out = Vec::with_capacity(bsz * states.len() * d);
    for b in 0..bsz {
        for s in states {
            out.extend_from_slice(s.row(b));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in Task::all(40.0) {
            assert_eq!(Task::parse(&t.to_string(), 0.0).unwrap(), t);
        }
        assert_eq!(Task::parse_list("all", 100.0).unwrap().len(), 6);
        assert_eq!(
            Task::parse_list("normal, mask_sensory", 100.0).unwrap(),
            vec![Task::Normal, Task::MaskSensory(100.0)]
        );
        let err = Task::parse("bogus", 0.0).unwrap_err().to_string();
        assert!(err.contains("prediction_shallow"), "{err}");
        assert!(Task::parse("mask_sensory@150", 0.0).is_err());
        assert!(Task::parse("normal@5", 0.0).is_err());
    }

    #[test]
    fn step_ranges() {
        assert_eq!(Task::Normal.steps(200), 0..200);
        assert_eq!(Task::UseState.steps(200), 0..100);
        for t in [Task::Prediction, Task::PredictionShallow, Task::PredictionLocal] {
            assert_eq!(t.steps(200), 100..200);
        }
    }

    #[test]
    fn divergence_rule() {
        assert_eq!(detect_divergence(&[vec![1.0], vec![1.0], vec![1.0]]), vec![false; 3]);
        assert_eq!(
            detect_divergence(&[vec![0.1, f64::NAN], vec![0.1, 0.2]]),
            vec![true, false]
        );
        assert!(detect_divergence(&[]).is_empty());
    }
}
