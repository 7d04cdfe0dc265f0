//! The Toy1D dataset: a clipped third-order linear system driven by square
//! and impulse forcing, observed through a fixed random `tanh` measurement.
//!
//! Each generated sequence stores, per step, the external state (position)
//! and the two measurement components, every channel min-max scaled to
//! `[-1, 1]` within its window.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Prng};

/// `x_{i+1} = F x_i + u_i` with unit time step.
pub const TRANSITION: [[f64; 3]; 3] = [[1.0, 1.0, 0.5], [-0.1, 1.0, 1.0], [0.0, 0.0, 1.0]];

/// Channels per stored step: external state, measurement 0, measurement 1.
pub const STEP_WIDTH: usize = 3;

const MAGIC: &[u8; 4] = b"T1D1";
const VERSION: u32 = 1;

/// Position, velocity and acceleration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemState(pub [f64; 3]);

/// Advances the system one step; velocity and acceleration are clipped to
/// `[-1, 1]` afterwards.
pub fn step_system(x: SystemState, u: [f64; 3]) -> SystemState {
    let mut next = [0.0; 3];
    for (r, row) in TRANSITION.iter().enumerate() {
        next[r] = row.iter().zip(&x.0).map(|(f, v)| f * v).sum::<f64>() + u[r];
    }
    next[1] = next[1].clamp(-1.0, 1.0);
    next[2] = next[2].clamp(-1.0, 1.0);
    SystemState(next)
}

/// 2x2 measurement matrix applied to (position, velocity).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMatrix(pub [[f64; 2]; 2]);

impl MeasurementMatrix {
    pub fn random(rng: &mut Prng) -> Self {
        let mut h = [[0.0; 2]; 2];
        for row in &mut h {
            for v in row.iter_mut() {
                *v = rng::uniform(rng, -1.0, 1.0);
            }
        }
        Self(h)
    }
}

pub fn measure(x: SystemState, h: &MeasurementMatrix) -> [f64; 2] {
    let [r0, r1] = h.0;
    [
        (r0[0] * x.0[0] + r0[1] * x.0[1]).tanh(),
        (r1[0] * x.0[0] + r1[1] * x.0[1]).tanh(),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    pub max_square_waves: usize,
    pub min_period: usize,
    pub max_period: usize,
    pub square_amplitude: f64,
    pub max_impulses: usize,
    pub impulse_amplitude: f64,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        Self {
            max_square_waves: 3,
            min_period: 20,
            max_period: 200,
            square_amplitude: 0.05,
            max_impulses: 5,
            impulse_amplitude: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareWave {
    pub period: usize,
    pub amplitude: f64,
    pub phase: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Impulse {
    pub step: usize,
    pub amplitude: f64,
}

/// The random components that make up one forcing signal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForcingPlan {
    pub squares: Vec<SquareWave>,
    pub impulses: Vec<Impulse>,
}

impl ForcingPlan {
    pub fn draw(rng: &mut Prng, length: usize, cfg: &ForcingConfig) -> Self {
        let n_sq = rng::below(rng, cfg.max_square_waves + 1);
        let squares = (0..n_sq)
            .map(|_| {
                let period = cfg.min_period + rng::below(rng, cfg.max_period - cfg.min_period + 1);
                let amplitude = rng::uniform(rng, -cfg.square_amplitude, cfg.square_amplitude);
                let phase = rng::below(rng, period);
                SquareWave {
                    period,
                    amplitude,
                    phase,
                }
            })
            .collect();
        let n_imp = rng::below(rng, cfg.max_impulses + 1);
        let impulses = (0..n_imp)
            .map(|_| Impulse {
                step: rng::below(rng, length),
                amplitude: rng::uniform(rng, -cfg.impulse_amplitude, cfg.impulse_amplitude),
            })
            .collect();
        Self { squares, impulses }
    }

    /// Per-step forcing vectors; only the acceleration component is driven.
    pub fn render(&self, length: usize) -> Vec<[f64; 3]> {
        let mut u = vec![[0.0; 3]; length];
        for (t, slot) in u.iter_mut().enumerate() {
            for sq in &self.squares {
                let high = (t + sq.phase) % sq.period < sq.period / 2;
                slot[2] += if high { sq.amplitude } else { -sq.amplitude };
            }
        }
        for imp in &self.impulses {
            if imp.step < length {
                u[imp.step][2] += imp.amplitude;
            }
        }
        u
    }
}

pub fn generate_forcing(rng: &mut Prng, length: usize, cfg: &ForcingConfig) -> Vec<[f64; 3]> {
    ForcingPlan::draw(rng, length, cfg).render(length)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub raw_sequences: usize,
    pub raw_length: usize,
    pub window_length: usize,
    pub windows_per_raw: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub forcing: ForcingConfig,
}

impl GenerationConfig {
    /// 10,000 raw sequences of length 1,000 cut into 40,000 windows of 200.
    pub fn full() -> Self {
        Self {
            raw_sequences: 10_000,
            raw_length: 1_000,
            window_length: 200,
            windows_per_raw: 4,
            train_fraction: 0.6,
            val_fraction: 0.2,
            forcing: ForcingConfig::default(),
        }
    }

    /// 2,000 windows of length 64.
    pub fn desk() -> Self {
        Self {
            raw_sequences: 500,
            raw_length: 320,
            window_length: 64,
            ..Self::full()
        }
    }

    pub fn sequence_count(&self) -> usize {
        self.raw_sequences * self.windows_per_raw
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.windows_per_raw == 0 || self.raw_sequences == 0 {
            return Err(Error::config("dataset", "counts and lengths must be positive"));
        }
        if self.window_length * self.windows_per_raw > self.raw_length {
            return Err(Error::config(
                "dataset.windows_per_raw",
                format!(
                    "{} windows of {} do not fit in raw length {}",
                    self.windows_per_raw, self.window_length, self.raw_length
                ),
            ));
        }
        let f = &self.forcing;
        if f.min_period == 0 || f.min_period > f.max_period {
            return Err(Error::config("dataset.forcing", "invalid period range"));
        }
        if !(0.0..=1.0).contains(&(self.train_fraction + self.val_fraction)) {
            return Err(Error::config("dataset", "split fractions must sum to at most 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Immutable, segmented and scaled Toy1D sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Toy1DDataset {
    pub seed: u64,
    pub h: MeasurementMatrix,
    seq_len: usize,
    splits: Vec<Split>,
    /// `count x seq_len x STEP_WIDTH`, row-major.
    data: Vec<f32>,
}

impl Toy1DDataset {
    pub fn new(seed: u64, h: MeasurementMatrix, seq_len: usize, splits: Vec<Split>, data: Vec<f32>) -> Result<Self> {
        if data.len() != splits.len() * seq_len * STEP_WIDTH {
            return Err(Error::Format {
                what: "dataset",
                msg: format!(
                    "{} values for {} sequences of length {seq_len}",
                    data.len(),
                    splits.len()
                ),
            });
        }
        Ok(Self {
            seed,
            h,
            seq_len,
            splits,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn split_of(&self, seq: usize) -> Split {
        self.splits[seq]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.splits {
            c[s.tag() as usize] += 1;
        }
        c
    }

    /// `seq_len x 3` rows of (external, m0, m1).
    pub fn sequence(&self, seq: usize) -> &[f32] {
        let w = self.seq_len * STEP_WIDTH;
        &self.data[seq * w..(seq + 1) * w]
    }

    pub fn external(&self, seq: usize, t: usize) -> f32 {
        self.sequence(seq)[t * STEP_WIDTH]
    }

    pub fn measurement(&self, seq: usize, t: usize) -> [f32; 2] {
        let s = &self.sequence(seq)[t * STEP_WIDTH + 1..t * STEP_WIDTH + 3];
        [s[0], s[1]]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Keeps only the first `n` sequences of each split (for quick runs).
    pub fn truncated(&self, per_split: [usize; 3]) -> Self {
        let mut taken = [0; 3];
        let mut splits = Vec::new();
        let mut data = Vec::new();
        for i in 0..self.len() {
            let s = self.splits[i].tag() as usize;
            if taken[s] < per_split[s] {
                taken[s] += 1;
                splits.push(self.splits[i]);
                data.extend_from_slice(self.sequence(i));
            }
        }
        Self {
            seed: self.seed,
            h: self.h,
            seq_len: self.seq_len,
            splits,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for row in &self.h.0 {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        let w = self.seq_len * STEP_WIDTH;
        for (i, split) in self.splits.iter().enumerate() {
            out.push(split.tag());
            for v in &self.data[i * w..(i + 1) * w] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            what: "T1D1 container",
            msg: msg.to_string(),
        };
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = r.u64().ok_or_else(|| bad("truncated header"))?;
        let mut h = [[0.0; 2]; 2];
        for row in &mut h {
            for v in row.iter_mut() {
                *v = r.f64().ok_or_else(|| bad("truncated header"))?;
            }
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let seq_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let w = seq_len * STEP_WIDTH;
        let mut splits = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * w);
        for _ in 0..count {
            let tag = r.take(1).ok_or_else(|| bad("truncated sequence"))?[0];
            splits.push(Split::from_tag(tag).ok_or_else(|| bad(&format!("bad split tag {tag}")))?);
            let raw = r.take(w * 4).ok_or_else(|| bad("truncated sequence"))?;
            data.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::new(seed, MeasurementMatrix(h), seq_len, splits, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the container encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes `train.csv`, `val.csv` and `test.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for split in Split::ALL {
            let path = dir.join(format!("{}.csv", split.name()));
            let file = fs::File::create(&path).map_err(Error::io(&path))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "seq_id,t,ext,m0,m1").map_err(Error::io(&path))?;
            for seq in self.indices(split) {
                for (t, row) in self.sequence(seq).chunks_exact(STEP_WIDTH).enumerate() {
                    writeln!(w, "{seq},{t},{},{},{}", row[0], row[1], row[2]).map_err(Error::io(&path))?;
                }
            }
            w.flush().map_err(Error::io(&path))?;
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Affine map of `values` onto `[-1, 1]`; constant input maps to 0.
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|v| (2.0 * (v - lo) / span - 1.0).clamp(-1.0, 1.0))
        .collect()
}

/// Simulates one raw trajectory of `length` states.
pub fn simulate(rng: &mut Prng, length: usize, forcing: &ForcingConfig) -> Vec<SystemState> {
    let x0 = SystemState([
        rng::uniform(rng, -1.0, 1.0),
        rng::uniform(rng, -1.0, 1.0),
        rng::uniform(rng, -1.0, 1.0),
    ]);
    let u = generate_forcing(rng, length, forcing);
    let mut states = Vec::with_capacity(length);
    let mut x = x0;
    for ui in u.iter().take(length) {
        states.push(x);
        x = step_system(x, *ui);
    }
    states
}

/// Generates the dataset for `seed`.
///
/// Stream 0 of the seed draws `H` and then the split permutation; raw
/// sequence `r` is simulated from stream `r + 1`.
pub fn generate_dataset(seed: u64, cfg: &GenerationConfig) -> Result<Toy1DDataset> {
    cfg.validate()?;
    let mut streams = rng::streams(seed, cfg.raw_sequences + 1);
    let mut master = streams[0].clone();
    let h = MeasurementMatrix::random(&mut master);

    let n = cfg.sequence_count();
    let win = cfg.window_length;
    let mut data = Vec::with_capacity(n * win * STEP_WIDTH);
    for stream in streams.iter_mut().skip(1) {
        let states = simulate(stream, cfg.raw_length, &cfg.forcing);
        for w in 0..cfg.windows_per_raw {
            let window = &states[w * win..(w + 1) * win];
            let ext: Vec<f64> = window.iter().map(|x| x.0[0]).collect();
            let meas: Vec<[f64; 2]> = window.iter().map(|x| measure(*x, &h)).collect();
            let cols = [
                minmax_scale(&ext),
                minmax_scale(&meas.iter().map(|m| m[0]).collect::<Vec<_>>()),
                minmax_scale(&meas.iter().map(|m| m[1]).collect::<Vec<_>>()),
            ];
            for t in 0..win {
                for col in &cols {
                    data.push(col[t] as f32);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut master, &mut order);
    let n_train = (cfg.train_fraction * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &seq) in order.iter().enumerate() {
        splits[seq] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Toy1DDataset::new(seed, h, win, splits, data)
}
