//! Sweep manifests and the stratified desk-scale sample.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use world_machine::config::{canonical_json, parse_json, ExperimentConfig};
use world_machine::rng;
use world_machine::{Error, Result};

use crate::variables::{Indicator, VariableSpace, Variation};

pub const MANIFEST_VERSION: u32 = 1;

/// Smallest stratified sample in which every indicator has 8 pairs.
pub const DESK_SAMPLE_SIZE: usize = 66;
/// Pairs per indicator the desk sample guarantees.
pub const DESK_MIN_PAIRS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub indicators: Vec<Indicator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Configuration every variation starts from.
    pub base: ExperimentConfig,
    /// Mask percentage for the mask-sensory task.
    pub mask_x: f64,
    pub variations: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base: ExperimentConfig, variations: &[Variation]) -> Self {
        Self {
            version: MANIFEST_VERSION,
            base,
            mask_x: 100.0,
            variations: variations
                .iter()
                .map(|v| ManifestEntry {
                    id: v.id(),
                    indicators: v.indicators().collect(),
                })
                .collect(),
        }
    }

    /// Parsed variations, checked against their ids.
    pub fn parsed(&self) -> Result<Vec<Variation>> {
        let mut seen = HashSet::new();
        self.variations
            .iter()
            .map(|e| {
                let v = Variation::new(e.indicators.iter().copied())?;
                if v.id() != e.id {
                    return Err(Error::config(
                        "variations.id",
                        format!("`{}` does not match its indicators ({v})", e.id),
                    ));
                }
                if !seen.insert(v.clone()) {
                    return Err(Error::config("variations", format!("duplicate variation {v}")));
                }
                Ok(v)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::config(
                "version",
                format!("expected {MANIFEST_VERSION}, got {}", self.version),
            ));
        }
        if !(0.0..=100.0).contains(&self.mask_x) {
            return Err(Error::config("mask_x", "must lie in [0, 100]"));
        }
        self.base.validate()?;
        for v in self.parsed()? {
            v.apply(&self.base).validate()?;
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = parse_json(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_json()?).map_err(Error::io(path))
    }
}

/// Number of `(v + a, v)` pairs inside `set` for each indicator.
pub fn pair_counts(set: &[Variation]) -> Vec<(Indicator, usize)> {
    let members: HashSet<&Variation> = set.iter().collect();
    Indicator::ALL
        .into_iter()
        .map(|a| {
            let n = set
                .iter()
                .filter(|v| v.contains(a) && members.contains(&v.without(a)))
                .count();
            (a, n)
        })
        .collect()
}

/// Per-indicator pair counts of a bitmask set.
fn mask_pairs(members: &HashSet<u32>) -> [usize; 17] {
    let mut pairs = [0usize; 17];
    for &m in members {
        for (k, p) in pairs.iter_mut().enumerate() {
            if m & (1 << k) != 0 && members.contains(&(m & !(1 << k))) {
                *p += 1;
            }
        }
    }
    pairs
}

/// Pairs that `c` forms with `members`, per indicator.
fn pairs_with(c: u32, members: &HashSet<u32>, group_bits: &[u32]) -> [usize; 17] {
    let mut out = [0usize; 17];
    for (k, o) in out.iter_mut().enumerate() {
        let a = 1u32 << k;
        let hit = if c & a != 0 {
            members.contains(&(c & !a))
        } else {
            c & group_bits[k] == 0 && members.contains(&(c | a))
        };
        *o = hit as usize;
    }
    out
}

fn deficit(pairs: &[usize; 17], min_pairs: usize) -> usize {
    pairs.iter().map(|&p| min_pairs.saturating_sub(p)).sum()
}

/// Annealing energy: the deficit, with a small reward for dense sets that
/// leave more room to move.
fn energy(pairs: &[usize; 17], min_pairs: usize) -> f64 {
    deficit(pairs, min_pairs) as f64 - 0.02 * pairs.iter().sum::<usize>() as f64
}

fn group_masks() -> Vec<u32> {
    Indicator::ALL
        .iter()
        .map(|a| a.group().members().iter().fold(0, |m, &b| m | b.bit()))
        .collect()
}

/// Greedy start: from the base, repeatedly add the candidate completing the
/// most still-needed pairs, preferring least-used indicators.
fn greedy(size: usize, min_pairs: usize, g: &mut rng::Prng, group_bits: &[u32]) -> Vec<u32> {
    let mut candidates: Vec<u32> = VariableSpace::full().enumerate().iter().map(Variation::bits).collect();
    rng::shuffle(g, &mut candidates);
    let mut chosen: Vec<u32> = vec![0];
    let mut members: HashSet<u32> = HashSet::from([0]);
    let mut pairs = [0usize; 17];
    let mut usage = [0i64; 17];
    while chosen.len() < size.min(candidates.len()) {
        let mut best: Option<(usize, i64, u32)> = None;
        for &c in &candidates {
            if members.contains(&c) {
                continue;
            }
            let with = pairs_with(c, &members, group_bits);
            let gain = (0..17).filter(|&k| pairs[k] < min_pairs && with[k] > 0).count();
            let balance = -(0..17).filter(|&k| c & (1 << k) != 0).map(|k| usage[k]).sum::<i64>();
            if best.is_none_or(|(g, b, _)| (gain, balance) > (g, b)) {
                best = Some((gain, balance, c));
            }
        }
        let Some((_, _, c)) = best else { break };
        let with = pairs_with(c, &members, group_bits);
        for k in 0..17 {
            pairs[k] += with[k];
            if c & (1 << k) != 0 {
                usage[k] += 1;
            }
        }
        members.insert(c);
        chosen.push(c);
    }
    chosen
}

/// Simulated annealing over swaps of one member for a one-indicator
/// neighbour of another member. Stops early once no indicator is short.
fn anneal(chosen: &mut [u32], min_pairs: usize, steps: usize, g: &mut rng::Prng, group_bits: &[u32]) -> usize {
    let mut members: HashSet<u32> = chosen.iter().copied().collect();
    let mut pairs = mask_pairs(&members);
    let mut current = energy(&pairs, min_pairs);
    for step in 0..steps {
        if deficit(&pairs, min_pairs) == 0 || chosen.len() < 2 {
            break;
        }
        let out_i = rng::below(g, chosen.len());
        let src = chosen[rng::below(g, chosen.len())];
        let k = rng::below(g, 17);
        let a = 1u32 << k;
        let proposal = if src & a != 0 {
            src & !a
        } else {
            (src & !group_bits[k]) | a
        };
        if members.contains(&proposal) {
            continue;
        }
        let old = chosen[out_i];
        members.remove(&old);
        let lost = pairs_with(old, &members, group_bits);
        let gained = pairs_with(proposal, &members, group_bits);
        let mut next = pairs;
        for k in 0..17 {
            next[k] = next[k] + gained[k] - lost[k];
        }
        let e = energy(&next, min_pairs);
        let temperature = 1.0 - step as f64 / steps as f64 + 1e-3;
        if e <= current || rng::unit(g) < (-(e - current) / temperature).exp() {
            members.insert(proposal);
            chosen[out_i] = proposal;
            pairs = next;
            current = e;
        } else {
            members.insert(old);
        }
    }
    deficit(&pairs, min_pairs)
}

/// Stratified sample of `size` variations from the full space in which
/// every indicator forms at least `min_pairs` pairs where possible.
///
/// A greedy start is refined by seeded annealing restarts; the first
/// restart that leaves no indicator short wins, otherwise the best one.
/// 64 variations cannot give all 17 indicators 8 pairs (the search tops
/// out at 133 of 136 pairs); 66 can, see [`DESK_SAMPLE_SIZE`].
pub fn stratified(size: usize, min_pairs: usize, seed: u64) -> Vec<Variation> {
    const RESTARTS: u64 = 24;
    const STEPS: usize = 1_000_000;
    if size == 0 {
        return Vec::new();
    }
    let group_bits = group_masks();
    let mut best: Option<(usize, Vec<u32>)> = None;
    for round in 0..RESTARTS {
        let mut g = rng::seeded(rng::derive_seed(seed, round));
        let mut chosen = greedy(size, min_pairs, &mut g, &group_bits);
        let d = anneal(&mut chosen, min_pairs, STEPS, &mut g, &group_bits);
        if best.as_ref().is_none_or(|(b, _)| d < *b) {
            best = Some((d, chosen));
        }
        if d == 0 {
            break;
        }
    }
    let (_, mut chosen) = best.expect("at least one restart");
    chosen.sort_unstable();
    chosen.into_iter().map(variation_of).collect()
}

fn variation_of(bits: u32) -> Variation {
    Variation::new(Indicator::ALL.into_iter().filter(|a| bits & a.bit() != 0)).expect("masks respect groups")
}
