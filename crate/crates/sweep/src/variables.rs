//! The indicator variables of the training protocol and the variation space
//! they span.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use world_machine::config::{
    BlockKind, ExperimentConfig, NoiseSpec, RecallSpec, SaveMethod, StateActivation, StateRegularizer,
};
use world_machine::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Indicator {
    SB1,
    SB2,
    SM1,
    SM2,
    AC1,
    MD1,
    NA1,
    NA2,
    RF1,
    RF2,
    RF3,
    RF4,
    RP1,
    RP2,
    RP3,
    RP4,
    LM1,
}

/// Variables that can never be active together share a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    SequenceBreaking,
    StateMean,
    StateMaskCheck,
    Activation,
    Blocks,
    StateNoise,
    MeasurementNoise,
    RecallFuture,
    RecallPast,
    LocalMode,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::SequenceBreaking,
        Group::StateMean,
        Group::StateMaskCheck,
        Group::Activation,
        Group::Blocks,
        Group::StateNoise,
        Group::MeasurementNoise,
        Group::RecallFuture,
        Group::RecallPast,
        Group::LocalMode,
    ];

    pub fn members(self) -> Vec<Indicator> {
        Indicator::ALL.into_iter().filter(|i| i.group() == self).collect()
    }
}

impl Indicator {
    pub const ALL: [Indicator; 17] = [
        Indicator::SB1,
        Indicator::SB2,
        Indicator::SM1,
        Indicator::SM2,
        Indicator::AC1,
        Indicator::MD1,
        Indicator::NA1,
        Indicator::NA2,
        Indicator::RF1,
        Indicator::RF2,
        Indicator::RF3,
        Indicator::RF4,
        Indicator::RP1,
        Indicator::RP2,
        Indicator::RP3,
        Indicator::RP4,
        Indicator::LM1,
    ];

    pub fn group(self) -> Group {
        use Indicator::*;
        match self {
            SB1 | SB2 => Group::SequenceBreaking,
            SM1 => Group::StateMean,
            SM2 => Group::StateMaskCheck,
            AC1 => Group::Activation,
            MD1 => Group::Blocks,
            NA1 => Group::StateNoise,
            NA2 => Group::MeasurementNoise,
            RF1 | RF2 | RF3 | RF4 => Group::RecallFuture,
            RP1 | RP2 | RP3 | RP4 => Group::RecallPast,
            LM1 => Group::LocalMode,
        }
    }

    pub fn name(self) -> &'static str {
        use Indicator::*;
        match self {
            SB1 => "SB1",
            SB2 => "SB2",
            SM1 => "SM1",
            SM2 => "SM2",
            AC1 => "AC1",
            MD1 => "MD1",
            NA1 => "NA1",
            NA2 => "NA2",
            RF1 => "RF1",
            RF2 => "RF2",
            RF3 => "RF3",
            RF4 => "RF4",
            RP1 => "RP1",
            RP2 => "RP2",
            RP3 => "RP3",
            RP4 => "RP4",
            LM1 => "LM1",
        }
    }

    /// This indicator's bit in [`Variation::bits`].
    pub fn bit(self) -> u32 {
        1 << Indicator::ALL
            .iter()
            .position(|&i| i == self)
            .expect("listed indicator")
    }

    /// Stride and channel count of a recall variable.
    fn recall(self) -> Option<RecallSpec> {
        use Indicator::*;
        let (stride, n) = match self {
            RF1 | RP1 => (1, 1),
            RF2 | RP2 => (1, 5),
            RF3 | RP3 => (3, 1),
            RF4 | RP4 => (3, 5),
            _ => return None,
        };
        Some(RecallSpec { stride, n })
    }

    /// Switches this variable on in `cfg`.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        use Indicator::*;
        let p = &mut cfg.protocol;
        match self {
            SB1 => {
                p.n_segment = 2;
                p.fast_forward = false;
            }
            SB2 => {
                p.n_segment = 2;
                p.fast_forward = true;
            }
            SM1 => p.state_save_method = SaveMethod::Mean,
            SM2 => p.check_input_masks = true,
            AC1 => {
                p.state_activation = StateActivation::None;
                p.state_regularizer = StateRegularizer::Mse;
            }
            MD1 => p.block_configuration = vec![BlockKind::Measurement, BlockKind::State],
            NA1 => p.noise_state = Some(NoiseSpec::default()),
            NA2 => p.noise_measurement = Some(NoiseSpec::default()),
            RF1 | RF2 | RF3 | RF4 => p.recall_future = self.recall(),
            RP1 | RP2 | RP3 | RP4 => p.recall_past = self.recall(),
            LM1 => p.local_chance = 0.25,
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().replace('_', "");
        Indicator::ALL
            .into_iter()
            .find(|i| i.name().eq_ignore_ascii_case(&t))
            .ok_or_else(|| Error::Invalid(format!("unknown indicator `{s}`")))
    }
}

/// A valid combination of active indicators.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variation(BTreeSet<Indicator>);

impl Variation {
    pub fn base() -> Self {
        Self::default()
    }

    pub fn new(indicators: impl IntoIterator<Item = Indicator>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for i in indicators {
            if let Some(other) = set.iter().find(|o: &&Indicator| o.group() == i.group() && **o != i) {
                return Err(Error::Invalid(format!(
                    "indicators {other} and {i} are mutually exclusive"
                )));
            }
            set.insert(i);
        }
        Ok(Self(set))
    }

    pub fn contains(&self, i: Indicator) -> bool {
        self.0.contains(&i)
    }

    pub fn indicators(&self) -> impl Iterator<Item = Indicator> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The member of `group` that is active, if any.
    pub fn in_group(&self, group: Group) -> Option<Indicator> {
        self.0.iter().copied().find(|i| i.group() == group)
    }

    /// One bit per active indicator, in [`Indicator::ALL`] order.
    pub fn bits(&self) -> u32 {
        self.0.iter().fold(0, |m, i| m | i.bit())
    }

    pub fn without(&self, i: Indicator) -> Self {
        let mut s = self.0.clone();
        s.remove(&i);
        Self(s)
    }

    /// Adds `i`, or `None` when its group is already occupied.
    pub fn with(&self, i: Indicator) -> Option<Self> {
        if self.in_group(i.group()).is_some() {
            return None;
        }
        let mut s = self.0.clone();
        s.insert(i);
        Some(Self(s))
    }

    /// `base` with every indicator of this variation switched on.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        for i in self.indicators() {
            i.apply(&mut cfg);
        }
        cfg.name = format!("{}-{}", base.name, self.id());
        cfg
    }

    /// Stable identifier: `base` or the indicator names joined by `+`.
    pub fn id(&self) -> String {
        if self.0.is_empty() {
            "base".to_string()
        } else {
            self.0.iter().map(|i| i.name()).collect::<Vec<_>>().join("+")
        }
    }

    pub fn parse_id(id: &str) -> Result<Self> {
        if id == "base" {
            return Ok(Self::base());
        }
        Self::new(id.split('+').map(str::parse).collect::<Result<Vec<_>>>()?)
    }
}

impl fmt::Display for Variation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Variable groups to sweep; each group contributes a factor of one plus
/// its member count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableSpace {
    groups: Vec<Group>,
}

impl VariableSpace {
    pub fn full() -> Self {
        Self {
            groups: Group::ALL.to_vec(),
        }
    }

    pub fn empty() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn new(groups: impl IntoIterator<Item = Group>) -> Self {
        let set: BTreeSet<Group> = groups.into_iter().collect();
        Self {
            groups: set.into_iter().collect(),
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Product of the per-group option counts.
    pub fn count(&self) -> usize {
        self.groups.iter().map(|g| g.members().len() + 1).product()
    }

    /// Every variation, in a fixed order starting with the base.
    pub fn enumerate(&self) -> Vec<Variation> {
        let mut out = vec![Variation::base()];
        for g in &self.groups {
            let mut next = Vec::with_capacity(out.len() * (g.members().len() + 1));
            for v in &out {
                next.push(v.clone());
                for m in g.members() {
                    next.push(v.with(m).expect("groups are disjoint"));
                }
            }
            out = next;
        }
        out.sort();
        out
    }
}
