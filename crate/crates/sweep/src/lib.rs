//! Variation sweeps over the training-protocol variables: enumeration,
//! stratified manifests, parallel runs and the impact statistics.

pub mod manifest;
pub mod records;
pub mod report;
pub mod runner;
pub mod stats;
pub mod variables;

pub use manifest::{pair_counts, stratified, Manifest, DESK_MIN_PAIRS, DESK_SAMPLE_SIZE};
pub use records::{Metric, MetricKind, VariationRecord};
pub use stats::{Stat, Undefined};
pub use variables::{Group, Indicator, VariableSpace, Variation};
