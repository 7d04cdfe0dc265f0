//! Per-variation records and the impact analysis over them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use world_machine::eval::{detect_divergence, read_rows};
use world_machine::{Error, Result};

use crate::stats::{mean, pearson, wilcoxon_signed_rank, SignedRank, Stat, Undefined};
use crate::variables::{Indicator, Variation};

pub const SUMMARY_FILE: &str = "summary.json";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Sdtw,
}

/// What a statistic is computed on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Task {
        task: String,
        channel: String,
        kind: MetricKind,
    },
    /// Summed training-epoch wall time.
    Duration,
}

impl Metric {
    pub fn composite_mse(task: &str) -> Self {
        Metric::Task {
            task: task.to_string(),
            channel: "composite".to_string(),
            kind: MetricKind::Mse,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Metric::Task { task, channel, kind } => {
                let kind = match kind {
                    MetricKind::Mse => "mse",
                    MetricKind::Sdtw => "sdtw",
                };
                format!("{task}/{channel}/{kind}")
            }
            Metric::Duration => "duration".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationRecord {
    pub variation: Variation,
    /// `(task, channel) -> (mse, sdtw)`.
    pub metrics: BTreeMap<(String, String), (f64, f64)>,
    pub duration_seconds: f64,
    /// Training stopped on a non-finite loss or gradient.
    pub training_diverged: bool,
    /// Final label after the cross-variation rule.
    pub diverged: bool,
}

impl VariationRecord {
    pub fn new(variation: Variation, duration_seconds: f64) -> Self {
        Self {
            variation,
            metrics: BTreeMap::new(),
            duration_seconds,
            training_diverged: false,
            diverged: false,
        }
    }

    /// Sets the composite MSE (and SDTW) of `task`.
    pub fn with_task(mut self, task: &str, mse: f64, sdtw: f64) -> Self {
        self.metrics
            .insert((task.to_string(), "composite".to_string()), (mse, sdtw));
        self
    }

    pub fn get(&self, metric: &Metric) -> Option<f64> {
        match metric {
            Metric::Duration => Some(self.duration_seconds),
            Metric::Task { task, channel, kind } => {
                let (mse, sdtw) = *self.metrics.get(&(task.clone(), channel.clone()))?;
                Some(match kind {
                    MetricKind::Mse => mse,
                    MetricKind::Sdtw => sdtw,
                })
            }
        }
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut t: Vec<String> = self.metrics.keys().map(|(task, _)| task.clone()).collect();
        t.dedup();
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Written last in a variation's directory; marks it complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub variation_id: String,
    pub status: RunStatus,
    pub epochs: usize,
    pub total_epoch_seconds: f64,
    pub diverged: bool,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::io(path))
    }
}

/// Reads every completed variation under `dir` (one subdirectory each) and
/// applies [`label_divergence`]. Failed runs are skipped.
pub fn load_records(dir: &Path) -> Result<Vec<VariationRecord>> {
    let mut records = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    entries.sort();
    for path in entries {
        let summary = RunSummary::load(&path.join(SUMMARY_FILE))?;
        if summary.status != RunStatus::Completed {
            continue;
        }
        let variation = Variation::parse_id(&summary.variation_id)?;
        let mut rec = VariationRecord::new(variation, summary.total_epoch_seconds);
        rec.training_diverged = summary.diverged;
        let results = path.join(RESULTS_FILE);
        let file = fs::File::open(&results).map_err(Error::io(&results))?;
        for row in read_rows(file)? {
            if row.variation_id != summary.variation_id {
                return Err(Error::Format {
                    what: "results",
                    msg: format!("{} lists variation {}", results.display(), row.variation_id),
                });
            }
            rec.metrics.insert((row.task, row.channel), (row.mse, row.sdtw));
        }
        records.push(rec);
    }
    label_divergence(&mut records);
    Ok(records)
}

/// Marks a record divergent when training diverged, when any composite
/// task metric is NaN or missing, or when the cross-variation 3σ rule
/// flags it.
pub fn label_divergence(records: &mut [VariationRecord]) {
    let mut keys: Vec<(String, String)> = records
        .iter()
        .flat_map(|r| r.metrics.keys().filter(|(_, c)| c == "composite").cloned())
        .collect();
    keys.sort();
    keys.dedup();
    let table: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            keys.iter()
                .flat_map(|k| {
                    let (m, s) = r.metrics.get(k).copied().unwrap_or((f64::NAN, f64::NAN));
                    [m, s]
                })
                .collect()
        })
        .collect();
    let flags = detect_divergence(&table);
    for (r, flag) in records.iter_mut().zip(flags) {
        r.diverged = r.training_diverged || flag;
    }
}

fn usable(r: &VariationRecord, metric: &Metric) -> Option<f64> {
    if r.diverged {
        return None;
    }
    r.get(metric).filter(|v| v.is_finite())
}

/// `E[M | cond] - E[M | not cond]` over non-divergent records.
pub fn impact_by(records: &[VariationRecord], metric: &Metric, cond: impl Fn(&Variation) -> bool) -> Stat<f64> {
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for r in records {
        if let Some(v) = usable(r, metric) {
            if cond(&r.variation) {
                with.push(v);
            } else {
                without.push(v);
            }
        }
    }
    match (mean(&with), mean(&without)) {
        (Some(a), Some(b)) => Stat::Defined(a - b),
        _ => Stat::Undefined(Undefined::EmptyCondition),
    }
}

pub fn impact(records: &[VariationRecord], metric: &Metric, a: Indicator) -> Stat<f64> {
    impact_by(records, metric, |v| v.contains(a))
}

/// Index pairs `(with a, without a)` whose variations differ only in `a`.
pub fn pairs(records: &[VariationRecord], a: Indicator) -> Vec<(usize, usize)> {
    let index: HashMap<&Variation, usize> = records
        .iter()
        .enumerate()
        .rev()
        .map(|(i, r)| (&r.variation, i))
        .collect();
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.variation.contains(a) && index.get(&r.variation) == Some(&i) {
            if let Some(&j) = index.get(&r.variation.without(a)) {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTest {
    /// Pairs found before any filtering.
    pub pairs: usize,
    /// Pairs with both members non-divergent and finite.
    pub usable: usize,
    pub test: SignedRank,
}

/// Signed-rank test on `M(v + a) - M(v)`; a pair with a divergent member
/// is dropped whole.
pub fn wilcoxon_pairs(records: &[VariationRecord], metric: &Metric, a: Indicator) -> Stat<PairedTest> {
    let all = pairs(records, a);
    let diffs: Vec<f64> = all
        .iter()
        .filter_map(|&(i, j)| Some(usable(&records[i], metric)? - usable(&records[j], metric)?))
        .collect();
    match wilcoxon_signed_rank(&diffs) {
        Stat::Defined(test) => Stat::Defined(PairedTest {
            pairs: all.len(),
            usable: diffs.len(),
            test,
        }),
        Stat::Undefined(u) => Stat::Undefined(u),
    }
}

/// Fraction of divergent records among those with `a` and none of
/// `exclude`.
pub fn divergence_probability(records: &[VariationRecord], a: Indicator, exclude: &[Indicator]) -> Stat<f64> {
    let pool: Vec<&VariationRecord> = records
        .iter()
        .filter(|r| r.variation.contains(a) && !exclude.iter().any(|&e| r.variation.contains(e)))
        .collect();
    if pool.is_empty() {
        return Stat::Undefined(Undefined::EmptyCondition);
    }
    Stat::Defined(pool.iter().filter(|r| r.diverged).count() as f64 / pool.len() as f64)
}

/// Impact on summed epoch time with its paired test.
pub fn duration_impact(records: &[VariationRecord], a: Indicator) -> (Stat<f64>, Stat<PairedTest>) {
    (
        impact(records, &Metric::Duration, a),
        wilcoxon_pairs(records, &Metric::Duration, a),
    )
}

/// Pearson correlations between metrics across non-divergent records that
/// have every metric finite.
pub fn correlation_matrix(records: &[VariationRecord], metrics: &[Metric]) -> Vec<Vec<Stat<f64>>> {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .filter_map(|r| metrics.iter().map(|m| usable(r, m)).collect::<Option<Vec<f64>>>())
        .collect();
    let column = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    (0..metrics.len())
        .map(|a| (0..metrics.len()).map(|b| pearson(&column(a), &column(b))).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpactRow {
    pub variable: Indicator,
    pub metric: Metric,
    pub impact: Stat<f64>,
    pub test: Stat<PairedTest>,
}

impl ImpactRow {
    pub fn significant(&self, alpha: f64) -> bool {
        matches!(self.test, Stat::Defined(t) if t.test.p_value < alpha)
    }
}

/// Impact and paired test of every indicator on every metric.
pub fn impact_report(records: &[VariationRecord], metrics: &[Metric]) -> Vec<ImpactRow> {
    let mut rows = Vec::new();
    for metric in metrics {
        for a in Indicator::ALL {
            rows.push(ImpactRow {
                variable: a,
                metric: metric.clone(),
                impact: impact(records, metric, a),
                test: wilcoxon_pairs(records, metric, a),
            });
        }
    }
    rows
}
