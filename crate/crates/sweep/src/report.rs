//! Impact-report CSVs and standalone SVG bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use world_machine::{Error, Result};

use crate::records::{
    correlation_matrix, divergence_probability, duration_impact, impact_report, ImpactRow, Metric, MetricKind,
    VariationRecord,
};
use crate::stats::Stat;
use crate::variables::Indicator;

pub const ALPHA: f64 = 0.05;

/// Task metrics present in the records: composite MSE and SDTW per task.
pub fn task_metrics(records: &[VariationRecord]) -> Vec<Metric> {
    let mut tasks: Vec<String> = records.iter().flat_map(|r| r.tasks()).collect();
    tasks.sort();
    tasks.dedup();
    let mut out = Vec::new();
    for kind in [MetricKind::Mse, MetricKind::Sdtw] {
        for t in &tasks {
            out.push(Metric::Task {
                task: t.clone(),
                channel: "composite".to_string(),
                kind,
            });
        }
    }
    out
}

fn test_cells(row: &ImpactRow) -> [String; 4] {
    match row.test {
        Stat::Defined(t) => [
            t.usable.to_string(),
            t.test.statistic().to_string(),
            t.test.p_value.to_string(),
            (t.test.p_value < ALPHA).to_string(),
        ],
        Stat::Undefined(u) => [0.to_string(), u.to_string(), u.to_string(), "false".to_string()],
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes `impact.csv`, `duration.csv`, `divergence.csv`,
/// `correlation.csv` and one SVG chart per metric plus divergence and
/// duration charts into `out`.
pub fn write_report(records: &[VariationRecord], out: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to report on".into()));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let metrics = task_metrics(records);
    let rows = impact_report(records, &metrics);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let [n, w, p, sig] = test_cells(r);
            vec![r.variable.to_string(), r.metric.label(), r.impact.cell(), n, w, p, sig]
        })
        .collect();
    let header = [
        "variable",
        "metric",
        "impact",
        "pairs",
        "statistic",
        "p_value",
        "significant",
    ];
    write_csv(&out.join("impact.csv"), &header, &table)?;

    for metric in &metrics {
        let bars: Vec<(String, Option<f64>, bool)> = rows
            .iter()
            .filter(|r| &r.metric == metric)
            .map(|r| (r.variable.to_string(), r.impact.value(), r.significant(ALPHA)))
            .collect();
        let name = metric.label().replace(['/', '@'], "_");
        let svg = bar_chart(&format!("Impact on {}", metric.label()), "impact", &bars);
        fs::write(out.join(format!("impact_{name}.svg")), svg).map_err(Error::io(out))?;
    }

    let mut duration_rows = Vec::new();
    let mut duration_bars = Vec::new();
    for a in Indicator::ALL {
        let (imp, test) = duration_impact(records, a);
        let row = ImpactRow {
            variable: a,
            metric: Metric::Duration,
            impact: imp,
            test,
        };
        let [n, w, p, sig] = test_cells(&row);
        duration_bars.push((a.to_string(), imp.value(), row.significant(ALPHA)));
        duration_rows.push(vec![a.to_string(), imp.cell(), n, w, p, sig]);
    }
    write_csv(
        &out.join("duration.csv"),
        &[
            "variable",
            "impact_seconds",
            "pairs",
            "statistic",
            "p_value",
            "significant",
        ],
        &duration_rows,
    )?;
    fs::write(
        out.join("duration.svg"),
        bar_chart("Impact on summed epoch time", "seconds", &duration_bars),
    )
    .map_err(Error::io(out))?;

    let mut div_rows = Vec::new();
    let mut div_bars = Vec::new();
    for a in Indicator::ALL {
        let all = divergence_probability(records, a, &[]);
        let excl = if a == Indicator::AC1 {
            all
        } else {
            divergence_probability(records, a, &[Indicator::AC1])
        };
        div_bars.push((a.to_string(), all.value(), false));
        div_rows.push(vec![a.to_string(), all.cell(), excl.cell()]);
    }
    let diverged = records.iter().filter(|r| r.diverged).count();
    div_rows.push(vec![
        "any".to_string(),
        (diverged as f64 / records.len() as f64).to_string(),
        String::new(),
    ]);
    write_csv(
        &out.join("divergence.csv"),
        &["variable", "p_diverge", "p_diverge_without_AC1"],
        &div_rows,
    )?;
    fs::write(
        out.join("divergence.svg"),
        bar_chart("P(diverge | variable)", "probability", &div_bars),
    )
    .map_err(Error::io(out))?;

    let mse: Vec<Metric> = metrics
        .iter()
        .filter(|m| {
            matches!(
                m,
                Metric::Task {
                    kind: MetricKind::Mse,
                    ..
                }
            )
        })
        .cloned()
        .collect();
    let corr = correlation_matrix(records, &mse);
    let mut corr_rows = Vec::new();
    for (m, row) in mse.iter().zip(&corr) {
        let mut cells = vec![m.label()];
        cells.extend(row.iter().map(Stat::cell));
        corr_rows.push(cells);
    }
    let labels: Vec<String> = mse.iter().map(Metric::label).collect();
    let mut header = vec!["metric"];
    header.extend(labels.iter().map(String::as_str));
    write_csv(&out.join("correlation.csv"), &header, &corr_rows)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Vertical bars around a zero line; undefined values are drawn as a gap
/// with an `n/a` label, significant bars are filled darker.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, Option<f64>, bool)]) -> String {
    let (w, h) = (60.0 + 40.0 * bars.len().max(1) as f64, 320.0);
    let (top, bottom, left) = (40.0, 260.0, 50.0);
    let lo = bars.iter().filter_map(|b| b.1).fold(0.0f64, f64::min);
    let hi = bars.iter().filter_map(|b| b.1).fold(0.0f64, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| bottom - (v - lo) / span * (bottom - top);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{z}" x2="{}" y2="{z}" stroke="black"/>"#,
        w - 10.0,
        z = y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(y_label)
    );
    for (v, anchor) in [(hi, "end"), (lo, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="{anchor}">{v:.3e}</text>"#,
            left - 4.0,
            y(v) + 4.0
        );
    }
    for (i, (label, value, strong)) in bars.iter().enumerate() {
        let x = left + 10.0 + 40.0 * i as f64;
        match value {
            Some(v) => {
                let (y0, y1) = (y(0.0), y(*v));
                let fill = if *strong { "#1f4e79" } else { "#9dc3e6" };
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{}" width="28" height="{}" fill="{fill}"/>"#,
                    y0.min(y1),
                    (y1 - y0).abs()
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">n/a</text>"#,
                    x + 14.0,
                    y(0.0) - 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x + 14.0,
            bottom + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
