//! Experiment reports: per-run metrics as a structured record and as an
//! aligned text table, plus cross-run medians.
//!
//! Every metric is a named scalar that may be absent. Absent values are
//! written as `absent` and never as a number, so a report cannot carry a
//! non-finite value by accident.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{
    boundary_disagreement, class_metrics, dense_band_mre, label_examples, median, quartile_accuracy,
    rare_set_stats, BandMre, TailLabel, DEFAULT_BAND,
};
use crate::data::{Dataset2D, GridSpec};
use crate::error::Result;
use crate::nn::MlpModel;
use crate::record::Record;
use crate::train::ExampleTrace;

pub const ABSENT: &str = "absent";

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
}

impl Metric {
    fn new(name: impl Into<String>, value: Option<f64>) -> Self {
        let value = value.filter(|v| v.is_finite());
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub label: String,
    pub metrics: Vec<Metric>,
    /// Metrics that could not be computed, with the reason.
    pub gaps: Vec<String>,
}

impl ExperimentReport {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            metrics: Vec::new(),
            gaps: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Option<f64>) {
        self.metrics.push(Metric::new(name, value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).and_then(|m| m.value)
    }

    /// Classification report for a trained toy model. Without traces the
    /// θ-derived metrics are listed as gaps.
    pub fn for_toy_run(
        label: impl Into<String>,
        model: &MlpModel,
        data: &Dataset2D,
        traces: Option<&[ExampleTrace]>,
    ) -> Result<Self> {
        let mut report = Self::new(label);
        let metrics = class_metrics(model, data, data.num_classes())?;
        report.push("total_accuracy", Some(metrics.total_accuracy));
        report.push("balanced_accuracy", Some(metrics.balanced_accuracy));
        for (k, r) in metrics.per_class_recall.iter().enumerate() {
            report.push(format!("recall.class{k}"), Some(*r));
        }
        report.push(
            "boundary_disagreement",
            Some(boundary_disagreement(model, &data.common, &data.uncommon, GridSpec::evaluation())),
        );

        let Some(traces) = traces.filter(|t| t.iter().any(|t| t.occurrences > 0)) else {
            report.gaps.push("example traces missing: θ-based metrics omitted".into());
            return Ok(report);
        };
        let labels = label_examples(traces, DEFAULT_BAND);
        report.push("examples.visited", Some(labels.labels.len() as f64));
        report.push("examples.unvisited", Some(labels.excluded.len() as f64));
        for l in [TailLabel::Common, TailLabel::Rare, TailLabel::Hard] {
            report.push(format!("tail.{}", l.name()), Some(labels.count(l) as f64));
        }

        let visited: Vec<&ExampleTrace> = traces.iter().filter(|t| t.occurrences > 0).collect();
        let thetas: Vec<f64> = visited.iter().filter_map(|t| t.mean_theta()).collect();
        let correct: Vec<bool> = visited
            .iter()
            .map(|t| model.predict_class(&data.points[t.id]).map(|c| c == data.labels[t.id]))
            .collect::<Result<_>>()?;
        match quartile_accuracy(&thetas, &correct) {
            Ok(q) => {
                for (k, a) in q.accuracies.iter().enumerate() {
                    report.push(format!("quartile{}.accuracy", k + 1), Some(*a));
                }
                report.push("band_correlation", q.correlation_defined.then_some(q.correlation));
                if !q.correlation_defined {
                    report.gaps.push("band_correlation undefined: quartile accuracies have zero variance".into());
                }
                report.push("point_biserial", q.point_biserial);
            }
            Err(e) => report.gaps.push(format!("quartiles unavailable: {e}")),
        }

        let rare = rare_set_stats(&labels, data);
        report.push("rare.empty", Some(rare.empty as u8 as f64));
        for (k, c) in rare.per_class_counts.iter().enumerate() {
            report.push(format!("rare.class{k}"), Some(*c as f64));
        }
        report.push("rare.mean_boundary_distance", rare.rare_mean_distance);
        report.push("all.mean_boundary_distance", rare.all_mean_distance);
        if rare.empty {
            report.gaps.push("rare set is empty".into());
        }
        Ok(report)
    }

    /// Dense report: per-band MRE over the given edges plus the total.
    pub fn for_dense_run(
        label: impl Into<String>,
        predictions: &[f64],
        targets: &[f64],
        mask: &[bool],
        edges: &[f64],
    ) -> Result<Self> {
        let mre = dense_band_mre(predictions, targets, mask, edges)?;
        let mut report = Self::new(label);
        report.add_band_mre(&mre);
        Ok(report)
    }

    pub fn add_band_mre(&mut self, mre: &BandMre) {
        for (k, band) in mre.bands.iter().enumerate() {
            let name = band_name(mre.edges[k], mre.edges[k + 1]);
            self.push(format!("mre.{name}"), *band);
            if band.is_none() {
                self.gaps.push(format!("band {name} has no pixels"));
            }
        }
        self.push("mre.total", mre.total);
    }

    /// Structured form: `report.label`, one key per metric, gaps as a list.
    pub fn to_record(&self) -> Record {
        let mut r = Record::new("experiment-report");
        r.set("report.label", &self.label);
        for m in &self.metrics {
            let key = format!("metric.{}", m.name);
            match m.value {
                Some(v) => r.set(&key, v),
                None => r.set(&key, ABSENT),
            }
        }
        for (k, g) in self.gaps.iter().enumerate() {
            r.set(&format!("gap.{k}"), g);
        }
        r
    }

    pub fn from_record(record: &Record) -> Result<Self> {
        record.expect_kind("experiment-report")?;
        let mut report = Self::new(record.require("report.label")?);
        for key in record.keys() {
            if let Some(name) = key.strip_prefix("metric.") {
                let value = match record.require(key)? {
                    ABSENT => None,
                    _ => Some(record.parse_value::<f64>(key)?),
                };
                report.push(name, value);
            } else if key.starts_with("gap.") {
                report.gaps.push(record.require(key)?.to_string());
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_record().write(path)
    }
}

fn band_name(lo: f64, hi: f64) -> String {
    format!("{lo}-{hi}")
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) if v.fract() == 0.0 && v.abs() < 1e9 => format!("{v:.0}"),
        Some(v) => format!("{v:.4}"),
        None => ABSENT.to_string(),
    }
}

/// Median of each metric across reports, over the reports where it is
/// present. Metric order follows first appearance.
pub fn median_summary(reports: &[ExperimentReport]) -> Vec<Metric> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            if !names.contains(&m.name.as_str()) {
                names.push(&m.name);
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut values: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
            Metric::new(name, median(&mut values))
        })
        .collect()
}

/// Aligned table with one row per metric and one column per report. With
/// `with_median`, a median column is appended when there are two or more
/// reports.
pub fn comparison_table(reports: &[ExperimentReport], with_median: bool) -> String {
    let summary = median_summary(reports);
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    let with_median = with_median && reports.len() > 1;
    if with_median {
        header.push("median".into());
    }
    let mut rows = vec![header];
    for m in &summary {
        let mut row = vec![m.name.clone()];
        row.extend(reports.iter().map(|r| {
            let present = r.metrics.iter().any(|x| x.name == m.name);
            if present {
                fmt_value(r.get(&m.name))
            } else {
                "-".to_string()
            }
        }));
        if with_median {
            row.push(fmt_value(m.value));
        }
        rows.push(row);
    }
    align(&rows)
}

/// Left-aligns the first column and right-aligns the rest.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: &str, acc: f64) -> ExperimentReport {
        let mut r = ExperimentReport::new(label);
        r.push("total_accuracy", Some(acc));
        r.push("band_correlation", None);
        r.gaps.push("band_correlation undefined".into());
        r
    }

    #[test]
    fn non_finite_values_become_absent() {
        let mut r = ExperimentReport::new("x");
        r.push("a", Some(f64::NAN));
        r.push("b", Some(f64::INFINITY));
        assert_eq!(r.get("a"), None);
        let text = r.to_record().to_text();
        assert!(text.contains("metric.a = absent"));
        assert!(!text.to_lowercase().contains("nan") && !text.contains("inf"));
    }

    #[test]
    fn record_round_trip() {
        let r = sample("seed0", 0.9615384615384616);
        let back = ExperimentReport::from_record(&Record::parse(&r.to_record().to_text()).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn medians_skip_absent() {
        let reports = vec![sample("a", 0.1), sample("b", 0.5), sample("c", 0.3)];
        let s = median_summary(&reports);
        assert_eq!(s[0], Metric::new("total_accuracy", Some(0.3)));
        assert_eq!(s[1].value, None);
    }

    #[test]
    fn table_alignment() {
        let t = comparison_table(&[sample("a", 0.1), sample("bb", 0.5)], true);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("metric"));
        assert!(lines[0].ends_with("median"));
        assert!(lines[2].contains("0.1000") && lines[2].ends_with("0.3000"));
        assert!(lines[3].ends_with(ABSENT));
        let single = comparison_table(&[sample("a", 0.1)], true);
        assert!(!single.contains("median"));
    }

    #[test]
    fn dense_report_lists_empty_bands() {
        let targets = [5.0, 45.0];
        let r = ExperimentReport::for_dense_run("d", &targets, &targets, &[true, true], &[0.0, 20.0, 40.0, 60.0]).unwrap();
        assert_eq!(r.get("mre.0-20"), Some(0.0));
        assert_eq!(r.get("mre.20-40"), None);
        assert_eq!(r.gaps, vec!["band 20-40 has no pixels".to_string()]);
        assert_eq!(r.get("mre.total"), Some(0.0));
    }
}
