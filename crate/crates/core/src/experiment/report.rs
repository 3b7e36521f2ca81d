use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_file_name, ExperimentConfig, ExperimentError, PlanSet, Result, SkippedSubgroup};
use crate::data::SleepStage;
use crate::metrics::{kappa_improvement, mean_metrics, round_points, Aggregation, MeanMetrics, MetricsReport};
use crate::stratify::{StratificationAxis, SubgroupKey};
use crate::train::{RunKind, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub subgroup: Option<SubgroupKey>,
    /// Subjects in the subgroup, or in the cohort for the baseline.
    pub subjects: usize,
    pub folds: usize,
    pub metrics: MeanMetrics,
    /// The Phase-1 checkpoints scored on the same test subjects.
    pub paired_baseline: Option<MeanMetrics>,
    /// Kappa gain over the cohort baseline, in points.
    pub improvement_points: Option<f64>,
    /// Run files this row was computed from.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub name: String,
    pub title: String,
    pub axes: Vec<StratificationAxis>,
    /// Baseline first, then subgroups in axis order.
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkippedSubgroup>,
}

impl ReportTable {
    pub fn requested(&self) -> usize {
        self.axes.iter().map(|a| a.keys().len()).sum()
    }

    fn has_improvement(&self) -> bool {
        self.rows.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_id: String,
    pub aggregation: Aggregation,
    pub baseline: ReportRow,
    pub tables: Vec<ReportTable>,
}

fn reports_of(results: &[&RunResult], aggregation: Aggregation, paired: bool) -> Vec<MetricsReport> {
    let evals = results.iter().filter_map(|r| if paired { r.baseline_evaluation.as_ref() } else { Some(&r.evaluation) });
    match aggregation {
        Aggregation::PooledPerFold => evals.map(|e| e.report.clone()).collect(),
        Aggregation::PerSubject => evals
            .flat_map(|e| e.per_subject.values().map(|cm| MetricsReport::from_confusion(cm.clone())))
            .collect(),
    }
}

fn row(label: String, subgroup: Option<SubgroupKey>, subjects: usize, results: &[&RunResult], agg: Aggregation) -> ReportRow {
    let metrics = mean_metrics(&reports_of(results, agg, false)).expect("row has results");
    let paired_baseline = mean_metrics(&reports_of(results, agg, true));
    ReportRow {
        label,
        subgroup,
        subjects,
        folds: results.len(),
        metrics,
        paired_baseline,
        improvement_points: None,
        sources: results.iter().map(|r| run_file_name(r)).collect(),
    }
}

/// Aggregates run results into one table per requested axis group. Every
/// requested subgroup ends up either as a row or in `skipped`.
pub fn build_report(cfg: &ExperimentConfig, run_id: &str, plans: &PlanSet, results: &[RunResult]) -> Result<ReportBundle> {
    let agg = cfg.aggregation;
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| run_file_name(r));
    let baseline_runs: Vec<&RunResult> = sorted.iter().copied().filter(|r| r.run == RunKind::Baseline).collect();
    if baseline_runs.is_empty() {
        return Err(ExperimentError::Config("no baseline run results; run pretraining first".into()));
    }
    let cohort_size = plans.phase1.folds.iter().map(|f| f.test.len()).sum();
    let baseline = row("Baseline".into(), None, cohort_size, &baseline_runs, agg);

    let mut by_key: BTreeMap<SubgroupKey, Vec<&RunResult>> = BTreeMap::new();
    for r in &sorted {
        if let RunKind::Subgroup { key } = &r.run {
            by_key.entry(*key).or_default().push(r);
        }
    }

    let single: Vec<StratificationAxis> = cfg.axes.iter().copied().filter(|a| !a.is_two_way()).collect();
    let mut groups: Vec<(String, String, Vec<StratificationAxis>)> = Vec::new();
    if !single.is_empty() {
        groups.push(("single_axis".into(), "Single-axis subgroups".into(), single));
    }
    for &a in cfg.axes.iter().filter(|a| a.is_two_way()) {
        let title = match a {
            StratificationAxis::GenderXAhi => "Gender by AHI severity",
            StratificationAxis::GenderXAge => "Gender by age group",
            _ => "Age group by AHI severity",
        };
        groups.push((a.name().into(), title.into(), vec![a]));
    }
    if groups.is_empty() {
        groups.push(("baseline".into(), "Baseline".into(), Vec::new()));
    }

    let tables = groups
        .into_iter()
        .map(|(name, title, axes)| {
            let mut rows = vec![baseline.clone()];
            let mut skipped = Vec::new();
            for key in axes.iter().flat_map(|a| a.keys()) {
                if let Some(s) = plans.phase2.skipped.iter().find(|s| s.subgroup == key) {
                    skipped.push(s.clone());
                    continue;
                }
                let plan = plans.phase2.plans.iter().find(|p| p.subgroup == key);
                let runs = by_key.get(&key).filter(|r| !r.is_empty());
                match (plan, runs) {
                    (Some(p), Some(runs)) => {
                        let subjects =
                            p.folds.first().map_or(0, |f| f.split.test.len() + f.split.train.len() + f.split.validation.len());
                        let mut r = row(key.label(), Some(key), subjects, runs, agg);
                        r.improvement_points = Some(kappa_improvement(baseline.metrics.kappa, r.metrics.kappa));
                        rows.push(r);
                    }
                    (plan, _) => skipped.push(SkippedSubgroup {
                        subgroup: key,
                        label: key.label(),
                        subjects: 0,
                        reason: if plan.is_some() { "no run results".into() } else { "not planned".into() },
                    }),
                }
            }
            ReportTable { name, title, axes, rows, skipped }
        })
        .collect();
    Ok(ReportBundle { run_id: run_id.to_string(), aggregation: agg, baseline, tables })
}

fn signed(points: f64) -> String {
    let p = round_points(points);
    if p > 0.0 {
        format!("+{p:.1}")
    } else {
        format!("{p:.1}")
    }
}

fn cells(r: &ReportRow) -> Vec<String> {
    let m = &r.metrics;
    let mut c = vec![r.label.clone(), r.subjects.to_string()];
    c.extend([m.accuracy, m.macro_f1, m.kappa].iter().map(|x| format!("{x:.3}")));
    c.extend(m.per_class_f1.iter().map(|x| format!("{x:.3}")));
    c
}

fn header(with_improvement: bool, markdown: bool) -> Vec<String> {
    let mut h: Vec<String> = if markdown {
        ["Subgroup", "n", "Acc", "MF1", "κ"].map(String::from).to_vec()
    } else {
        ["subgroup", "n", "acc", "mf1", "kappa"].map(String::from).to_vec()
    };
    h.extend(SleepStage::ALL.iter().map(|s| if markdown { s.label().to_string() } else { s.label().to_lowercase() }));
    if with_improvement {
        h.push(if markdown { "Δκ (pts)" } else { "improvement_pts" }.to_string());
    }
    h
}

fn markdown(t: &ReportTable) -> String {
    let imp = t.has_improvement();
    let h = header(imp, true);
    let mut out = format!("## {}\n\n| {} |\n|", t.title, h.join(" | "));
    out.push_str("---|");
    out.push_str(&"---:|".repeat(h.len() - 1));
    out.push('\n');
    for r in &t.rows {
        let mut c = cells(r);
        if imp {
            c.push(r.improvement_points.map(signed).unwrap_or_default());
        }
        let _ = writeln!(out, "| {} |", c.join(" | "));
    }
    if !t.skipped.is_empty() {
        out.push_str("\nSkipped:\n\n");
        for s in &t.skipped {
            let _ = writeln!(out, "- {}: {}", s.label, s.reason);
        }
    }
    out
}

fn csv(t: &ReportTable) -> String {
    let imp = t.has_improvement();
    let mut out = header(imp, false).join(",");
    out.push('\n');
    for r in &t.rows {
        let mut c = cells(r);
        if imp {
            c.push(r.improvement_points.map(signed).unwrap_or_default());
        }
        out.push_str(&c.join(","));
        out.push('\n');
    }
    out
}

/// Renders every table as `(file name, contents)`.
pub fn emit_tables(bundle: &ReportBundle, format: ReportFormat) -> Vec<(String, String)> {
    bundle
        .tables
        .iter()
        .map(|t| {
            let text = match format {
                ReportFormat::Markdown => markdown(t),
                ReportFormat::Csv => csv(t),
            };
            (format!("{}.{}", t.name, format.extension()), text)
        })
        .collect()
}
