//! Human-readable summaries and plot-ready series built from the run ledger.
//!
//! Series files hold one point per line, `x y ci_lo ci_hi`, tab-separated,
//! after a `#` header line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::evaluation::{
    compare_reports, roc_curve, BoxStats, CurvePoint, MetricsReport, OutcomeReport, Summary, TTest,
};
use crate::experiment::{read_ledger, Family, LedgerEntry, Run, RunRecord};

fn cell(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.sd),
        None => "n/a".into(),
    }
}

/// Model × {AUROC, specificity, sensitivity, Youden}, mean ± sd.
pub fn metrics_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>5} {:>15} {:>15} {:>15} {:>15}",
        "model", "runs", "AUROC", "specificity", "sensitivity", "youden"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>15} {:>15} {:>15} {:>15}",
            r.model,
            r.runs.len(),
            cell(r.auroc),
            cell(r.specificity),
            cell(r.sensitivity),
            cell(r.youden)
        );
    }
    out
}

fn series_header() -> String {
    "# x\ty\tci_lo\tci_hi\n".into()
}

/// Pooled test-electrode ROC over every run of a family.
pub fn roc_series(records: &[RunRecord]) -> String {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for r in records {
        for p in &r.test_scores {
            scores.extend_from_slice(&p.scores);
            labels.extend_from_slice(&p.labels);
        }
    }
    let mut out = series_header();
    for (x, y) in roc_curve(&scores, &labels) {
        let _ = writeln!(out, "{x}\t{y}\t{y}\t{y}");
    }
    out
}

pub fn ablation_series(points: &[CurvePoint]) -> String {
    let mut out = series_header();
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.n, p.mean_auroc, p.ci_lo, p.ci_hi);
    }
    out
}

/// One line per group: `group n median q1 q3 whisker_lo whisker_hi`.
pub fn box_series(outcome: &OutcomeReport) -> String {
    let mut out = String::from("# group\tn\tmedian\tq1\tq3\twhisker_lo\twhisker_hi\n");
    let mut row = |name: &str, b: &Option<BoxStats>| {
        if let Some(b) = b {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.n, b.median, b.q1, b.q3, b.whisker_lo, b.whisker_hi
            );
        }
    };
    row("seizure_free", &outcome.seizure_free);
    row("not_seizure_free", &outcome.not_seizure_free);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerSummary {
    /// latest completed record per run, sorted
    pub records: BTreeMap<Family, Vec<RunRecord>>,
    /// (family, run, error) of failures without a later success
    pub failures: Vec<(Family, Run, String)>,
    pub reports: Vec<MetricsReport>,
}

pub fn summarize_ledger_entries(entries: &[LedgerEntry]) -> LedgerSummary {
    let mut latest: BTreeMap<(Family, Run), std::result::Result<RunRecord, String>> = BTreeMap::new();
    for e in entries {
        match e {
            LedgerEntry::Completed { record } => {
                latest.insert((record.family, record.run), Ok((**record).clone()));
            }
            LedgerEntry::Failed { family, run, error, .. } => {
                latest.insert((*family, *run), Err(error.clone()));
            }
        }
    }
    let mut records: BTreeMap<Family, Vec<RunRecord>> = BTreeMap::new();
    let mut failures = Vec::new();
    for ((f, r), v) in latest {
        match v {
            Ok(rec) => records.entry(f).or_default().push(rec),
            Err(e) => failures.push((f, r, e)),
        }
    }
    let reports = records
        .iter()
        .map(|(f, rs)| MetricsReport::from_runs(f.as_str(), &rs.iter().map(RunRecord::run_metrics).collect::<Vec<_>>()))
        .collect();
    LedgerSummary {
        records,
        failures,
        reports,
    }
}

pub fn summarize_ledger(out: &Path) -> Result<LedgerSummary> {
    Ok(summarize_ledger_entries(&read_ledger(out)?))
}

/// Mean train and test patient counts over `records`.
pub fn partition_sizes(records: &[RunRecord]) -> (f64, f64) {
    let n = records.len().max(1) as f64;
    let tr: usize = records.iter().map(|r| r.roles.train.len()).sum();
    let te: usize = records.iter().map(|r| r.roles.test.len()).sum();
    (tr as f64 / n, te as f64 / n)
}

/// Corrected t-test of `a` over `b` when both cover the same runs.
pub fn paired_comparison(summary: &LedgerSummary, a: Family, b: Family) -> Option<TTest> {
    let ra = summary.records.get(&a)?;
    let rb = summary.records.get(&b)?;
    let runs = |rs: &[RunRecord]| rs.iter().map(|r| r.run).collect::<Vec<_>>();
    if runs(ra) != runs(rb) || ra.len() < 2 {
        return None;
    }
    let report = |f: Family| summary.reports.iter().find(|r| r.model == f.as_str());
    let (n_train, n_test) = partition_sizes(ra);
    compare_reports(report(a)?, report(b)?, n_train, n_test).ok()
}

/// Table, pairwise tests, outcome stratification and gaps as text.
pub fn render_summary(summary: &LedgerSummary) -> String {
    if summary.records.is_empty() && summary.failures.is_empty() {
        return "no runs\n".into();
    }
    let mut out = metrics_table(&summary.reports);
    let pairs = [
        (Family::CnnTransformer, Family::CnnConvergent),
        (Family::CnnConvergent, Family::CnnDivergent),
        (Family::CnnTransformer, Family::CnnDivergent),
    ];
    let mut header = false;
    for (a, b) in pairs {
        if let Some(t) = paired_comparison(summary, a, b) {
            if !header {
                out += "\ncorrected t-test (one-sided, per-run mean AUROC)\n";
                header = true;
            }
            let _ = writeln!(out, "  {a} > {b}: t = {:.4}, df = {}, p = {:.4}", t.t, t.df, t.p);
        }
    }
    for r in &summary.reports {
        match &r.outcome.mann_whitney {
            Some(mw) => {
                let med = |b: &Option<BoxStats>| b.map_or(f64::NAN, |b| b.median);
                let _ = writeln!(
                    out,
                    "\n{}: outcome medians seizure-free {:.3} / not {:.3}, Mann-Whitney U = {}, p = {:.4}",
                    r.model,
                    med(&r.outcome.seizure_free),
                    med(&r.outcome.not_seizure_free),
                    mw.u_a,
                    mw.p
                );
            }
            None => {
                let _ = writeln!(out, "\n{}: outcome comparison not applicable (empty group)", r.model);
            }
        }
    }
    if !summary.failures.is_empty() {
        out += "\nincomplete runs\n";
        for (f, r, e) in &summary.failures {
            let _ = writeln!(out, "  {f} {r}: {e}");
        }
    }
    out
}
