//! Experiment reports as CSV tables and JSON documents.

use std::path::Path;

use anyhow::Result;
use precond_core::experiments::ExperimentReport;
use serde_json::{json, Value};

use crate::io::{write_json, Cell, CsvTable, Header};

const RUN_COLUMNS: [&str; 9] = [
    "method",
    "run",
    "seed",
    "training_error",
    "test_error",
    "distance_to_truth",
    "accuracy",
    "distance_to_min_norm",
    "steps",
];

const SUMMARY_COLUMNS: [&str; 8] = [
    "method",
    "aggregation",
    "runs",
    "training_error",
    "test_error",
    "distance_to_truth",
    "accuracy",
    "distance_to_min_norm",
];

pub fn runs_table(report: &ExperimentReport) -> CsvTable {
    let mut t = CsvTable::new(&RUN_COLUMNS);
    for r in &report.records {
        let m = &r.metrics;
        t.push([
            Cell::from(r.method.as_str()),
            r.run.into(),
            r.seed.into(),
            m.training_error.into(),
            m.test_error.into(),
            m.distance_to_truth.into(),
            m.accuracy.into(),
            m.distance_to_min_norm.into(),
            m.steps.into(),
        ]);
    }
    t
}

pub fn summary_table(report: &ExperimentReport) -> CsvTable {
    let mut t = CsvTable::new(&SUMMARY_COLUMNS);
    for s in &report.summaries {
        t.push([
            Cell::from(s.method.as_str()),
            s.aggregation.name().into(),
            s.runs.into(),
            s.training_error.into(),
            s.test_error.into(),
            s.distance_to_truth.into(),
            s.accuracy.into(),
            s.distance_to_min_norm.into(),
        ]);
    }
    t
}

pub fn report_json(report: &ExperimentReport) -> Value {
    let records: Vec<Value> = report
        .records
        .iter()
        .map(|r| {
            let m = &r.metrics;
            json!({
                "method": r.method,
                "run": r.run,
                "seed": r.seed,
                "metrics": {
                    "training_error": m.training_error,
                    "test_error": m.test_error,
                    "distance_to_truth": m.distance_to_truth,
                    "accuracy": m.accuracy,
                    "distance_to_min_norm": m.distance_to_min_norm,
                    "steps": m.steps,
                },
            })
        })
        .collect();
    let summaries: Vec<Value> = report
        .summaries
        .iter()
        .map(|s| {
            json!({
                "method": s.method,
                "aggregation": s.aggregation.name(),
                "runs": s.runs,
                "metrics": {
                    "training_error": s.training_error,
                    "test_error": s.test_error,
                    "distance_to_truth": s.distance_to_truth,
                    "accuracy": s.accuracy,
                    "distance_to_min_norm": s.distance_to_min_norm,
                },
            })
        })
        .collect();
    json!({ "seeds": report.seeds, "records": records, "summaries": summaries })
}

/// Writes `<stem>_runs.csv`, `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_report(dir: &Path, stem: &str, header: &Header, report: &ExperimentReport) -> Result<Vec<String>> {
    let files = [format!("{stem}_runs.csv"), format!("{stem}.csv"), format!("{stem}.json")];
    runs_table(report).write(&dir.join(&files[0]), header)?;
    summary_table(report).write(&dir.join(&files[1]), header)?;
    write_json(&dir.join(&files[2]), header, report_json(report))?;
    Ok(files.to_vec())
}

/// The structured record printed on standard error for a numerical failure.
pub fn error_record(method: Option<&str>, error: &precond_core::Error) -> Value {
    let debug = format!("{error:?}");
    let kind = debug.split([' ', '{', '(']).next().unwrap_or("Unknown").to_owned();
    let mut rec = json!({
        "error": "numerical",
        "kind": kind,
        "message": error.to_string(),
    });
    if let Some(m) = method {
        rec["method"] = m.into();
    }
    if let precond_core::Error::Diverged { step, norm } = error {
        rec["step"] = (*step).into();
        rec["norm"] = (*norm).into();
    }
    rec
}
