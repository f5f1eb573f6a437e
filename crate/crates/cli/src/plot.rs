//! Plot-ready CSV tables derived from a metrics stream.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dtvg_core::experiment::summarize;
use dtvg_core::store_io::{MetricsRecord, RecordKind};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Writes `curves.csv` (one row per step record), `selection.csv` (one row
/// per regroup and source, for membership heat maps), `final.csv` (test
/// accuracy per run) and `summary.csv` (mean and sd per mode). Returns the
/// paths written.
pub fn write_plot_data(records: &[MetricsRecord], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let curves = out.join("curves.csv");
    let mut w = writer(&curves)?;
    w.write_record(["run", "mode", "seed", "step", "train_loss", "val_accuracy", "group_size", "ts", "kc", "greedy_objective", "exact_objective"])?;
    for r in records.iter().filter(|r| r.kind == RecordKind::Step) {
        w.write_record([
            r.run.clone(),
            r.mode.clone(),
            r.seed.to_string(),
            r.step.to_string(),
            opt(r.train_loss),
            opt(r.val_accuracy),
            r.selected.len().to_string(),
            opt(r.ts),
            opt(r.kc),
            opt(r.greedy_objective),
            opt(r.exact_objective),
        ])?;
    }
    w.flush()?;

    let selection = out.join("selection.csv");
    let sources: BTreeSet<&str> = records.iter().flat_map(|r| r.selected.iter().map(String::as_str)).collect();
    let mut w = writer(&selection)?;
    w.write_record(["run", "step", "source", "selected"])?;
    for r in records.iter().filter(|r| r.regrouped) {
        for s in &sources {
            let on = r.selected.iter().any(|x| x == s);
            w.write_record([r.run.as_str(), &r.step.to_string(), s, if on { "1" } else { "0" }])?;
        }
    }
    w.flush()?;

    let finals = out.join("final.csv");
    let mut w = writer(&finals)?;
    w.write_record(["run", "mode", "seed", "best_step", "val_accuracy", "test_accuracy"])?;
    for r in records.iter().filter(|r| r.kind == RecordKind::Final) {
        w.write_record([r.run.clone(), r.mode.clone(), r.seed.to_string(), r.step.to_string(), opt(r.val_accuracy), opt(r.test_accuracy)])?;
    }
    w.flush()?;

    let summary = out.join("summary.csv");
    let mut w = writer(&summary)?;
    w.write_record(["mode", "runs", "mean_test_accuracy", "sd_test_accuracy"])?;
    for s in summarize(records) {
        w.write_record([s.mode, s.runs.to_string(), s.mean.to_string(), s.sd.to_string()])?;
    }
    w.flush()?;

    Ok(vec![curves, selection, finals, summary])
}
