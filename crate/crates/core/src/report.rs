//! Backbone comparison tables and learning-curve data.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneId;
use crate::domain::DrawingType;
use crate::error::{Error, Result};
use crate::training::{RunManifest, TrainingHistory};

/// Round to six significant digits and print the shortest decimal that
/// parses back to the rounded value.
pub fn format_metric(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("float formatting round-trips");
    format!("{rounded}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backbone: BackboneId,
    pub drawing_type: DrawingType,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl ComparisonRow {
    /// Metrics of the best epoch (highest validation accuracy).
    pub fn from_history(h: &TrainingHistory) -> Result<Self> {
        let best = h
            .best_record()
            .ok_or_else(|| Error::Input(format!("{} {} history has no epochs", h.config.backbone, h.config.drawing_type)))?;
        Ok(Self {
            backbone: h.config.backbone,
            drawing_type: h.config.drawing_type,
            val_accuracy: best.val_accuracy,
            val_loss: best.val_loss,
            best_epoch: h.best_epoch,
            epochs_run: h.epochs_run(),
            stopped_early: h.stopped_early,
        })
    }
}

fn row_order(a: &ComparisonRow, b: &ComparisonRow) -> Ordering {
    b.val_accuracy
        .total_cmp(&a.val_accuracy)
        .then(a.val_loss.total_cmp(&b.val_loss))
        .then(a.backbone.as_str().cmp(b.backbone.as_str()))
        .then(a.best_epoch.cmp(&b.best_epoch))
        .then(a.epochs_run.cmp(&b.epochs_run))
        .then(a.stopped_early.cmp(&b.stopped_early))
}

/// One row per history, best accuracy first, then lower loss, then name.
pub fn compare_backbones(histories: &[TrainingHistory]) -> Result<Vec<ComparisonRow>> {
    let first = histories
        .first()
        .ok_or_else(|| Error::Input("no histories to compare".into()))?;
    let drawing_type = first.config.drawing_type;
    if histories.iter().any(|h| h.config.drawing_type != drawing_type) {
        return Err(Error::Input("histories mix drawing types".into()));
    }
    let mut rows = histories
        .iter()
        .map(ComparisonRow::from_history)
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(row_order);
    Ok(rows)
}

pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "backbone",
        "drawing_type",
        "val_accuracy",
        "val_loss",
        "best_epoch",
        "epochs_run",
        "stopped_early",
    ])?;
    for r in rows {
        w.write_record([
            r.backbone.to_string(),
            r.drawing_type.to_string(),
            format_metric(r.val_accuracy),
            format_metric(r.val_loss),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
            r.stopped_early.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

pub fn curve_file_name(backbone: BackboneId, drawing_type: DrawingType) -> String {
    format!("{backbone}_{drawing_type}.csv")
}

/// Write `<out>/<backbone>_<type>.csv` with columns
/// `epoch,train_accuracy,val_accuracy`, one row per epoch.
pub fn emit_learning_curves(history: &TrainingHistory, out: &Path) -> Result<PathBuf> {
    if history.records.is_empty() {
        return Err(Error::Input("history has no epochs".into()));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join(curve_file_name(history.config.backbone, history.config.drawing_type));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "train_accuracy", "val_accuracy"])?;
    for r in &history.records {
        w.write_record([
            r.epoch.to_string(),
            format_metric(r.train_accuracy),
            format_metric(r.val_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Files written by [`report_runs`].
#[derive(Clone, Debug, Default)]
pub struct ReportOutput {
    pub comparisons: Vec<PathBuf>,
    pub curves: Vec<PathBuf>,
}

fn find_run_manifests(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let candidate = dir.join("run.json");
    if candidate.is_file() {
        found.push(candidate);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        find_run_manifests(&sub, depth - 1, found)?;
    }
    Ok(())
}

/// Collect every `run.json` below `runs` (up to two levels deep) and write
/// `comparison_<type>.csv` plus `curves/<backbone>_<type>.csv` into `out`.
/// Runs trained with the split-before-augment protocol go to
/// `comparison_<type>_split_first.csv` and `curves_split_first/`.
pub fn report_runs(runs: &Path, out: &Path) -> Result<ReportOutput> {
    if !runs.is_dir() {
        return Err(Error::MissingDirectory(runs.to_path_buf()));
    }
    let mut paths = Vec::new();
    find_run_manifests(runs, 2, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("no run.json found under {}", runs.display())));
    }
    let manifests = paths.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out)?;
    let mut output = ReportOutput::default();
    for split_first in [false, true] {
        let suffix = if split_first { "_split_first" } else { "" };
        for t in DrawingType::ALL {
            let histories: Vec<TrainingHistory> = manifests
                .iter()
                .filter(|m| m.split_before_augment == split_first && m.history.config.drawing_type == t)
                .map(|m| m.history.clone())
                .collect();
            if histories.is_empty() {
                continue;
            }
            let rows = compare_backbones(&histories)?;
            let path = out.join(format!("comparison_{t}{suffix}.csv"));
            write_comparison(&rows, &path)?;
            output.comparisons.push(path);
            let curves = out.join(format!("curves{suffix}"));
            for h in &histories {
                output.curves.push(emit_learning_curves(h, &curves)?);
            }
        }
    }
    Ok(output)
}
