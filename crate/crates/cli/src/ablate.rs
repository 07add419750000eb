//! Ablation sweeps over loss modes, batch sizes and distillation weights.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use msd_core::data::PairedDataset;
use msd_core::losses::LossMode;
use msd_core::trainer::{train, RunStatus};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::{load_data, run_eval, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub mode: LossMode,
    pub primary_batch: usize,
    pub sub_batch: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Cell {
    /// Sort key; zero-padded so lexical order matches numeric order.
    pub fn key(&self) -> String {
        format!(
            "{}/N{:04}/b{:03}/alpha{:.2}/beta{:.2}",
            self.mode, self.primary_batch, self.sub_batch, self.alpha, self.beta
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub cells: Vec<Cell>,
}

fn default_epochs() -> usize {
    20
}

/// Distillation-weight rows at `N = 256` plus each mode at batch 16 and at
/// 512 accumulated from sub-batches of 16.
pub fn default_grid() -> Grid {
    let mut cells = Vec::new();
    for (alpha, beta) in [(0.0, 1.0), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (1.0, 0.0)] {
        cells.push(Cell { mode: LossMode::Msd, primary_batch: 256, sub_batch: 16, alpha, beta });
    }
    for mode in [LossMode::Msd, LossMode::Onehot, LossMode::End2end] {
        for n in [16, 512] {
            cells.push(Cell { mode, primary_batch: n, sub_batch: 16, alpha: 0.3, beta: 0.7 });
        }
    }
    Grid { epochs: default_epochs(), cells }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub key: String,
    pub mode: LossMode,
    pub primary_batch: usize,
    pub sub_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `completed`, `training_failed`, or `error`.
    pub status: String,
    pub detail: String,
    pub final_loss: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub zero_shot_auc: Option<f64>,
    pub probe_auc: Option<f64>,
}

fn run_cell(cell: &Cell, epochs: usize, base: &RunConfigFile, ds: &PairedDataset) -> CellResult {
    let mut cfg = base.clone();
    cfg.loss.mode = cell.mode;
    cfg.loss.alpha = cell.alpha;
    cfg.loss.beta = cell.beta;
    cfg.train.primary_batch = cell.primary_batch;
    cfg.train.sub_batch = cell.sub_batch;
    cfg.train.epochs = epochs;
    cfg.train.queue_capacity = cfg.train.queue_capacity.max(cell.primary_batch);
    let mut result = CellResult {
        key: cell.key(),
        mode: cell.mode,
        primary_batch: cell.primary_batch,
        sub_batch: cell.sub_batch,
        alpha: cell.alpha,
        beta: cell.beta,
        status: "error".into(),
        detail: String::new(),
        final_loss: None,
        recall_at_1: None,
        recall_at_5: None,
        recall_at_10: None,
        zero_shot_auc: None,
        probe_auc: None,
    };
    let outcome = match cfg.validate().and_then(|_| Ok(train(&cfg.train_config(), &cfg.gen_config(), ds, None, false)?)) {
        Ok(o) => o,
        Err(e) => {
            result.detail = e.message().to_string();
            return result;
        }
    };
    result.final_loss = outcome.epochs.last().and_then(|r| r.loss);
    if outcome.status == RunStatus::TrainingFailed {
        result.status = "training_failed".into();
        result.detail = outcome.state.failure.unwrap_or_default();
        return result;
    }
    match run_eval(ds, &outcome.state.model, &cfg) {
        Ok(report) => {
            result.status = "completed".into();
            result.recall_at_1 = report.recall_at.get("1").copied();
            result.recall_at_5 = report.recall_at.get("5").copied();
            result.recall_at_10 = report.recall_at.get("10").copied();
            result.zero_shot_auc = Some(report.zero_shot.macro_auc);
            result.probe_auc = Some(report.probe.macro_auc);
        }
        Err(e) => result.detail = e.message().to_string(),
    }
    result
}

/// Trains every cell on up to `jobs` threads. Results come back sorted by key.
pub fn run_grid(grid: &Grid, base: &RunConfigFile, ds: &PairedDataset, jobs: usize) -> Vec<CellResult> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(grid.cells.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, grid.cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = grid.cells.get(i) else { break };
                let r = run_cell(cell, grid.epochs, base, ds);
                results.lock().expect("no worker panics while holding the lock").push(r);
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    results.sort_by(|a, b| a.key.cmp(&b.key));
    results
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(results: &[CellResult]) -> String {
    let header = ["cell", "status", "loss", "R@1", "R@5", "R@10", "zs_auc", "probe_auc"];
    let rows: Vec<[String; 8]> = results
        .iter()
        .map(|r| {
            [
                r.key.clone(),
                r.status.clone(),
                fmt_opt(r.final_loss),
                fmt_opt(r.recall_at_1),
                fmt_opt(r.recall_at_5),
                fmt_opt(r.recall_at_10),
                fmt_opt(r.zero_shot_auc),
                fmt_opt(r.probe_auc),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    for row in &rows {
        line(&mut out, row);
    }
    out
}

fn write_csv(path: &Path, results: &[CellResult]) -> Result<(), CliError> {
    let to_io = |e: csv::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    for r in results {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_ablate(grid: Option<&Path>, data: &Path, out: &Path, config: Option<&Path>, jobs: usize) -> Result<(), CliError> {
    let grid = match grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("cannot read {}: {e}", p.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| CliError::Config(format!("grid error at `{}`: {}", e.path(), e.inner())))?
        }
        None => default_grid(),
    };
    let base = match config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::with_seed(0),
    };
    let ds = load_data(data)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    let results = run_grid(&grid, &base, &ds, jobs);
    let table = render_table(&results);
    std::fs::write(out.join("table.txt"), &table)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))?;
    write_csv(&out.join("table.csv"), &results)?;
    print!("{table}");
    Ok(())
}
