//! Grid sweeps: one `run` per cell, resumable, aggregated into one table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{Cell, SweepConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{cmd_run, Summary};
use crate::output::{read_file, write_file, Stamp, Stamped};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Canonical JSON of the overrides; rows are sorted by it.
    pub key: String,
    pub cell: Cell,
    /// Directory under `cells/`, named by the cell config hash.
    pub dir: String,
    pub status: CellStatus,
    pub error: Option<String>,
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub grid_keys: Vec<String>,
    pub cells: Vec<CellResult>,
}

pub struct SweepResult {
    pub output: SweepOutput,
    pub table: PathBuf,
    /// Cells that were already complete on disk.
    pub reused: usize,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn value_field(v: &Value) -> String {
    match v {
        Value::String(s) => csv_field(s),
        other => csv_field(&other.to_string()),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell");
        for k in &self.grid_keys {
            out.push(',');
            out.push_str(&csv_field(k));
        }
        out.push_str(",status,eta,rounds_run,rounds_to_target,tuned_rounds,final_train_loss,final_test_loss,final_test_acc,plateau,effective_p,zeta2_hat,sigma2_hat\n");
        for c in &self.cells {
            out.push_str(&c.dir);
            for k in &self.grid_keys {
                out.push(',');
                out.push_str(&c.cell.get(k).map(value_field).unwrap_or_default());
            }
            let s = c.summary.as_ref();
            let primary = s.and_then(|s| {
                s.targets.iter().min_by(|a, b| a.threshold.total_cmp(&b.threshold)).and_then(|t| t.tuned_rounds)
            });
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{},{},{},{},{},{},{}",
                c.status.as_str(),
                opt(s.map(|s| s.eta)),
                opt(s.map(|s| s.run.rounds_run)),
                opt(s.and_then(|s| s.run.rounds_to_target)),
                opt(primary),
                opt(s.and_then(|s| s.run.final_train_loss)),
                opt(s.and_then(|s| s.run.final_test_loss)),
                opt(s.and_then(|s| s.run.final_test_acc)),
                opt(s.and_then(|s| s.plateau)),
                opt(s.map(|s| s.shuffle.effective_p)),
                opt(s.and_then(|s| s.zeta2_hat)),
                opt(s.and_then(|s| s.sigma2_hat)),
            );
        }
        out
    }

    /// Cells whose overrides include every `(path, value)` pair given.
    pub fn select(&self, filter: &[(&str, Value)]) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| filter.iter().all(|(k, v)| c.cell.get(*k) == Some(v))).collect()
    }
}

fn load_summary(path: &Path, hash: &str) -> Option<Summary> {
    let text = read_file(path).ok()?;
    let stamped: Stamped<Summary> = serde_json::from_str(&text).ok()?;
    (stamped.stamp.config_hash == hash).then_some(stamped.body)
}

fn run_cell(sweep: &SweepConfig, cell: &Cell, root: &Path) -> (CellResult, bool) {
    let key = serde_json::to_string(cell).expect("cell serializes");
    let cfg = match sweep.cell_config(cell) {
        Ok(cfg) => cfg,
        Err(e) => {
            let dir = hex::encode(&Sha256::digest(key.as_bytes())[..8]);
            let res = CellResult { key, cell: cell.clone(), dir, status: CellStatus::Failed, error: Some(e.to_string()), summary: None };
            return (res, false);
        }
    };
    let hash = cfg.hash();
    let dir = hash[..16].to_string();
    let out = root.join("cells").join(&dir);
    let summary_path = out.join(&cfg.outputs.summary);
    let mut result = CellResult { key, cell: cell.clone(), dir, status: CellStatus::Ok, error: None, summary: None };
    if let Some(summary) = load_summary(&summary_path, &hash) {
        result.status = if summary.run.diverged { CellStatus::Diverged } else { CellStatus::Ok };
        result.summary = Some(summary);
        return (result, true);
    }
    match cmd_run(&cfg, &out) {
        Ok(r) => result.summary = Some(r.summary),
        Err(CliError::Diverged(msg)) => {
            result.status = CellStatus::Diverged;
            result.error = Some(msg);
            result.summary = load_summary(&summary_path, &hash);
        }
        Err(e) => {
            log::error!("cell {}: {e}", result.key);
            result.status = CellStatus::Failed;
            result.error = Some(e.to_string());
        }
    }
    (result, false)
}

/// Runs every cell not already complete under `out/cells`, in parallel on the
/// current rayon pool, and writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(sweep: &SweepConfig, seed: Option<u64>, out: &Path) -> CliResult<SweepResult> {
    let mut sweep = sweep.clone();
    if let Some(seed) = seed {
        crate::config::set_path(&mut sweep.base, "seed", Value::from(seed))?;
    }
    let cells = sweep.cells();
    if cells.is_empty() {
        return Err(CliError::Config("grid: a value list is empty".into()));
    }
    let mut results: Vec<(CellResult, bool)> = cells.par_iter().map(|c| run_cell(&sweep, c, out)).collect();
    results.sort_by(|a, b| a.0.key.cmp(&b.0.key));
    let reused = results.iter().filter(|r| r.1).count();
    let output = SweepOutput {
        grid_keys: sweep.grid.keys().cloned().collect(),
        cells: results.into_iter().map(|r| r.0).collect(),
    };
    let json = serde_json::to_string(&sweep).expect("sweep serializes");
    let stamp = Stamp {
        config_hash: hex::encode(Sha256::digest(json.as_bytes())),
        seed: sweep.base.get("seed").and_then(Value::as_u64).unwrap_or(0),
    };
    let table = write_file(out, "sweep.csv", &stamp.csv(&output.to_csv()))?;
    write_file(out, "sweep.json", &stamp.json(&output)?)?;
    Ok(SweepResult { output, table, reused })
}
