//! Exhaustive grid search with repeats and a worker pool.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::{GridCell, GridSpace};
use crate::harness::train::{self, RunRecord, RECORD_FILE};

pub const INDEX_FILE: &str = "grid_index.jsonl";
pub const SUMMARY_FILE: &str = "grid_summary.json";

/// One line of the append-only grid index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub cell: String,
    pub repeat: usize,
    pub run_id: String,
    pub status: RunStatus,
    pub final_validation_accuracy: Option<f64>,
    pub record: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: String,
    pub cell: GridCell,
    pub status: RunStatus,
    pub completed: usize,
    pub failed: usize,
    /// Mean final-epoch validation accuracy over the completed repeats.
    pub mean_validation_accuracy: Option<f64>,
    pub mean_best_validation_accuracy: Option<f64>,
    pub run_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub repeats: usize,
    pub cells: Vec<CellSummary>,
    /// Key of the cell with the highest mean validation accuracy; ties go to
    /// the earliest cell.
    pub best: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub summary: GridSummary,
    /// Records in (cell, repeat) order; failed runs are absent.
    pub records: Vec<RunRecord>,
}

/// Index of the highest mean, first wins on ties.
pub fn best_cell(means: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in means.iter().enumerate() {
        if let Some(m) = *m {
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i, m));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs every cell `repeats` times (seed = base seed + repeat) on the given
/// splits. With `out`, each run is persisted under `<out>/<run_id>/`, every
/// finished run is appended to `<out>/grid_index.jsonl`, and the summary is
/// written to `<out>/grid_summary.json`. A failing run is recorded and the
/// rest continue.
pub fn grid_search(
    space: &GridSpace,
    repeats: usize,
    workers: usize,
    train_set: &Dataset,
    validation: &Dataset,
    out: Option<&Path>,
) -> Result<GridOutput> {
    space.validate()?;
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let cells = space.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..repeats).map(move |r| (c, r))).collect();
    for &(c, r) in &jobs {
        space.config_for(&cells[c], r).validate()?;
    }
    let index = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(INDEX_FILE);
            let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some(Mutex::new((file, path)))
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<RunRecord, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(c, r)) = jobs.get(j) else { break };
        let config = space.config_for(&cells[c], r);
        let run_dir: Option<PathBuf> = out.map(|d| d.join(config.run_id()));
        let outcome = train::train(&config, train_set, validation)
            .map_err(|e| train::annotate(e, &config))
            .and_then(|mut output| {
                if let Some(dir) = &run_dir {
                    train::persist(&mut output, dir)?;
                }
                Ok(output.record)
            })
            .map_err(|e| e.to_string());
        if let Some(index) = &index {
            let entry = IndexEntry {
                cell: cells[c].key(),
                repeat: r,
                run_id: config.run_id(),
                status: if outcome.is_ok() { RunStatus::Ok } else { RunStatus::Failed },
                final_validation_accuracy: outcome.as_ref().ok().map(|rec| rec.final_validation_accuracy),
                record: outcome.as_ref().ok().and(run_dir.as_ref()).map(|_| format!("{}/{RECORD_FILE}", config.run_id())),
                error: outcome.as_ref().err().cloned(),
            };
            let line = serde_json::to_string(&entry).expect("index entries serialize");
            let mut guard = index.lock().expect("index lock");
            let (file, path) = &mut *guard;
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                eprintln!("warning: could not append to {}: {e}", path.display());
            }
        }
        results.lock().expect("results lock")[j] = Some(outcome);
    };
    let workers = workers.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(worker);
        }
        worker();
    });

    let results: Vec<_> = results.into_inner().expect("results lock").into_iter().map(|o| o.expect("every job ran")).collect();
    let mut summaries = Vec::with_capacity(cells.len());
    let mut records = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let mut finals = Vec::new();
        let mut bests = Vec::new();
        let mut run_ids = Vec::new();
        let mut failed = 0;
        for r in 0..repeats {
            run_ids.push(space.config_for(cell, r).run_id());
            match &results[c * repeats + r] {
                Ok(rec) => {
                    finals.push(rec.final_validation_accuracy);
                    bests.push(rec.best_validation_accuracy);
                    records.push(rec.clone());
                }
                Err(_) => failed += 1,
            }
        }
        summaries.push(CellSummary {
            key: cell.key(),
            cell: cell.clone(),
            status: if finals.is_empty() { RunStatus::Failed } else { RunStatus::Ok },
            completed: finals.len(),
            failed,
            mean_validation_accuracy: mean(&finals),
            mean_best_validation_accuracy: mean(&bests),
            run_ids,
        });
    }
    let means: Vec<_> = summaries.iter().map(|s| s.mean_validation_accuracy).collect();
    let best = best_cell(&means).map(|i| summaries[i].key.clone());
    let summary = GridSummary { repeats, cells: summaries, best };
    if let Some(dir) = out {
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summaries serialize");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(GridOutput { summary, records })
}
