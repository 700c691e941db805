use diffprobe::Parallelism;
use serde::Serialize;

use crate::config::Cell;
use crate::error::Result;
use crate::evaluate::{evaluate_cell, Context};
use crate::store::{RunRecord, RunStore};

#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepSummary {
    /// Cells evaluated by this call.
    pub executed: Vec<Cell>,
    /// Cells found already recorded.
    pub reused: Vec<Cell>,
    /// Cells whose evaluation failed, with the error.
    pub failed: Vec<(Cell, String)>,
    /// Recorded cells with at least one failed attack.
    pub partial: Vec<Cell>,
    /// Grid cells left for a later call.
    pub remaining: usize,
}

impl SweepSummary {
    pub fn complete(&self) -> bool {
        self.failed.is_empty() && self.partial.is_empty() && self.remaining == 0
    }
}

/// Evaluates every grid cell that has no record yet, at most `max_cells`
/// of them. Cells run concurrently under `par`; a failing cell does not
/// stop the others.
pub fn run_sweep(ctx: &Context, store: &RunStore, max_cells: Option<usize>, par: Parallelism) -> Result<SweepSummary> {
    let grid = ctx.grid()?;
    let mut summary = SweepSummary::default();
    let mut todo = Vec::new();
    for cell in grid {
        match store.get(&cell)? {
            Some(r) => {
                if r.partial {
                    summary.partial.push(cell);
                }
                summary.reused.push(cell);
            }
            None => todo.push(cell),
        }
    }
    let take = max_cells.unwrap_or(todo.len()).min(todo.len());
    summary.remaining = todo.len() - take;
    log::info!(
        "sweep: {} cells recorded, {} to run now, {} left after",
        summary.reused.len(),
        take,
        summary.remaining
    );
    let results = par.map(&todo[..take], |_, cell| evaluate_cell(ctx, store, cell, par));
    for (cell, r) in todo.into_iter().zip(results) {
        match r {
            Ok((rec, _)) => {
                if rec.partial {
                    summary.partial.push(cell);
                }
                summary.executed.push(cell);
            }
            Err(e) => {
                log::error!("{cell}: {e}");
                summary.failed.push((cell, e.to_string()));
            }
        }
    }
    store.rebuild_index()?;
    Ok(summary)
}

/// Records of the current grid only, sorted by cell.
pub fn grid_records(ctx: &Context, store: &RunStore) -> Result<Vec<RunRecord>> {
    let grid = ctx.grid()?;
    Ok(store.records()?.into_iter().filter(|r| grid.contains(&r.cell)).collect())
}
