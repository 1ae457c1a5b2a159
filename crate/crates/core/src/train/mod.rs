//! Alternating variational training with cross-fed embedding tables.

mod adam;
mod checkpoint;
mod state;

#[cfg(test)]
mod tests;

use std::path::Path;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingLog};
pub use state::{
    check_convergence, table_fingerprint, Convergence, Decision, IterationRecord, StopReason,
    TrainData, TrainState, IMPROVEMENT_EPS,
};

use crate::error::Result;

/// Runs outer iterations until [`TrainState::decision`] says stop. Each
/// record is appended to `log` (when given) and then passed to `hook`.
/// A state that has already run iterations appends to an existing log.
pub fn fit(
    state: &mut TrainState,
    data: &TrainData,
    log: Option<&Path>,
    mut hook: impl FnMut(&IterationRecord, &TrainState) -> Result<()>,
) -> Result<Vec<IterationRecord>> {
    let open = if state.iteration > 0 {
        TrainingLog::append_to
    } else {
        TrainingLog::create
    };
    let mut writer = log.map(open).transpose()?;
    let mut records = Vec::new();
    while state.decision() == Decision::Continue {
        let rec = state.step(data)?;
        log::info!(
            "iteration {}: loss {:.5} val rmse {:.5}{}",
            rec.iteration,
            rec.train_loss,
            rec.val_rmse,
            if rec.improved { " *" } else { "" }
        );
        if let Some(w) = writer.as_mut() {
            w.append(&rec)?;
        }
        hook(&rec, state)?;
        records.push(rec);
    }
    Ok(records)
}
