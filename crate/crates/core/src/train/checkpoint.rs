use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::state::{Convergence, IterationRecord, TrainState};
use crate::error::{Error, Result};
use crate::eval::Embeddings;
use crate::model::{Hyperparams, Model};
use crate::ndgrad::Matrix;

const FORMAT: &str = "crossvae-checkpoint";
const VERSION: u32 = 1;

/// Serialized form of a [`TrainState`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hyperparams: Hyperparams,
    pub n_users: usize,
    pub n_items: usize,
    pub tensors: Vec<(String, Matrix)>,
    pub user_table: Matrix,
    pub item_table: Matrix,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub convergence: Convergence,
    pub user_batches: Vec<Vec<usize>>,
    pub item_batches: Vec<Vec<usize>>,
    pub best: Option<Embeddings>,
}

impl From<&TrainState> for Checkpoint {
    fn from(s: &TrainState) -> Self {
        Checkpoint {
            format: FORMAT.to_owned(),
            version: VERSION,
            hyperparams: s.model.hp.clone(),
            n_users: s.model.n_users,
            n_items: s.model.n_items,
            tensors: s.model.tensors(),
            user_table: s.user_table.clone(),
            item_table: s.item_table.clone(),
            optimizer: s.optimizer.clone(),
            rng: s.rng.clone(),
            iteration: s.iteration,
            convergence: s.convergence.clone(),
            user_batches: s.user_batches.clone(),
            item_batches: s.item_batches.clone(),
            best: s.best.clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        let model = Model::from_tensors(&self.hyperparams, self.n_users, self.n_items, self.tensors)?;
        let k = self.hyperparams.k;
        if self.user_table.shape() != (self.n_users, k) || self.item_table.shape() != (self.n_items, k) {
            return Err(Error::Checkpoint("embedding table shapes do not match".into()));
        }
        Ok(TrainState {
            model,
            user_table: self.user_table,
            item_table: self.item_table,
            optimizer: self.optimizer,
            rng: self.rng,
            iteration: self.iteration,
            convergence: self.convergence,
            user_batches: self.user_batches,
            item_batches: self.item_batches,
            best: self.best,
            latest: None,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from(state))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::NotFound("checkpoint", path.to_path_buf()));
    }
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.into_state()
}

/// CSV log with one row per outer iteration.
pub struct TrainingLog {
    out: BufWriter<File>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "iteration,train_loss,val_rmse,seconds";

    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", Self::HEADER)?;
        out.flush()?;
        Ok(TrainingLog { out })
    }

    /// Appends to an existing log, or creates one.
    pub fn append_to(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(TrainingLog {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, r: &IterationRecord) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{:.3}",
            r.iteration, r.train_loss, r.val_rmse, r.seconds
        )?;
        self.out.flush()?;
        Ok(())
    }
}
