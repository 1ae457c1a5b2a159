//! The variational encoder pair, its attention heads and the factorization
//! decoder.

mod attention;
mod config;
mod encoder;
mod params;
mod sparse;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{attention_pool, attention_weights, AttentionHead, Candidates, RATIO_EPS};
pub use config::{AttentionMode, AttentionNorm, Hyperparams, LatentInput, Schedule};
pub use encoder::{
    decode, elbo_loss, kl_diag_gauss, reparameterize, KlTerm, Posterior, PosteriorBatch,
    SideEncoder, VAR_FLOOR,
};
pub use params::{Activation, Linear, Mlp, ParamId, ParamStore};
pub use sparse::{averaged_embeddings, sparse_matmul, SparseRows};

use crate::data::SparseRatingMatrix;
use crate::error::{Error, Result};
use crate::ndgrad::{Matrix, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// `n×k` table of i.i.d. `N(mu, sigma²)` draws.
pub fn init_embeddings<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("init sigma must be positive, got {sigma}")));
    }
    Ok(Matrix::random_normal(n, k, mu, sigma, rng))
}

/// Rows per chunk when encoding a whole side without gradients.
const INFER_CHUNK: usize = 256;

/// Both encoders and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub hp: Hyperparams,
    pub n_users: usize,
    pub n_items: usize,
    pub store: ParamStore,
    pub user: SideEncoder,
    pub item: SideEncoder,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        hp: &Hyperparams,
        n_users: usize,
        n_items: usize,
        rng: &mut R,
    ) -> Result<Model> {
        hp.validate()?;
        if n_users == 0 || n_items == 0 {
            return Err(Error::Empty("model needs at least one user and one item".into()));
        }
        let mut store = ParamStore::default();
        let user = SideEncoder::new(&mut store, "user", n_items, hp, rng);
        let item = SideEncoder::new(&mut store, "item", n_users, hp, rng);
        Ok(Model {
            hp: hp.clone(),
            n_users,
            n_items,
            store,
            user,
            item,
        })
    }

    /// Rebuilds a model from saved tensors; names and shapes must match.
    pub fn from_tensors(
        hp: &Hyperparams,
        n_users: usize,
        n_items: usize,
        tensors: Vec<(String, Matrix)>,
    ) -> Result<Model> {
        let mut model = Model::new(hp, n_users, n_items, &mut ChaCha8Rng::seed_from_u64(0))?;
        if tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        let names = model.store.names().to_vec();
        for (k, (name, value)) in tensors.into_iter().enumerate() {
            let slot = &mut model.store.values_mut()[k];
            if name != names[k] || value.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k}: found `{name}` {:?}, expected `{}` {:?}",
                    value.shape(),
                    names[k],
                    slot.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not finite")));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        self.store
            .names()
            .iter()
            .cloned()
            .zip(self.store.values().iter().cloned())
            .collect()
    }

    pub fn encoder(&self, side: Side) -> &SideEncoder {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    /// Posterior mean and variance for `rows`, without gradients.
    pub fn infer(
        &self,
        side: Side,
        rows: &[usize],
        oriented: &SparseRatingMatrix,
        counterpart: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let post = self
            .encoder(side)
            .encode(&mut tape, &vars, &self.hp, rows, oriented, counterpart)?;
        Ok((tape.value(post.mu).clone(), tape.value(post.var).clone()))
    }

    /// Posterior means and variances for every entity of `side`, computed in
    /// parallel chunks.
    pub fn infer_all(
        &self,
        side: Side,
        oriented: &SparseRatingMatrix,
        counterpart: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        let n = oriented.n_users();
        let chunks: Vec<Vec<usize>> = (0..n)
            .collect::<Vec<_>>()
            .chunks(INFER_CHUNK)
            .map(<[usize]>::to_vec)
            .collect();
        let parts = chunks
            .par_iter()
            .map(|rows| self.infer(side, rows, oriented, counterpart))
            .collect::<Result<Vec<_>>>()?;
        let k = self.hp.k;
        let mut mu = Vec::with_capacity(n * k);
        let mut var = Vec::with_capacity(n * k);
        for (m, v) in parts {
            mu.extend_from_slice(m.as_slice());
            var.extend_from_slice(v.as_slice());
        }
        Ok((Matrix::from_vec(n, k, mu)?, Matrix::from_vec(n, k, var)?))
    }
}
