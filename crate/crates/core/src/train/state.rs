use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::data::{make_batches, DataSplit, SparseRatingMatrix};
use crate::error::{Error, Result};
use crate::eval::{split_rmse, Embeddings};
use crate::model::{
    decode, elbo_loss, init_embeddings, reparameterize, Hyperparams, KlTerm, Model, Schedule,
    Side,
};
use crate::ndgrad::{Matrix, Tape};

/// Minimum validation RMSE drop that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-4;

/// Training views of a split: the train ratings in both orientations plus
/// the validation ratings.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub by_user: SparseRatingMatrix,
    pub by_item: SparseRatingMatrix,
    pub validation: SparseRatingMatrix,
}

impl TrainData {
    pub fn new(split: &DataSplit) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::Empty("training split has no ratings".into()));
        }
        Ok(TrainData {
            by_item: split.train.transpose()?,
            by_user: split.train.clone(),
            validation: split.validation.clone(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.by_user.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.by_user.n_items()
    }
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Convergence {
    pub best_val_rmse: Option<f64>,
    pub best_iteration: usize,
    pub since_improvement: usize,
}

impl Convergence {
    /// Records a validation RMSE; returns whether it improved on the best.
    pub fn update(&mut self, iteration: usize, val_rmse: f64) -> bool {
        let improved = match self.best_val_rmse {
            None => val_rmse.is_finite(),
            Some(best) => val_rmse < best - IMPROVEMENT_EPS,
        };
        if improved {
            self.best_val_rmse = Some(val_rmse);
            self.best_iteration = iteration;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        improved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Patience,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop(StopReason),
}

/// Stop at the iteration cap, or after `max(patience, 1)` consecutive
/// iterations without improvement.
pub fn check_convergence(iteration: usize, conv: &Convergence, hp: &Hyperparams) -> Decision {
    if iteration >= hp.max_iterations {
        Decision::Stop(StopReason::MaxIterations)
    } else if conv.since_improvement >= hp.patience.max(1) {
        Decision::Stop(StopReason::Patience)
    } else {
        Decision::Continue
    }
}

/// Summary of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Summed block losses divided by the number of training ratings.
    pub train_loss: f64,
    pub val_rmse: f64,
    pub seconds: f64,
    pub improved: bool,
    /// Fingerprints of the tables fed to the latent paths during the iteration.
    pub inputs: (String, String),
    /// Fingerprints of the tables resampled at its end.
    pub outputs: (String, String),
    /// Per-tensor flag: received at least one gradient step.
    pub updated: Vec<bool>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub user_table: Matrix,
    pub item_table: Matrix,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub convergence: Convergence,
    pub user_batches: Vec<Vec<usize>>,
    pub item_batches: Vec<Vec<usize>>,
    /// Posterior means at the best validation RMSE so far.
    pub best: Option<Embeddings>,
    /// Posterior means after the latest [`TrainState::step`]. Derived, so not
    /// checkpointed.
    pub latest: Option<Embeddings>,
}

/// Short content hash of a table.
pub fn table_fingerprint(m: &Matrix) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct Block {
    target: Matrix,
    mask: Matrix,
    user_weights: Matrix,
    item_weights: Matrix,
    observed: usize,
}

/// Dense target and mask of a user-batch × item-batch block, with each
/// entity's share of its training ratings that fall inside the block.
fn block(by_user: &SparseRatingMatrix, by_item: &SparseRatingMatrix, users: &[usize], items: &[usize], pos: &mut [usize]) -> Block {
    for (c, &i) in items.iter().enumerate() {
        pos[i] = c;
    }
    let mut target = Matrix::zeros(users.len(), items.len());
    let mut mask = Matrix::zeros(users.len(), items.len());
    let mut user_weights = Matrix::zeros(users.len(), 1);
    let mut item_counts = vec![0usize; items.len()];
    let mut observed = 0;
    for (r, &u) in users.iter().enumerate() {
        let (cols, vals) = by_user.user_row(u);
        let mut here = 0usize;
        for (&i, &v) in cols.iter().zip(vals) {
            let c = pos[i];
            if c != usize::MAX {
                target.set(r, c, v);
                mask.set(r, c, 1.0);
                item_counts[c] += 1;
                here += 1;
            }
        }
        if here > 0 {
            user_weights.set(r, 0, here as f64 / cols.len() as f64);
        }
        observed += here;
    }
    let mut item_weights = Matrix::zeros(items.len(), 1);
    for (c, &i) in items.iter().enumerate() {
        if item_counts[c] > 0 {
            item_weights.set(c, 0, item_counts[c] as f64 / by_item.user_degree(i) as f64);
        }
        pos[i] = usize::MAX;
    }
    Block {
        target,
        mask,
        user_weights,
        item_weights,
        observed,
    }
}

/// Dense rating rows of `rows` against every counterpart.
fn full_rows(oriented: &SparseRatingMatrix, rows: &[usize]) -> (Matrix, Matrix, usize) {
    let mut target = Matrix::zeros(rows.len(), oriented.n_items());
    let mut mask = Matrix::zeros(rows.len(), oriented.n_items());
    let mut observed = 0;
    for (r, &e) in rows.iter().enumerate() {
        let (cols, vals) = oriented.user_row(e);
        for (&c, &v) in cols.iter().zip(vals) {
            target.set(r, c, v);
            mask.set(r, c, 1.0);
        }
        observed += cols.len();
    }
    (target, mask, observed)
}

fn describe(tape: &Tape<'_>, what: &[(&str, crate::ndgrad::Var)]) -> String {
    what.iter()
        .map(|(name, v)| {
            let m = tape.value(*v);
            let bad = m.as_slice().iter().filter(|x| !x.is_finite()).count();
            format!("{name}: {bad} non-finite of {}, max |x| {:e}", m.len(), m.max_abs())
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl TrainState {
    /// Parameters, embedding tables and batch partitions, all seeded from
    /// `hp.seed`.
    pub fn new(hp: &Hyperparams, data: &TrainData) -> Result<Self> {
        hp.validate()?;
        let (n_users, n_items) = (data.n_users(), data.n_items());
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let model = Model::new(hp, n_users, n_items, &mut rng)?;
        let user_table = init_embeddings(n_users, hp.k, hp.init_mu, hp.init_sigma, &mut rng)?;
        let item_table = init_embeddings(n_items, hp.k, hp.init_mu, hp.init_sigma, &mut rng)?;
        let (bu, bi) = hp.batch_sizes(n_users, n_items);
        let user_batches = make_batches(n_users, bu, rng.random())?;
        let item_batches = make_batches(n_items, bi, rng.random())?;
        let optimizer = Adam::new(
            hp.lr,
            hp.adam_beta1,
            hp.adam_beta2,
            hp.adam_eps,
            model.store.values(),
        );
        Ok(TrainState {
            model,
            user_table,
            item_table,
            optimizer,
            rng,
            iteration: 0,
            convergence: Convergence::default(),
            user_batches,
            item_batches,
            best: None,
            latest: None,
        })
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.model.hp
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.n_users() != self.model.n_users || data.n_items() != self.model.n_items {
            return Err(Error::dim(
                "train",
                format!(
                    "state for {}x{}, data is {}x{}",
                    self.model.n_users,
                    self.model.n_items,
                    data.n_users(),
                    data.n_items()
                ),
            ));
        }
        Ok(())
    }

    fn noise(&mut self, rows: usize) -> Matrix {
        Matrix::random_normal(rows, self.model.hp.k, 0.0, 1.0, &mut self.rng)
    }

    /// Forward, backward and optimizer step on one block. Returns the loss
    /// value.
    fn nested_step(
        &mut self,
        data: &TrainData,
        users: &[usize],
        items: &[usize],
        blk: Block,
        updated: &mut [bool],
    ) -> Result<f64> {
        let u_noise = self.noise(users.len());
        let v_noise = self.noise(items.len());
        let hp = self.model.hp.clone();
        let (loss_value, grads) = {
            let mut tape = Tape::new();
            let vars = self.model.store.bind(&mut tape, true);
            let up = self
                .model
                .user
                .encode(&mut tape, &vars, &hp, users, &data.by_user, &self.item_table)?;
            let ip = self
                .model
                .item
                .encode(&mut tape, &vars, &hp, items, &data.by_item, &self.user_table)?;
            let us = reparameterize(&mut tape, up.mu, up.var, u_noise)?;
            let vs = reparameterize(&mut tape, ip.mu, ip.var, v_noise)?;
            let pred = decode(&mut tape, us, vs)?;
            let target = tape.constant(blk.target);
            let mask = tape.constant(blk.mask);
            let loss = elbo_loss(
                &mut tape,
                pred,
                target,
                mask,
                &[
                    KlTerm {
                        posterior: up,
                        beta: hp.beta_u,
                        weights: Some(blk.user_weights),
                    },
                    KlTerm {
                        posterior: ip,
                        beta: hp.beta_v,
                        weights: Some(blk.item_weights),
                    },
                ],
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration + 1,
                    user_batch: users.to_vec(),
                    item_batch: items.to_vec(),
                    detail: describe(
                        &tape,
                        &[("user mu", up.mu), ("user var", up.var), ("item mu", ip.mu), ("item var", ip.var), ("pred", pred)],
                    ),
                });
            }
            tape.backward(loss).map_err(|e| Error::NonFiniteLoss {
                iteration: self.iteration + 1,
                user_batch: users.to_vec(),
                item_batch: items.to_vec(),
                detail: e.to_string(),
            })?;
            let grads: Vec<Option<Matrix>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
            (value, grads)
        };
        for (flag, g) in updated.iter_mut().zip(&grads) {
            *flag |= g.is_some();
        }
        self.optimizer.step(self.model.store.values_mut(), &grads)?;
        Ok(loss_value)
    }

    /// One side's batch decoded against the fixed counterpart table.
    fn sequential_step(
        &mut self,
        data: &TrainData,
        side: Side,
        rows: &[usize],
        updated: &mut [bool],
    ) -> Result<(f64, usize)> {
        let oriented = match side {
            Side::User => &data.by_user,
            Side::Item => &data.by_item,
        };
        let (target, mask, observed) = full_rows(oriented, rows);
        if observed == 0 {
            return Ok((0.0, 0));
        }
        let noise = self.noise(rows.len());
        let hp = self.model.hp.clone();
        let beta = match side {
            Side::User => hp.beta_u,
            Side::Item => hp.beta_v,
        };
        let counterpart = match side {
            Side::User => &self.item_table,
            Side::Item => &self.user_table,
        };
        let (value, grads) = {
            let mut tape = Tape::new();
            let vars = self.model.store.bind(&mut tape, true);
            let post = self
                .model
                .encoder(side)
                .encode(&mut tape, &vars, &hp, rows, oriented, counterpart)?;
            let sample = reparameterize(&mut tape, post.mu, post.var, noise)?;
            let fixed = tape.constant_ref(counterpart);
            let pred = decode(&mut tape, sample, fixed)?;
            let target = tape.constant(target);
            let mask = tape.constant(mask);
            let loss = elbo_loss(
                &mut tape,
                pred,
                target,
                mask,
                &[KlTerm {
                    posterior: post,
                    beta,
                    weights: None,
                }],
            )?;
            let value = tape.value(loss).item();
            let (ub, ib) = match side {
                Side::User => (rows.to_vec(), Vec::new()),
                Side::Item => (Vec::new(), rows.to_vec()),
            };
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration + 1,
                    user_batch: ub,
                    item_batch: ib,
                    detail: describe(&tape, &[("mu", post.mu), ("var", post.var), ("pred", pred)]),
                });
            }
            tape.backward(loss).map_err(|e| Error::NonFiniteLoss {
                iteration: self.iteration + 1,
                user_batch: ub.clone(),
                item_batch: ib.clone(),
                detail: e.to_string(),
            })?;
            let grads: Vec<Option<Matrix>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
            (value, grads)
        };
        for (flag, g) in updated.iter_mut().zip(&grads) {
            *flag |= g.is_some();
        }
        self.optimizer.step(self.model.store.values_mut(), &grads)?;
        Ok((value, observed))
    }

    /// Batch updates over every block followed by resampling both tables from
    /// the updated encoders. Counterpart tables stay fixed during the batch
    /// loop. Returns the mean loss per training rating and per-tensor update
    /// flags.
    pub fn run_outer_iteration(&mut self, data: &TrainData) -> Result<(f64, Vec<bool>)> {
        self.check_data(data)?;
        let mut updated = vec![false; self.model.store.len()];
        let mut total = 0.0;
        match self.model.hp.schedule {
            Schedule::Nested => {
                let mut pos = vec![usize::MAX; data.n_items()];
                let user_batches = self.user_batches.clone();
                let item_batches = self.item_batches.clone();
                for users in &user_batches {
                    for items in &item_batches {
                        let blk = block(&data.by_user, &data.by_item, users, items, &mut pos);
                        if blk.observed == 0 {
                            continue;
                        }
                        total += self.nested_step(data, users, items, blk, &mut updated)?;
                    }
                }
            }
            Schedule::Sequential => {
                for users in self.user_batches.clone() {
                    total += self.sequential_step(data, Side::User, &users, &mut updated)?.0;
                }
                for items in self.item_batches.clone() {
                    total += self.sequential_step(data, Side::Item, &items, &mut updated)?.0;
                }
            }
        }
        self.resample(data)?;
        self.iteration += 1;
        Ok((total / data.by_user.nnz() as f64, updated))
    }

    /// Draws fresh tables from the posteriors, with both encoders reading
    /// the previous tables.
    fn resample(&mut self, data: &TrainData) -> Result<()> {
        let (mu_u, var_u) = self.model.infer_all(Side::User, &data.by_user, &self.item_table)?;
        let (mu_v, var_v) = self.model.infer_all(Side::Item, &data.by_item, &self.user_table)?;
        let eu = self.noise(mu_u.rows());
        let ev = self.noise(mu_v.rows());
        let draw = |mu: &Matrix, var: &Matrix, eps: &Matrix| {
            let sd = var.map(|v| v.max(crate::model::VAR_FLOOR).sqrt());
            let mut out = sd.zip_map(eps, |s, e| s * e);
            out.add_assign(mu);
            out
        };
        self.user_table = draw(&mu_u, &var_u, &eu);
        self.item_table = draw(&mu_v, &var_v, &ev);
        if !self.user_table.is_finite() || !self.item_table.is_finite() {
            return Err(Error::Numeric(format!(
                "resampled embedding tables are not finite after iteration {}",
                self.iteration + 1
            )));
        }
        Ok(())
    }

    /// Posterior means of both sides given the current tables.
    pub fn posterior_means(&self, data: &TrainData) -> Result<Embeddings> {
        self.check_data(data)?;
        let users = self.model.infer_all(Side::User, &data.by_user, &self.item_table)?.0;
        let items = self.model.infer_all(Side::Item, &data.by_item, &self.user_table)?.0;
        Ok(Embeddings { users, items })
    }

    /// Expected loss per training rating under the current posteriors, in
    /// closed form: for independent `u ~ N(a, diag s)`, `v ~ N(b, diag t)`,
    /// `E[(u·v − r)²] = (a·b − r)² + Σ_k (a_k² t_k + b_k² s_k + s_k t_k)`.
    pub fn objective(&self, data: &TrainData) -> Result<f64> {
        self.check_data(data)?;
        let (mu_u, var_u) = self.model.infer_all(Side::User, &data.by_user, &self.item_table)?;
        let (mu_v, var_v) = self.model.infer_all(Side::Item, &data.by_item, &self.user_table)?;
        let floor = |v: f64| v.max(crate::model::VAR_FLOOR);
        let mut sq = 0.0;
        for r in data.by_user.triples() {
            let (a, s) = (mu_u.row(r.user), var_u.row(r.user));
            let (b, t) = (mu_v.row(r.item), var_v.row(r.item));
            let mean = crate::ndgrad::dot(a, b) - r.value;
            let spread: f64 = (0..a.len())
                .map(|k| {
                    let (s, t) = (floor(s[k]), floor(t[k]));
                    a[k] * a[k] * t + b[k] * b[k] * s + s * t
                })
                .sum();
            sq += mean * mean + spread;
        }
        let kl = |mu: &Matrix, var: &Matrix| -> f64 {
            mu.as_slice()
                .iter()
                .zip(var.as_slice())
                .map(|(&m, &v)| {
                    let v = floor(v);
                    0.5 * (v + m * m - 1.0 - v.ln())
                })
                .sum()
        };
        let hp = &self.model.hp;
        let total = sq + hp.beta_u * kl(&mu_u, &var_u) + hp.beta_v * kl(&mu_v, &var_v);
        Ok(total / data.by_user.nnz() as f64)
    }

    /// One outer iteration, validation and convergence bookkeeping.
    pub fn step(&mut self, data: &TrainData) -> Result<IterationRecord> {
        let start = Instant::now();
        let inputs = (table_fingerprint(&self.user_table), table_fingerprint(&self.item_table));
        let (train_loss, updated) = self.run_outer_iteration(data)?;
        let means = self.posterior_means(data)?;
        let val_rmse = if data.validation.is_empty() {
            split_rmse(&means, &data.by_user)?
        } else {
            split_rmse(&means, &data.validation)?
        };
        let improved = self.convergence.update(self.iteration, val_rmse);
        if improved {
            self.best = Some(means.clone());
        }
        self.latest = Some(means);
        Ok(IterationRecord {
            iteration: self.iteration,
            train_loss,
            val_rmse,
            seconds: start.elapsed().as_secs_f64(),
            improved,
            inputs,
            outputs: (table_fingerprint(&self.user_table), table_fingerprint(&self.item_table)),
            updated,
        })
    }

    pub fn decision(&self) -> Decision {
        check_convergence(self.iteration, &self.convergence, &self.model.hp)
    }

    /// Best posterior means, or the current ones if no iteration has run.
    pub fn best_embeddings(&self, data: &TrainData) -> Result<Embeddings> {
        match &self.best {
            Some(b) => Ok(b.clone()),
            None => self.posterior_means(data),
        }
    }
}
