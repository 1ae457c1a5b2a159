use std::rc::Rc;

use rand::Rng;

use super::attention::{AttentionHead, Candidates};
use super::config::{AttentionMode, Hyperparams, LatentInput};
use super::params::{Activation, Mlp, ParamStore};
use super::sparse::{averaged_embeddings, sparse_matmul, SparseRows};
use crate::data::SparseRatingMatrix;
use crate::error::{Error, Result};
use crate::ndgrad::{Matrix, Tape, Var};

/// Lower bound applied to variances before `sqrt` and `ln`.
pub const VAR_FLOOR: f64 = 1e-6;

/// Posterior parameters for one batch of entities, as tape values.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    pub mu: Var,
    pub var: Var,
}

/// A posterior together with its reparameterized draw.
#[derive(Debug, Clone)]
pub struct PosteriorBatch {
    pub rows: Vec<usize>,
    pub mu: Var,
    pub var: Var,
    pub sample: Var,
    pub noise: Matrix,
}

impl PosteriorBatch {
    pub fn posterior(&self) -> Posterior {
        Posterior {
            mu: self.mu,
            var: self.var,
        }
    }
}

/// Encoder for one side (users or items).
///
/// The observed path reads the entity's rating row, the latent path reads the
/// counterpart embeddings of what it rated. Their outputs are concatenated and
/// fed to separate mean and variance networks, optionally followed by
/// attention over counterpart embeddings.
#[derive(Debug, Clone)]
pub struct SideEncoder {
    pub observed: Option<Mlp>,
    pub latent: Option<Mlp>,
    pub fusion_mean: Mlp,
    pub fusion_var: Mlp,
    pub attention_mean: Option<AttentionHead>,
    pub attention_var: Option<AttentionHead>,
}

impl SideEncoder {
    /// `n_counterpart` is `J` for the user side and `I` for the item side.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_counterpart: usize,
        hp: &Hyperparams,
        rng: &mut R,
    ) -> Self {
        let path_widths: Vec<usize> = (0..hp.layers_prime)
            .map(|l| hp.hidden_width(l))
            .chain([hp.k_prime])
            .collect();
        let observed = hp.data_input.then(|| {
            Mlp::new(
                store,
                &format!("{name}.observed"),
                n_counterpart,
                &path_widths,
                Activation::Relu,
                rng,
            )
        });
        let latent = hp.cross_feedback.then(|| {
            let input = match hp.latent_input {
                LatentInput::Concat => n_counterpart * hp.k,
                LatentInput::Average => hp.k,
            };
            Mlp::new(
                store,
                &format!("{name}.latent"),
                input,
                &path_widths,
                Activation::Relu,
                rng,
            )
        });
        let fused = hp.k_prime * (usize::from(hp.data_input) + usize::from(hp.cross_feedback));
        let fusion_widths: Vec<usize> = (0..hp.layers)
            .map(|l| hp.hidden_width(l))
            .chain([hp.k])
            .collect();
        let fusion_mean = Mlp::new(
            store,
            &format!("{name}.fusion_mean"),
            fused,
            &fusion_widths,
            Activation::Linear,
            rng,
        );
        let fusion_var = Mlp::new(
            store,
            &format!("{name}.fusion_var"),
            fused,
            &fusion_widths,
            Activation::Sigmoid,
            rng,
        );
        let attend = hp.attention != AttentionMode::Off;
        let attention_mean =
            attend.then(|| AttentionHead::new(store, &format!("{name}.attention_mean"), hp.k, rng));
        let attention_var =
            attend.then(|| AttentionHead::new(store, &format!("{name}.attention_var"), hp.k, rng));
        SideEncoder {
            observed,
            latent,
            fusion_mean,
            fusion_var,
            attention_mean,
            attention_var,
        }
    }

    /// Latent-path output for `rows`; `counterpart` is treated as a constant.
    pub fn latent_path<'p>(
        &self,
        tape: &mut Tape<'p>,
        vars: &[Var],
        hp: &Hyperparams,
        rows: &[usize],
        oriented: &SparseRatingMatrix,
        counterpart: &Matrix,
    ) -> Result<Option<Var>> {
        let Some(mlp) = &self.latent else {
            return Ok(None);
        };
        if rows.is_empty() {
            return Err(Error::Empty("latent path called with an empty batch".into()));
        }
        let out = match hp.latent_input {
            LatentInput::Concat => {
                let z = SparseRows::masked_embeddings(oriented, rows, counterpart);
                let first = sparse_matmul(tape, z, vars[mlp.first_weight().index()])?;
                mlp.forward_from_first_product(tape, vars, first)?
            }
            LatentInput::Average => {
                let z = tape.constant(averaged_embeddings(oriented, rows, counterpart));
                mlp.forward(tape, vars, z)?
            }
        };
        Ok(Some(out))
    }

    /// Posterior mean and variance for `rows` (`oriented` has one row per
    /// entity of this side).
    pub fn encode<'p>(
        &self,
        tape: &mut Tape<'p>,
        vars: &[Var],
        hp: &Hyperparams,
        rows: &[usize],
        oriented: &SparseRatingMatrix,
        counterpart: &Matrix,
    ) -> Result<Posterior> {
        if rows.is_empty() {
            return Err(Error::Empty("encoder called with an empty batch".into()));
        }
        if counterpart.rows() != oriented.n_items() || counterpart.cols() != hp.k {
            return Err(Error::dim(
                "encode",
                format!(
                    "counterpart table {:?} for {} counterparts and K={}",
                    counterpart.shape(),
                    oriented.n_items(),
                    hp.k
                ),
            ));
        }
        let h = match &self.observed {
            Some(mlp) => {
                let x = SparseRows::ratings(oriented, rows);
                let first = sparse_matmul(tape, x, vars[mlp.first_weight().index()])?;
                Some(mlp.forward_from_first_product(tape, vars, first)?)
            }
            None => None,
        };
        let g = self.latent_path(tape, vars, hp, rows, oriented, counterpart)?;
        let s = match (h, g) {
            (Some(h), Some(g)) => tape.concat_cols(h, g)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => unreachable!("validated: at least one input path"),
        };
        let mut mu = self.fusion_mean.forward(tape, vars, s)?;
        let var = if let (Some(am), Some(av)) = (&self.attention_mean, &self.attention_var) {
            let cands = match hp.attention {
                AttentionMode::Local => {
                    Candidates::local(rows.iter().map(|&r| oriented.user_row(r).0.to_vec()).collect())
                }
                _ => Candidates::global(rows.len()),
            };
            let table = Rc::new(counterpart.clone());
            mu = am.forward(tape, vars, mu, &table, cands.clone(), hp.attention_norm)?;
            // The variance head attends on its logits; the sigmoid comes last.
            let logits = self.fusion_var.forward_pre_output(tape, vars, s)?;
            let v = av.forward(tape, vars, logits, &table, cands, hp.attention_norm)?;
            tape.sigmoid(v)
        } else {
            self.fusion_var.forward(tape, vars, s)?
        };
        Ok(Posterior { mu, var })
    }
}

/// `mu + sqrt(max(var, floor)) ⊙ noise`; `noise` is a constant.
pub fn reparameterize<'p>(tape: &mut Tape<'p>, mu: Var, var: Var, noise: Matrix) -> Result<Var> {
    if tape.value(var).as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("reparameterize: non-positive variance".into()));
    }
    let v = tape.clamp_min(var, VAR_FLOOR);
    let sd = tape.sqrt(v)?;
    let scaled = tape.mul_const(sd, noise)?;
    tape.add(mu, scaled)
}

/// Per-row `KL(N(mu, diag var) ‖ N(0, I))` as a `B×1` value.
pub fn kl_diag_gauss<'p>(tape: &mut Tape<'p>, mu: Var, var: Var) -> Result<Var> {
    if tape.value(var).as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("kl_diag_gauss: non-positive variance".into()));
    }
    let v = tape.clamp_min(var, VAR_FLOOR);
    let mu2 = tape.square(mu);
    let a = tape.add(v, mu2)?;
    let lv = tape.ln(v)?;
    let d = tape.sub(a, lv)?;
    let d = tape.add_scalar(d, -1.0);
    let rows = tape.row_sums(d);
    Ok(tape.scale(rows, 0.5))
}

/// Rating reconstruction `U·Vᵀ`.
pub fn decode<'p>(tape: &mut Tape<'p>, u: Var, v: Var) -> Result<Var> {
    tape.matmul_t(u, v)
}

/// One KL term of the loss.
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub posterior: Posterior,
    pub beta: f64,
    /// Per-row multipliers (`B×1`); `None` weighs every row by one.
    pub weights: Option<Matrix>,
}

/// Masked squared reconstruction error plus weighted KL terms.
pub fn elbo_loss<'p>(
    tape: &mut Tape<'p>,
    pred: Var,
    target: Var,
    mask: Var,
    kl_terms: &[KlTerm],
) -> Result<Var> {
    let mut loss = tape.masked_sq_error(pred, target, mask)?;
    for term in kl_terms {
        if term.beta == 0.0 {
            continue;
        }
        let mut kl = kl_diag_gauss(tape, term.posterior.mu, term.posterior.var)?;
        if let Some(w) = &term.weights {
            kl = tape.mul_const(kl, w.clone())?;
        }
        let total = tape.sum(kl);
        let scaled = tape.scale(total, term.beta);
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}
