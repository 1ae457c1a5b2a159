use std::rc::Rc;

use rand::Rng;

use super::config::AttentionNorm;
use super::params::{Activation, Linear, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ndgrad::{dot, Matrix, Tape, Var};

/// Below this magnitude the ratio denominator is treated as zero.
pub const RATIO_EPS: f64 = 1e-8;

/// Counterpart rows each query attends to. `None` means every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    rows: Vec<Option<Vec<usize>>>,
}

impl Candidates {
    pub fn global(batch: usize) -> Self {
        Candidates {
            rows: vec![None; batch],
        }
    }

    /// Rated sets; an empty set falls back to every row.
    pub fn local(rated: Vec<Vec<usize>>) -> Self {
        let mut empty = 0usize;
        let rows = rated
            .into_iter()
            .map(|r| {
                if r.is_empty() {
                    empty += 1;
                    None
                } else {
                    Some(r)
                }
            })
            .collect();
        if empty > 0 {
            log::debug!("{empty} rows without ratings attend globally");
        }
        Candidates { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, r: usize) -> Option<&[usize]> {
        self.rows[r].as_deref()
    }
}

fn for_each_candidate(cands: Option<&[usize]>, n: usize, mut f: impl FnMut(usize, usize)) {
    match cands {
        Some(c) => c.iter().enumerate().for_each(|(k, &j)| f(k, j)),
        None => (0..n).for_each(|j| f(j, j)),
    }
}

struct RowWeights {
    weights: Vec<f64>,
    /// Ratio normalizer; `None` when the uniform fallback was taken.
    denom: Option<f64>,
}

fn row_weights(query: &[f64], table: &Matrix, cands: Option<&[usize]>, norm: AttentionNorm) -> RowWeights {
    let n = cands.map_or(table.rows(), <[usize]>::len);
    let mut s = vec![0.0; n];
    for_each_candidate(cands, table.rows(), |k, j| s[k] = dot(query, table.row(j)));
    match norm {
        AttentionNorm::Ratio => {
            let total: f64 = s.iter().sum();
            if total.abs() > RATIO_EPS {
                s.iter_mut().for_each(|v| *v /= total);
                RowWeights {
                    weights: s,
                    denom: Some(total),
                }
            } else {
                RowWeights {
                    weights: vec![1.0 / n as f64; n],
                    denom: None,
                }
            }
        }
        AttentionNorm::Softmax => {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= z);
            RowWeights {
                weights: s,
                denom: None,
            }
        }
    }
}

/// Sparse attention weights for each query row as `(counterpart, weight)` pairs.
pub fn attention_weights(
    queries: &Matrix,
    table: &Matrix,
    cands: &Candidates,
    norm: AttentionNorm,
) -> Vec<Vec<(usize, f64)>> {
    (0..queries.rows())
        .map(|r| {
            let c = cands.row(r);
            let w = row_weights(queries.row(r), table, c, norm).weights;
            let mut out = Vec::with_capacity(w.len());
            for_each_candidate(c, table.rows(), |k, j| out.push((j, w[k])));
            out
        })
        .collect()
}

/// Attention vectors `c_i = Σ_j a_ij v_j` where the scores are `q_i·v_j`.
/// Differentiable in the queries only; `table` is a constant.
pub fn attention_pool<'p>(
    tape: &mut Tape<'p>,
    queries: Var,
    table: Rc<Matrix>,
    cands: Candidates,
    norm: AttentionNorm,
) -> Result<Var> {
    let q = tape.value(queries);
    if q.cols() != table.cols() || q.rows() != cands.len() {
        return Err(Error::Dimension {
            op: "attention_pool",
            detail: format!(
                "queries {:?}, table {:?}, {} candidate rows",
                q.shape(),
                table.shape(),
                cands.len()
            ),
        });
    }
    let k = q.cols();
    let mut out = Matrix::zeros(q.rows(), k);
    let mut saved = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let c = cands.row(r);
        let rw = row_weights(q.row(r), &table, c, norm);
        let o = out.row_mut(r);
        for_each_candidate(c, table.rows(), |idx, j| {
            for (acc, &v) in o.iter_mut().zip(table.row(j)) {
                *acc += rw.weights[idx] * v;
            }
        });
        saved.push(rw);
    }
    Ok(tape.custom(
        "attention_pool",
        &[queries],
        out,
        Box::new(move |ctx| {
            let g = ctx.grad_out;
            let c_all = ctx.output;
            let mut dq = Matrix::zeros(c_all.rows(), k);
            for r in 0..c_all.rows() {
                let cands_r = cands.row(r);
                let gr = g.row(r);
                let cg = dot(c_all.row(r), gr);
                let rw = &saved[r];
                let dr = dq.row_mut(r);
                match norm {
                    AttentionNorm::Ratio => {
                        // Uniform fallback is locally constant in the query.
                        let Some(total) = rw.denom else { continue };
                        for_each_candidate(cands_r, table.rows(), |_, j| {
                            let v = table.row(j);
                            let coef = (dot(v, gr) - cg) / total;
                            for (d, &vv) in dr.iter_mut().zip(v) {
                                *d += coef * vv;
                            }
                        });
                    }
                    AttentionNorm::Softmax => {
                        for_each_candidate(cands_r, table.rows(), |idx, j| {
                            let v = table.row(j);
                            let coef = rw.weights[idx] * (dot(v, gr) - cg);
                            for (d, &vv) in dr.iter_mut().zip(v) {
                                *d += coef * vv;
                            }
                        });
                    }
                }
            }
            vec![Some(dq)]
        }),
    ))
}

/// Bilinear attention followed by a `2K → K` projection of `[x, c]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub weight: ParamId,
    pub projection: Linear,
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, k: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::random_normal(k, k, 0.0, 1.0 / (k as f64).sqrt(), rng),
        );
        let projection = Linear::new(store, &format!("{name}.proj"), 2 * k, k, Activation::Linear, rng);
        // Start near the unattended model: identity on the x-half, small noise elsewhere.
        let mut w = Matrix::random_normal(2 * k, k, 0.0, 0.01, rng);
        for d in 0..k {
            w.set(d, d, w.get(d, d) + 1.0);
        }
        store.values_mut()[projection.weight.index()] = w;
        AttentionHead { weight, projection }
    }

    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        vars: &[Var],
        x: Var,
        table: &Rc<Matrix>,
        cands: Candidates,
        norm: AttentionNorm,
    ) -> Result<Var> {
        let q = tape.matmul(x, vars[self.weight.index()])?;
        let c = attention_pool(tape, q, Rc::clone(table), cands, norm)?;
        let xc = tape.concat_cols(x, c)?;
        self.projection.forward(tape, vars, xc)
    }
}
