use crate::data::SparseRatingMatrix;
use crate::error::{Error, Result};
use crate::ndgrad::{Matrix, Tape, Var};

/// Constant row-sparse input matrix (CSR layout).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    n_cols: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    pub fn with_capacity(n_cols: usize, rows: usize, nnz: usize) -> Self {
        let mut ptr = Vec::with_capacity(rows + 1);
        ptr.push(0);
        SparseRows {
            n_cols,
            ptr,
            idx: Vec::with_capacity(nnz),
            val: Vec::with_capacity(nnz),
        }
    }

    pub fn push(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.n_cols);
        self.idx.push(col);
        self.val.push(value);
    }

    pub fn end_row(&mut self) {
        self.ptr.push(self.idx.len());
    }

    pub fn rows(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.ptr[r]..self.ptr[r + 1];
        (&self.idx[span.clone()], &self.val[span])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), self.n_cols);
        for r in 0..self.rows() {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                m.set(r, c, v);
            }
        }
        m
    }

    /// Observed-rating rows for `entities`; unobserved entries stay zero.
    pub fn ratings(oriented: &SparseRatingMatrix, entities: &[usize]) -> Self {
        let nnz = entities.iter().map(|&e| oriented.user_degree(e)).sum();
        let mut out = SparseRows::with_capacity(oriented.n_items(), entities.len(), nnz);
        for &e in entities {
            let (cols, vals) = oriented.user_row(e);
            for (&c, &v) in cols.iter().zip(vals) {
                out.push(c, v);
            }
            out.end_row();
        }
        out
    }

    /// Latent rows: counterpart embedding `j` occupies columns `j·K..(j+1)·K`
    /// and is zeroed unless the entity rated `j`.
    pub fn masked_embeddings(
        oriented: &SparseRatingMatrix,
        entities: &[usize],
        counterpart: &Matrix,
    ) -> Self {
        let k = counterpart.cols();
        let nnz = entities.iter().map(|&e| oriented.user_degree(e) * k).sum();
        let mut out =
            SparseRows::with_capacity(oriented.n_items() * k, entities.len(), nnz);
        for &e in entities {
            for &j in oriented.user_row(e).0 {
                for (d, &v) in counterpart.row(j).iter().enumerate() {
                    out.push(j * k + d, v);
                }
            }
            out.end_row();
        }
        out
    }
}

/// Dense `B×K` mean of each entity's rated counterpart embeddings (zero row
/// when nothing is rated).
pub fn averaged_embeddings(
    oriented: &SparseRatingMatrix,
    entities: &[usize],
    counterpart: &Matrix,
) -> Matrix {
    let k = counterpart.cols();
    let mut out = Matrix::zeros(entities.len(), k);
    for (r, &e) in entities.iter().enumerate() {
        let rated = oriented.user_row(e).0;
        if rated.is_empty() {
            continue;
        }
        let row = out.row_mut(r);
        for &j in rated {
            for (o, v) in row.iter_mut().zip(counterpart.row(j)) {
                *o += v;
            }
        }
        let n = rated.len() as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// `x · w` for a constant sparse `x`; only `w` is differentiable.
pub fn sparse_matmul<'p>(tape: &mut Tape<'p>, x: SparseRows, w: Var) -> Result<Var> {
    let wv = tape.value(w);
    if x.cols() != wv.rows() {
        return Err(Error::Dimension {
            op: "sparse_matmul",
            detail: format!(
                "{}x{} sparse times {}x{}",
                x.rows(),
                x.cols(),
                wv.rows(),
                wv.cols()
            ),
        });
    }
    let n = wv.cols();
    let mut out = Matrix::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let (idx, val) = x.row(r);
        let o = out.row_mut(r);
        for (&c, &v) in idx.iter().zip(val) {
            for (acc, &wc) in o.iter_mut().zip(wv.row(c)) {
                *acc += v * wc;
            }
        }
    }
    Ok(tape.custom(
        "sparse_matmul",
        &[w],
        out,
        Box::new(move |ctx| {
            let g = ctx.grad_out;
            let w = ctx.inputs[0];
            let mut dw = Matrix::zeros(w.rows(), w.cols());
            for r in 0..x.rows() {
                let (idx, val) = x.row(r);
                let gr = g.row(r);
                for (&c, &v) in idx.iter().zip(val) {
                    for (d, &gg) in dw.row_mut(c).iter_mut().zip(gr) {
                        *d += v * gg;
                    }
                }
            }
            vec![Some(dw)]
        }),
    ))
}
