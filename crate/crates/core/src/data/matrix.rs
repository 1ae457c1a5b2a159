use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Matrix;

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

impl Rating {
    pub fn new(user: usize, item: usize, value: f64) -> Self {
        Rating { user, item, value }
    }
}

/// Compressed per-entity adjacency: entity `e` owns `idx[ptr[e]..ptr[e+1]]`.
#[derive(Debug, Clone, PartialEq)]
struct Compressed {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Compressed {
    fn build(n: usize, entries: impl Iterator<Item = (usize, usize, f64)> + Clone) -> Self {
        let mut ptr = vec![0usize; n + 1];
        for (e, _, _) in entries.clone() {
            ptr[e + 1] += 1;
        }
        for e in 0..n {
            ptr[e + 1] += ptr[e];
        }
        let nnz = ptr[n];
        let mut fill = ptr.clone();
        let mut pairs = vec![(0usize, 0.0f64); nnz];
        for (e, other, v) in entries {
            pairs[fill[e]] = (other, v);
            fill[e] += 1;
        }
        for e in 0..n {
            pairs[ptr[e]..ptr[e + 1]].sort_by_key(|p| p.0);
        }
        let (idx, val) = pairs.into_iter().unzip();
        Compressed { ptr, idx, val }
    }

    #[inline]
    fn get(&self, e: usize) -> (&[usize], &[f64]) {
        let r = self.ptr[e]..self.ptr[e + 1];
        (&self.idx[r.clone()], &self.val[r])
    }
}

/// Observed `(user, item, rating)` triples plus per-user and per-item
/// sorted adjacency lists. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRatingMatrix {
    n_users: usize,
    n_items: usize,
    triples: Vec<Rating>,
    by_user: Compressed,
    by_item: Compressed,
}

impl SparseRatingMatrix {
    /// Validates indices, finiteness and uniqueness of `(user, item)` pairs.
    pub fn new(n_users: usize, n_items: usize, triples: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.user >= n_users || t.item >= n_items {
                return Err(Error::Data(format!(
                    "triple ({}, {}) outside a {n_users}x{n_items} index space",
                    t.user, t.item
                )));
            }
            if !t.value.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite rating at ({}, {})",
                    t.user, t.item
                )));
            }
            if !seen.insert((t.user, t.item)) {
                return Err(Error::Data(format!(
                    "duplicate pair ({}, {})",
                    t.user, t.item
                )));
            }
        }
        let by_user = Compressed::build(n_users, triples.iter().map(|t| (t.user, t.item, t.value)));
        let by_item = Compressed::build(n_items, triples.iter().map(|t| (t.item, t.user, t.value)));
        Ok(SparseRatingMatrix {
            n_users,
            n_items,
            triples,
            by_user,
            by_item,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Rating] {
        &self.triples
    }

    /// Items rated by `user` (ascending) and their ratings.
    pub fn user_row(&self, user: usize) -> (&[usize], &[f64]) {
        self.by_user.get(user)
    }

    /// Users who rated `item` (ascending) and their ratings.
    pub fn item_col(&self, item: usize) -> (&[usize], &[f64]) {
        self.by_item.get(item)
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.by_user.ptr[user + 1] - self.by_user.ptr[user]
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.by_item.ptr[item + 1] - self.by_item.ptr[item]
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        let (items, vals) = self.user_row(user);
        items.binary_search(&item).ok().map(|k| vals[k])
    }

    /// Same index space, every rating replaced by `f(rating)`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let triples = self
            .triples
            .iter()
            .map(|t| Rating::new(t.user, t.item, f(t.value)))
            .collect();
        SparseRatingMatrix::new(self.n_users, self.n_items, triples)
    }

    /// Same index space restricted to the given triples.
    pub fn with_triples(&self, triples: Vec<Rating>) -> Result<Self> {
        SparseRatingMatrix::new(self.n_users, self.n_items, triples)
    }

    pub fn transpose(&self) -> Result<Self> {
        let triples = self
            .triples
            .iter()
            .map(|t| Rating::new(t.item, t.user, t.value))
            .collect();
        SparseRatingMatrix::new(self.n_items, self.n_users, triples)
    }

    /// Dense `n_users × n_items` view with zeros for missing entries.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n_users, self.n_items);
        for t in &self.triples {
            m.set(t.user, t.item, t.value);
        }
        m
    }
}

/// Maps every rating to 1 when it exceeds 3 and to 0 otherwise.
pub fn binarize(m: &SparseRatingMatrix) -> SparseRatingMatrix {
    m.map_values(|r| if r > 3.0 { 1.0 } else { 0.0 })
        .expect("binarize keeps structure")
}
