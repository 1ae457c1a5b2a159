use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_at_n, rank_by_score, recall_at_n, rmse};
use crate::data::{DataSplit, SparseRatingMatrix};
use crate::error::{Error, Result};
use crate::ndgrad::{dot, Matrix};

/// Cutoffs reported by default.
pub const DEFAULT_CUTOFFS: [usize; 2] = [20, 50];

/// Ratings strictly above this count as relevant.
pub const RELEVANCE_THRESHOLD: f64 = 3.0;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "CROSSVAE_THREADS";

/// Which items a user's held-out ratings are ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOver {
    /// Only the user's own held-out items.
    #[default]
    Test,
    /// Every item the user has not rated in training.
    Full,
}

impl FromStr for RankOver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(RankOver::Test),
            "full" => Ok(RankOver::Full),
            other => Err(Error::Param(format!("unknown ranking mode `{other}` (expected test or full)"))),
        }
    }
}

impl fmt::Display for RankOver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankOver::Test => "test",
            RankOver::Full => "full",
        })
    }
}

/// Posterior-mean embeddings used for every prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub users: Matrix,
    pub items: Matrix,
}

impl Embeddings {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }

    fn check(&self, m: &SparseRatingMatrix) -> Result<()> {
        if self.users.rows() != m.n_users() || self.items.rows() != m.n_items() {
            return Err(Error::dim(
                "evaluate",
                format!(
                    "embeddings for {}x{} entities, ratings are {}x{}",
                    self.users.rows(),
                    self.items.rows(),
                    m.n_users(),
                    m.n_items()
                ),
            ));
        }
        Ok(())
    }
}

/// Flat prediction and target lists over every observed entry of `m`.
pub fn predictions(emb: &Embeddings, m: &SparseRatingMatrix) -> (Vec<f64>, Vec<f64>) {
    m.triples()
        .iter()
        .map(|r| (emb.predict(r.user, r.item), r.value))
        .unzip()
}

pub fn split_rmse(emb: &Embeddings, m: &SparseRatingMatrix) -> Result<f64> {
    emb.check(m)?;
    let (p, t) = predictions(emb, m);
    rmse(&p, &t)
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] when set, else on the global pool.
pub fn with_eval_threads<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub rmse: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub n_users_evaluated: usize,
    pub fingerprint: String,
}

/// Metrics for one held-out matrix. `train` supplies the exclusion set in
/// [`RankOver::Full`] mode.
pub fn evaluate_split(
    label: &str,
    emb: &Embeddings,
    held_out: &SparseRatingMatrix,
    train: &SparseRatingMatrix,
    cutoffs: &[usize],
    rank_over: RankOver,
    fingerprint: &str,
) -> Result<MetricsReport> {
    if held_out.is_empty() {
        return Err(Error::Empty(format!("{label} split has no ratings")));
    }
    emb.check(held_out)?;
    let rmse = split_rmse(emb, held_out)?;
    let per_user: Vec<Option<Vec<(f64, f64)>>> = with_eval_threads(|| {
        (0..held_out.n_users())
            .into_par_iter()
            .map(|u| user_metrics(u, emb, held_out, train, cutoffs, rank_over))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut ndcg = vec![0.0; cutoffs.len()];
    let mut recall = vec![0.0; cutoffs.len()];
    let mut n = 0usize;
    for m in per_user.into_iter().flatten() {
        n += 1;
        for (k, (nd, rc)) in m.into_iter().enumerate() {
            ndcg[k] += nd;
            recall[k] += rc;
        }
    }
    let mean = |v: f64| if n > 0 { v / n as f64 } else { 0.0 };
    Ok(MetricsReport {
        split: label.to_owned(),
        rmse,
        ndcg: cutoffs.iter().zip(&ndcg).map(|(&c, &v)| (c, mean(v))).collect(),
        recall: cutoffs.iter().zip(&recall).map(|(&c, &v)| (c, mean(v))).collect(),
        n_users_evaluated: n,
        fingerprint: fingerprint.to_owned(),
    })
}

fn user_metrics(
    u: usize,
    emb: &Embeddings,
    held_out: &SparseRatingMatrix,
    train: &SparseRatingMatrix,
    cutoffs: &[usize],
    rank_over: RankOver,
) -> Result<Option<Vec<(f64, f64)>>> {
    let (items, values) = held_out.user_row(u);
    if items.len() < 2 {
        return Ok(None);
    }
    let relevant: HashSet<usize> = items
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > RELEVANCE_THRESHOLD)
        .map(|(&i, _)| i)
        .collect();
    if relevant.is_empty() {
        return Ok(None);
    }
    let scored: Vec<(usize, f64)> = match rank_over {
        RankOver::Test => items.iter().map(|&i| (i, emb.predict(u, i))).collect(),
        RankOver::Full => {
            let seen: HashSet<usize> = if u < train.n_users() {
                train.user_row(u).0.iter().copied().collect()
            } else {
                HashSet::new()
            };
            (0..held_out.n_items())
                .filter(|i| !seen.contains(i))
                .map(|i| (i, emb.predict(u, i)))
                .collect()
        }
    };
    let ranked = rank_by_score(scored);
    cutoffs
        .iter()
        .map(|&n| Ok((ndcg_at_n(&ranked, &relevant, n)?, recall_at_n(&ranked, &relevant, n)?)))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Reports for the train, validation and test parts of `split`.
pub fn evaluate(
    emb: &Embeddings,
    split: &DataSplit,
    cutoffs: &[usize],
    rank_over: RankOver,
    fingerprint: &str,
) -> Result<Vec<MetricsReport>> {
    if split.test.is_empty() {
        return Err(Error::Empty("test split has no ratings".into()));
    }
    // Training items are excluded from full rankings, except when ranking
    // the training split itself.
    let nothing = SparseRatingMatrix::new(split.train.n_users(), split.train.n_items(), Vec::new())?;
    let mut out = Vec::with_capacity(3);
    for (label, m, seen) in [
        ("train", &split.train, &nothing),
        ("val", &split.validation, &split.train),
        ("test", &split.test, &split.train),
    ] {
        if m.is_empty() {
            continue;
        }
        out.push(evaluate_split(label, emb, m, seen, cutoffs, rank_over, fingerprint)?);
    }
    Ok(out)
}

pub fn metrics_header(cutoffs: &[usize]) -> String {
    let mut cols = vec!["split".to_owned(), "rmse".to_owned()];
    cols.extend(cutoffs.iter().map(|n| format!("ndcg@{n}")));
    cols.extend(cutoffs.iter().map(|n| format!("recall@{n}")));
    cols.push("n_users".to_owned());
    cols.join(",")
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.split.clone(), self.rmse.to_string()];
        cols.extend(self.ndcg.values().map(f64::to_string));
        cols.extend(self.recall.values().map(f64::to_string));
        cols.push(self.n_users_evaluated.to_string());
        cols.join(",")
    }

    pub fn cutoffs(&self) -> Vec<usize> {
        self.ndcg.keys().copied().collect()
    }
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut f = File::create(path)?;
    let cutoffs = reports.first().map(MetricsReport::cutoffs).unwrap_or_default();
    writeln!(f, "{}", metrics_header(&cutoffs))?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_metrics_json(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, reports)?;
    writeln!(f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Rating;

    fn fixture() -> (Embeddings, DataSplit) {
        // Rank-one truth: rating(u, i) = a_u · b_i exactly.
        let a = [1.0, 2.0, 0.5, 1.5];
        let b = [1.0, 2.0, 2.5, 3.0, 1.5];
        let emb = Embeddings {
            users: Matrix::from_vec(4, 1, a.to_vec()).unwrap(),
            items: Matrix::from_vec(5, 1, b.to_vec()).unwrap(),
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..4 {
            for i in 0..5 {
                let r = Rating::new(u, i, a[u] * b[i]);
                if (u + i) % 2 == 0 { test.push(r) } else { train.push(r) }
            }
        }
        let mk = |t| SparseRatingMatrix::new(4, 5, t).unwrap();
        let split = DataSplit {
            train: mk(train),
            validation: mk(vec![Rating::new(0, 1, 2.0)]),
            test: mk(test),
            seed: 0,
        };
        (emb, split)
    }

    #[test]
    fn exact_model_scores_perfectly() {
        let (emb, split) = fixture();
        let reports = evaluate(&emb, &split, &DEFAULT_CUTOFFS, RankOver::Test, "abc").unwrap();
        assert_eq!(reports.len(), 3);
        let test = &reports[2];
        assert_eq!(test.split, "test");
        assert_eq!(test.rmse, 0.0);
        assert!(test.n_users_evaluated > 0);
        for n in DEFAULT_CUTOFFS {
            assert_eq!(test.ndcg[&n], 1.0);
        }
    }

    #[test]
    fn evaluated_users_follow_the_two_item_rule() {
        let (emb, split) = fixture();
        let report =
            evaluate_split("test", &emb, &split.test, &split.train, &[20], RankOver::Test, "").unwrap();
        let want = (0..4)
            .filter(|&u| {
                let (items, vals) = split.test.user_row(u);
                items.len() >= 2 && vals.iter().any(|&v| v > 3.0)
            })
            .count();
        assert_eq!(report.n_users_evaluated, want);
    }

    #[test]
    fn report_rmse_composes_with_flat_rmse() {
        let (mut emb, split) = fixture();
        emb.users.set(1, 0, 1.7);
        let report =
            evaluate_split("test", &emb, &split.test, &split.train, &[20], RankOver::Test, "").unwrap();
        let (p, t) = predictions(&emb, &split.test);
        assert_eq!(report.rmse, rmse(&p, &t).unwrap());
    }

    #[test]
    fn empty_test_split_is_an_error() {
        let (emb, mut split) = fixture();
        split.test = SparseRatingMatrix::new(4, 5, vec![]).unwrap();
        assert!(evaluate(&emb, &split, &[20], RankOver::Test, "").is_err());
    }

    #[test]
    fn full_ranking_excludes_training_items() {
        let (emb, split) = fixture();
        let report =
            evaluate_split("test", &emb, &split.test, &split.train, &[1, 50], RankOver::Full, "").unwrap();
        // Candidates are exactly the held-out items here, so ranking is still perfect.
        assert_eq!(report.ndcg[&50], 1.0);
    }

    #[test]
    fn csv_layout() {
        let (emb, split) = fixture();
        let reports = evaluate(&emb, &split, &DEFAULT_CUTOFFS, RankOver::Test, "").unwrap();
        assert_eq!(
            metrics_header(&DEFAULT_CUTOFFS),
            "split,rmse,ndcg@20,ndcg@50,recall@20,recall@50,n_users"
        );
        assert_eq!(reports[2].csv_row().split(',').count(), 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &reports).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        let j = dir.path().join("metrics.json");
        write_metrics_json(&j, &reports).unwrap();
        let back: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn random_scores_match_the_permutation_expectation() {
        // Each user holds out m items with r relevant; under random scores the
        // expected Recall@N is min(N, m)·r / m / min(N, r).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n_users, n_items) = (3000, 200);
        let mut test = Vec::new();
        let mut expected = 0.0;
        let mut counted = 0usize;
        for u in 0..n_users {
            let m = rng.random_range(2..60);
            let mut items: Vec<usize> = (0..n_items).collect();
            items.shuffle(&mut rng);
            let rel = rng.random_range(0..=m);
            for (k, &i) in items[..m].iter().enumerate() {
                test.push(Rating::new(u, i, if k < rel { 5.0 } else { 1.0 }));
            }
            if rel > 0 {
                counted += 1;
                expected += (20.min(m) * rel) as f64 / m as f64 / 20.min(rel) as f64;
            }
        }
        let held_out = SparseRatingMatrix::new(n_users, n_items, test).unwrap();
        // Independent random directions give every user its own random order.
        let users = Matrix::random_normal(n_users, 8, 0.0, 1.0, &mut rng);
        let items = Matrix::random_normal(n_items, 8, 0.0, 1.0, &mut rng);
        let emb = Embeddings { users, items };
        let train = SparseRatingMatrix::new(n_users, n_items, vec![]).unwrap();
        let report = evaluate_split("test", &emb, &held_out, &train, &[20], RankOver::Test, "").unwrap();
        assert_eq!(report.n_users_evaluated, counted);
        let want = expected / counted as f64;
        let got = report.recall[&20];
        // Per-user recall is bounded in [0, 1]; 3000 users put the standard
        // error well under 0.01.
        assert!((got - want).abs() < 0.02, "recall {got} vs expectation {want}");
    }

    #[test]
    fn thread_cap_does_not_change_results() {
        let (emb, split) = fixture();
        let a = evaluate(&emb, &split, &DEFAULT_CUTOFFS, RankOver::Full, "").unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| evaluate(&emb, &split, &DEFAULT_CUTOFFS, RankOver::Full, "").unwrap());
        assert_eq!(a, b);
    }
}
