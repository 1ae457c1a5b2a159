use std::collections::HashSet;

use crate::error::{Error, Result};

/// Root mean squared error of paired lists.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim(
            "rmse",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("rmse of no pairs".into()));
    }
    let sq: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

fn check_ranking(ranked: &[usize], relevant: &HashSet<usize>) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::Param("ranking metric needs at least one relevant item".into()));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for &item in ranked {
        if !seen.insert(item) {
            return Err(Error::Param(format!("item {item} appears twice in a ranking")));
        }
    }
    Ok(())
}

fn discount(rank: usize) -> f64 {
    // `rank` is 1-based.
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-relevance NDCG over the first `n` ranked items.
pub fn ndcg_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> Result<f64> {
    check_ranking(ranked, relevant)?;
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=n.min(relevant.len())).map(discount).sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// `|top-n ∩ relevant| / min(n, |relevant|)`.
pub fn recall_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> Result<f64> {
    check_ranking(ranked, relevant)?;
    let denom = n.min(relevant.len());
    if denom == 0 {
        return Ok(0.0);
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    Ok(hits as f64 / denom as f64)
}

/// Items sorted by descending score; ties go to the smaller item index.
pub fn rank_by_score(mut scored: Vec<(usize, f64)>) -> Vec<usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}
