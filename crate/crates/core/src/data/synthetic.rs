use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::{Rating, SparseRatingMatrix};
use crate::error::{Error, Result};
use crate::ndgrad::{dot, Matrix};

/// Low-rank rating generator: `U*·V*ᵀ + N(0, noise²)` on a random subset of cells.
#[derive(Debug, Clone)]
pub struct LowRankSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    pub density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for LowRankSpec {
    /// 200×300, rank 5, 20% observed, noise 0.1.
    fn default() -> Self {
        LowRankSpec {
            n_users: 200,
            n_items: 300,
            rank: 5,
            density: 0.2,
            noise_std: 0.1,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LowRankFixture {
    pub ratings: SparseRatingMatrix,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
}

/// Factor entries are `N(0, 1/rank)` so noiseless ratings have unit-order scale.
pub fn low_rank(spec: &LowRankSpec) -> Result<LowRankFixture> {
    if spec.rank == 0 || !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::Param("rank must be positive and density in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = 1.0 / (spec.rank as f64).sqrt();
    let user_factors = Matrix::random_normal(spec.n_users, spec.rank, 0.0, std, &mut rng);
    let item_factors = Matrix::random_normal(spec.n_items, spec.rank, 0.0, std, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Param(e.to_string()))?;

    let cells = spec.n_users * spec.n_items;
    let n_obs = ((cells as f64) * spec.density).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut chosen = order[..n_obs].to_vec();
    chosen.sort_unstable();
    let triples = chosen
        .into_iter()
        .map(|c| {
            let (u, i) = (c / spec.n_items, c % spec.n_items);
            let clean = dot(user_factors.row(u), item_factors.row(i));
            Rating::new(u, i, clean + noise.sample(&mut rng))
        })
        .collect();
    Ok(LowRankFixture {
        ratings: SparseRatingMatrix::new(spec.n_users, spec.n_items, triples)?,
        user_factors,
        item_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_shape_and_scale() {
        let f = low_rank(&LowRankSpec::default()).unwrap();
        assert_eq!(f.ratings.n_users(), 200);
        assert_eq!(f.ratings.n_items(), 300);
        assert_eq!(f.ratings.nnz(), 12_000);
        let ms: f64 = f.ratings.triples().iter().map(|t| t.value * t.value).sum::<f64>()
            / f.ratings.nnz() as f64;
        // E[r²] = rank·(1/rank)² + noise² = 0.21
        assert!(ms > 0.1 && ms < 0.4, "{ms}");
        assert_eq!(low_rank(&LowRankSpec::default()).unwrap().ratings, f.ratings);
    }
}
