//! Fixtures shared by the benchmarks.

use crossvae::data::synthetic::{low_rank, LowRankSpec};
use crossvae::data::{split, DataSplit};
use crossvae::model::{AttentionNorm, Hyperparams};

/// The 200×300 rank-5 synthetic split.
pub fn synthetic_split() -> DataSplit {
    let spec = LowRankSpec::default();
    split(&low_rank(&spec).expect("valid spec").ratings, spec.seed).expect("non-empty fixture")
}

pub fn bench_hp() -> Hyperparams {
    Hyperparams {
        k: 5,
        k_prime: 10,
        widths: vec![50],
        lr: 1e-2,
        batch_users: Some(100),
        batch_items: Some(100),
        attention_norm: AttentionNorm::Softmax,
        ..Default::default()
    }
}
