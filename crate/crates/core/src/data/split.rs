use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::{Rating, SparseRatingMatrix};
use crate::error::{Error, Result};

/// Old indices kept by [`filter_min_ratings`], in their new dense order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kept {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

/// Repeatedly drops users and items with fewer than `min_count` ratings until
/// nothing changes, then re-indexes the survivors densely (order preserved).
pub fn filter_min_ratings(
    m: &SparseRatingMatrix,
    min_count: usize,
) -> Result<(SparseRatingMatrix, Kept)> {
    if min_count == 0 {
        return Err(Error::Param("min_count must be at least 1".into()));
    }
    let mut alive = vec![true; m.nnz()];
    loop {
        let mut user_deg = vec![0usize; m.n_users()];
        let mut item_deg = vec![0usize; m.n_items()];
        for (t, _) in m.triples().iter().zip(&alive).filter(|(_, &a)| a) {
            user_deg[t.user] += 1;
            item_deg[t.item] += 1;
        }
        let mut changed = false;
        for (t, a) in m.triples().iter().zip(alive.iter_mut()) {
            if *a && (user_deg[t.user] < min_count || item_deg[t.item] < min_count) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut user_live = vec![false; m.n_users()];
    let mut item_live = vec![false; m.n_items()];
    for (t, _) in m.triples().iter().zip(&alive).filter(|(_, &a)| a) {
        user_live[t.user] = true;
        item_live[t.item] = true;
    }
    // Survivors keep their relative order in the original index space.
    let renumber = |live: &[bool]| {
        let mut map = vec![usize::MAX; live.len()];
        let mut kept = Vec::new();
        for (old, _) in live.iter().enumerate().filter(|(_, &l)| l) {
            map[old] = kept.len();
            kept.push(old);
        }
        (map, kept)
    };
    let (user_map, kept_users) = renumber(&user_live);
    let (item_map, kept_items) = renumber(&item_live);
    let kept = Kept {
        users: kept_users,
        items: kept_items,
    };
    let triples: Vec<Rating> = m
        .triples()
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(t, _)| Rating::new(user_map[t.user], item_map[t.item], t.value))
        .collect();
    if triples.is_empty() {
        return Err(Error::Empty(format!(
            "no ratings survive a minimum of {min_count} per user and item"
        )));
    }
    let out = SparseRatingMatrix::new(kept.users.len(), kept.items.len(), triples)?;
    Ok((out, kept))
}

/// Train/validation/test partition over one shared index space.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: SparseRatingMatrix,
    pub validation: SparseRatingMatrix,
    pub test: SparseRatingMatrix,
    pub seed: u64,
}

fn shuffled_triples(m: &SparseRatingMatrix, seed: u64) -> Vec<Rating> {
    let mut triples = m.triples().to_vec();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    triples
}

/// Seeded uniform permutation of triples cut 70/15/15.
pub fn split(m: &SparseRatingMatrix, seed: u64) -> Result<DataSplit> {
    let n = m.nnz();
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 ratings to split, have {n}")));
    }
    let n_train = (n * 70 + 50) / 100;
    let n_val = (n * 15 + 50) / 100;
    let mut triples = shuffled_triples(m, seed);
    let test = triples.split_off(n_train + n_val);
    let validation = triples.split_off(n_train);
    Ok(DataSplit {
        train: m.with_triples(triples)?,
        validation: m.with_triples(validation)?,
        test: m.with_triples(test)?,
        seed,
    })
}

/// `⌈fraction·n⌉`, treating products within 1e-9 of an integer as exact.
fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Seeded uniform sample of `⌈fraction·N⌉` triples; returns `(sample, rest)`.
pub fn subsample(
    m: &SparseRatingMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(SparseRatingMatrix, SparseRatingMatrix)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Param(format!("fraction {fraction} outside (0, 1)")));
    }
    let k = ceil_count(fraction, m.nnz());
    let mut triples = shuffled_triples(m, seed);
    let rest = triples.split_off(k);
    Ok((m.with_triples(triples)?, m.with_triples(rest)?))
}

/// Seeded equal split of `m` into two halves (the first gets the floor).
pub fn split_halves(
    m: &SparseRatingMatrix,
    seed: u64,
) -> Result<(SparseRatingMatrix, SparseRatingMatrix)> {
    let mut triples = shuffled_triples(m, seed);
    let second = triples.split_off(triples.len() / 2);
    Ok((m.with_triples(triples)?, m.with_triples(second)?))
}

/// Sparsity experiment split: sampled train, remainder halved into
/// validation and test.
pub fn sparsity_split(m: &SparseRatingMatrix, fraction: f64, seed: u64) -> Result<DataSplit> {
    let (train, rest) = subsample(m, fraction, seed)?;
    let (validation, test) = split_halves(&rest, seed.wrapping_add(1))?;
    Ok(DataSplit {
        train,
        validation,
        test,
        seed,
    })
}

/// Seeded shuffle of `0..n` cut into `⌈n/batch_size⌉` batches.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn random_matrix(n_users: usize, n_items: usize, density: f64, seed: u64) -> SparseRatingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triples = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random::<f64>() < density {
                    triples.push(Rating::new(u, i, rng.random_range(1..=5) as f64));
                }
            }
        }
        SparseRatingMatrix::new(n_users, n_items, triples).unwrap()
    }

    #[test]
    fn min_count_one_is_identity_up_to_isolated_entities() {
        let m = SparseRatingMatrix::new(
            3,
            3,
            vec![Rating::new(0, 0, 1.0), Rating::new(2, 2, 2.0)],
        )
        .unwrap();
        let (f, kept) = filter_min_ratings(&m, 1).unwrap();
        assert_eq!(kept.users, vec![0, 2]);
        assert_eq!(kept.items, vec![0, 2]);
        assert_eq!(f.triples(), &[Rating::new(0, 0, 1.0), Rating::new(1, 1, 2.0)]);
    }

    #[test]
    fn sparse_user_is_removed_and_its_orphaned_items_follow() {
        // Users 0..10 rate items 0..10 fully; user 10 rates 9 extra items only.
        let mut triples = Vec::new();
        for u in 0..10 {
            for i in 0..10 {
                triples.push(Rating::new(u, i, 4.0));
            }
        }
        for i in 10..19 {
            triples.push(Rating::new(10, i, 3.0));
        }
        let m = SparseRatingMatrix::new(11, 19, triples).unwrap();
        let (f, kept) = filter_min_ratings(&m, 10).unwrap();
        assert_eq!(kept.users, (0..10).collect::<Vec<_>>());
        assert_eq!(kept.items, (0..10).collect::<Vec<_>>());
        assert_eq!(f.nnz(), 100);
    }

    #[test]
    fn filter_output_matches_independent_degree_recount() {
        let m = random_matrix(50, 50, 0.3, 11);
        let (f, kept) = filter_min_ratings(&m, 10).unwrap();
        assert!(f.n_users() > 0 && f.n_users() < 50 || f.n_items() < 50);
        for u in 0..f.n_users() {
            assert!(f.user_degree(u) >= 10);
        }
        for i in 0..f.n_items() {
            assert!(f.item_degree(i) >= 10);
        }
        // Maximality: the brute-force fixed point from scratch gives the same survivors.
        let mut users: HashSet<usize> = (0..50).collect();
        let mut items: HashSet<usize> = (0..50).collect();
        loop {
            let live: Vec<&Rating> = m
                .triples()
                .iter()
                .filter(|t| users.contains(&t.user) && items.contains(&t.item))
                .collect();
            let bad_u: Vec<usize> = users
                .iter()
                .copied()
                .filter(|&u| live.iter().filter(|t| t.user == u).count() < 10)
                .collect();
            let bad_i: Vec<usize> = items
                .iter()
                .copied()
                .filter(|&i| live.iter().filter(|t| t.item == i).count() < 10)
                .collect();
            if bad_u.is_empty() && bad_i.is_empty() {
                break;
            }
            bad_u.iter().for_each(|u| {
                users.remove(u);
            });
            bad_i.iter().for_each(|i| {
                items.remove(i);
            });
        }
        let mut expect_u: Vec<usize> = users.into_iter().collect();
        expect_u.sort();
        let mut expect_i: Vec<usize> = items.into_iter().collect();
        expect_i.sort();
        assert_eq!(kept.users, expect_u);
        assert_eq!(kept.items, expect_i);
    }

    #[test]
    fn filter_to_nothing_is_an_error() {
        let m = random_matrix(5, 5, 0.3, 1);
        assert!(matches!(filter_min_ratings(&m, 100), Err(Error::Empty(_))));
        assert!(filter_min_ratings(&m, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let triples: Vec<Rating> = (0..100).map(|k| Rating::new(k / 10, k % 10, 3.0)).collect();
        let m = SparseRatingMatrix::new(10, 10, triples).unwrap();
        let s = split(&m, 42).unwrap();
        assert_eq!(
            (s.train.nnz(), s.validation.nnz(), s.test.nnz()),
            (70, 15, 15)
        );
        let again = split(&m, 42).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
        assert_ne!(split(&m, 43).unwrap().train.triples(), s.train.triples());

        let tiny = SparseRatingMatrix::new(1, 9, (0..9).map(|i| Rating::new(0, i, 1.0)).collect())
            .unwrap();
        assert!(split(&tiny, 0).is_err());
    }

    #[test]
    fn split_is_a_partition_by_set_algebra() {
        let m = random_matrix(50, 50, 0.5, 3);
        assert!(m.nnz() >= 1000);
        let s = split(&m, 9).unwrap();
        let key = |r: &Rating| (r.user, r.item, r.value.to_bits());
        let all: HashSet<_> = m.triples().iter().map(key).collect();
        let parts: Vec<HashSet<_>> = [&s.train, &s.validation, &s.test]
            .iter()
            .map(|p| p.triples().iter().map(key).collect())
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(parts[a].is_disjoint(&parts[b]));
            }
        }
        let union: HashSet<_> = parts.iter().flatten().copied().collect();
        assert_eq!(union, all);
        let n = m.nnz() as f64;
        assert!((s.train.nnz() as f64 - 0.70 * n).abs() <= 1.0);
        assert!((s.validation.nnz() as f64 - 0.15 * n).abs() <= 1.0);
        assert!((s.test.nnz() as f64 - 0.15 * n).abs() <= 1.0);
    }

    #[test]
    fn subsample_counts_use_the_ceiling() {
        assert_eq!(ceil_count(0.01, 1_000_209), 10_003);
        assert_eq!(ceil_count(0.1, 1000), 100);
        assert_eq!(ceil_count(0.03, 1000), 30);
        let m = random_matrix(30, 30, 0.5, 5);
        let (a, rest) = subsample(&m, 0.1, 7).unwrap();
        assert_eq!(a.nnz(), ceil_count(0.1, m.nnz()));
        assert_eq!(a.nnz() + rest.nnz(), m.nnz());
        assert_eq!(subsample(&m, 0.1, 7).unwrap().0, a);
        assert!(subsample(&m, 0.0, 7).is_err());
        assert!(subsample(&m, 1.0, 7).is_err());
    }

    #[test]
    fn sparsity_split_halves_the_remainder() {
        let m = random_matrix(30, 30, 0.5, 6);
        let s = sparsity_split(&m, 0.05, 1).unwrap();
        let rest = m.nnz() - s.train.nnz();
        assert_eq!(s.validation.nnz(), rest / 2);
        assert_eq!(s.validation.nnz() + s.test.nnz(), rest);
    }

    #[test]
    fn batch_examples() {
        let b = make_batches(5, 2, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(make_batches(100, 100, 0).unwrap().len(), 1);
        assert!(make_batches(3, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_index_set(n in 0usize..300, bs in 1usize..50, seed in any::<u64>()) {
            let batches = make_batches(n, bs, seed).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(bs));
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(make_batches(n, bs, seed).unwrap(), batches);
        }

        #[test]
        fn adjacency_round_trips_to_triples(seed in any::<u64>()) {
            let m = random_matrix(12, 9, 0.4, seed);
            let key = |r: &Rating| (r.user, r.item, r.value.to_bits());
            let mut from_users = Vec::new();
            for u in 0..m.n_users() {
                let (items, vals) = m.user_row(u);
                for (&i, &v) in items.iter().zip(vals) {
                    from_users.push(key(&Rating::new(u, i, v)));
                }
            }
            let mut from_items = Vec::new();
            for i in 0..m.n_items() {
                let (users, vals) = m.item_col(i);
                for (&u, &v) in users.iter().zip(vals) {
                    from_items.push(key(&Rating::new(u, i, v)));
                }
            }
            let mut direct: Vec<_> = m.triples().iter().map(key).collect();
            direct.sort();
            from_users.sort();
            from_items.sort();
            prop_assert_eq!(&from_users, &direct);
            prop_assert_eq!(&from_items, &direct);
        }
    }
}
