use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use crossvae::model::Model;
use crossvae::ndgrad::{Matrix, Tape};
use crossvae::train::{TrainData, TrainState};
use crossvae_bench::{bench_hp, synthetic_split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [32, 128] {
        let a = Matrix::random_normal(n, n, 0.0, 1.0, &mut rng);
        let b = Matrix::random_normal(n, n, 0.0, 1.0, &mut rng);
        c.bench_function(&format!("matmul {n}x{n}"), |bch| bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    }
}

fn latent_path(c: &mut Criterion) {
    let sp = synthetic_split();
    let hp = bench_hp();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n_users, n_items) = (sp.train.n_users(), sp.train.n_items());
    let model = Model::new(&hp, n_users, n_items, &mut rng).unwrap();
    let table = Matrix::random_normal(n_items, hp.k, 0.0, 0.1, &mut rng);
    let rows: Vec<usize> = (0..100).collect();
    c.bench_function("latent path, 100 users", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let vars = model.store.bind(&mut tape, false);
            let g = model.user.latent_path(&mut tape, &vars, &hp, &rows, &sp.train, &table).unwrap();
            black_box(g);
        })
    });
}

fn outer_iteration(c: &mut Criterion) {
    let sp = synthetic_split();
    let data = TrainData::new(&sp).unwrap();
    let state = TrainState::new(&bench_hp(), &data).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("one outer iteration, 200x300", |bch| {
        bch.iter_batched(|| state.clone(), |mut s| s.run_outer_iteration(&data).unwrap(), criterion::BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, matmul, latent_path, outer_iteration);
criterion_main!(benches);
