//! Finite-difference verification of every backward rule and of the full
//! model loss on a toy problem.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Rating, SparseRatingMatrix};
use crate::error::Result;
use crate::model::{
    attention_pool, decode, elbo_loss, reparameterize, sparse_matmul, AttentionMode, AttentionNorm,
    Candidates, Hyperparams, KlTerm, LatentInput, Model, SparseRows,
};
use crate::ndgrad::{check_gradients, GradCheck, Matrix, Tape, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the composed toy model.
pub const MODEL_TOL: f64 = 1e-3;
/// Inputs this close to a kink (ReLU at 0, clamp at its floor) are not probed.
pub const KINK_MARGIN: f64 = 1e-3;

/// Names of every recorded op with a backward rule.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "mul_const",
    "scale",
    "add_scalar",
    "add_row_bias",
    "relu",
    "sigmoid",
    "square",
    "sqrt",
    "ln",
    "clamp_min",
    "concat_cols",
    "masked_sq_error",
    "sum",
    "row_sums",
    "sparse_matmul",
    "attention_pool",
];

/// One line of the suite report.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// Where the worst error occurred.
    pub worst: String,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} max rel err {:.3e} (tol {:.0e}, {} entries, worst at {})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol,
            self.checked,
            self.worst
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.passed())
    }
}

/// Running maximum over many instances of one check.
struct Acc {
    name: String,
    tol: f64,
    max: f64,
    checked: usize,
    worst: String,
}

impl Acc {
    fn new(name: impl Into<String>, tol: f64) -> Self {
        Acc {
            name: name.into(),
            tol,
            max: 0.0,
            checked: 0,
            worst: "-".into(),
        }
    }

    fn add(&mut self, case: usize, g: &GradCheck, label: impl Fn(usize) -> String) {
        self.checked += g.checked;
        if g.max_rel_err > self.max || (self.worst == "-" && g.worst.is_some()) {
            self.max = self.max.max(g.max_rel_err);
            if let Some((k, e)) = g.worst {
                self.worst = format!("case {case}, {}[{e}]", label(k));
            }
        }
    }

    fn finish(self) -> CheckLine {
        CheckLine {
            name: self.name,
            max_rel_err: self.max,
            tol: self.tol,
            checked: self.checked,
            worst: self.worst,
        }
    }
}

fn input_label(k: usize) -> String {
    format!("input {k}")
}

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(r, c, 0.0, 1.0, rng)
}

fn uniform(r: usize, c: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(r, c, data).expect("length matches")
}

/// Reduces `v` to a scalar with fixed weights so every output entry carries
/// a distinct upstream gradient.
fn project(tape: &mut Tape<'_>, v: Var, w: &Matrix) -> Result<Var> {
    let weighted = tape.mul_const(v, w.clone())?;
    Ok(tape.sum(weighted))
}

type Unary = fn(&mut Tape<'_>, Var) -> Result<Var>;
type Binary = fn(&mut Tape<'_>, Var, Var) -> Result<Var>;

fn positive(t: &mut Tape<'_>, x: Var) -> Var {
    let y = t.square(x);
    t.add_scalar(y, 0.5)
}

fn unary_ops() -> Vec<(&'static str, Unary, Option<f64>)> {
    vec![
        ("relu", |t, x| Ok(t.relu(x)), Some(0.0)),
        ("sigmoid", |t, x| Ok(t.sigmoid(x)), None),
        ("square", |t, x| Ok(t.square(x)), None),
        ("transpose", |t, x| Ok(t.transpose(x)), None),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), None),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3)), None),
        ("row_sums", |t, x| Ok(t.row_sums(x)), None),
        ("sum", |t, x| Ok(t.sum(x)), None),
        ("mul_const", |t, x| {
            let (r, c) = t.value(x).shape();
            let w = Matrix::from_vec(r, c, (0..r * c).map(|k| (k as f64 + 0.5).sin()).collect())?;
            t.mul_const(x, w)
        }, None),
        ("sqrt", |t, x| {
            let y = positive(t, x);
            t.sqrt(y)
        }, None),
        ("ln", |t, x| {
            let y = positive(t, x);
            t.ln(y)
        }, None),
        ("clamp_min", |t, x| Ok(t.clamp_min(x, 0.1)), Some(0.1)),
    ]
}

fn binary_ops() -> Vec<(&'static str, Binary)> {
    vec![
        ("matmul", |t, a, b| t.matmul(a, b)),
        ("matmul_t", |t, a, b| t.matmul_t(a, b)),
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("concat_cols", |t, a, b| t.concat_cols(a, b)),
        ("add_row_bias", |t, a, b| t.add_row_bias(a, b)),
        ("masked_sq_error", |t, a, b| {
            let (r, c) = t.value(a).shape();
            let mask = Matrix::from_vec(r, c, (0..r * c).map(|k| (k % 2) as f64).collect())?;
            let m = t.constant(mask);
            t.masked_sq_error(a, b, m)
        }),
    ]
}

fn check_unary(name: &str, op: Unary, kink: Option<f64>, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut acc = Acc::new(name, OP_TOL);
    for case in 0..instances {
        let x = randn(rng.random_range(1..4), rng.random_range(1..4), rng);
        let out_shape = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v)?;
            t.value(y).shape()
        };
        let w = randn(out_shape.0, out_shape.1, rng);
        let g = check_gradients(
            &[x],
            STEP,
            |t, v| {
                let y = op(t, v[0])?;
                project(t, y, &w)
            },
            |_, e, m| kink.is_some_and(|k| (m.as_slice()[e] - k).abs() <= KINK_MARGIN),
        )?;
        acc.add(case, &g, input_label);
    }
    Ok(acc.finish())
}

fn check_binary(name: &str, op: Binary, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut acc = Acc::new(name, OP_TOL);
    for case in 0..instances {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = randn(m, k, rng);
        let b = match name {
            "matmul" => randn(k, n, rng),
            "matmul_t" => randn(n, k, rng),
            "concat_cols" => randn(m, n, rng),
            "add_row_bias" => randn(1, k, rng),
            _ => randn(m, k, rng),
        };
        let out_shape = {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = op(&mut t, va, vb)?;
            t.value(y).shape()
        };
        let w = randn(out_shape.0, out_shape.1, rng);
        let g = check_gradients(
            &[a, b],
            STEP,
            |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, &w)
            },
            |_, _, _| false,
        )?;
        acc.add(case, &g, input_label);
    }
    Ok(acc.finish())
}

fn random_sparse(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SparseRows {
    let mut x = SparseRows::with_capacity(cols, rows, rows * cols);
    for _ in 0..rows {
        for c in 0..cols {
            if rng.random::<f64>() < 0.5 {
                x.push(c, rng.random_range(-2.0..2.0));
            }
        }
        x.end_row();
    }
    x
}

fn check_sparse_matmul(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut acc = Acc::new("sparse_matmul", OP_TOL);
    for case in 0..instances {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..4));
        let x = random_sparse(m, k, rng);
        let w = randn(k, n, rng);
        let proj = randn(m, n, rng);
        let g = check_gradients(
            &[w],
            STEP,
            |t, v| {
                let y = sparse_matmul(t, x.clone(), v[0])?;
                project(t, y, &proj)
            },
            |_, _, _| false,
        )?;
        acc.add(case, &g, |_| "weight".into());
    }
    Ok(acc.finish())
}

fn random_candidates(batch: usize, n: usize, local: bool, rng: &mut ChaCha8Rng) -> Candidates {
    if !local {
        return Candidates::global(batch);
    }
    // Some rows end up empty and exercise the global fallback.
    Candidates::local(
        (0..batch)
            .map(|_| (0..n).filter(|_| rng.random::<f64>() < 0.5).collect())
            .collect(),
    )
}

fn check_attention(norm: AttentionNorm, local: bool, instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mode = if local { "local" } else { "global" };
    let mut acc = Acc::new(format!("attention_pool ({norm}, {mode})"), OP_TOL);
    for case in 0..instances {
        let (b, n, k) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..4));
        // The ratio form divides by the score sum; positive scores keep that
        // denominator away from zero so differences are well conditioned.
        let (q, table) = match norm {
            AttentionNorm::Ratio => (uniform(b, k, 0.2, 1.5, rng), uniform(n, k, 0.2, 1.5, rng)),
            AttentionNorm::Softmax => (randn(b, k, rng), randn(n, k, rng)),
        };
        let table = Rc::new(table);
        let cands = random_candidates(b, n, local, rng);
        let proj = randn(b, k, rng);
        let g = check_gradients(
            &[q],
            STEP,
            |t, v| {
                let c = attention_pool(t, v[0], Rc::clone(&table), cands.clone(), norm)?;
                project(t, c, &proj)
            },
            |_, _, _| false,
        )?;
        acc.add(case, &g, |_| "queries".into());
    }
    Ok(acc.finish())
}

/// Three users, four items, K = 2, one hidden layer per MLP.
pub struct Toy {
    pub hp: Hyperparams,
    pub model: Model,
    pub ratings: SparseRatingMatrix,
    pub by_item: SparseRatingMatrix,
    pub u_table: Matrix,
    pub v_table: Matrix,
    pub u_noise: Matrix,
    pub v_noise: Matrix,
}

impl Toy {
    pub fn new(attention: AttentionMode, norm: AttentionNorm, latent_input: LatentInput) -> Result<Toy> {
        let mut r = ChaCha8Rng::seed_from_u64(123);
        let triples = [(0, 0, 4.0), (0, 1, 3.0), (0, 3, 1.0), (1, 1, 5.0), (1, 2, 2.0), (2, 0, 1.0), (2, 2, 4.0), (2, 3, 3.0)];
        let ratings = SparseRatingMatrix::new(3, 4, triples.iter().map(|&(u, i, v)| Rating::new(u, i, v)).collect())?;
        let hp = Hyperparams {
            k: 2,
            k_prime: 3,
            layers: 1,
            layers_prime: 1,
            widths: vec![4],
            beta_u: 0.3,
            beta_v: 0.2,
            attention,
            attention_norm: norm,
            latent_input,
            ..Default::default()
        };
        let model = Model::new(&hp, 3, 4, &mut r)?;
        Ok(Toy {
            by_item: ratings.transpose()?,
            ratings,
            u_table: Matrix::random_normal(3, 2, 0.5, 0.5, &mut r),
            v_table: Matrix::random_normal(4, 2, 0.5, 0.5, &mut r),
            u_noise: Matrix::random_normal(3, 2, 0.0, 1.0, &mut r),
            v_noise: Matrix::random_normal(4, 2, 0.0, 1.0, &mut r),
            hp,
            model,
        })
    }

    /// Full negative ELBO with fixed noise, as a function of the parameters bound to `vars`.
    pub fn loss(&self, tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
        let users = [0, 1, 2];
        let items = [0, 1, 2, 3];
        let up = self.model.user.encode(tape, vars, &self.hp, &users, &self.ratings, &self.v_table)?;
        let ip = self.model.item.encode(tape, vars, &self.hp, &items, &self.by_item, &self.u_table)?;
        let us = reparameterize(tape, up.mu, up.var, self.u_noise.clone())?;
        let is = reparameterize(tape, ip.mu, ip.var, self.v_noise.clone())?;
        let pred = decode(tape, us, is)?;
        let dense = self.ratings.to_dense();
        let mask = dense.map(|v| f64::from(v != 0.0));
        let target = tape.constant(dense);
        let mask = tape.constant(mask);
        elbo_loss(
            tape,
            pred,
            target,
            mask,
            &[
                KlTerm { posterior: up, beta: self.hp.beta_u, weights: None },
                KlTerm { posterior: ip, beta: self.hp.beta_v, weights: None },
            ],
        )
    }

    /// Parameters moved off the initial point. Zero biases can put a hidden
    /// unit exactly on a ReLU kink, where differences are meaningless.
    pub fn jittered_params(&self, seed: u64) -> Vec<Matrix> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        self.model
            .store
            .values()
            .iter()
            .map(|m| {
                let noise = Matrix::random_normal(m.rows(), m.cols(), 0.0, 0.05, &mut r);
                m.zip_map(&noise, |a, b| a + b)
            })
            .collect()
    }

    pub fn check(&self, seed: u64) -> Result<GradCheck> {
        check_gradients(&self.jittered_params(seed), STEP, |t, v| self.loss(t, v), |_, _, _| false)
    }
}

/// Toy configurations covered by the suite.
pub const TOY_CONFIGS: [(AttentionMode, AttentionNorm, LatentInput); 3] = [
    (AttentionMode::Local, AttentionNorm::Ratio, LatentInput::Concat),
    (AttentionMode::Global, AttentionNorm::Softmax, LatentInput::Concat),
    (AttentionMode::Off, AttentionNorm::Ratio, LatentInput::Average),
];

/// Runs every op check on `instances` random instances, then the toy model
/// in each of [`TOY_CONFIGS`].
pub fn run_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    for (name, op, kink) in unary_ops() {
        lines.push(check_unary(name, op, kink, instances, &mut rng)?);
    }
    for (name, op) in binary_ops() {
        lines.push(check_binary(name, op, instances, &mut rng)?);
    }
    lines.push(check_sparse_matmul(instances, &mut rng)?);
    for norm in [AttentionNorm::Ratio, AttentionNorm::Softmax] {
        for local in [true, false] {
            lines.push(check_attention(norm, local, instances, &mut rng)?);
        }
    }
    for (attention, norm, latent) in TOY_CONFIGS {
        let toy = Toy::new(attention, norm, latent)?;
        let g = toy.check(rng.random())?;
        let names = toy.model.store.names();
        let mut acc = Acc::new(format!("model (attention {attention}, {norm}, {latent})"), MODEL_TOL);
        acc.add(0, &g, |k| names[k].clone());
        lines.push(acc.finish());
    }
    Ok(SuiteReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::corrupt_backward;

    #[test]
    fn suite_passes_on_the_unmodified_engine() {
        let report = run_suite(7, 100).unwrap();
        for line in &report.lines {
            assert!(line.passed(), "{line}");
            assert!(line.checked > 0, "{line}");
        }
        for op in OP_NAMES {
            assert!(report.lines.iter().any(|l| l.name.starts_with(op)), "{op} not covered");
        }
    }

    #[test]
    fn corrupted_rule_is_named() {
        for op in ["relu", "matmul", "attention_pool", "sparse_matmul"] {
            let _guard = corrupt_backward(op);
            let report = run_suite(7, 5).unwrap();
            assert!(!report.passed());
            assert!(
                report.failures().any(|l| l.name.starts_with(op)),
                "{op}: {:?}",
                report.failures().map(|l| &l.name).collect::<Vec<_>>()
            );
        }
        assert!(run_suite(7, 5).unwrap().passed());
    }
}
