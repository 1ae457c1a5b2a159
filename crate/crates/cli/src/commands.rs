use std::fs;
use std::path::Path;

use crossvae::data::synthetic::{low_rank, LowRankSpec};
use crossvae::data::{load_ratings, split, subsample, write_dataset_csv, write_id_map, write_manifest, write_ratings_csv, DataSplit, Dataset};
use crossvae::eval::{metrics_header, write_metrics_csv, write_metrics_json, MetricsReport};
use crossvae::experiment::{evaluate_state, files, run_ablation, run_sparsity, run_training, RunSpec};
use crossvae::gradcheck::{run_suite, OP_NAMES};
use crossvae::ndgrad::corrupt_backward;
use crossvae::train::load_checkpoint;
use crossvae::Error;

use crate::args::{
    Command, DataArgs, EvalArgs, EvaluateArgs, ExperimentArgs, GradcheckArgs, ModelArgs, OutArgs, SparsityArgs, SplitArgs,
    SubsampleArgs, SyntheticArgs, TrainArgs,
};

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and failed (exit 1).
    Verification(String),
    /// Bad input or arguments (exit 2).
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Numeric(_)
                | Error::NonFiniteLoss { .. }
                | Error::Chart(_)
                | Error::NotScalar { .. }
                | Error::BackwardTwice => 1,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Verification(m) | Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Sparsity(a) => sparsity(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Subsample(a) => subsample_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Synthetic(a) => synthetic(a),
    }
}

fn load(d: &DataArgs) -> Result<Dataset, Failure> {
    let path = d.dataset.as_deref().ok_or_else(|| Failure::Usage("dataset not found: pass --dataset <FILE>".into()))?;
    let ds = load_ratings(path, d.format)?;
    log::info!("loaded {} ratings, {} users, {} items", ds.ratings.nnz(), ds.users.len(), ds.items.len());
    if d.min_ratings <= 1 {
        return Ok(ds);
    }
    let ds = ds.filter_min_ratings(d.min_ratings)?;
    log::info!("after min-ratings {}: {} ratings, {} users, {} items", d.min_ratings, ds.ratings.nnz(), ds.users.len(), ds.items.len());
    Ok(ds)
}

fn load_split(d: &DataArgs) -> Result<DataSplit, Failure> {
    Ok(split(&load(d)?.ratings, d.seed)?)
}

fn run_spec(model: &ModelArgs, eval: &EvalArgs, out: &OutArgs, seed: u64) -> RunSpec {
    RunSpec {
        charts: out.charts,
        cutoffs: eval.cutoffs.clone(),
        rank_over: eval.rank_over,
        ..RunSpec::new(model.hyperparams(seed))
    }
}

fn print_reports(reports: &[MetricsReport]) {
    if let Some(first) = reports.first() {
        println!("{}", metrics_header(&first.cutoffs()));
    }
    for r in reports {
        println!("{}", r.csv_row());
    }
}

fn train(a: TrainArgs) -> Outcome {
    let sp = load_split(&a.data)?;
    let spec = run_spec(&a.model, &a.eval, &a.out, a.data.seed);
    let resume = match &a.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            let dims = (state.user_table.shape().0, state.item_table.shape().0);
            if dims != (sp.train.n_users(), sp.train.n_items()) {
                return Err(Failure::Usage(format!(
                    "checkpoint has {}x{} entities but the dataset has {}x{}",
                    dims.0,
                    dims.1,
                    sp.train.n_users(),
                    sp.train.n_items()
                )));
            }
            state.model.hp.max_iterations = a.model.max_iterations;
            state.model.hp.patience = a.model.patience;
            log::info!("resuming at iteration {}", state.iteration);
            Some(state)
        }
        None => None,
    };
    let r = run_training(&spec, &sp, Some(&a.out.out), resume)?;
    log::info!("stopped after {} iterations ({:?})", r.state.iteration, r.stop);
    print_reports(&r.reports);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let sp = load_split(&a.data)?;
    let ck = a.checkpoint.clone().unwrap_or_else(|| a.out.join(files::CHECKPOINT));
    let state = load_checkpoint(&ck)?;
    let spec = RunSpec {
        cutoffs: a.eval.cutoffs.clone(),
        rank_over: a.eval.rank_over,
        ..RunSpec::new(state.hp().clone())
    };
    let (_, reports) = evaluate_state(&state, &sp, &spec)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    write_metrics_csv(&a.out.join(files::METRICS_CSV), &reports)?;
    write_metrics_json(&a.out.join(files::METRICS_JSON), &reports)?;
    print_reports(&reports);
    Ok(())
}

fn ablate(a: ExperimentArgs) -> Outcome {
    let sp = load_split(&a.data)?;
    let spec = run_spec(&a.model, &a.eval, &a.out, a.data.seed);
    let results = run_ablation(&spec, &sp, &a.out.out, a.parallel)?;
    for (v, r) in &results {
        println!("{v:<18} test rmse {:.4} after {} iterations", r.test_rmse(), r.state.iteration);
    }
    Ok(())
}

fn sparsity(a: SparsityArgs) -> Outcome {
    let e = &a.experiment;
    let ds = load(&e.data)?;
    let spec = run_spec(&e.model, &e.eval, &e.out, e.data.seed);
    let rows = run_sparsity(&spec, &ds.ratings, &a.fractions, e.data.seed, &e.out.out, e.parallel)?;
    for r in &rows {
        println!("fraction {:<5} train {:>8} test rmse {:.4}", r.fraction, r.n_train, r.test.rmse);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let _guard = match a.inject_fault.as_deref() {
        Some(op) => {
            let name = OP_NAMES
                .iter()
                .find(|n| **n == op)
                .ok_or_else(|| Failure::Usage(format!("unknown op `{op}`; known: {}", OP_NAMES.join(", "))))?;
            Some(corrupt_backward(name))
        }
        None => None,
    };
    let report = run_suite(a.seed, a.instances)?;
    for line in &report.lines {
        println!("{line}");
    }
    if report.passed() {
        println!("all {} checks passed", report.lines.len());
        return Ok(());
    }
    let failed: Vec<String> = report.failures().map(|l| format!("{} (max rel err {:.3e})", l.name, l.max_rel_err)).collect();
    Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
}

fn subsample_cmd(a: SubsampleArgs) -> Outcome {
    let ds = load(&a.data)?;
    let (sample, rest) = subsample(&ds.ratings, a.fraction, a.data.seed)?;
    write_pair(&a.out, &ds, &[("sample.csv", &sample), ("rest.csv", &rest)])?;
    println!("{} sampled, {} remaining", sample.nnz(), rest.nnz());
    Ok(())
}

fn write_pair(out: &Path, ds: &Dataset, parts: &[(&str, &crossvae::data::SparseRatingMatrix)]) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    for (name, m) in parts {
        write_dataset_csv(&out.join(name), m, &ds.users, &ds.items)?;
    }
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Outcome {
    let ds = load(&a.data)?;
    let sp = split(&ds.ratings, a.data.seed)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    write_manifest(&a.out.join("split.csv"), &sp)?;
    write_id_map(&a.out.join("user_ids.csv"), &ds.users)?;
    write_id_map(&a.out.join("item_ids.csv"), &ds.items)?;
    println!("train {} / val {} / test {}", sp.train.nnz(), sp.validation.nnz(), sp.test.nnz());
    Ok(())
}

fn synthetic(a: SyntheticArgs) -> Outcome {
    let fx = low_rank(&LowRankSpec {
        n_users: a.users,
        n_items: a.items,
        rank: a.rank,
        density: a.density,
        noise_std: a.noise,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let path = a.out.join("ratings.csv");
    write_ratings_csv(&path, &fx.ratings)?;
    println!("wrote {} ratings to {}", fx.ratings.nnz(), path.display());
    Ok(())
}
