//! End-to-end pipelines: train and evaluate one configuration, the four
//! ablation variants, and the sparsity sweep. Every artifact lands under the
//! given output directory.

mod chart;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use chart::line_chart;

use crate::data::{sparsity_split, DataSplit, SparseRatingMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, split_rmse, with_eval_threads, Embeddings, MetricsReport, RankOver, DEFAULT_CUTOFFS};
use crate::model::{AttentionMode, Hyperparams};
use crate::train::{fit, save_checkpoint, Decision, IterationRecord, StopReason, TrainData, TrainState};

/// File names written by [`run_training`] and the experiment drivers.
pub mod files {
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const TRAINING_LOG: &str = "training_log.csv";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const CONVERGENCE_CSV: &str = "convergence.csv";
    pub const CONVERGENCE_SVG: &str = "convergence.svg";
    pub const ABLATION_CSV: &str = "ablation.csv";
    pub const ABLATION_CURVES_CSV: &str = "ablation_curves.csv";
    pub const ABLATION_CURVES_SVG: &str = "ablation_curves.svg";
    pub const SPARSITY_CSV: &str = "sparsity.csv";
}

/// Fractions of the sparsity sweep.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.10];

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub hp: Hyperparams,
    pub cutoffs: Vec<usize>,
    pub rank_over: RankOver,
    /// Also write SVG charts next to the CSV curves.
    pub charts: bool,
}

impl RunSpec {
    pub fn new(hp: Hyperparams) -> Self {
        RunSpec {
            hp,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            rank_over: RankOver::default(),
            charts: false,
        }
    }
}

/// One row of the convergence curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    /// Test RMSE of the posterior means after this iteration; NaN without a test split.
    pub test_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: TrainState,
    pub records: Vec<IterationRecord>,
    pub curve: Vec<CurvePoint>,
    /// Reports for train, val and test, evaluated at the best validation iteration.
    pub reports: Vec<MetricsReport>,
    pub stop: StopReason,
}

impl RunResult {
    pub fn report(&self, split: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.split == split)
    }

    pub fn test_rmse(&self) -> f64 {
        self.report("test").map_or(f64::NAN, |r| r.rmse)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    x.to_string()
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "train_loss", "val_rmse", "test_rmse"])?;
    for p in curve {
        w.write_record([
            p.iteration.to_string(),
            fmt_f64(p.train_loss),
            fmt_f64(p.val_rmse),
            fmt_f64(p.test_rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `spec.hp` on `split` (or continues `resume`), evaluates the best
/// posterior means on all three splits and, when `out` is given, writes the
/// checkpoint, training log, metrics, and convergence curve there.
pub fn run_training(
    spec: &RunSpec,
    split: &DataSplit,
    out: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<RunResult> {
    let data = TrainData::new(split)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(&spec.hp, &data)?,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    let log = out.map(|d| d.join(files::TRAINING_LOG));
    let mut curve = Vec::new();
    let records = fit(&mut state, &data, log.as_deref(), |rec, st| {
        let test_rmse = match (&st.latest, split.test.is_empty()) {
            (Some(means), false) => split_rmse(means, &split.test)?,
            _ => f64::NAN,
        };
        curve.push(CurvePoint {
            iteration: rec.iteration,
            train_loss: rec.train_loss,
            val_rmse: rec.val_rmse,
            test_rmse,
        });
        Ok(())
    })?;
    let stop = match state.decision() {
        Decision::Stop(reason) => reason,
        Decision::Continue => unreachable!("fit returns only once training stops"),
    };
    let emb = state.best_embeddings(&data)?;
    let fingerprint = state.hp().fingerprint();
    let reports = with_eval_threads(|| evaluate(&emb, split, &spec.cutoffs, spec.rank_over, &fingerprint))?;

    if let Some(dir) = out {
        save_checkpoint(&dir.join(files::CHECKPOINT), &state)?;
        crate::eval::write_metrics_csv(&dir.join(files::METRICS_CSV), &reports)?;
        crate::eval::write_metrics_json(&dir.join(files::METRICS_JSON), &reports)?;
        write_curve(&dir.join(files::CONVERGENCE_CSV), &curve)?;
        if spec.charts {
            let series = |name: &str, f: fn(&CurvePoint) -> f64| {
                (name.to_owned(), curve.iter().map(|p| (p.iteration as f64, f(p))).collect())
            };
            line_chart(
                &dir.join(files::CONVERGENCE_SVG),
                "RMSE",
                &[series("validation", |p| p.val_rmse), series("test", |p| p.test_rmse)],
            )?;
        }
    }
    Ok(RunResult {
        state,
        records,
        curve,
        reports,
        stop,
    })
}

/// Reports for an already trained state on `split`, at its best posterior means.
pub fn evaluate_state(state: &TrainState, split: &DataSplit, spec: &RunSpec) -> Result<(Embeddings, Vec<MetricsReport>)> {
    let data = TrainData::new(split)?;
    let emb = state.best_embeddings(&data)?;
    let fingerprint = state.hp().fingerprint();
    let reports = with_eval_threads(|| evaluate(&emb, split, &spec.cutoffs, spec.rank_over, &fingerprint))?;
    Ok((emb, reports))
}

/// Ablation variants; each removes one more component than the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAttention,
    /// No latent path and no attention: nothing reads the counterpart tables.
    NoCrossFeedback,
    NoDataInput,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoAttention,
        Variant::NoCrossFeedback,
        Variant::NoDataInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no-attention",
            Variant::NoCrossFeedback => "no-cross-feedback",
            Variant::NoDataInput => "no-data-input",
        }
    }

    pub fn apply(self, hp: &Hyperparams) -> Hyperparams {
        let mut hp = hp.clone();
        match self {
            Variant::Full => {}
            Variant::NoAttention => hp.attention = AttentionMode::Off,
            Variant::NoCrossFeedback => {
                hp.attention = AttentionMode::Off;
                hp.cross_feedback = false;
            }
            Variant::NoDataInput => hp.data_input = false,
        }
        hp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown ablation variant `{s}`")))
    }
}

fn metric_columns(cutoffs: &[usize]) -> Vec<String> {
    let mut cols = vec!["rmse".to_owned()];
    cols.extend(cutoffs.iter().map(|n| format!("ndcg@{n}")));
    cols.extend(cutoffs.iter().map(|n| format!("recall@{n}")));
    cols.push("n_users".to_owned());
    cols
}

fn metric_values(r: &MetricsReport) -> Vec<String> {
    let mut vals = vec![fmt_f64(r.rmse)];
    vals.extend(r.ndcg.values().copied().map(fmt_f64));
    vals.extend(r.recall.values().copied().map(fmt_f64));
    vals.push(r.n_users_evaluated.to_string());
    vals
}

fn test_report(r: &RunResult) -> Result<&MetricsReport> {
    r.report("test")
        .ok_or_else(|| Error::Empty("run produced no test report".into()))
}

/// Runs `jobs` in order, or concurrently when `parallel` is set. Results keep
/// the input order either way.
fn run_jobs<T: Sync, R: Send>(jobs: &[T], parallel: bool, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if parallel {
        jobs.par_iter().map(&f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

/// Trains every variant with the same split and seed. Each variant's
/// artifacts go to `out/<variant>/`; `out/ablation.csv` compares test
/// metrics and `out/ablation_curves.csv` holds the per-iteration test RMSE.
pub fn run_ablation(spec: &RunSpec, split: &DataSplit, out: &Path, parallel: bool) -> Result<Vec<(Variant, RunResult)>> {
    ensure_dir(out)?;
    let results = run_jobs(&Variant::ALL, parallel, |&v| {
        let vspec = RunSpec {
            hp: v.apply(&spec.hp),
            ..spec.clone()
        };
        log::info!("ablation variant {v}");
        run_training(&vspec, split, Some(&out.join(v.name())), None)
    })?;
    let results: Vec<(Variant, RunResult)> = Variant::ALL.into_iter().zip(results).collect();

    let mut w = csv::Writer::from_path(out.join(files::ABLATION_CSV))?;
    let mut header = vec!["variant".to_owned(), "iterations".to_owned(), "best_iteration".to_owned(), "val_rmse".to_owned()];
    header.extend(metric_columns(&spec.cutoffs));
    w.write_record(&header)?;
    for (v, r) in &results {
        let mut row = vec![
            v.name().to_owned(),
            r.state.iteration.to_string(),
            r.state.convergence.best_iteration.to_string(),
            fmt_f64(r.report("val").map_or(f64::NAN, |m| m.rmse)),
        ];
        row.extend(metric_values(test_report(r)?));
        w.write_record(&row)?;
    }
    w.flush()?;

    let longest = results.iter().map(|(_, r)| r.curve.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(out.join(files::ABLATION_CURVES_CSV))?;
    let mut header = vec!["iteration".to_owned()];
    header.extend(results.iter().map(|(v, _)| v.name().to_owned()));
    w.write_record(&header)?;
    for k in 0..longest {
        let mut row = vec![(k + 1).to_string()];
        row.extend(results.iter().map(|(_, r)| r.curve.get(k).map_or(String::new(), |p| fmt_f64(p.test_rmse))));
        w.write_record(&row)?;
    }
    w.flush()?;
    if spec.charts {
        let series: Vec<(String, Vec<(f64, f64)>)> = results
            .iter()
            .map(|(v, r)| (v.name().to_owned(), r.curve.iter().map(|p| (p.iteration as f64, p.test_rmse)).collect()))
            .collect();
        line_chart(&out.join(files::ABLATION_CURVES_SVG), "test RMSE", &series)?;
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct SparsityRow {
    pub fraction: f64,
    pub n_train: usize,
    pub iterations: usize,
    pub test: MetricsReport,
}

/// Sorted, de-duplicated fractions, each strictly inside (0, 1).
pub fn normalize_fractions(fractions: &[f64]) -> Result<Vec<f64>> {
    if fractions.is_empty() {
        return Err(Error::Param("no sparsity fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::Param(format!("fraction {f} outside (0, 1)")));
    }
    let mut out = fractions.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Directory name for one fraction, e.g. `fraction-0.05`.
pub fn fraction_dir(fraction: f64) -> PathBuf {
    PathBuf::from(format!("fraction-{fraction}"))
}

/// For each fraction: sample that share of `ratings` as training data, halve
/// the rest into validation and test, train and evaluate. Writes
/// `out/sparsity.csv` with one row per fraction in increasing order.
pub fn run_sparsity(
    spec: &RunSpec,
    ratings: &SparseRatingMatrix,
    fractions: &[f64],
    seed: u64,
    out: &Path,
    parallel: bool,
) -> Result<Vec<SparsityRow>> {
    let fractions = normalize_fractions(fractions)?;
    ensure_dir(out)?;
    let rows = run_jobs(&fractions, parallel, |&f| {
        let split = sparsity_split(ratings, f, seed)?;
        log::info!("sparsity fraction {f}: {} training ratings", split.train.nnz());
        let r = run_training(spec, &split, Some(&out.join(fraction_dir(f))), None)?;
        Ok(SparsityRow {
            fraction: f,
            n_train: split.train.nnz(),
            iterations: r.state.iteration,
            test: test_report(&r)?.clone(),
        })
    })?;

    let mut w = csv::Writer::from_path(out.join(files::SPARSITY_CSV))?;
    let mut header = vec!["fraction".to_owned(), "n_train".to_owned(), "iterations".to_owned()];
    header.extend(metric_columns(&spec.cutoffs));
    w.write_record(&header)?;
    for r in &rows {
        let mut row = vec![fmt_f64(r.fraction), r.n_train.to_string(), r.iterations.to_string()];
        row.extend(metric_values(&r.test));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(rows)
}
