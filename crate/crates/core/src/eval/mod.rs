//! Rating and ranking metrics and their reports.

mod metrics;
mod report;

pub use metrics::{ndcg_at_n, rank_by_score, recall_at_n, rmse};
pub use report::{
    evaluate, evaluate_split, metrics_header, predictions, split_rmse, with_eval_threads,
    write_metrics_csv, write_metrics_json, Embeddings, MetricsReport, RankOver, DEFAULT_CUTOFFS,
    RELEVANCE_THRESHOLD, THREADS_ENV,
};
