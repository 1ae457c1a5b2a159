//! Rating data: loading, re-indexing, filtering, splits and batching.

mod io;
mod load;
mod matrix;
mod split;
pub mod synthetic;

pub use io::{read_manifest, write_dataset_csv, write_id_map, write_manifest, write_ratings_csv, SplitLabel};
pub use load::{load_ratings, Dataset, IdMap, RatingFormat};
pub use matrix::{binarize, Rating, SparseRatingMatrix};
pub use split::{
    filter_min_ratings, make_batches, sparsity_split, split, split_halves, subsample, DataSplit,
    Kept,
};
