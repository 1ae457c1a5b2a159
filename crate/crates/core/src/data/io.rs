use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::load::IdMap;
use super::matrix::{Rating, SparseRatingMatrix};
use super::split::DataSplit;
use crate::error::{Error, Result};

/// Split labels as written in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
        }
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "val" => Ok(SplitLabel::Val),
            "test" => Ok(SplitLabel::Test),
            other => Err(Error::Param(format!("unknown split label `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    user_idx: usize,
    item_idx: usize,
    rating: f64,
    split: SplitLabel,
}

#[derive(Debug, Serialize, Deserialize)]
struct IdRow<'a> {
    raw_id: &'a str,
    dense_idx: usize,
}

/// Writes `raw_id,dense_idx` rows.
pub fn write_id_map(path: &Path, map: &IdMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (raw_id, dense_idx) in map.iter() {
        w.serialize(IdRow { raw_id, dense_idx })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `user_idx,item_idx,rating,split` rows: train, then val, then test.
pub fn write_manifest(path: &Path, split: &DataSplit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (label, part) in [
        (SplitLabel::Train, &split.train),
        (SplitLabel::Val, &split.validation),
        (SplitLabel::Test, &split.test),
    ] {
        for t in part.triples() {
            w.serialize(ManifestRow {
                user_idx: t.user,
                item_idx: t.item,
                rating: t.value,
                split: label,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest. Without explicit dimensions the index space is sized by
/// the largest index present.
pub fn read_manifest(path: &Path, dims: Option<(usize, usize)>, seed: u64) -> Result<DataSplit> {
    if !path.exists() {
        return Err(Error::NotFound("manifest", path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut parts: [Vec<Rating>; 3] = Default::default();
    for row in r.deserialize() {
        let row: ManifestRow = row?;
        let slot = match row.split {
            SplitLabel::Train => 0,
            SplitLabel::Val => 1,
            SplitLabel::Test => 2,
        };
        parts[slot].push(Rating::new(row.user_idx, row.item_idx, row.rating));
    }
    let (n_users, n_items) = dims.unwrap_or_else(|| {
        parts.iter().flatten().fold((0, 0), |(u, i), t| {
            (u.max(t.user + 1), i.max(t.item + 1))
        })
    });
    let [train, validation, test] = parts;
    Ok(DataSplit {
        train: SparseRatingMatrix::new(n_users, n_items, train)?,
        validation: SparseRatingMatrix::new(n_users, n_items, validation)?,
        test: SparseRatingMatrix::new(n_users, n_items, test)?,
        seed,
    })
}

/// Writes triples as `userId,movieId,rating,timestamp` (timestamp 0), using
/// dense indices as raw ids.
pub fn write_ratings_csv(path: &Path, m: &SparseRatingMatrix) -> Result<()> {
    write_rows(path, m, |u| u.to_string(), |i| i.to_string())
}

/// Like [`write_ratings_csv`] but with the raw ids from the dataset's id maps, so the file loads
/// back (`--format csv`) to the same dataset.
pub fn write_dataset_csv(path: &Path, m: &SparseRatingMatrix, users: &IdMap, items: &IdMap) -> Result<()> {
    write_rows(path, m, |u| users.raw(u).to_owned(), |i| items.raw(i).to_owned())
}

fn write_rows(
    path: &Path,
    m: &SparseRatingMatrix,
    user: impl Fn(usize) -> String,
    item: impl Fn(usize) -> String,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["userId", "movieId", "rating", "timestamp"])?;
    for t in m.triples() {
        w.write_record([user(t.user), item(t.item), format!("{:?}", t.value), "0".to_string()])?;
    }
    w.flush()?;
    Ok(())
}
