use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::matrix::{Rating, SparseRatingMatrix};
use crate::error::{Error, Result};

/// Supported rating-file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// `userId::movieId::rating::timestamp`, no header (MovieLens 1M/10M).
    DoubleColon,
    /// Header `userId,movieId,rating,timestamp` (MovieLens 20M).
    Csv,
    /// `user,item,rating,timestamp`, no header (Amazon review dumps).
    Amazon,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_colon" | "double-colon" | "dat" => Ok(RatingFormat::DoubleColon),
            "csv" => Ok(RatingFormat::Csv),
            "amazon" => Ok(RatingFormat::Amazon),
            other => Err(Error::Param(format!(
                "unknown format `{other}` (expected double_colon, csv or amazon)"
            ))),
        }
    }
}

/// Raw identifier ↔ dense index, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.raw[dense]
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.raw.iter().enumerate().map(|(i, r)| (r.as_str(), i))
    }

    /// Keeps the listed dense indices, renumbered in the given order.
    pub fn retain(&self, kept: &[usize]) -> IdMap {
        let mut out = IdMap::default();
        for &k in kept {
            out.intern(&self.raw[k]);
        }
        out
    }
}

/// A rating matrix together with the id maps that produced its indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ratings: SparseRatingMatrix,
    pub users: IdMap,
    pub items: IdMap,
}

impl Dataset {
    pub fn filter_min_ratings(&self, min_count: usize) -> Result<Dataset> {
        let (ratings, kept) = super::filter_min_ratings(&self.ratings, min_count)?;
        Ok(Dataset {
            ratings,
            users: self.users.retain(&kept.users),
            items: self.items.retain(&kept.items),
        })
    }
}

fn parse_line<'a>(
    format: RatingFormat,
    line: &'a str,
) -> std::result::Result<(&'a str, &'a str, &'a str), String> {
    let mut fields: Vec<&str> = match format {
        RatingFormat::DoubleColon => line.split("::").collect(),
        RatingFormat::Csv | RatingFormat::Amazon => line.split(',').collect(),
    };
    fields.iter_mut().for_each(|f| *f = f.trim());
    if fields.len() < 3 {
        return Err(format!("expected at least 3 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    Ok((fields[0], fields[1], fields[2]))
}

/// Reads a rating file and densely re-indexes users and items.
///
/// Timestamps are ignored. A repeated `(user, item)` pair keeps the rating of
/// its last occurrence. Zero is reserved for "missing" and is rejected.
pub fn load_ratings(path: &Path, format: RatingFormat) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::NotFound("dataset", path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut triples: Vec<Rating> = Vec::new();
    let mut position: HashMap<(usize, usize), usize> = HashMap::new();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if n == 0 && format == RatingFormat::Csv {
            if !line.to_ascii_lowercase().starts_with("userid") {
                return Err(err(
                    lineno,
                    "expected header `userId,movieId,rating,timestamp`".into(),
                ));
            }
            continue;
        }
        let (u, i, r) = parse_line(format, line).map_err(|m| err(lineno, m))?;
        let value: f64 = r
            .parse()
            .map_err(|_| err(lineno, format!("rating `{r}` is not a number")))?;
        if !value.is_finite() {
            return Err(err(lineno, format!("rating `{r}` is not finite")));
        }
        if value == 0.0 {
            return Err(err(lineno, "rating 0 is reserved for missing entries".into()));
        }
        let (u, i) = (users.intern(u), items.intern(i));
        match position.get(&(u, i)) {
            Some(&k) => triples[k].value = value,
            None => {
                position.insert((u, i), triples.len());
                triples.push(Rating::new(u, i, value));
            }
        }
    }
    if triples.is_empty() {
        return Err(Error::Empty(format!("no ratings in {}", path.display())));
    }
    let ratings = SparseRatingMatrix::new(users.len(), items.len(), triples)?;
    Ok(Dataset {
        ratings,
        users,
        items,
    })
}
