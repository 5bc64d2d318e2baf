//! Image grouping: embedding-similarity adaptive selection and plain random
//! chunking.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{stream_rng, GroupingConfig};

/// Tolerance on the unit-norm check.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("embedding line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("embedding index is empty")]
    Empty,
    #[error("{0}")]
    Pool(String),
}

/// One line of the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub path: String,
    pub dim: usize,
    pub embedding: Vec<f64>,
}

/// Unit-normalized per-image feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T = f32> {
    pub dim: usize,
    pub paths: Vec<String>,
    pub vectors: Vec<Vec<T>>,
}

impl<T: Float + Send + Sync> EmbeddingIndex<T> {
    /// Builds an index, checking dimensions and unit norms.
    pub fn new(dim: usize, records: Vec<(String, Vec<T>)>) -> Result<Self, GroupingError> {
        let mut paths = Vec::with_capacity(records.len());
        let mut vectors = Vec::with_capacity(records.len());
        for (i, (path, v)) in records.into_iter().enumerate() {
            let line = i + 1;
            if v.len() != dim {
                return Err(GroupingError::Invalid { line, reason: format!("{} values, expected {dim}", v.len()) });
            }
            let norm = v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(GroupingError::Invalid { line, reason: format!("norm {norm} is not 1") });
            }
            paths.push(path);
            vectors.push(v);
        }
        Ok(EmbeddingIndex { dim, paths, vectors })
    }

    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, GroupingError> {
        let dim = records.first().map_or(0, |r| r.dim);
        let mut rows = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if r.dim != dim {
                return Err(GroupingError::Invalid {
                    line: i + 1,
                    reason: format!("dim {} differs from {dim}", r.dim),
                });
            }
            let v = r.embedding.iter().map(|x| T::from(*x).unwrap_or_else(T::nan)).collect();
            rows.push((r.path, v));
        }
        Self::new(dim, rows)
    }

    pub fn load(path: &Path) -> Result<Self, GroupingError> {
        let io = |source| GroupingError::Io { path: path.to_path_buf(), source };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| GroupingError::Invalid { line: i + 1, reason: e.to_string() })?,
            );
        }
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Cosine similarity; vectors are unit length so this is the dot product.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.vectors[a]
            .iter()
            .zip(&self.vectors[b])
            .map(|(x, y)| x.to_f64().unwrap_or(0.0) * y.to_f64().unwrap_or(0.0))
            .sum()
    }
}

/// Number of candidates kept from a sorted similarity list.
pub fn candidate_count(thres: f64, sorted_len: usize) -> usize {
    (thres * sorted_len as f64).floor() as usize
}

/// Adaptive similarity grouping over an embedding index, returning groups of
/// image paths.
///
/// Each round takes the first remaining image as anchor, draws `thres` and
/// `r` from a round-specific RNG stream, ranks the other remaining images by
/// similarity to the anchor (descending, optionally skipping the top one),
/// keeps the top `max(⌊thres·n⌋, min(r, n))` as candidates and samples
/// `min(r, candidates)` of them. The floor on the candidate count keeps
/// groups at `1 + r` images while enough remain.
///
/// `threads` sizes the worker pool used for similarity ranking; the output
/// does not depend on it.
pub fn adaptive_groups<T: Float + Send + Sync>(
    index: &EmbeddingIndex<T>,
    cfg: &GroupingConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<Vec<Vec<String>>, GroupingError> {
    if index.is_empty() {
        return Err(GroupingError::Empty);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| GroupingError::Pool(e.to_string()))?;

    let mut remaining: Vec<usize> = (0..index.len()).collect();
    let mut groups = Vec::new();
    let mut round = 0u64;
    while !remaining.is_empty() {
        let mut rng = stream_rng(seed, round);
        round += 1;
        let anchor = remaining[0];
        let others = &remaining[1..];
        let thres = rng.gen_range(cfg.thres.min..=cfg.thres.max);
        let r = rng.gen_range(cfg.sample.min..=cfg.sample.max);

        let mut ranked: Vec<(f64, usize)> =
            pool.install(|| others.par_iter().map(|&j| (index.similarity(anchor, j), j)).collect());
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if cfg.drop_most_similar && ranked.len() > r {
            ranked.remove(0);
        }
        let k = candidate_count(thres, ranked.len()).max(r.min(ranked.len()));
        let candidates: Vec<usize> = ranked[..k].iter().map(|p| p.1).collect();
        let mut selected: Vec<usize> = candidates.choose_multiple(&mut rng, r.min(k)).copied().collect();
        selected.sort_unstable();

        let mut group = vec![anchor];
        group.extend(&selected);
        remaining.retain(|i| !group.contains(i));
        groups.push(group.into_iter().map(|i| index.paths[i].clone()).collect());
    }
    Ok(groups)
}

/// Shuffles items and cuts them into groups with sizes drawn from `sizes`.
/// A short final group is kept.
pub fn random_groups<T: Clone>(items: &[T], sizes: super::Span<usize>, seed: u64) -> Vec<Vec<T>> {
    let mut rng = stream_rng(seed, u64::MAX);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    let mut rest = &order[..];
    while !rest.is_empty() {
        let n = rng.gen_range(sizes.min.max(1)..=sizes.max.max(1)).min(rest.len());
        out.push(rest[..n].iter().map(|&i| items[i].clone()).collect());
        rest = &rest[n..];
    }
    out
}
