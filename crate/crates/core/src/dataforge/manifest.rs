//! Training stage mixing manifests.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = ManifestError;
    fn try_from(v: u8) -> Result<Self, ManifestError> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(ManifestError::UnknownStage(v)),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("unknown stage {0}; expected 1 or 2")]
    UnknownStage(u8),
    #[error("required source `{0}` is not available")]
    MissingSource(&'static str),
    #[error("source `{0}` is empty")]
    EmptySource(&'static str),
}

/// Source name and percentage share for a stage.
pub fn stage_shares(stage: Stage) -> &'static [(&'static str, u32)] {
    match stage {
        Stage::One => {
            &[("s_understanding", 17), ("s_grounding", 13), ("m_understanding", 16), ("m_grounding_stage1", 54)]
        }
        Stage::Two => &[
            ("s_understanding", 9),
            ("s_grounding", 7),
            ("m_understanding", 8),
            ("m_grounding_stage1", 27),
            ("m_grounding_stage2", 49),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub percent: u32,
    pub count: usize,
    pub available: usize,
    /// Sampled record indices into the source. Drawn without replacement;
    /// when the source is smaller than `count` it is repeated in whole
    /// shuffled passes first.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub total: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Largest-remainder apportionment of `total` over integer percentages.
fn apportion(total: usize, shares: &[(&str, u32)]) -> Vec<usize> {
    let sum: u64 = shares.iter().map(|s| s.1 as u64).sum();
    let exact: Vec<(u64, u64)> =
        shares.iter().map(|s| ((total as u64 * s.1 as u64) / sum, (total as u64 * s.1 as u64) % sum)).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.0 as usize).collect();
    let short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Builds the mixing manifest for `stage` over named sources with their
/// record counts.
pub fn stage_manifest(
    stage: Stage,
    available: &BTreeMap<String, usize>,
    total: usize,
    seed: u64,
) -> Result<Manifest, ManifestError> {
    let shares = stage_shares(stage);
    for (name, _) in shares {
        match available.get(*name) {
            None => return Err(ManifestError::MissingSource(name)),
            Some(0) => return Err(ManifestError::EmptySource(name)),
            Some(_) => {}
        }
    }
    let counts = apportion(total, shares);
    let entries = shares
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (&(name, percent), count))| {
            let n = available[name];
            let mut rng = stream_rng(seed, k as u64);
            let mut indices = Vec::with_capacity(count);
            while indices.len() + n <= count {
                let mut pass: Vec<usize> = (0..n).collect();
                pass.shuffle(&mut rng);
                indices.extend(pass);
            }
            let rest = count - indices.len();
            indices.extend(sample(&mut rng, n, rest));
            ManifestEntry { source: name.to_string(), percent, count, available: n, indices }
        })
        .collect();
    Ok(Manifest { stage, total, seed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn avail(n: usize) -> BTreeMap<String, usize> {
        ["s_understanding", "s_grounding", "m_understanding", "m_grounding_stage1", "m_grounding_stage2"]
            .iter()
            .map(|s| (s.to_string(), n))
            .collect()
    }

    #[test]
    fn small_totals_sum_exactly() {
        for total in [0, 1, 7, 100, 101, 999] {
            for stage in [Stage::One, Stage::Two] {
                let m = stage_manifest(stage, &avail(50), total, 3).unwrap();
                assert_eq!(m.entries.iter().map(|e| e.count).sum::<usize>(), total);
                assert!(m.entries.iter().all(|e| e.indices.len() == e.count && e.indices.iter().all(|&i| i < 50)));
            }
        }
    }

    #[test]
    fn missing_source() {
        let mut a = avail(5);
        a.remove("m_grounding_stage2");
        assert_eq!(stage_manifest(Stage::Two, &a, 10, 0), Err(ManifestError::MissingSource("m_grounding_stage2")));
        assert!(stage_manifest(Stage::One, &a, 10, 0).is_ok());
    }

    #[test]
    fn sampling_is_seeded() {
        let a = stage_manifest(Stage::One, &avail(1000), 500, 7).unwrap();
        let b = stage_manifest(Stage::One, &avail(1000), 500, 7).unwrap();
        let c = stage_manifest(Stage::One, &avail(1000), 500, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
