//! Named-tensor archives and elementwise checkpoint averaging.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! [0..8)        u64  header length N
//! [8..8+N)      UTF-8 JSON header
//! [8+N..)       payload: raw tensor data
//! ```
//!
//! The header is
//! `{"tensors": {name: {"dtype": "f32"|"f16", "shape": [..], "offset": o, "length": l}}, "metadata": {..}}`
//! with offsets relative to the payload start. Tensor extents must tile the
//! payload exactly (no gaps, no overlap) and `length` must equal
//! `product(shape) * dtype size`. Writers lay tensors out in name order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("need at least two archives to merge, got {0}")]
    TooFew(usize),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("tensor `{0}` is missing from one of the archives")]
    NameMismatch(String),
    #[error("tensor `{name}` has shape {a:?} in one archive and {b:?} in another")]
    ShapeMismatch { name: String, a: Vec<usize>, b: Vec<usize> },
    #[error("tensor `{name}` is {a} in one archive and {b} in another")]
    DtypeMismatch { name: String, a: Dtype, b: Dtype },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F16(_) => Dtype::F16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F16(v) => v[i].to_f64(),
        }
    }

    fn to_le_bytes(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => {
                TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Dtype::F16 => {
                TensorData::F16(bytes.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor { shape, data: TensorData::F32(data) }
    }

    pub fn f16(shape: Vec<usize>, data: Vec<f16>) -> Self {
        Tensor { shape, data: TensorData::F16(data) }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    /// Non-tensor metadata (configs, tokenizer files), carried verbatim.
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

impl ArchiveHeader {
    /// Checks entry lengths against shapes and that extents tile
    /// `[0, payload_len)` exactly.
    pub fn validate(&self, payload_len: u64) -> Result<(), MergeError> {
        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(self.tensors.len());
        for (name, e) in &self.tensors {
            let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let want = numel.and_then(|n| n.checked_mul(e.dtype.size() as u64));
            if want != Some(e.length) {
                return Err(MergeError::Format(format!(
                    "tensor `{name}`: length {} does not match shape {:?} of {}",
                    e.length, e.shape, e.dtype
                )));
            }
            extents.push((e.offset, e.length, name));
        }
        extents.sort();
        let mut cursor = 0u64;
        for (offset, length, name) in extents {
            if offset != cursor {
                let what = if offset < cursor { "overlaps the previous tensor" } else { "leaves a gap before it" };
                return Err(MergeError::Format(format!("tensor `{name}` at offset {offset} {what}")));
            }
            cursor = offset + length;
        }
        if cursor != payload_len {
            return Err(MergeError::Format(format!("tensors cover {cursor} bytes of a {payload_len}-byte payload")));
        }
        Ok(())
    }
}

impl TensorArchive {
    pub fn validate(&self) -> Result<(), MergeError> {
        for (name, t) in &self.tensors {
            if t.numel() != t.data.len() {
                return Err(MergeError::Format(format!(
                    "tensor `{name}` has {} values for shape {:?}",
                    t.data.len(),
                    t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, MergeError> {
        self.validate()?;
        let mut header = ArchiveHeader { tensors: BTreeMap::new(), metadata: self.metadata.clone() };
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.numel() * t.data.dtype().size()) as u64;
            header
                .tensors
                .insert(name.clone(), TensorEntry { dtype: t.data.dtype(), shape: t.shape.clone(), offset, length });
            offset += length;
        }
        let json = serde_json::to_vec(&header).map_err(|e| MergeError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            t.data.to_le_bytes(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MergeError> {
        let fmt = |m: &str| MergeError::Format(m.to_string());
        let len_bytes: [u8; 8] =
            bytes.get(..8).ok_or_else(|| fmt("shorter than the 8-byte prefix"))?.try_into().unwrap();
        let n = u64::from_le_bytes(len_bytes);
        let end = 8u64
            .checked_add(n)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt("header runs past end of file"))?;
        let header: ArchiveHeader =
            serde_json::from_slice(&bytes[8..end as usize]).map_err(|e| MergeError::Format(format!("header: {e}")))?;
        let payload = &bytes[end as usize..];
        header.validate(payload.len() as u64)?;
        let tensors = header
            .tensors
            .into_iter()
            .map(|(name, e)| {
                let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
                (name, Tensor { shape: e.shape, data: TensorData::from_le_bytes(e.dtype, raw) })
            })
            .collect();
        Ok(TensorArchive { tensors, metadata: header.metadata })
    }

    pub fn read(path: &Path) -> Result<Self, MergeError> {
        let bytes = std::fs::read(path).map_err(|source| MergeError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), MergeError> {
        let bytes = self.to_bytes()?;
        let io = |source| MergeError::Io { path: path.to_path_buf(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)
    }
}

/// Checks that every archive matches the first in names, shapes and dtypes.
fn check_compatible(archives: &[&TensorArchive]) -> Result<(), MergeError> {
    let first = archives[0];
    for other in &archives[1..] {
        if let Some(name) = first.tensors.keys().find(|k| !other.tensors.contains_key(*k)) {
            return Err(MergeError::NameMismatch(name.clone()));
        }
        if let Some(name) = other.tensors.keys().find(|k| !first.tensors.contains_key(*k)) {
            return Err(MergeError::NameMismatch(name.clone()));
        }
        for (name, a) in &first.tensors {
            let b = &other.tensors[name];
            if a.shape != b.shape {
                return Err(MergeError::ShapeMismatch { name: name.clone(), a: a.shape.clone(), b: b.shape.clone() });
            }
            if a.data.dtype() != b.data.dtype() {
                return Err(MergeError::DtypeMismatch { name: name.clone(), a: a.data.dtype(), b: b.data.dtype() });
            }
        }
    }
    Ok(())
}

/// Tolerance on the weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Weighted elementwise mean of `archives`, accumulated in f64 and cast
/// back to each tensor's dtype. Without weights the plain mean is used.
/// Metadata comes from the first archive.
pub fn merge(archives: &[&TensorArchive], weights: Option<&[f64]>) -> Result<TensorArchive, MergeError> {
    if archives.len() < 2 {
        return Err(MergeError::TooFew(archives.len()));
    }
    if let Some(w) = weights {
        if w.len() != archives.len() {
            return Err(MergeError::Weights(format!("{} weights for {} archives", w.len(), archives.len())));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(MergeError::Weights("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MergeError::Weights(format!("weights sum to {sum}, not 1")));
        }
    }
    for a in archives {
        a.validate()?;
    }
    check_compatible(archives)?;

    let n = archives.len() as f64;
    let names: Vec<&String> = archives[0].tensors.keys().collect();
    let merged: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|name| {
            let parts: Vec<&TensorData> = archives.iter().map(|a| &a.tensors[*name].data).collect();
            let len = parts[0].len();
            let value = |i: usize| -> f64 {
                match weights {
                    Some(w) => parts.iter().zip(w).map(|(p, w)| w * p.get_f64(i)).sum(),
                    None => parts.iter().map(|p| p.get_f64(i)).sum::<f64>() / n,
                }
            };
            let data = match parts[0].dtype() {
                Dtype::F32 => TensorData::F32((0..len).into_par_iter().map(|i| value(i) as f32).collect()),
                Dtype::F16 => TensorData::F16((0..len).into_par_iter().map(|i| f16::from_f64(value(i))).collect()),
            };
            ((*name).clone(), Tensor { shape: archives[0].tensors[*name].shape.clone(), data })
        })
        .collect();
    Ok(TensorArchive { tensors: merged.into_iter().collect(), metadata: archives[0].metadata.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorDiff {
    pub max_abs: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub tensors: BTreeMap<String, TensorDiff>,
    pub max_abs: f64,
}

impl DiffReport {
    pub fn is_zero(&self) -> bool {
        self.max_abs == 0.0 && self.tensors.values().all(|d| d.l2 == 0.0)
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.tensors.keys().map(String::len).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>14}  {:>14}", "tensor", "max_abs", "l2")?;
        for (name, d) in &self.tensors {
            writeln!(f, "{name:<width$}  {:>14.6e}  {:>14.6e}", d.max_abs, d.l2)?;
        }
        write!(f, "overall max_abs {:.6e}", self.max_abs)
    }
}

/// Per-tensor max-abs and L2 differences between two compatible archives.
pub fn diff(a: &TensorArchive, b: &TensorArchive) -> Result<DiffReport, MergeError> {
    a.validate()?;
    b.validate()?;
    check_compatible(&[a, b])?;
    let tensors: BTreeMap<String, TensorDiff> = a
        .tensors
        .par_iter()
        .map(|(name, ta)| {
            let tb = &b.tensors[name];
            let (mut max_abs, mut sq) = (0.0f64, 0.0f64);
            for i in 0..ta.data.len() {
                let d = (ta.data.get_f64(i) - tb.data.get_f64(i)).abs();
                max_abs = max_abs.max(d);
                sq += d * d;
            }
            (name.clone(), TensorDiff { max_abs, l2: sq.sqrt() })
        })
        .collect();
    let max_abs = tensors.values().map(|d| d.max_abs).fold(0.0, f64::max);
    Ok(DiffReport { tensors, max_abs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(vals: &[(&str, Vec<f32>)]) -> TensorArchive {
        TensorArchive {
            tensors: vals.iter().map(|(n, v)| (n.to_string(), Tensor::f32(vec![v.len()], v.clone()))).collect(),
            metadata: Default::default(),
        }
    }

    #[test]
    fn arithmetic_examples() {
        let a = arc(&[("w", vec![1.0, 3.0])]);
        let b = arc(&[("w", vec![3.0, 5.0])]);
        assert_eq!(merge(&[&a, &b], None).unwrap().tensors["w"].data, TensorData::F32(vec![2.0, 4.0]));
        let a = arc(&[("w", vec![0.0, 0.0])]);
        let b = arc(&[("w", vec![4.0, 8.0])]);
        assert_eq!(merge(&[&a, &b], Some(&[0.25, 0.75])).unwrap().tensors["w"].data, TensorData::F32(vec![3.0, 6.0]));
    }

    #[test]
    fn header_tiling_is_enforced() {
        let good = arc(&[("a", vec![1.0]), ("b", vec![2.0, 3.0])]);
        let bytes = good.to_bytes().unwrap();
        assert_eq!(TensorArchive::from_bytes(&bytes).unwrap(), good);

        let mut h = ArchiveHeader::default();
        h.tensors.insert("a".into(), TensorEntry { dtype: Dtype::F32, shape: vec![1], offset: 0, length: 4 });
        h.tensors.insert("b".into(), TensorEntry { dtype: Dtype::F32, shape: vec![1], offset: 8, length: 4 });
        assert!(h.validate(12).unwrap_err().to_string().contains("gap"));
        h.tensors.get_mut("b").unwrap().offset = 2;
        assert!(h.validate(6).unwrap_err().to_string().contains("overlaps"));
        h.tensors.get_mut("b").unwrap().offset = 4;
        h.validate(8).unwrap();
        assert!(h.validate(12).is_err());
        h.tensors.get_mut("b").unwrap().length = 6;
        assert!(h.validate(10).unwrap_err().to_string().contains("does not match shape"));
    }

    #[test]
    fn f16_round_trip_and_merge() {
        let a = TensorArchive {
            tensors: [("h".to_string(), Tensor::f16(vec![2], vec![f16::from_f32(1.0), f16::from_f32(-2.0)]))].into(),
            metadata: [("config".to_string(), Value::from("x"))].into(),
        };
        let back = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        let m = merge(&[&a, &back], None).unwrap();
        assert_eq!(m, a);
    }

    #[test]
    fn mismatch_errors_name_the_tensor() {
        let a = arc(&[("w", vec![1.0, 3.0])]);
        let b = arc(&[("v", vec![1.0, 3.0])]);
        assert!(matches!(merge(&[&a, &b], None), Err(MergeError::NameMismatch(n)) if n == "w"));
        let c = arc(&[("w", vec![1.0])]);
        assert!(matches!(merge(&[&a, &c], None), Err(MergeError::ShapeMismatch { name, .. }) if name == "w"));
        assert!(matches!(merge(&[&a], None), Err(MergeError::TooFew(1))));
        assert!(matches!(merge(&[&a, &a], Some(&[0.5, 0.6])), Err(MergeError::Weights(_))));
    }
}
