//! Benchmark instance schema, JSONL persistence and validation.
//!
//! One instance per line, UTF-8. Field names are fixed:
//!
//! ```json
//! {"id": "...", "task": "common_object",
//!  "images": [{"path": "a.jpg", "width": 640, "height": 480}],
//!  "query_text": "...",
//!  "query_regions": [{"image": 0, "box": [x1, y1, x2, y2], "space": "pixel"}],
//!  "ground_truth": [{"image": 1, "box": [x1, y1, x2, y2], "space": "norm1000"}],
//!  "meta": {}}
//! ```
//!
//! Image paths are stored as written and resolved against the dataset
//! file's directory when checked.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BBox, CoordSpace, GeometryError, Region, SpaceTag};
use crate::outparse::ParsedAnswer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    StaticDifference,
    RobustDifference,
    CommonObject,
    ObjectTracking,
    MultiView,
    RegionLocating,
    ReferringGrounding,
    GroupGrounding,
    Reasoning,
    Correspondence,
    /// Synthesized free-form training data; not a benchmark task.
    Freeform,
}

impl TaskKind {
    /// The ten benchmark tasks, in leaderboard column order.
    pub const BENCHMARK: [TaskKind; 10] = [
        TaskKind::StaticDifference,
        TaskKind::RobustDifference,
        TaskKind::CommonObject,
        TaskKind::ObjectTracking,
        TaskKind::MultiView,
        TaskKind::RegionLocating,
        TaskKind::ReferringGrounding,
        TaskKind::GroupGrounding,
        TaskKind::Reasoning,
        TaskKind::Correspondence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::StaticDifference => "static_difference",
            TaskKind::RobustDifference => "robust_difference",
            TaskKind::CommonObject => "common_object",
            TaskKind::ObjectTracking => "object_tracking",
            TaskKind::MultiView => "multi_view",
            TaskKind::RegionLocating => "region_locating",
            TaskKind::ReferringGrounding => "referring_grounding",
            TaskKind::GroupGrounding => "group_grounding",
            TaskKind::Reasoning => "reasoning",
            TaskKind::Correspondence => "correspondence",
            TaskKind::Freeform => "freeform",
        }
    }

    /// Tasks where the target is implied by relations between images rather
    /// than by an explicit reference.
    pub fn is_spontaneous(&self) -> bool {
        matches!(self, TaskKind::StaticDifference | TaskKind::RobustDifference | TaskKind::CommonObject)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown task kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn space(&self) -> CoordSpace {
        CoordSpace::Pixel { width: self.width, height: self.height }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub task: TaskKind,
    pub images: Vec<ImageRef>,
    pub query_text: Option<String>,
    pub query_regions: Vec<Region>,
    pub ground_truth: Vec<Region>,
    pub meta: BTreeMap<String, Value>,
}

/// Meta key listing images that only carry the query (never a target).
pub const META_REFERENCE_IMAGES: &str = "reference_images";

impl Instance {
    /// Images that may hold a target: everything except declared reference
    /// images, or images carrying a visual query region. Falls back to all
    /// images if that would leave none.
    pub fn candidate_images(&self) -> Vec<usize> {
        let mut reference: BTreeSet<usize> = match self.meta.get(META_REFERENCE_IMAGES) {
            Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect(),
            _ => self.query_regions.iter().map(|r| r.image_index).collect(),
        };
        // A target image is never a pure reference.
        for g in &self.ground_truth {
            reference.remove(&g.image_index);
        }
        let c: Vec<usize> = (0..self.images.len()).filter(|i| !reference.contains(i)).collect();
        if c.is_empty() {
            (0..self.images.len()).collect()
        } else {
            c
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.images.is_empty() {
            return Err("images must be non-empty".into());
        }
        if self.ground_truth.is_empty() {
            return Err("ground_truth must be non-empty".into());
        }
        if self.query_text.is_none() && self.query_regions.is_empty() {
            return Err("query_text and query_regions are both absent".into());
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(format!("image {i} ({}) has zero size", img.path));
            }
        }
        for (field, regions) in [("query_regions", &self.query_regions), ("ground_truth", &self.ground_truth)] {
            for (k, r) in regions.iter().enumerate() {
                if r.image_index >= self.images.len() {
                    return Err(format!(
                        "{field}[{k}] image index {} out of range for {} images",
                        r.image_index,
                        self.images.len()
                    ));
                }
                if !r.bbox.is_finite() || !r.bbox.is_canonical() {
                    return Err(format!("{field}[{k}] box {:?} is not canonical", r.bbox));
                }
                if let CoordSpace::Pixel { width, height } = r.space {
                    let img = &self.images[r.image_index];
                    if (width, height) != (img.width, img.height) {
                        return Err(format!("{field}[{k}] pixel space does not match image size"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub space: SpaceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

/// Wire form of one dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub task: TaskKind,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_regions: Vec<RegionRecord>,
    pub ground_truth: Vec<RegionRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl From<&Instance> for InstanceRecord {
    fn from(inst: &Instance) -> Self {
        let region = |r: &Region| RegionRecord { image: r.image_index, bbox: r.bbox.into(), space: r.space.tag() };
        InstanceRecord {
            id: inst.id.clone(),
            task: inst.task,
            images: inst
                .images
                .iter()
                .map(|i| ImageRecord { path: i.path.clone(), width: Some(i.width), height: Some(i.height) })
                .collect(),
            query_text: inst.query_text.clone(),
            query_regions: inst.query_regions.iter().map(region).collect(),
            ground_truth: inst.ground_truth.iter().map(region).collect(),
            meta: inst.meta.clone(),
        }
    }
}

impl InstanceRecord {
    /// Resolves image sizes (via `probe` for missing ones) and checks every
    /// instance invariant.
    pub fn into_instance(self, mut probe: impl FnMut(&str) -> Result<(u32, u32), String>) -> Result<Instance, String> {
        let mut images = Vec::with_capacity(self.images.len());
        for img in self.images {
            let (width, height) = match (img.width, img.height) {
                (Some(w), Some(h)) => (w, h),
                _ => probe(&img.path)?,
            };
            images.push(ImageRef { path: img.path, width, height });
        }
        let region = |field: &str, k: usize, r: RegionRecord| -> Result<Region, String> {
            let img = images.get(r.image).ok_or_else(|| {
                format!("{field}[{k}] image index {} out of range for {} images", r.image, images.len())
            })?;
            let space = CoordSpace::from_tag(r.space, img.width, img.height).map_err(|e| e.to_string())?;
            let [x1, y1, x2, y2] = r.bbox;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|e: GeometryError| format!("{field}[{k}]: {e}"))?;
            Ok(Region { image_index: r.image, bbox, space })
        };
        let query_regions = self
            .query_regions
            .into_iter()
            .enumerate()
            .map(|(k, r)| region("query_regions", k, r))
            .collect::<Result<Vec<_>, _>>()?;
        let ground_truth = self
            .ground_truth
            .into_iter()
            .enumerate()
            .map(|(k, r)| region("ground_truth", k, r))
            .collect::<Result<Vec<_>, _>>()?;
        let inst = Instance {
            id: self.id,
            task: self.task,
            images,
            query_text: self.query_text,
            query_regions,
            ground_truth,
            meta: self.meta,
        };
        inst.validate()?;
        Ok(inst)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: missing image files: {}", .paths.join(", "))]
    MissingImages { line: usize, paths: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Require every referenced image file to exist.
    pub check_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_images: true }
    }
}

/// Loads and validates a JSONL dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>, DataError> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, opts: LoadOptions) -> Result<Vec<Instance>, DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Invalid { line: line_no, reason: e.to_string() })?;
        if opts.check_images {
            let missing: Vec<String> = rec
                .images
                .iter()
                .filter(|img| !base.join(&img.path).is_file())
                .map(|img| base.join(&img.path).display().to_string())
                .collect();
            if !missing.is_empty() {
                return Err(DataError::MissingImages { line: line_no, paths: missing });
            }
        }
        let inst = rec
            .into_instance(|p| {
                image::image_dimensions(base.join(p)).map_err(|e| format!("reading dimensions of {p}: {e}"))
            })
            .map_err(|reason| DataError::Invalid { line: line_no, reason })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut w: W, instances: &[Instance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, &InstanceRecord::from(inst))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> std::io::Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), instances)
}

/// Instance counts per task, for distribution summaries.
pub fn task_counts(instances: &[Instance]) -> BTreeMap<TaskKind, usize> {
    let mut m = BTreeMap::new();
    for i in instances {
        *m.entry(i.task).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FindingKind {
    DuplicateId,
    /// A box covering less than one square pixel.
    ZeroArea {
        field: String,
        index: usize,
        area: f64,
    },
    OutOfBounds {
        field: String,
        index: usize,
    },
    EmptyQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub instance_id: String,
    #[serde(flatten)]
    pub kind: FindingKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Report-only quality checks over loaded instances.
pub fn validate_benchmark(instances: &[Instance]) -> ValidationReport {
    let mut findings = Vec::new();
    let mut seen = HashSet::new();
    for inst in instances {
        if !seen.insert(inst.id.as_str()) {
            findings.push(Finding { instance_id: inst.id.clone(), kind: FindingKind::DuplicateId });
        }
        let text_empty = inst.query_text.as_deref().is_none_or(|t| t.trim().is_empty());
        if text_empty && inst.query_regions.is_empty() {
            findings.push(Finding { instance_id: inst.id.clone(), kind: FindingKind::EmptyQuery });
        }
        for (field, regions) in [("query_regions", &inst.query_regions), ("ground_truth", &inst.ground_truth)] {
            for (index, r) in regions.iter().enumerate() {
                let img = &inst.images[r.image_index];
                let Ok(px) = r.to_space(img.space()) else { continue };
                let area = px.bbox.area();
                if area < 1.0 {
                    findings.push(Finding {
                        instance_id: inst.id.clone(),
                        kind: FindingKind::ZeroArea { field: field.into(), index, area },
                    });
                }
                let frame = BBox { x1: 0.0, y1: 0.0, x2: img.width as f64, y2: img.height as f64 };
                if !frame.contains(&px.bbox) {
                    findings.push(Finding {
                        instance_id: inst.id.clone(),
                        kind: FindingKind::OutOfBounds { field: field.into(), index },
                    });
                }
            }
        }
    }
    ValidationReport { findings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Direct,
    CotSingle,
    CotMulti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnsweringForm {
    Polling,
    All,
}

/// One model request issued while answering an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `step1`, `step2` or `direct`.
    pub step: String,
    /// Images attached to the request, as instance indices.
    pub images: Vec<usize>,
    /// Image the parsed boxes are attributed to when the request polled one image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polled_image: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
}

/// A predicted box in norm1000 space attributed to an image (or not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub strategy: StrategyKind,
    pub form: AnsweringForm,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referring: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_image: Option<usize>,
    pub predictions: Vec<Prediction>,
    pub target_iou: Vec<f64>,
    pub target_hit: Vec<bool>,
    pub failed: bool,
}

impl RunRecord {
    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for s in &mut r.steps {
            s.latency_ms = 0;
        }
        r
    }

    pub fn hit(&self) -> bool {
        !self.failed && !self.target_hit.is_empty() && self.target_hit.iter().all(|h| *h)
    }
}
