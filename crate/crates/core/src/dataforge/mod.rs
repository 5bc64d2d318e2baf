//! Training-data construction: per-task transforms over detection-style
//! annotations, embedding-based image grouping, LLM-driven free-form
//! synthesis and stage mixing manifests.

mod grouping;
mod manifest;
mod synthesis;
mod tasks;

pub use grouping::{adaptive_groups, candidate_count, random_groups, EmbeddingIndex, EmbeddingRecord, GroupingError};
pub use manifest::{stage_manifest, stage_shares, Manifest, ManifestEntry, ManifestError, Stage};
pub use synthesis::{parse_qa_pairs, parse_refined, synthesize_freeform, SynthesisEndpoints, SynthesisStats};
pub use tasks::{common_object_groups, filter_regions, make_task_set, tracking_indices, write_crops, CropJob, TaskSet};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::benchdata::{self, Instance, InstanceRecord};
use crate::geometry::{self, BBox, CoordSpace, Region};
use crate::outparse::{self, Tier};

/// Co-occurrence exclusion list shipped with the crate, one label per line.
pub const DEFAULT_COOCCURRENCE_EXCLUDE: &str = include_str!("../../assets/cooccurrence_exclude.txt");

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Invalid { path: PathBuf, line: usize, reason: String },
    #[error("invalid forge configuration: {0}")]
    Config(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub label: String,
    /// Pixel coordinates in the record's image.
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Identity shared across images (tracks, re-appearing objects).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// One annotated image.
///
/// Task-specific keys in `meta`: `sequence` and `frame` for tracking,
/// `pair` and `pair_index` (0 or 1) for difference pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("{}: zero image size", self.image));
        }
        let frame = BBox::from([0.0, 0.0, self.width as f64, self.height as f64]);
        for (k, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_canonical() || o.bbox.area() <= 0.0 {
                return Err(format!("{}: object {k} has a degenerate box", self.image));
            }
            if !frame.contains(&o.bbox) {
                return Err(format!(
                    "{}: object {k} lies outside the {}x{} image",
                    self.image, self.width, self.height
                ));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> CoordSpace {
        CoordSpace::Pixel { width: self.width, height: self.height }
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, ForgeError> {
    let io = |source| ForgeError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| ForgeError::Invalid { path: path.to_path_buf(), line: i + 1, reason };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        rec.validate().map_err(invalid)?;
        out.push(rec);
    }
    Ok(out)
}

/// Inclusive numeric range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Span<T> {
    pub const fn new(min: T, max: T) -> Self {
        Span { min, max }
    }

    pub fn contains(&self, v: T) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn is_empty(&self) -> bool {
        self.min.partial_cmp(&self.max).is_none_or(|o| o == std::cmp::Ordering::Greater)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionFilter {
    /// Images need strictly more annotations than this.
    pub min_annotations: usize,
    pub aspect: Span<f64>,
    pub area_ratio: Span<f64>,
    /// Regions need strictly more pixels than this.
    pub min_pixels: f64,
}

impl Default for RegionFilter {
    fn default() -> Self {
        RegionFilter {
            min_annotations: 10,
            aspect: Span::new(0.5, 2.0),
            area_ratio: Span::new(0.2, 0.49),
            min_pixels: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommonObjectConfig {
    /// Minimum box area as a fraction of its image.
    pub min_area_ratio: f64,
    pub exclude: BTreeSet<String>,
    pub group_size: Span<usize>,
}

impl Default for CommonObjectConfig {
    fn default() -> Self {
        CommonObjectConfig {
            min_area_ratio: 0.05,
            exclude: parse_label_list(DEFAULT_COOCCURRENCE_EXCLUDE),
            group_size: Span::new(2, 5),
        }
    }
}

/// Reads a label list: one per line, `#` comments and blanks ignored.
pub fn parse_label_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    Random,
    CommonObject,
    ClipAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    pub mode: GroupingMode,
    /// Range the per-round similarity fraction is drawn from.
    pub thres: Span<f64>,
    /// Range of images sampled next to each anchor.
    pub sample: Span<usize>,
    /// Skip the single most similar image (likely a near duplicate).
    pub drop_most_similar: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            mode: GroupingMode::ClipAdaptive,
            thres: Span::new(0.1, 1.0),
            sample: Span::new(3, 5),
            drop_most_similar: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub seed: u64,
    pub common_object: CommonObjectConfig,
    pub region_locating: RegionFilter,
    pub tracking_frames: Span<usize>,
    pub group_grounding_size: Span<usize>,
    pub grouping: GroupingConfig,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            seed: 0,
            common_object: CommonObjectConfig::default(),
            region_locating: RegionFilter::default(),
            tracking_frames: Span::new(4, 6),
            group_grounding_size: Span::new(3, 5),
            grouping: GroupingConfig::default(),
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |what: &str| Err(ForgeError::Config(format!("{what} range is empty")));
        let r = &self.region_locating;
        if r.aspect.is_empty() {
            return bad("aspect ratio");
        }
        if r.area_ratio.is_empty() {
            return bad("area ratio");
        }
        if self.tracking_frames.is_empty() || self.tracking_frames.min < 2 {
            return Err(ForgeError::Config("tracking frames must be a non-empty range starting at 2 or more".into()));
        }
        if self.group_grounding_size.is_empty() || self.group_grounding_size.min < 1 {
            return bad("group size");
        }
        if self.common_object.group_size.is_empty() || self.common_object.group_size.min < 2 {
            return Err(ForgeError::Config("common object groups need at least 2 images".into()));
        }
        let g = &self.grouping;
        if g.thres.is_empty() || g.thres.min < 0.0 || g.thres.max > 1.0 {
            return Err(ForgeError::Config("grouping thres must be a non-empty range within [0, 1]".into()));
        }
        if g.sample.is_empty() || g.sample.min < 1 {
            return bad("grouping sample");
        }
        Ok(())
    }
}

/// Independent RNG stream for the `stream`-th unit of work under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A dataset instance plus the target answer text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    pub instance: Instance,
    pub answer: String,
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    #[serde(flatten)]
    record: InstanceRecord,
    answer: String,
}

impl TrainInstance {
    /// Instance invariants, plus every box token in the answer parsing back
    /// through the token grammar.
    pub fn validate(&self) -> Result<(), String> {
        self.instance.validate()?;
        let parsed = outparse::parse_boxes(&self.answer);
        if parsed.boxes.is_empty() || parsed.tier != Some(Tier::Token) {
            return Err(format!("{}: answer has no box tokens", self.instance.id));
        }
        let tokens = self.answer.matches("<|box_start|>").count();
        if tokens != parsed.boxes.len() {
            return Err(format!("{}: {} box tokens but {} parsed", self.instance.id, tokens, parsed.boxes.len()));
        }
        Ok(())
    }
}

pub fn save_train_set(path: &Path, set: &[TrainInstance]) -> Result<(), ForgeError> {
    let io = |source| ForgeError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for t in set {
        let rec = TrainRecord { record: InstanceRecord::from(&t.instance), answer: t.answer.clone() };
        serde_json::to_writer(&mut w, &rec).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_train_set(path: &Path) -> Result<Vec<TrainInstance>, ForgeError> {
    let io = |source| ForgeError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| ForgeError::Invalid { path: path.to_path_buf(), line: i + 1, reason };
        let rec: TrainRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        let instance = rec.record.into_instance(|p| Err(format!("{p}: image size missing"))).map_err(invalid)?;
        out.push(TrainInstance { instance, answer: rec.answer });
    }
    Ok(out)
}

/// `Image-K: <|box_start|>...<|box_end|>` for each region, in norm1000.
pub fn answer_text(regions: &[Region]) -> String {
    regions
        .iter()
        .map(|r| {
            format!("{}: {}", crate::prompts::image_label(r.image_index), outparse::format_box_token(&norm_box(r)))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Region converted to norm1000 and rounded to integer coordinates.
pub fn norm_box(r: &Region) -> BBox {
    let n = geometry::convert(&r.bbox, r.space, CoordSpace::Norm1000).expect("valid region space");
    let q = |v: f64| v.round().clamp(0.0, geometry::NORM1000_MAX);
    BBox::from([q(n.x1), q(n.y1), q(n.x2), q(n.y2)])
}

/// Checks a generated set against the dataset loader by writing it out and
/// reading it back.
pub fn roundtrip_check(set: &[TrainInstance], dir: &Path) -> Result<(), String> {
    let path = dir.join("roundtrip.jsonl");
    save_train_set(&path, set).map_err(|e| e.to_string())?;
    let back = load_train_set(&path).map_err(|e| e.to_string())?;
    if back != set {
        return Err("train set changed across save/load".into());
    }
    let plain = benchdata::load_dataset_with(&path, benchdata::LoadOptions { check_images: false })
        .map_err(|e| e.to_string())?;
    if plain.len() != set.len() {
        return Err("dataset loader disagrees on instance count".into());
    }
    Ok(())
}
