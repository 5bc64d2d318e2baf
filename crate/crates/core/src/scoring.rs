//! Acc@0.5 scoring, strategy comparison and difficulty tiers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchdata::{Instance, Prediction, RunRecord, TaskKind};
use crate::geometry::{self, CoordSpace, GeometryError};

/// A prediction counts when its IoU with the target is strictly above this.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("record references unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("instance `{0}` has more than one record")]
    DuplicateRecord(String),
    #[error("task sets differ: only in first {only_a:?}, only in second {only_b:?}")]
    TaskMismatch { only_a: Vec<TaskKind>, only_b: Vec<TaskKind> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Outcome of matching predictions against one ground-truth target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMatch {
    /// IoU of the assigned prediction, or the best same-image IoU when
    /// nothing was assigned.
    pub iou: f64,
    pub matched: bool,
    pub prediction: Option<usize>,
}

/// Greedy one-to-one matching of predictions to targets by descending IoU.
///
/// Predictions are in norm1000 space and are converted to each target's
/// space. A prediction only competes for targets in the image it is
/// attributed to.
pub fn match_targets(inst: &Instance, preds: &[Prediction]) -> Result<Vec<TargetMatch>, GeometryError> {
    let mut pairs = Vec::new();
    let mut best = vec![0.0f64; inst.ground_truth.len()];
    for (t, gt) in inst.ground_truth.iter().enumerate() {
        for (p, pred) in preds.iter().enumerate() {
            if pred.image != Some(gt.image_index) {
                continue;
            }
            let pbox = geometry::convert(&pred.bbox, CoordSpace::Norm1000, gt.space)?;
            let v = geometry::iou(&pbox, &gt.bbox);
            best[t] = best[t].max(v);
            pairs.push((v, t, p));
        }
    }
    // Descending IoU; ties broken by target then prediction index.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<TargetMatch> =
        best.iter().map(|&iou| TargetMatch { iou, matched: false, prediction: None }).collect();
    let mut used = vec![false; preds.len()];
    for (v, t, p) in pairs {
        if v <= IOU_THRESHOLD {
            break;
        }
        if out[t].matched || used[p] {
            continue;
        }
        used[p] = true;
        out[t] = TargetMatch { iou: v, matched: true, prediction: Some(p) };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub instances: usize,
    pub hits: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceHit {
    pub id: String,
    pub task: TaskKind,
    pub hit: bool,
    pub target_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tasks: BTreeMap<TaskKind, TaskScore>,
    /// Unweighted mean of per-task accuracies.
    pub macro_average: f64,
    /// Hits over all instances, percent.
    pub micro_average: f64,
    pub instances: Vec<InstanceHit>,
}

/// Per-task accuracies (percent), the shape of one leaderboard row.
pub type AccuracyTable = BTreeMap<TaskKind, f64>;

impl ScoreReport {
    pub fn accuracies(&self) -> AccuracyTable {
        self.tasks.iter().map(|(k, v)| (*k, v.accuracy)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>9} {:>6} {:>9}", "task", "instances", "hits", "acc@0.5")?;
        for (task, s) in &self.tasks {
            writeln!(f, "{:<22} {:>9} {:>6} {:>8.2}%", task.as_str(), s.instances, s.hits, s.accuracy)?;
        }
        writeln!(f, "{:<22} {:>9} {:>6} {:>8.2}%", "macro average", "", "", self.macro_average)?;
        write!(f, "{:<22} {:>9} {:>6} {:>8.2}%", "micro average", "", "", self.micro_average)
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores run records against the dataset. Instances without a record,
/// and failed records, count as misses.
pub fn score(records: &[RunRecord], dataset: &[Instance]) -> Result<ScoreReport, ScoringError> {
    let by_id: HashMap<&str, &Instance> = dataset.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut rec_by_id: HashMap<&str, &RunRecord> = HashMap::new();
    for r in records {
        if !by_id.contains_key(r.instance_id.as_str()) {
            return Err(ScoringError::UnknownInstance(r.instance_id.clone()));
        }
        if rec_by_id.insert(r.instance_id.as_str(), r).is_some() {
            return Err(ScoringError::DuplicateRecord(r.instance_id.clone()));
        }
    }

    let mut tasks: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    let mut instances = Vec::with_capacity(dataset.len());
    for inst in dataset {
        let (hit, target_iou) = match rec_by_id.get(inst.id.as_str()) {
            Some(r) if !r.failed => {
                let m = match_targets(inst, &r.predictions)?;
                (m.iter().all(|t| t.matched), m.iter().map(|t| t.iou).collect())
            }
            _ => (false, vec![0.0; inst.ground_truth.len()]),
        };
        let e = tasks.entry(inst.task).or_insert((0, 0));
        e.0 += 1;
        e.1 += hit as usize;
        instances.push(InstanceHit { id: inst.id.clone(), task: inst.task, hit, target_iou });
    }

    let tasks: BTreeMap<TaskKind, TaskScore> = tasks
        .into_iter()
        .map(|(k, (n, h))| (k, TaskScore { instances: n, hits: h, accuracy: 100.0 * h as f64 / n as f64 }))
        .collect();
    let macro_average = mean(tasks.values().map(|t| t.accuracy));
    let total: usize = tasks.values().map(|t| t.instances).sum();
    let hits: usize = tasks.values().map(|t| t.hits).sum();
    let micro_average = if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 };
    Ok(ScoreReport { tasks, macro_average, micro_average, instances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Percentage-point deltas, first minus second.
    pub per_task: BTreeMap<TaskKind, f64>,
    pub macro_delta: f64,
}

/// Per-task and macro-average deltas between two accuracy tables over the
/// same task set.
pub fn compare(a: &AccuracyTable, b: &AccuracyTable) -> Result<Comparison, ScoringError> {
    let only_a: Vec<TaskKind> = a.keys().filter(|k| !b.contains_key(*k)).copied().collect();
    let only_b: Vec<TaskKind> = b.keys().filter(|k| !a.contains_key(*k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(ScoringError::TaskMismatch { only_a, only_b });
    }
    let per_task = a.iter().map(|(k, va)| (*k, va - b[k])).collect();
    Ok(Comparison { per_task, macro_delta: mean(a.values().copied()) - mean(b.values().copied()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierLabel {
    Easy,
    Medium,
    Hard,
}

/// Easy when more than this many reference models are correct (with few images).
pub const EASY_MIN_CORRECT: usize = 2;
/// Easy clause (a) requires fewer than this many images.
pub const EASY_MAX_IMAGES: usize = 4;
/// Easy when the mean CoT IoU gain exceeds this.
pub const EASY_COT_GAIN: f64 = 0.15;
/// Hard when at most this many reference models are correct.
pub const HARD_MAX_CORRECT: usize = 1;
/// Hard clause requires more than this many images.
pub const HARD_MIN_IMAGES: usize = 4;
/// IoU gains within this distance of the cut-off count as equal to it.
const GAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierInputs {
    pub image_count: usize,
    /// Correctness of every reference model (direct and CoT variants).
    pub model_correct: Vec<bool>,
    /// Per base model: (IoU without CoT, IoU with CoT).
    pub iou_pairs: Vec<(f64, f64)>,
}

impl TierInputs {
    pub fn new(image_count: usize, model_correct: Vec<bool>, iou_pairs: Vec<(f64, f64)>) -> Result<Self, String> {
        if model_correct.is_empty() || iou_pairs.is_empty() {
            return Err("reference model set must be non-empty".into());
        }
        Ok(TierInputs { image_count, model_correct, iou_pairs })
    }

    pub fn correct_count(&self) -> usize {
        self.model_correct.iter().filter(|c| **c).count()
    }

    /// Mean over base models of (IoU with CoT − IoU without).
    pub fn cot_gain(&self) -> f64 {
        mean(self.iou_pairs.iter().map(|(direct, cot)| cot - direct))
    }
}

pub fn tier(inputs: &TierInputs) -> TierLabel {
    let correct = inputs.correct_count();
    let easy_a = correct > EASY_MIN_CORRECT && inputs.image_count < EASY_MAX_IMAGES;
    let easy_b = inputs.cot_gain() - EASY_COT_GAIN > GAIN_EPS;
    if easy_a || easy_b {
        TierLabel::Easy
    } else if correct <= HARD_MAX_CORRECT && inputs.image_count > HARD_MIN_IMAGES {
        TierLabel::Hard
    } else {
        TierLabel::Medium
    }
}

/// One reference model evaluated with and without CoT.
pub struct ReferencePair<'a> {
    pub direct: &'a ScoreReport,
    pub cot: &'a ScoreReport,
}

/// Tier label per dataset instance from scored reference-model runs.
/// Per-instance IoU is the mean over targets.
pub fn tier_dataset(dataset: &[Instance], pairs: &[ReferencePair<'_>]) -> Result<Vec<(String, TierLabel)>, String> {
    if pairs.is_empty() {
        return Err("at least one reference pair is required".into());
    }
    // Instance id to (hit, mean target IoU).
    type Outcomes = HashMap<String, (bool, f64)>;
    let index = |r: &ScoreReport| -> Outcomes {
        r.instances.iter().map(|i| (i.id.clone(), (i.hit, mean(i.target_iou.iter().copied())))).collect()
    };
    let maps: Vec<(Outcomes, Outcomes)> = pairs.iter().map(|p| (index(p.direct), index(p.cot))).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for inst in dataset {
        let mut correct = Vec::new();
        let mut ious = Vec::new();
        for (d, c) in &maps {
            let dv = d.get(&inst.id).ok_or_else(|| format!("instance `{}` missing from a report", inst.id))?;
            let cv = c.get(&inst.id).ok_or_else(|| format!("instance `{}` missing from a report", inst.id))?;
            correct.push(dv.0);
            correct.push(cv.0);
            ious.push((dv.1, cv.1));
        }
        let t = TierInputs::new(inst.images.len(), correct, ious)?;
        out.push((inst.id.clone(), tier(&t)));
    }
    Ok(out)
}
