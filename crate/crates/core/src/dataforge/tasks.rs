//! Per-task instance construction from annotation records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use super::{answer_text, stream_rng, AnnotationRecord, ForgeConfig, ForgeError, RegionFilter, TrainInstance};
use crate::benchdata::{ImageRef, Instance, TaskKind, META_REFERENCE_IMAGES};
use crate::geometry::{BBox, Region};

/// Regions of `rec` passing the content-richness, aspect, area-ratio and
/// size gates, as indices into `rec.objects`.
pub fn filter_regions(rec: &AnnotationRecord, f: &RegionFilter) -> Vec<usize> {
    if rec.objects.len() <= f.min_annotations {
        return Vec::new();
    }
    let image_area = rec.area();
    rec.objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let (w, h) = (o.bbox.width(), o.bbox.height());
            let area = w * h;
            f.aspect.contains(w / h) && f.area_ratio.contains(area / image_area) && area > f.min_pixels
        })
        .map(|(i, _)| i)
        .collect()
}

/// Frame indices sampled from a sequence of `len` frames: `n` evenly
/// strided indices starting at 0, with the last replaced by the final frame.
pub fn tracking_indices(len: usize, n: usize) -> Vec<usize> {
    if len == 0 || n == 0 {
        return Vec::new();
    }
    let n = n.min(len);
    if n == 1 {
        return vec![0];
    }
    let stride = (len / (n - 1)).max(1);
    let mut out: Vec<usize> = (0..n - 1).map(|i| (i * stride).min(len - 1)).collect();
    out.push(len - 1);
    out.dedup();
    out
}

/// A crop to materialize for a region-locating query image.
#[derive(Debug, Clone, PartialEq)]
pub struct CropJob {
    pub source: String,
    pub rect: BBox,
    pub dest: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskSet {
    pub instances: Vec<TrainInstance>,
    pub crops: Vec<CropJob>,
    /// Records or groups skipped, with the reason.
    pub skipped: Vec<String>,
}

fn image_ref(rec: &AnnotationRecord) -> ImageRef {
    ImageRef { path: rec.image.clone(), width: rec.width, height: rec.height }
}

fn region(image_index: usize, rec: &AnnotationRecord, bbox: BBox) -> Region {
    Region { image_index, bbox, space: rec.space() }
}

/// Question attached to instances whose query is implied by the images.
fn implied_question(task: TaskKind) -> Option<&'static str> {
    Some(match task {
        TaskKind::CommonObject => "Ground the object these images have in common.",
        TaskKind::StaticDifference | TaskKind::RobustDifference => {
            "Ground the object that differs between the two images."
        }
        TaskKind::RegionLocating => "Ground the region shown in the first image.",
        _ => return None,
    })
}

fn instance(id: String, task: TaskKind, images: Vec<ImageRef>, query_text: Option<String>) -> Instance {
    let query_text = query_text.or_else(|| implied_question(task).map(str::to_string));
    Instance { id, task, images, query_text, query_regions: vec![], ground_truth: vec![], meta: Default::default() }
}

fn finish(inst: Instance, set: &mut TaskSet) {
    let answer = answer_text(&inst.ground_truth);
    let t = TrainInstance { instance: inst, answer };
    match t.validate() {
        Ok(()) => set.instances.push(t),
        Err(e) => set.skipped.push(e),
    }
}

/// Labels of `rec` with a box covering at least `min_ratio` of the image and
/// not excluded.
fn qualifying_labels(rec: &AnnotationRecord, cfg: &ForgeConfig) -> BTreeSet<String> {
    let c = &cfg.common_object;
    rec.objects
        .iter()
        .filter(|o| o.bbox.area() / rec.area() >= c.min_area_ratio && !c.exclude.contains(&o.label))
        .map(|o| o.label.clone())
        .collect()
}

/// Greedy grouping for common-object instances: for each label in order,
/// images holding it are added while the group's shared qualifying labels
/// still include it; a group is kept only if it has at least the minimum
/// size and shares exactly that label. Returns (label, record indices).
pub fn common_object_groups(records: &[AnnotationRecord], cfg: &ForgeConfig) -> Vec<(String, Vec<usize>)> {
    let size = cfg.common_object.group_size;
    let labels: Vec<BTreeSet<String>> = records.iter().map(|r| qualifying_labels(r, cfg)).collect();
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ls) in labels.iter().enumerate() {
        for l in ls {
            by_label.entry(l.as_str()).or_default().push(i);
        }
    }
    let mut used = vec![false; records.len()];
    let mut out = Vec::new();
    for (label, members) in by_label {
        let mut pool: Vec<usize> = members.into_iter().filter(|&i| !used[i]).collect();
        while pool.len() >= size.min {
            let mut group = vec![pool[0]];
            let mut shared = labels[pool[0]].clone();
            for &cand in &pool[1..] {
                if group.len() == size.max {
                    break;
                }
                let next: BTreeSet<String> = shared.intersection(&labels[cand]).cloned().collect();
                // Prefer members that shrink the shared set towards the label alone.
                if next.len() < shared.len() || shared.len() == 1 {
                    shared = next;
                    group.push(cand);
                }
            }
            if group.len() < size.min || shared.len() != 1 {
                // The anchor cannot form a valid group for this label.
                pool.remove(0);
                continue;
            }
            for &i in &group {
                used[i] = true;
            }
            pool.retain(|i| !group.contains(i));
            out.push((label.to_string(), group));
        }
    }
    out
}

fn common_object(records: &[AnnotationRecord], cfg: &ForgeConfig, set: &mut TaskSet) {
    for (n, (label, group)) in common_object_groups(records, cfg).into_iter().enumerate() {
        let images = group.iter().map(|&i| image_ref(&records[i])).collect();
        let mut inst = instance(format!("common_object-{n:06}"), TaskKind::CommonObject, images, None);
        for (k, &i) in group.iter().enumerate() {
            let rec = &records[i];
            for o in rec.objects.iter().filter(|o| o.label == label) {
                if o.bbox.area() / rec.area() >= cfg.common_object.min_area_ratio {
                    inst.ground_truth.push(region(k, rec, o.bbox));
                }
            }
        }
        inst.meta.insert("label".into(), Value::from(label));
        finish(inst, set);
    }
}

fn meta_str(rec: &AnnotationRecord, key: &str) -> Option<String> {
    match rec.meta.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn object_tracking(records: &[AnnotationRecord], cfg: &ForgeConfig, set: &mut TaskSet) {
    let mut sequences: BTreeMap<String, Vec<(u64, usize)>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let seq = meta_str(rec, "sequence");
        let frame = rec.meta.get("frame").and_then(Value::as_u64);
        match (seq, frame) {
            (Some(s), Some(f)) => sequences.entry(s).or_default().push((f, i)),
            _ => {
                log::warn!("{}: no sequence/frame meta, skipped for tracking", rec.image);
                set.skipped.push(format!("{}: missing sequence or frame", rec.image));
            }
        }
    }
    for (n, (seq, mut frames)) in sequences.into_iter().enumerate() {
        frames.sort();
        let mut rng = stream_rng(cfg.seed, n as u64);
        let want = rng.gen_range(cfg.tracking_frames.min..=cfg.tracking_frames.max);
        if frames.len() < cfg.tracking_frames.min {
            set.skipped.push(format!(
                "sequence {seq}: {} frames, fewer than {}",
                frames.len(),
                cfg.tracking_frames.min
            ));
            continue;
        }
        let picked: Vec<usize> = tracking_indices(frames.len(), want).into_iter().map(|k| frames[k].1).collect();
        let (first, last) = (&records[picked[0]], &records[*picked.last().unwrap()]);
        let track = first.objects.iter().filter(|o| o.id.is_some()).find(|o| last.objects.iter().any(|p| p.id == o.id));
        let Some(track) = track else {
            set.skipped.push(format!("sequence {seq}: no object present in both end frames"));
            continue;
        };
        let target = last.objects.iter().find(|p| p.id == track.id).unwrap();
        let images = picked.iter().map(|&i| image_ref(&records[i])).collect::<Vec<_>>();
        let end = images.len() - 1;
        let mut inst = instance(format!("object_tracking-{n:06}"), TaskKind::ObjectTracking, images, None);
        inst.query_regions.push(region(0, first, track.bbox));
        inst.ground_truth.push(region(end, last, target.bbox));
        inst.meta.insert(META_REFERENCE_IMAGES.into(), json!([0]));
        inst.meta.insert("sequence".into(), Value::from(seq));
        inst.meta.insert("track".into(), Value::from(track.id.clone()));
        finish(inst, set);
    }
}

fn group_grounding(records: &[AnnotationRecord], cfg: &ForgeConfig, set: &mut TaskSet) {
    let mut rng = stream_rng(cfg.seed, u64::MAX - 1);
    let mut start = 0;
    let mut n = 0;
    while start < records.len() {
        let size = rng.gen_range(cfg.group_grounding_size.min..=cfg.group_grounding_size.max);
        let end = (start + size).min(records.len());
        let group = &records[start..end];
        start = end;
        if group.len() < cfg.group_grounding_size.min {
            set.skipped.push(format!("trailing group of {} records", group.len()));
            break;
        }
        let mut grng = stream_rng(cfg.seed, n as u64);
        let with_objects: Vec<usize> = (0..group.len()).filter(|&k| !group[k].objects.is_empty()).collect();
        let Some(&k) = with_objects.choose(&mut grng) else {
            set.skipped.push("group without annotated objects".into());
            continue;
        };
        let rec = &group[k];
        // Captioned objects make better queries than bare labels.
        let captioned: Vec<_> = rec.objects.iter().filter(|o| o.caption.is_some()).collect();
        let pool: Vec<_> = if captioned.is_empty() { rec.objects.iter().collect() } else { captioned };
        let obj = pool.choose(&mut grng).unwrap();
        let text = obj.caption.clone().unwrap_or_else(|| obj.label.clone());
        let images = group.iter().map(image_ref).collect();
        let query = format!("Find the {}.", text.trim_end_matches('.'));
        let mut inst = instance(format!("group_grounding-{n:06}"), TaskKind::GroupGrounding, images, Some(query));
        inst.ground_truth.push(region(k, rec, obj.bbox));
        finish(inst, set);
        n += 1;
    }
}

fn region_locating(records: &[AnnotationRecord], cfg: &ForgeConfig, set: &mut TaskSet) {
    let mut n = 0;
    for rec in records {
        for k in filter_regions(rec, &cfg.region_locating) {
            let obj = &rec.objects[k];
            let b = obj.bbox;
            // Integer crop rectangle containing the region.
            let rect = BBox::from([b.x1.floor(), b.y1.floor(), b.x2.ceil(), b.y2.ceil()]);
            let (cw, ch) = (rect.width() as u32, rect.height() as u32);
            let stem = Path::new(&rec.image).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let dest = format!("crops/{stem}-{n:06}.png");
            set.crops.push(CropJob { source: rec.image.clone(), rect, dest: dest.clone() });
            let images = vec![ImageRef { path: dest, width: cw, height: ch }, image_ref(rec)];
            let mut inst = instance(format!("region_locating-{n:06}"), TaskKind::RegionLocating, images, None);
            inst.ground_truth.push(region(1, rec, b));
            inst.meta.insert(META_REFERENCE_IMAGES.into(), json!([0]));
            inst.meta.insert("crop_rect".into(), json!(<[f64; 4]>::from(rect)));
            finish(inst, set);
            n += 1;
        }
    }
}

fn difference(records: &[AnnotationRecord], task: TaskKind, set: &mut TaskSet) {
    let mut pairs: BTreeMap<String, [Option<usize>; 2]> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let pair = meta_str(rec, "pair");
        let side = rec.meta.get("pair_index").and_then(Value::as_u64);
        match (pair, side) {
            (Some(p), Some(s @ 0..=1)) => pairs.entry(p).or_default()[s as usize] = Some(i),
            _ => set.skipped.push(format!("{}: missing pair or pair_index", rec.image)),
        }
    }
    for (n, (pair, sides)) in pairs.into_iter().enumerate() {
        let [Some(a), Some(b)] = sides else {
            set.skipped.push(format!("pair {pair}: incomplete"));
            continue;
        };
        let changed = &records[b];
        if changed.objects.is_empty() {
            set.skipped.push(format!("pair {pair}: no difference annotated"));
            continue;
        }
        let images = vec![image_ref(&records[a]), image_ref(changed)];
        let mut inst = instance(format!("{}-{n:06}", task.as_str()), task, images, None);
        for o in &changed.objects {
            inst.ground_truth.push(region(1, changed, o.bbox));
        }
        inst.meta.insert("pair".into(), Value::from(pair));
        finish(inst, set);
    }
}

/// Whether a box keeps clear of every image edge (a proxy for full visibility).
fn clear_of_edges(rec: &AnnotationRecord, b: &BBox) -> bool {
    b.x1 > 0.0 && b.y1 > 0.0 && b.x2 < rec.width as f64 && b.y2 < rec.height as f64
}

fn referring_grounding(records: &[AnnotationRecord], set: &mut TaskSet) {
    let mut by_id: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        for (k, o) in rec.objects.iter().enumerate() {
            if let Some(id) = &o.id {
                by_id.entry(id).or_default().push((i, k));
            }
        }
    }
    let mut n = 0;
    for (id, seen) in by_id {
        let Some(pos) = seen.iter().position(|&(i, k)| clear_of_edges(&records[i], &records[i].objects[k].bbox)) else {
            set.skipped.push(format!("object {id}: never fully visible"));
            continue;
        };
        let (ri, rk) = seen[pos];
        let Some(&(ti, tk)) = seen.iter().find(|&&(i, _)| i != ri) else {
            set.skipped.push(format!("object {id}: appears in one image only"));
            continue;
        };
        let (src, dst) = (&records[ri], &records[ti]);
        let images = vec![image_ref(src), image_ref(dst)];
        let mut inst = instance(format!("referring_grounding-{n:06}"), TaskKind::ReferringGrounding, images, None);
        inst.query_regions.push(region(0, src, src.objects[rk].bbox));
        inst.ground_truth.push(region(1, dst, dst.objects[tk].bbox));
        inst.meta.insert(META_REFERENCE_IMAGES.into(), json!([0]));
        inst.meta.insert("object".into(), Value::from(id));
        finish(inst, set);
        n += 1;
    }
}

/// Builds training instances for one task from annotation records.
///
/// Records lacking task metadata are skipped and listed in
/// [`TaskSet::skipped`]. Region-locating query crops are returned as jobs for
/// [`write_crops`].
pub fn make_task_set(records: &[AnnotationRecord], task: TaskKind, cfg: &ForgeConfig) -> Result<TaskSet, ForgeError> {
    cfg.validate()?;
    let mut set = TaskSet::default();
    match task {
        TaskKind::CommonObject => common_object(records, cfg, &mut set),
        TaskKind::ObjectTracking => object_tracking(records, cfg, &mut set),
        TaskKind::GroupGrounding => group_grounding(records, cfg, &mut set),
        TaskKind::RegionLocating => region_locating(records, cfg, &mut set),
        TaskKind::StaticDifference | TaskKind::RobustDifference => difference(records, task, &mut set),
        TaskKind::ReferringGrounding => referring_grounding(records, &mut set),
        other => return Err(ForgeError::Config(format!("no construction recipe for task `{other}`"))),
    }
    for s in &set.skipped {
        log::debug!("{task}: skipped {s}");
    }
    log::info!("{task}: {} instances, {} skipped", set.instances.len(), set.skipped.len());
    Ok(set)
}

/// Cuts each crop out of its source image (resolved against `image_root`)
/// and writes it under `out_dir`.
pub fn write_crops(jobs: &[CropJob], image_root: &Path, out_dir: &Path) -> Result<(), ForgeError> {
    for job in jobs {
        let src = image_root.join(&job.source);
        let img_err =
            |path: &PathBuf, e: &dyn std::fmt::Display| ForgeError::Image { path: path.clone(), reason: e.to_string() };
        let img = image::open(&src).map_err(|e| img_err(&src, &e))?;
        let r = job.rect;
        let cropped = img.crop_imm(r.x1 as u32, r.y1 as u32, r.width() as u32, r.height() as u32);
        let dest = out_dir.join(&job.dest);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|source| ForgeError::Io { path: parent.to_path_buf(), source })?;
        }
        cropped.save(&dest).map_err(|e| img_err(&dest, &e))?;
    }
    Ok(())
}
