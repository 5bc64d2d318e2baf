//! Three-pass free-form question synthesis: per-image captions, box label
//! refinement, then cross-image Q/A generation.

use std::path::PathBuf;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;

use super::{norm_box, AnnotationRecord, ForgeError, TrainInstance};
use crate::benchdata::{ImageRef, Instance, TaskKind};
use crate::client::ChatClient;
use crate::geometry::{BBox, CoordSpace, Region};
use crate::orchestrator::{file_data_url, payload, resolve, user_message};
use crate::outparse::{self, format_box_token, Tier};
use crate::prompts::{image_label, SynthesisTemplates};

pub struct SynthesisEndpoints<'a> {
    pub caption: &'a dyn ChatClient,
    pub caption_model: String,
    pub refine: &'a dyn ChatClient,
    pub refine_model: String,
    pub instruct: &'a dyn ChatClient,
    pub instruct_model: String,
    pub image_root: PathBuf,
    /// Groups processed concurrently.
    pub threads: usize,
}

/// Per-pass yield counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SynthesisStats {
    pub groups: usize,
    pub groups_skipped: usize,
    pub captions: usize,
    pub refined_images: usize,
    pub objects_in: usize,
    pub objects_kept: usize,
    pub qa_parsed: usize,
    pub qa_discarded: usize,
    pub instances: usize,
}

impl SynthesisStats {
    fn add(&mut self, o: &SynthesisStats) {
        self.groups += o.groups;
        self.groups_skipped += o.groups_skipped;
        self.captions += o.captions;
        self.refined_images += o.refined_images;
        self.objects_in += o.objects_in;
        self.objects_kept += o.objects_kept;
        self.qa_parsed += o.qa_parsed;
        self.qa_discarded += o.qa_discarded;
        self.instances += o.instances;
    }
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\|box_start\|>.*?<\|box_end\|>").unwrap())
}

/// Reads refiner output: every line carrying a box token becomes a
/// (caption, norm1000 box) pair, the caption being the text before the token.
pub fn parse_refined(text: &str) -> Vec<(String, BBox)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(m) = token_re().find(line) else { continue };
        let parsed = outparse::parse_boxes(m.as_str());
        let Some(b) = parsed.boxes.first() else { continue };
        let caption = line[..m.start()]
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == '-' || c == '*' || c == ')')
            .trim()
            .trim_end_matches(':')
            .to_string();
        if !caption.is_empty() {
            out.push((caption, b.bbox));
        }
    }
    out
}

/// Splits `Q: ... A: ...` blocks. Text before the first `Q:` is ignored.
pub fn parse_qa_pairs(text: &str) -> Vec<(String, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\s*(?:\d+[.)]\s*)?(Q|A)\s*[:：]").unwrap());
    let marks: Vec<(usize, usize, bool)> =
        re.captures_iter(text).map(|c| (c.get(0).unwrap().start(), c.get(0).unwrap().end(), &c[1] == "Q")).collect();
    let mut out = Vec::new();
    for (i, &(_, end, is_q)) in marks.iter().enumerate() {
        if !is_q {
            continue;
        }
        let Some(&(a_start, a_end, false)) = marks.get(i + 1) else { continue };
        let q = text[end..a_start].trim();
        let a_stop = marks.get(i + 2).map_or(text.len(), |m| m.0);
        let a = text[a_end..a_stop].trim();
        if !q.is_empty() && !a.is_empty() {
            out.push((q.to_string(), a.to_string()));
        }
    }
    out
}

fn annotation_lines(items: &[(String, BBox)]) -> String {
    items.iter().map(|(c, b)| format!("{c} {}", format_box_token(b))).collect::<Vec<_>>().join("\n")
}

fn run_group(
    gi: usize,
    group: &[AnnotationRecord],
    ep: &SynthesisEndpoints<'_>,
    t: &SynthesisTemplates,
) -> Result<(Vec<TrainInstance>, SynthesisStats), String> {
    let mut stats = SynthesisStats { groups: 1, ..Default::default() };
    let mut captions = Vec::new();
    let mut refined = Vec::new();
    for rec in group {
        let path = resolve(&ep.image_root, &rec.image);
        let url = file_data_url(&path).map_err(|e| format!("{}: {e}", path.display()))?;

        let p = payload(&ep.caption_model, vec![user_message(&[&url], &t.caption)]);
        let caption = ep.caption.complete(&p).map_err(|e| format!("caption: {e}"))?;
        stats.captions += 1;

        let original: Vec<(String, BBox)> = rec
            .objects
            .iter()
            .map(|o| (o.label.clone(), norm_box(&Region { image_index: 0, bbox: o.bbox, space: rec.space() })))
            .collect();
        let prompt = format!("{}\n{}", t.refine, annotation_lines(&original));
        let p = payload(&ep.refine_model, vec![user_message(&[&url], &prompt)]);
        let answer = ep.refine.complete(&p).map_err(|e| format!("refine: {e}"))?;
        let kept = parse_refined(&answer);
        stats.refined_images += 1;
        stats.objects_in += original.len();
        stats.objects_kept += kept.len();
        captions.push(caption.trim().to_string());
        refined.push(kept);
    }

    let mut prompt = t.instruct.clone();
    for (k, (caption, objects)) in captions.iter().zip(&refined).enumerate() {
        prompt.push_str(&format!(
            "\n\n{}:\nCaption: {caption}\nObjects:\n{}",
            image_label(k),
            annotation_lines(objects)
        ));
    }
    let p = payload(&ep.instruct_model, vec![user_message(&[], &prompt)]);
    let answer = ep.instruct.complete(&p).map_err(|e| format!("instruct: {e}"))?;

    let images: Vec<ImageRef> =
        group.iter().map(|r| ImageRef { path: r.image.clone(), width: r.width, height: r.height }).collect();
    let mut out = Vec::new();
    for (q, a) in parse_qa_pairs(&answer) {
        stats.qa_parsed += 1;
        let parsed = outparse::parse_boxes(&a);
        let attributed: Option<Vec<Region>> = (parsed.tier == Some(Tier::Token) && !parsed.boxes.is_empty())
            .then(|| {
                parsed
                    .boxes
                    .iter()
                    .map(|b| {
                        let image = b.image_index.or((group.len() == 1).then_some(0)).filter(|&i| i < group.len())?;
                        Some(Region { image_index: image, bbox: b.bbox, space: CoordSpace::Norm1000 })
                    })
                    .collect()
            })
            .flatten();
        let Some(ground_truth) = attributed else {
            stats.qa_discarded += 1;
            continue;
        };
        let instance = Instance {
            id: format!("freeform-{gi:06}-{:02}", out.len()),
            task: TaskKind::Freeform,
            images: images.clone(),
            query_text: Some(q),
            query_regions: vec![],
            ground_truth,
            meta: Default::default(),
        };
        let t = TrainInstance { instance, answer: a };
        match t.validate() {
            Ok(()) => out.push(t),
            Err(e) => {
                log::debug!("discarding generated pair: {e}");
                stats.qa_discarded += 1;
            }
        }
    }
    stats.instances = out.len();
    Ok((out, stats))
}

/// Runs the caption, refinement and instruction passes over each group.
/// A group whose endpoint calls fail is skipped; the rest continue.
pub fn synthesize_freeform(
    groups: &[Vec<AnnotationRecord>],
    ep: &SynthesisEndpoints<'_>,
    templates: &SynthesisTemplates,
) -> Result<(Vec<TrainInstance>, SynthesisStats), ForgeError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ep.threads.max(1))
        .build()
        .map_err(|e| ForgeError::Config(e.to_string()))?;
    let results: Vec<_> =
        pool.install(|| groups.par_iter().enumerate().map(|(gi, g)| (gi, run_group(gi, g, ep, templates))).collect());

    let mut all = Vec::new();
    let mut stats = SynthesisStats::default();
    for (gi, r) in results {
        match r {
            Ok((instances, s)) => {
                stats.add(&s);
                all.extend(instances);
            }
            Err(e) => {
                log::warn!("group {gi} skipped: {e}");
                stats.groups += 1;
                stats.groups_skipped += 1;
            }
        }
    }
    log::info!(
        "synthesis: {} groups ({} skipped), {} captions, {}/{} objects kept, {} Q/A parsed, {} discarded, {} instances",
        stats.groups,
        stats.groups_skipped,
        stats.captions,
        stats.objects_kept,
        stats.objects_in,
        stats.qa_parsed,
        stats.qa_discarded,
        stats.instances
    );
    Ok((all, stats))
}
