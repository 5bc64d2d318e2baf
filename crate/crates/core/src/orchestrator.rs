//! Drives a chat endpoint through the inference strategies and answering
//! forms, producing one [`RunRecord`] per instance.
//!
//! Request layout per strategy:
//!
//! * `direct`: one grounding request per candidate image (polling) or one
//!   request over all images (all). Every request attaches all images.
//! * `cot_single`: step 1 over all images yields a referring expression;
//!   step 2 sends each candidate image alone (polling) or all images once
//!   (all). For group grounding, step 1 picks an image and step 2 sends only
//!   that image.
//! * `cot_multi`: step 1 as above, then step 2 continues the same
//!   conversation over all images, once per candidate (polling, with the
//!   polling suffix naming the image) or once in total (all).

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use serde_json::{json, Value};
use thiserror::Error;

use crate::benchdata::{AnsweringForm, Instance, Prediction, RunRecord, StepRecord, StrategyKind, TaskKind};
use crate::client::{image_part, text_part, ChatClient, TransportError};
use crate::geometry::{self, BBox, CoordSpace, Region};
use crate::journal::{self, JournalError, JournalHeader, JournalWriter};
use crate::outparse::{self, format_box_token, ParsedAnswer};
use crate::prompts::{self, Bindings, Step, TemplateError, TemplateSet};
use crate::scoring;

/// Stroke width of the drawn visual-reference rectangle, in pixels.
pub const MARK_STROKE: u32 = 4;
pub const MARK_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("instance `{id}`: {source}")]
    Rejected { id: String, source: TransportError },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub templates: Arc<TemplateSet>,
}

impl Strategy {
    pub fn new(kind: StrategyKind, templates: Arc<TemplateSet>) -> Self {
        Strategy { kind, templates }
    }

    pub fn steps(&self) -> &'static [Step] {
        match self.kind {
            StrategyKind::Direct => &[Step::Direct],
            StrategyKind::CotSingle | StrategyKind::CotMulti => &[Step::Step1, Step::Step2],
        }
    }

    /// Fails on the first task lacking a template the strategy needs.
    pub fn check_tasks(&self, tasks: impl IntoIterator<Item = TaskKind>) -> Result<(), TemplateError> {
        for task in tasks {
            for step in self.steps() {
                self.templates.get(task, *step)?;
            }
        }
        Ok(())
    }
}

/// Encoded attachments for one instance, built once and reused across steps.
struct Attachments {
    urls: Vec<String>,
}

pub(crate) fn resolve(root: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    }
}

fn data_url(mime: &str, bytes: &[u8]) -> String {
    format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// Reads an image file into an inline data URL.
pub fn file_data_url(path: &Path) -> std::io::Result<String> {
    Ok(data_url(mime_for(path), &std::fs::read(path)?))
}

/// Draws a hollow rectangle with the stroke lying inside `b` (pixel space),
/// clipped to the image.
pub fn draw_rectangle(img: &mut RgbImage, b: &BBox, stroke: u32, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clampi = |v: f64, hi: u32| (v.floor().max(0.0) as u32).min(hi);
    let x1 = clampi(b.x1, w - 1);
    let y1 = clampi(b.y1, h - 1);
    let x2 = clampi(b.x2.ceil() - 1.0, w - 1).max(x1);
    let y2 = clampi(b.y2.ceil() - 1.0, h - 1).max(y1);
    let s = stroke.max(1);
    for y in y1..=y2 {
        for x in x1..=x2 {
            let edge = x < x1 + s || x + s > x2 || y < y1 + s || y + s > y2;
            if edge {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Reads the instance's images into data URLs, drawing the first query
/// region onto a copy of its image when `marked`.
fn encode_images(inst: &Instance, root: &Path, marked: bool) -> Result<Attachments, OrchestratorError> {
    let mark = if marked { inst.query_regions.first() } else { None };
    let mut urls = Vec::with_capacity(inst.images.len());
    for (i, img) in inst.images.iter().enumerate() {
        let path = resolve(root, &img.path);
        let err = |reason: String| OrchestratorError::Image { path: path.clone(), reason };
        let bytes = std::fs::read(&path).map_err(|e| err(e.to_string()))?;
        match mark.filter(|r| r.image_index == i) {
            None => urls.push(data_url(mime_for(&path), &bytes)),
            Some(region) => {
                let mut pixels = image::load_from_memory(&bytes).map_err(|e| err(e.to_string()))?.to_rgb8();
                let (w, h) = pixels.dimensions();
                let px = CoordSpace::pixel(w, h).and_then(|sp| region.to_space(sp)).map_err(|e| err(e.to_string()))?;
                draw_rectangle(&mut pixels, &px.bbox, MARK_STROKE, MARK_COLOR);
                let mut out = Cursor::new(Vec::new());
                pixels.write_to(&mut out, ImageFormat::Png).map_err(|e| err(e.to_string()))?;
                urls.push(data_url("image/png", out.get_ref()));
            }
        }
    }
    Ok(Attachments { urls })
}

/// Placeholder values derivable from the instance alone.
pub fn base_bindings(inst: &Instance) -> Bindings {
    let bbox = inst.query_regions.first().and_then(|r| {
        let n = geometry::convert(&r.bbox, r.space, CoordSpace::Norm1000).ok()?;
        Some(format!("({},{}),({},{})", n.x1.round(), n.y1.round(), n.x2.round(), n.y2.round()))
    });
    let candidates = inst.candidate_images();
    let reference = (0..inst.images.len()).find(|i| !candidates.contains(i)).unwrap_or(0);
    Bindings {
        response: None,
        question: Some(inst.query_text.clone().unwrap_or_default()),
        bbox,
        image_k: None,
        image_list: Some(prompts::image_list(inst.images.len())),
        ordinal: Some(prompts::ordinal_word(reference)),
    }
}

pub(crate) fn user_message(urls: &[&str], text: &str) -> Value {
    let mut content: Vec<Value> = urls.iter().map(|u| image_part(u.to_string())).collect();
    content.push(text_part(text));
    json!({"role": "user", "content": content})
}

pub(crate) fn payload(model: &str, messages: Vec<Value>) -> Value {
    json!({"model": model, "temperature": 0, "messages": messages})
}

/// Builds the wire payload for one templated request: the selected images,
/// in instance order, followed by the rendered text.
pub fn render_messages(
    inst: &Instance,
    strat: &Strategy,
    step: Step,
    bindings: &Bindings,
    images: &[usize],
    model: &str,
    image_root: &Path,
) -> Result<Value, OrchestratorError> {
    let text = strat.templates.render(inst.task, step, bindings)?;
    let att = encode_images(inst, image_root, strat.templates.is_marked(inst.task))?;
    let urls: Vec<&str> = images.iter().map(|&i| att.urls[i].as_str()).collect();
    Ok(payload(model, vec![user_message(&urls, &text)]))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub model: String,
    /// Directory relative image paths are resolved against.
    pub image_root: PathBuf,
    pub max_concurrency: usize,
    /// Sampling seed forwarded to the endpoint, if any.
    pub seed: Option<u64>,
}

enum Outcome {
    Done(String),
    Failed,
}

/// Per-instance execution state.
struct Session<'a> {
    inst: &'a Instance,
    orch: &'a Orchestrator<'a>,
    att: Attachments,
    steps: Vec<StepRecord>,
}

impl Session<'_> {
    fn urls(&self, images: &[usize]) -> Vec<&str> {
        images.iter().map(|&i| self.att.urls[i].as_str()).collect()
    }

    fn send(
        &mut self,
        step: Step,
        images: Vec<usize>,
        polled: Option<usize>,
        messages: Vec<Value>,
    ) -> Result<Outcome, OrchestratorError> {
        let mut body = payload(&self.orch.opts.model, messages);
        if let Some(seed) = self.orch.opts.seed {
            body["seed"] = seed.into();
        }
        let start = Instant::now();
        let res = self.orch.client.complete(&body);
        let latency_ms = start.elapsed().as_millis() as u64;
        let mut rec = StepRecord {
            step: step.to_string(),
            images,
            polled_image: polled,
            raw: None,
            parsed: None,
            error: None,
            latency_ms,
        };
        match res {
            Ok(text) => {
                rec.raw = Some(text.clone());
                if step != Step::Step1 {
                    rec.parsed = Some(outparse::parse_boxes(&text));
                }
                self.steps.push(rec);
                Ok(Outcome::Done(text))
            }
            Err(e @ TransportError::Rejected { .. }) => {
                Err(OrchestratorError::Rejected { id: self.inst.id.clone(), source: e })
            }
            Err(e) => {
                log::warn!("instance `{}` {step}: {e}", self.inst.id);
                rec.error = Some(e.to_string());
                self.steps.push(rec);
                Ok(Outcome::Failed)
            }
        }
    }
}

/// Attributes parsed boxes to images. Boxes from a request that attached a
/// single image (or polled one) belong to that image; otherwise the parser's
/// label is used, falling back to the sole candidate image if there is one.
fn attribute(
    parsed: &ParsedAnswer,
    attached: &[usize],
    polled: Option<usize>,
    candidates: &[usize],
) -> Vec<Prediction> {
    let fixed = polled.or(if attached.len() == 1 { Some(attached[0]) } else { None });
    parsed
        .boxes
        .iter()
        .map(|b| {
            let image = fixed.or_else(|| b.image_index.filter(|i| attached.contains(i))).or(if candidates.len() == 1 {
                Some(candidates[0])
            } else {
                None
            });
            Prediction { image, bbox: b.bbox }
        })
        .collect()
}

pub struct Orchestrator<'a> {
    pub client: &'a dyn ChatClient,
    pub strategy: Strategy,
    pub form: AnsweringForm,
    pub opts: RunOptions,
}

impl<'a> Orchestrator<'a> {
    pub fn new(client: &'a dyn ChatClient, strategy: Strategy, form: AnsweringForm, opts: RunOptions) -> Self {
        Orchestrator { client, strategy, form, opts }
    }

    fn render(&self, inst: &Instance, step: Step, b: &Bindings) -> Result<String, TemplateError> {
        self.strategy.templates.render(inst.task, step, b)
    }

    fn suffix(
        &self,
        inst: &Instance,
        step: Step,
        polled: Option<usize>,
        b: &Bindings,
    ) -> Result<String, TemplateError> {
        let t = &self.strategy.templates;
        match polled {
            Some(k) => {
                let b = Bindings { image_k: Some(prompts::image_label(k)), ..b.clone() };
                t.render_suffix(&t.polling_suffix, inst.task, step, &b)
            }
            None => t.render_suffix(&t.all_images_suffix, inst.task, step, b),
        }
    }

    /// Runs every step for one instance. Transport failures yield a record
    /// marked failed; an endpoint rejection is returned as an error.
    pub fn run_instance(&self, inst: &Instance) -> Result<RunRecord, OrchestratorError> {
        let marked = self.strategy.templates.is_marked(inst.task);
        let att = encode_images(inst, &self.opts.image_root, marked)?;
        let mut s = Session { inst, orch: self, att, steps: Vec::new() };
        let all: Vec<usize> = (0..inst.images.len()).collect();
        let candidates = inst.candidate_images();
        let mut bindings = base_bindings(inst);
        let mut predictions = Vec::new();
        let mut referring = None;
        let mut selected = None;
        let mut failed = false;

        // Polled image per grounding request; `None` covers all images at once.
        let targets: Vec<Option<usize>> = match self.form {
            AnsweringForm::Polling => candidates.iter().map(|&c| Some(c)).collect(),
            AnsweringForm::All => vec![None],
        };

        match self.strategy.kind {
            StrategyKind::Direct => {
                for polled in targets {
                    let b = Bindings {
                        image_k: Some(polled.map_or_else(|| "each image".to_string(), prompts::image_label)),
                        ..bindings.clone()
                    };
                    let mut text = self.render(inst, Step::Direct, &b)?;
                    if polled.is_none() && all.len() > 1 {
                        text = format!("{text} {}", self.suffix(inst, Step::Direct, None, &b)?);
                    }
                    let msg = user_message(&s.urls(&all), &text);
                    match s.send(Step::Direct, all.clone(), polled, vec![msg])? {
                        Outcome::Done(_) => {
                            let parsed = s.steps.last().and_then(|r| r.parsed.as_ref()).unwrap();
                            predictions.extend(attribute(parsed, &all, polled, &candidates));
                        }
                        Outcome::Failed => {
                            failed = true;
                            break;
                        }
                    }
                }
            }
            StrategyKind::CotSingle | StrategyKind::CotMulti => {
                let step1_text = self.render(inst, Step::Step1, &bindings)?;
                let step1_msg = user_message(&s.urls(&all), &step1_text);
                let answer = match s.send(Step::Step1, all.clone(), None, vec![step1_msg.clone()])? {
                    Outcome::Done(t) => Some(t),
                    Outcome::Failed => None,
                };
                match answer {
                    None => failed = true,
                    Some(answer)
                        if inst.task == TaskKind::GroupGrounding && self.strategy.kind == StrategyKind::CotSingle =>
                    {
                        let choice = outparse::parse_image_choice(&answer, inst.images.len());
                        if choice.is_none() {
                            log::debug!("instance `{}`: no image choice in step 1, sending the first image", inst.id);
                        }
                        let k = choice.unwrap_or(0);
                        selected = Some(k);
                        let text = self.render(inst, Step::Step2, &bindings)?;
                        let msg = user_message(&s.urls(&[k]), &text);
                        match s.send(Step::Step2, vec![k], Some(k), vec![msg])? {
                            Outcome::Done(_) => {
                                let parsed = s.steps.last().and_then(|r| r.parsed.as_ref()).unwrap();
                                predictions.extend(attribute(parsed, &[k], Some(k), &candidates));
                            }
                            Outcome::Failed => failed = true,
                        }
                    }
                    Some(answer) => {
                        let expr = outparse::extract_referring(&answer);
                        bindings.response = Some(expr.clone());
                        referring = Some(expr);
                        let multi = self.strategy.kind == StrategyKind::CotMulti;
                        for polled in targets {
                            let base = self.render(inst, Step::Step2, &bindings)?;
                            let (attached, messages) = if multi {
                                let text = if polled.is_some() || all.len() > 1 {
                                    format!("{base} {}", self.suffix(inst, Step::Step2, polled, &bindings)?)
                                } else {
                                    base
                                };
                                let history = vec![
                                    step1_msg.clone(),
                                    json!({"role": "assistant", "content": answer}),
                                    json!({"role": "user", "content": [text_part(&text)]}),
                                ];
                                (all.clone(), history)
                            } else {
                                let attached = polled.map_or_else(|| all.clone(), |k| vec![k]);
                                let text = if polled.is_none() && attached.len() > 1 {
                                    format!("{base} {}", self.suffix(inst, Step::Step2, None, &bindings)?)
                                } else {
                                    base
                                };
                                let msg = user_message(&s.urls(&attached), &text);
                                (attached, vec![msg])
                            };
                            match s.send(Step::Step2, attached.clone(), polled, messages)? {
                                Outcome::Done(_) => {
                                    let parsed = s.steps.last().and_then(|r| r.parsed.as_ref()).unwrap();
                                    predictions.extend(attribute(parsed, &attached, polled, &candidates));
                                }
                                Outcome::Failed => {
                                    failed = true;
                                    break;
                                }
                            }
                        }
                    }
                }
            }
        }

        let (target_iou, target_hit) = if failed {
            (vec![0.0; inst.ground_truth.len()], vec![false; inst.ground_truth.len()])
        } else {
            let m = scoring::match_targets(inst, &predictions)
                .map_err(|e| OrchestratorError::Config(format!("instance `{}`: {e}", inst.id)))?;
            (m.iter().map(|t| t.iou).collect(), m.iter().map(|t| t.matched).collect())
        };
        Ok(RunRecord {
            instance_id: inst.id.clone(),
            strategy: self.strategy.kind,
            form: self.form,
            steps: s.steps,
            referring,
            selected_image: selected,
            predictions,
            target_iou,
            target_hit,
            failed,
        })
    }

    /// Runs a dataset on a bounded worker pool. Each worker owns one
    /// instance at a time, so at most `max_concurrency` requests are in
    /// flight.
    pub fn run_batch(&self, dataset: &[Instance], batch: &BatchOptions) -> Result<BatchOutcome, OrchestratorError> {
        if self.opts.max_concurrency < 1 {
            return Err(OrchestratorError::Config("max concurrency must be at least 1".into()));
        }
        self.strategy.check_tasks(dataset.iter().map(|i| i.task))?;

        let (writer, done) = match &batch.journal {
            Some(path) => {
                let header = JournalHeader {
                    version: journal::JOURNAL_VERSION,
                    strategy: self.strategy.kind,
                    form: self.form,
                    dataset_digest: journal::dataset_digest(dataset),
                    instances: dataset.len(),
                    config: batch.config.clone(),
                };
                let (w, done) = JournalWriter::open_or_create(path, &header, dataset)?;
                (Some(w), done)
            }
            None => (None, Vec::new()),
        };
        let resumed = done.len();
        let mut by_id: HashMap<String, RunRecord> = done.into_iter().map(|r| (r.instance_id.clone(), r)).collect();
        let pending: Vec<&Instance> = dataset.iter().filter(|i| !by_id.contains_key(&i.id)).collect();
        if resumed > 0 {
            log::info!("resuming: {resumed} instances already journaled, {} pending", pending.len());
        }

        let budget = batch.limit.unwrap_or(usize::MAX).min(pending.len());
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let writer = Mutex::new(writer);
        let results: Mutex<Vec<RunRecord>> = Mutex::new(Vec::new());
        let first_error: Mutex<Option<OrchestratorError>> = Mutex::new(None);
        let workers = self.opts.max_concurrency.min(budget.max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= budget {
                        break;
                    }
                    let outcome = self.run_instance(pending[i]).and_then(|rec| {
                        if let Some(w) = writer.lock().unwrap().as_mut() {
                            w.append(&rec)?;
                        }
                        Ok(rec)
                    });
                    match outcome {
                        Ok(rec) => results.lock().unwrap().push(rec),
                        Err(e) => {
                            abort.store(true, Ordering::SeqCst);
                            first_error.lock().unwrap().get_or_insert(e);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        let executed = results.lock().unwrap().len();
        for r in results.into_inner().unwrap() {
            by_id.insert(r.instance_id.clone(), r);
        }
        let records = dataset.iter().filter_map(|i| by_id.remove(&i.id)).collect();
        Ok(BatchOutcome { records, executed, resumed })
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub journal: Option<PathBuf>,
    /// Stop after executing this many new instances.
    pub limit: Option<usize>,
    /// Run configuration echoed into the journal header.
    pub config: Value,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Completed records in dataset order, including resumed ones.
    pub records: Vec<RunRecord>,
    pub executed: usize,
    pub resumed: usize,
}

/// Ground-truth box rendered as the tier-1 answer token, for scripting mocks.
pub fn answer_token(region: &Region) -> String {
    let n = geometry::convert(&region.bbox, region.space, CoordSpace::Norm1000).expect("valid region");
    format_box_token(&n)
}
