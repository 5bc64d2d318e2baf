use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Subcommand};
use migkit::benchdata::TaskKind;
use migkit::client::{HttpChatClient, ModelEndpoint, TOKEN_ENV};
use migkit::dataforge::{
    adaptive_groups, load_annotations, make_task_set, random_groups, roundtrip_check, save_train_set, stage_manifest,
    synthesize_freeform, write_crops, EmbeddingIndex, ForgeConfig, GroupingMode, Span, Stage, SynthesisEndpoints,
};
use migkit::prompts::TemplateSet;

use crate::{config_error, parse_task};

#[derive(Subcommand)]
pub enum ForgeCommand {
    /// Turn annotation records into training instances for one task.
    Tasks(TasksArgs),
    /// Group images for free-form synthesis.
    Group(GroupArgs),
    /// Run caption, refinement and instruction passes over image groups.
    Synthesize(SynthesizeArgs),
    /// Sample a stage's data-mix manifest.
    Manifest(ManifestArgs),
}

#[derive(Args)]
pub struct TasksArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Output directory; receives `{task}.jsonl` and any query crops.
    #[arg(long)]
    out: PathBuf,
    /// TOML construction settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root for relative image paths; the annotation file's directory when absent.
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
pub struct GroupArgs {
    /// Embedding index (JSONL, one {"path","dim","embedding"} per line).
    #[arg(long)]
    embeddings: PathBuf,
    /// JSONL output, one array of image paths per group.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Groups file written by `forge group`.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base_url: String,
    #[arg(long)]
    caption_model: String,
    #[arg(long)]
    refine_model: String,
    #[arg(long)]
    instruct_model: String,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
pub struct ManifestArgs {
    /// 1 or 2.
    #[arg(long)]
    stage: u8,
    /// NAME=COUNT of available records; repeat per source.
    #[arg(long = "source", required = true)]
    sources: Vec<String>,
    #[arg(long)]
    total: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cmd: ForgeCommand) -> anyhow::Result<()> {
    match cmd {
        ForgeCommand::Tasks(a) => tasks(&a),
        ForgeCommand::Group(a) => group(&a),
        ForgeCommand::Synthesize(a) => synthesize(&a),
        ForgeCommand::Manifest(a) => manifest(&a),
    }
}

fn forge_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ForgeConfig> {
    let mut cfg: ForgeConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => ForgeConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(cfg)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn tasks(a: &TasksArgs) -> anyhow::Result<()> {
    let cfg = forge_config(a.config.as_deref(), a.seed)?;
    let records = load_annotations(&a.annotations)?;
    let mut set = make_task_set(&records, a.task, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let root = a.image_root.clone().unwrap_or_else(|| parent_dir(&a.annotations));
    write_crops(&set.crops, &root, &a.out)?;

    // Crops sit next to the output file; source images are pinned to the
    // image root so the output resolves from its own directory.
    let crops: HashSet<&str> = set.crops.iter().map(|c| c.dest.as_str()).collect();
    let abs_root = std::path::absolute(&root).with_context(|| format!("resolving {}", root.display()))?;
    for t in &mut set.instances {
        for img in &mut t.instance.images {
            if !crops.contains(img.path.as_str()) && Path::new(&img.path).is_relative() {
                img.path = abs_root.join(&img.path).to_string_lossy().into_owned();
            }
        }
    }
    roundtrip_check(&set.instances, &a.out).map_err(|e| anyhow!("round trip failed: {e}"))?;
    std::fs::remove_file(a.out.join("roundtrip.jsonl")).ok();
    let path = a.out.join(format!("{}.jsonl", a.task.as_str()));
    save_train_set(&path, &set.instances)?;
    eprintln!(
        "{}: {} instances, {} crops, {} skipped -> {}",
        a.task.as_str(),
        set.instances.len(),
        set.crops.len(),
        set.skipped.len(),
        path.display()
    );
    Ok(())
}

fn group(a: &GroupArgs) -> anyhow::Result<()> {
    let cfg = forge_config(a.config.as_deref(), a.seed)?;
    let index = EmbeddingIndex::<f32>::load(&a.embeddings)?;
    let groups = match cfg.grouping.mode {
        GroupingMode::ClipAdaptive => adaptive_groups(&index, &cfg.grouping, cfg.seed, a.threads)?,
        GroupingMode::Random => {
            let s = cfg.grouping.sample;
            random_groups(&index.paths, Span::new(s.min + 1, s.max + 1), cfg.seed)
        }
        GroupingMode::CommonObject => {
            return Err(config_error("common-object groups come from `forge tasks --task common_object`"))
        }
    };
    let mut f = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for g in &groups {
        writeln!(f, "{}", serde_json::to_string(g)?)?;
    }
    eprintln!("{} images in {} groups -> {}", index.len(), groups.len(), a.out.display());
    Ok(())
}

fn synthesize(a: &SynthesizeArgs) -> anyhow::Result<()> {
    let templates = match &a.templates {
        Some(p) => TemplateSet::from_file(p).map_err(|e| config_error(e.to_string()))?,
        None => TemplateSet::default(),
    };
    let records = load_annotations(&a.annotations)?;
    let by_path: HashMap<&str, &migkit::dataforge::AnnotationRecord> =
        records.iter().map(|r| (r.image.as_str(), r)).collect();
    let text = std::fs::read_to_string(&a.groups).with_context(|| format!("reading {}", a.groups.display()))?;
    let mut groups = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let paths: Vec<String> =
            serde_json::from_str(line).with_context(|| format!("{}:{}", a.groups.display(), n + 1))?;
        let group = paths
            .iter()
            .map(|p| by_path.get(p.as_str()).map(|r| (*r).clone()).ok_or_else(|| anyhow!("no annotations for `{p}`")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        groups.push(group);
    }

    let endpoint = ModelEndpoint {
        base_url: a.base_url.clone(),
        token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        ..ModelEndpoint::default()
    };
    let client = HttpChatClient::new(endpoint).map_err(|e| config_error(e.to_string()))?;
    let ep = SynthesisEndpoints {
        caption: &client,
        caption_model: a.caption_model.clone(),
        refine: &client,
        refine_model: a.refine_model.clone(),
        instruct: &client,
        instruct_model: a.instruct_model.clone(),
        image_root: a.image_root.clone().unwrap_or_else(|| parent_dir(&a.annotations)),
        threads: a.threads,
    };
    let (instances, stats) = synthesize_freeform(&groups, &ep, &templates.synthesis)?;
    save_train_set(&a.out, &instances)?;
    eprintln!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn manifest(a: &ManifestArgs) -> anyhow::Result<()> {
    let stage = Stage::try_from(a.stage).map_err(|e| config_error(e.to_string()))?;
    let mut available = BTreeMap::new();
    for s in &a.sources {
        let (name, count) = s
            .split_once('=')
            .and_then(|(n, c)| Some((n.to_string(), c.parse::<usize>().ok()?)))
            .ok_or_else(|| config_error(format!("--source `{s}` must be NAME=COUNT")))?;
        available.insert(name, count);
    }
    let m = stage_manifest(stage, &available, a.total, a.seed).map_err(|e| config_error(e.to_string()))?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&m)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    for e in &m.entries {
        eprintln!("{:<20} {:>3}% {:>10}", e.source, e.percent, e.count);
    }
    Ok(())
}
