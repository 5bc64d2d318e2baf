use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use migkit::benchdata::{self, load_dataset_with, Instance, LoadOptions};
use migkit::client::HttpChatClient;
use migkit::geometry::BBox;
use migkit::hislicer::{self, GridSpec};
use migkit::journal::{dataset_digest, read_journal};
use migkit::mergekit::{self, TensorArchive};
use migkit::orchestrator::{BatchOptions, Orchestrator, RunOptions, Strategy};
use migkit::prompts::TemplateSet;
use migkit::scoring::{self, ReferencePair, ScoreReport, TierLabel};

use crate::config::RunConfig;
use crate::{config_error, DiffArgs, EvaluateArgs, MergeArgs, ScoreArgs, SliceArgs, TierArgs, ValidateArgs};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn load_plain(path: &Path) -> anyhow::Result<Vec<Instance>> {
    load_dataset_with(path, LoadOptions { check_images: false }).with_context(|| format!("loading {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let dataset_path = cfg.dataset.clone().expect("checked");
    let out = cfg.out.clone().expect("checked");

    let templates = match &cfg.templates {
        Some(p) => TemplateSet::from_file(p).map_err(|e| config_error(e.to_string()))?,
        None => TemplateSet::default(),
    };
    let dataset =
        benchdata::load_dataset(&dataset_path).with_context(|| format!("loading {}", dataset_path.display()))?;
    let strategy = Strategy::new(cfg.strategy, Arc::new(templates));
    strategy.check_tasks(dataset.iter().map(|i| i.task)).map_err(|e| config_error(e.to_string()))?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join(RUN_CONFIG_FILE), &cfg.to_toml())?;

    let client = HttpChatClient::new(cfg.endpoint.clone()).map_err(|e| config_error(e.to_string()))?;
    let image_root =
        cfg.image_root.clone().unwrap_or_else(|| dataset_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let opts = RunOptions {
        model: cfg.endpoint.model.clone(),
        image_root,
        max_concurrency: cfg.endpoint.max_concurrency,
        seed: cfg.seed,
    };
    let orch = Orchestrator::new(&client, strategy, cfg.form, opts);
    let batch =
        BatchOptions { journal: Some(out.join(JOURNAL_FILE)), limit: args.limit, config: serde_json::to_value(&cfg)? };
    let outcome = orch.run_batch(&dataset, &batch)?;
    log::info!("{} executed, {} resumed from the journal", outcome.executed, outcome.resumed);

    if outcome.records.len() < dataset.len() {
        eprintln!(
            "stopped with {}/{} instances done; rerun the same command to resume",
            outcome.records.len(),
            dataset.len()
        );
        return Ok(());
    }
    let report = scoring::score(&outcome.records, &dataset)?;
    write_file(&out.join(REPORT_JSON), &report.to_json())?;
    write_file(&out.join(REPORT_TXT), &format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}

fn score_journal(journal: &Path, dataset: &[Instance]) -> anyhow::Result<ScoreReport> {
    let contents = read_journal(journal).with_context(|| format!("reading {}", journal.display()))?;
    if contents.header.dataset_digest != dataset_digest(dataset) {
        log::warn!("{} was recorded against a different dataset file", journal.display());
    }
    if !contents.skipped_lines.is_empty() {
        log::warn!("{}: unreadable lines skipped: {:?}", journal.display(), contents.skipped_lines);
    }
    Ok(scoring::score(&contents.records, dataset)?)
}

pub fn score(args: &ScoreArgs) -> anyhow::Result<()> {
    let dataset = load_plain(&args.dataset)?;
    let report = score_journal(&args.journal, &dataset)?;
    if let Some(p) = &args.out {
        write_file(p, &report.to_json())?;
    }
    if args.json {
        println!("{}", report.to_json());
    } else {
        println!("{report}");
    }
    Ok(())
}

pub fn tier(args: &TierArgs) -> anyhow::Result<()> {
    let dataset = load_plain(&args.dataset)?;
    let mut reports = Vec::with_capacity(args.pairs.len());
    for pair in &args.pairs {
        let (d, c) = pair
            .split_once(',')
            .ok_or_else(|| config_error(format!("--pair `{pair}` must be DIRECT_JOURNAL,COT_JOURNAL")))?;
        reports.push((score_journal(Path::new(d), &dataset)?, score_journal(Path::new(c), &dataset)?));
    }
    let pairs: Vec<ReferencePair<'_>> = reports.iter().map(|(d, c)| ReferencePair { direct: d, cot: c }).collect();
    let tiers = scoring::tier_dataset(&dataset, &pairs).map_err(|e| anyhow!(e))?;

    let mut text = String::new();
    let mut counts: BTreeMap<TierLabel, usize> = BTreeMap::new();
    for (id, t) in &tiers {
        *counts.entry(*t).or_default() += 1;
        text.push_str(&serde_json::json!({"id": id, "tier": t}).to_string());
        text.push('\n');
    }
    match &args.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    for (t, n) in counts {
        eprintln!("{:<7} {n}", serde_json::to_value(t)?.as_str().unwrap_or_default());
    }
    Ok(())
}

pub fn merge(args: &MergeArgs) -> anyhow::Result<()> {
    let archives = args
        .inputs
        .iter()
        .map(|p| TensorArchive::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<&TensorArchive> = archives.iter().collect();
    let merged = mergekit::merge(&refs, args.weights.as_deref()).map_err(|e| match e {
        mergekit::MergeError::Weights(_) => config_error(e.to_string()),
        other => other.into(),
    })?;
    merged.write(&args.output)?;
    eprintln!("merged {} archives ({} tensors) into {}", archives.len(), merged.tensors.len(), args.output.display());
    Ok(())
}

pub fn diff(args: &DiffArgs) -> anyhow::Result<()> {
    let a = TensorArchive::read(&args.a).with_context(|| format!("reading {}", args.a.display()))?;
    let b = TensorArchive::read(&args.b).with_context(|| format!("reading {}", args.b.display()))?;
    let report = mergekit::diff(&a, &b)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

pub fn slice(args: &SliceArgs) -> anyhow::Result<()> {
    let (w, h) = hislicer::image_dimensions(&args.image)?;
    let spec = match &args.grid {
        Some(g) => GridSpec::parse(g, args.overlap).map_err(|e| config_error(e.to_string()))?,
        None => GridSpec { overlap: args.overlap, ..GridSpec::default_for(w, h, args.max_side) },
    };
    let grid = hislicer::slice(w, h, spec).map_err(|e| config_error(e.to_string()))?;
    if args.target.len() != 4 {
        return Err(config_error("--target takes four comma-separated values: x1,y1,x2,y2"));
    }
    let target = BBox::new(args.target[0], args.target[1], args.target[2], args.target[3])
        .map_err(|e| config_error(format!("--target: {e}")))?;
    if !(target.x2 <= w as f64 && target.y2 <= h as f64 && target.x1 >= 0.0 && target.y1 >= 0.0) {
        return Err(config_error(format!("--target lies outside the {w}x{h} image")));
    }

    let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let written = hislicer::write_tiles(&args.image, &grid, &args.out.join("tiles"), &stem)?;
    let rel: Vec<String> = written
        .iter()
        .map(|p| {
            let name = p.file_name().expect("tile file").to_string_lossy();
            PathBuf::from("tiles").join(name.as_ref()).to_string_lossy().into_owned()
        })
        .collect();
    let id = args.id.clone().unwrap_or(stem);
    let inst = hislicer::to_group_instance(&id, &args.question, &grid, &rel, &target)?;
    let path = args.out.join("instance.jsonl");
    benchdata::save_dataset(&path, std::slice::from_ref(&inst))
        .with_context(|| format!("writing {}", path.display()))?;
    let mut line = Vec::new();
    benchdata::write_dataset(&mut line, std::slice::from_ref(&inst))?;
    std::io::stdout().write_all(&line)?;
    eprintln!("{}x{} grid, {} tiles under {}", grid.spec.rows, grid.spec.cols, grid.tiles.len(), args.out.display());
    Ok(())
}

pub fn validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let dataset = load_dataset_with(&args.dataset, LoadOptions { check_images: !args.no_image_check })
        .with_context(|| format!("loading {}", args.dataset.display()))?;
    let report = benchdata::validate_benchmark(&dataset);
    for f in &report.findings {
        println!("{}: {:?}", f.instance_id, f.kind);
    }
    if !report.is_clean() {
        bail!("{} findings in {} instances", report.findings.len(), dataset.len());
    }
    let counts = benchdata::task_counts(&dataset);
    println!("{} instances, no findings", dataset.len());
    for (task, n) in counts {
        println!("  {:<22} {n}", task.as_str());
    }
    Ok(())
}
