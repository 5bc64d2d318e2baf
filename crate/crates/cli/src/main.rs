use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use migkit::benchdata::{AnsweringForm, StrategyKind, TaskKind};
use migkit::geometry::SpaceTag;

mod commands;
mod config;
mod forge;

/// Exit status for configuration and usage errors; clap uses the same code.
const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 1;

/// A bad flag, config file or option combination.
#[derive(Debug)]
pub struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn serde_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(name = "migkit", version, about = "Multi-image grounding toolkit")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model over a benchmark dataset, journaling every answer.
    Evaluate(EvaluateArgs),
    /// Score a run journal against its dataset.
    Score(ScoreArgs),
    /// Assign difficulty tiers from reference-model journals.
    Tier(TierArgs),
    /// Build training data.
    #[command(subcommand)]
    Forge(forge::ForgeCommand),
    /// Average checkpoint archives.
    Merge(MergeArgs),
    /// Compare two checkpoint archives tensor by tensor.
    Diff(DiffArgs),
    /// Cut a high-resolution image into tiles and emit a group-grounding instance.
    Slice(SliceArgs),
    /// Check a benchmark dataset file.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for the journal, report and resolved configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// direct, cot_single or cot_multi.
    #[arg(long, value_parser = serde_enum::<StrategyKind>)]
    pub strategy: Option<StrategyKind>,
    /// polling or all.
    #[arg(long, value_parser = serde_enum::<AnsweringForm>)]
    pub form: Option<AnsweringForm>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Maximum in-flight instances.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = serde_enum::<SpaceTag>)]
    pub coord_space: Option<SpaceTag>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Stop after this many newly executed instances (the journal keeps them).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub journal: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TierArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// DIRECT_JOURNAL,COT_JOURNAL for one reference model; repeat per model.
    #[arg(long = "pair", required = true)]
    pub pairs: Vec<String>,
    /// JSONL output (one {"id","tier"} per line); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MergeArgs {
    /// Input archives.
    #[arg(required = true, num_args = 2..)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Comma-separated weights, one per input, summing to 1. Uniform when absent.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct DiffArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// RxC; the smallest grid keeping tiles within --max-side when absent.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub overlap: u32,
    #[arg(long, default_value_t = migkit::hislicer::DEFAULT_MAX_TILE_SIDE)]
    pub max_side: u32,
    #[arg(long)]
    pub question: String,
    /// Answer box in source pixels: x1,y1,x2,y2.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub target: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Instance id; the image file stem when absent.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Skip checking that image files exist.
    #[arg(long)]
    pub no_image_check: bool,
}

/// Parses a task name as used in dataset files.
pub fn parse_task(s: &str) -> Result<TaskKind, String> {
    serde_enum(s)
}

/// The error chain joined with `: `, skipping causes a wrapper already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let s = cause.to_string();
        if !msg.contains(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Score(a) => commands::score(&a),
        Command::Tier(a) => commands::tier(&a),
        Command::Forge(c) => forge::run(c),
        Command::Merge(a) => commands::merge(&a),
        Command::Diff(a) => commands::diff(&a),
        Command::Slice(a) => commands::slice(&a),
        Command::Validate(a) => commands::validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
