use std::path::{Path, PathBuf};

use migkit::benchdata::{AnsweringForm, StrategyKind};
use migkit::client::ModelEndpoint;
use migkit::geometry::SpaceTag;
use serde::{Deserialize, Serialize};

use crate::{config_error, EvaluateArgs};

/// Everything an evaluation run depends on. Written next to the run's
/// outputs and echoed into the journal header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub strategy: StrategyKind,
    pub form: AnsweringForm,
    pub endpoint: ModelEndpoint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Coordinate convention model answers are read in.
    pub coord_space: SpaceTag,
    /// Prompt template file; the bundled set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Root for relative image paths; the dataset's directory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: None,
            strategy: StrategyKind::CotSingle,
            form: AnsweringForm::Polling,
            endpoint: ModelEndpoint::default(),
            seed: None,
            coord_space: SpaceTag::Norm1000,
            templates: None,
            image_root: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Config file (if any) with command-line flags layered on top.
    pub fn resolve(args: &EvaluateArgs) -> anyhow::Result<Self> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        take!(args.dataset.clone().map(Some) => c.dataset);
        take!(args.out.clone().map(Some) => c.out);
        take!(args.strategy => c.strategy);
        take!(args.form => c.form);
        take!(args.base_url => c.endpoint.base_url);
        take!(args.model => c.endpoint.model);
        take!(args.concurrency => c.endpoint.max_concurrency);
        take!(args.timeout => c.endpoint.timeout_secs);
        take!(args.max_attempts => c.endpoint.max_attempts);
        take!(args.seed.map(Some) => c.seed);
        take!(args.coord_space => c.coord_space);
        take!(args.templates.clone().map(Some) => c.templates);
        take!(args.image_root.clone().map(Some) => c.image_root);
        c.endpoint.token = std::env::var(migkit::client::TOKEN_ENV).ok().filter(|t| !t.is_empty());
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.dataset.is_none() {
            return Err(config_error("no dataset given (--dataset or `dataset` in the config file)"));
        }
        if self.out.is_none() {
            return Err(config_error("no output directory given (--out or `out` in the config file)"));
        }
        if self.coord_space != SpaceTag::Norm1000 {
            return Err(config_error("only the norm1000 answer convention is supported"));
        }
        self.endpoint.validate().map_err(config_error)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
