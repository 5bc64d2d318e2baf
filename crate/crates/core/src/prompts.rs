//! Prompt templates and placeholder binding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchdata::TaskKind;

/// Templates shipped with the crate.
pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Step1,
    Step2,
    Direct,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Step1 => "step1",
            Step::Step2 => "step2",
            Step::Direct => "direct",
        })
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("no template for task `{task}` step `{step}`")]
    Missing { task: TaskKind, step: Step },
    #[error("template for `{task}` {step} left placeholders unbound: {names:?}")]
    Unbound { task: TaskKind, step: Step, names: Vec<String> },
    #[error("parsing templates: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("reading templates: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplates {
    #[serde(default)]
    pub marked: bool,
    pub step1: Option<String>,
    pub step2: Option<String>,
    pub direct: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTemplates {
    pub caption: String,
    pub refine: String,
    pub instruct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub format_suffix: String,
    pub polling_suffix: String,
    pub all_images_suffix: String,
    pub tasks: BTreeMap<TaskKind, TaskTemplates>,
    pub synthesis: SynthesisTemplates,
}

impl Default for TemplateSet {
    fn default() -> Self {
        static DEFAULT: OnceLock<TemplateSet> = OnceLock::new();
        DEFAULT.get_or_init(|| TemplateSet::from_toml(DEFAULT_TEMPLATES).expect("bundled templates parse")).clone()
    }
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    pub response: Option<String>,
    pub question: Option<String>,
    pub bbox: Option<String>,
    pub image_k: Option<String>,
    pub image_list: Option<String>,
    pub ordinal: Option<String>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{[A-Z][A-Z_]*\}").unwrap())
}

/// Substitutes bound placeholders and reports any left over.
pub fn bind(template: &str, b: &Bindings) -> Result<String, Vec<String>> {
    let mut s = template.to_string();
    for (name, value) in [
        ("{RESPONSE}", &b.response),
        ("{QUESTION}", &b.question),
        ("{BOX}", &b.bbox),
        ("{IMAGE_K}", &b.image_k),
        ("{IMAGE_LIST}", &b.image_list),
        ("{ORDINAL}", &b.ordinal),
    ] {
        if let Some(v) = value {
            s = s.replace(name, v);
        }
    }
    let left: Vec<String> = placeholder_re().find_iter(&s).map(|m| m.as_str().to_string()).collect();
    if left.is_empty() {
        Ok(s.trim().to_string())
    } else {
        Err(left)
    }
}

impl TemplateSet {
    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, task: TaskKind, step: Step) -> Result<&str, TemplateError> {
        let t = self.tasks.get(&task);
        let s = t.and_then(|t| match step {
            Step::Step1 => t.step1.as_deref(),
            Step::Step2 => t.step2.as_deref(),
            Step::Direct => t.direct.as_deref(),
        });
        s.ok_or(TemplateError::Missing { task, step })
    }

    pub fn is_marked(&self, task: TaskKind) -> bool {
        self.tasks.get(&task).is_some_and(|t| t.marked)
    }

    /// Renders the text part of a request. Grounding steps get the
    /// coordinate format suffix appended.
    pub fn render(&self, task: TaskKind, step: Step, b: &Bindings) -> Result<String, TemplateError> {
        let body = bind(self.get(task, step)?, b).map_err(|names| TemplateError::Unbound { task, step, names })?;
        Ok(match step {
            Step::Step1 => body,
            Step::Step2 | Step::Direct => format!("{body} {}", self.format_suffix),
        })
    }

    /// Renders a suffix template (polling / all-images) with the same bindings.
    pub fn render_suffix(
        &self,
        suffix: &str,
        task: TaskKind,
        step: Step,
        b: &Bindings,
    ) -> Result<String, TemplateError> {
        bind(suffix, b).map_err(|names| TemplateError::Unbound { task, step, names })
    }
}

/// "Image1 | Image2 | Image3" over `n` images.
pub fn image_list(n: usize) -> String {
    (1..=n).map(|k| format!("Image{k}")).collect::<Vec<_>>().join(" | ")
}

/// "Image-3" for 0-based index 2.
pub fn image_label(index: usize) -> String {
    format!("Image-{}", index + 1)
}

pub fn ordinal_word(index: usize) -> String {
    const WORDS: [&str; 10] =
        ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"];
    match WORDS.get(index) {
        Some(w) => w.to_string(),
        None => {
            let n = index + 1;
            let suffix = match (n % 10, n % 100) {
                (1, r) if r != 11 => "st",
                (2, r) if r != 12 => "nd",
                (3, r) if r != 13 => "rd",
                _ => "th",
            };
            format!("{n}{suffix}")
        }
    }
}
