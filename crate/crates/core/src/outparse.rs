//! Extraction of boxes, image selections and referring expressions from
//! free-text model responses.
//!
//! Box grammar tiers are tried in order and the first tier with at least
//! one match wins:
//!
//! 1. `<|box_start|>(x1,y1),(x2,y2)<|box_end|>`
//! 2. bare tuple pair `(a,b),(c,d)`
//! 3. bracketed quadruple `[a, b, c, d]`
//!
//! Image selections (`Image2`, `Image-2`, `the second image`) are handled by
//! [`parse_image_choice`] and also used to attribute boxes to images.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, NORM1000_MAX};

const NUM: &str = r"(-?\d+(?:\.\d+)?)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFlag {
    /// Boxes came from tier 2 or 3 rather than the token form.
    FallbackUsed,
    CornersSwapped,
    Clamped,
    /// The response was non-empty but no tier matched.
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Token,
    TuplePair,
    Bracketed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedBox {
    /// 0-based image the box was attributed to by a nearby `Image-K` label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_index: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub boxes: Vec<ParsedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referring_text: Option<String>,
    pub raw: String,
    #[serde(default)]
    pub flags: BTreeSet<ParseFlag>,
}

impl ParsedAnswer {
    pub fn has(&self, flag: ParseFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Parser settings. The default clamps into the normalized `[0, 999]` range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grammar {
    pub clamp: Option<(f64, f64)>,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar { clamp: Some((0.0, NORM1000_MAX)) }
    }
}

struct Patterns {
    tiers: [(Tier, Regex); 3],
    image_label: Regex,
    ordinal: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| {
        let pair = format!(r"\(\s*{NUM}\s*,\s*{NUM}\s*\)\s*,\s*\(\s*{NUM}\s*,\s*{NUM}\s*\)");
        Patterns {
            tiers: [
                (Tier::Token, Regex::new(&format!(r"<\|box_start\|>\s*{pair}\s*<\|box_end\|>")).unwrap()),
                (Tier::TuplePair, Regex::new(&pair).unwrap()),
                (
                    Tier::Bracketed,
                    Regex::new(&format!(r"\[\s*{NUM}\s*,\s*{NUM}\s*,\s*{NUM}\s*,\s*{NUM}\s*\]")).unwrap(),
                ),
            ],
            image_label: Regex::new(r"(?i)\bimage\s*[-_#]?\s*(\d+)").unwrap(),
            ordinal: Regex::new(&format!(
                r"(?i)\b(?:the\s+)?({})\s+(?:image|picture|photo|frame|img)\b",
                ORDINALS.iter().map(|(w, _)| *w).collect::<Vec<_>>().join("|")
            ))
            .unwrap(),
        }
    })
}

/// Ordinal words accepted in image selections, longest forms first so the
/// alternation never stops at a prefix.
const ORDINALS: &[(&str, usize)] = &[
    ("first", 1),
    ("second", 2),
    ("third", 3),
    ("fourth", 4),
    ("fifth", 5),
    ("sixth", 6),
    ("seventh", 7),
    ("eighth", 8),
    ("ninth", 9),
    ("tenth", 10),
    ("1st", 1),
    ("2nd", 2),
    ("3rd", 3),
    ("4th", 4),
    ("5th", 5),
    ("6th", 6),
    ("7th", 7),
    ("8th", 8),
    ("9th", 9),
    ("10th", 10),
];

impl Grammar {
    pub fn parse_boxes(&self, text: &str) -> ParsedAnswer {
        let mut out = ParsedAnswer { raw: text.to_string(), ..Default::default() };
        let p = patterns();
        for (tier, re) in &p.tiers {
            let mut any = false;
            let mut cursor = 0usize;
            for caps in re.captures_iter(text) {
                let whole = caps.get(0).unwrap();
                let nums: Option<Vec<f64>> =
                    (1..=4).map(|i| caps[i].parse::<f64>().ok().filter(|v| v.is_finite())).collect();
                let Some(n) = nums else { continue };
                let Ok((mut bbox, swapped)) = BBox::canonicalize(n[0], n[1], n[2], n[3]) else {
                    continue;
                };
                if swapped {
                    out.flags.insert(ParseFlag::CornersSwapped);
                }
                if let Some((lo, hi)) = self.clamp {
                    let (c, moved) = bbox.clamp(lo, hi);
                    if moved {
                        out.flags.insert(ParseFlag::Clamped);
                    }
                    bbox = c;
                }
                let image_index = last_image_label(&text[cursor..whole.start()]);
                cursor = whole.end();
                out.boxes.push(ParsedBox { image_index, bbox });
                any = true;
            }
            if any {
                out.tier = Some(*tier);
                if *tier != Tier::Token {
                    out.flags.insert(ParseFlag::FallbackUsed);
                }
                return out;
            }
        }
        if !text.trim().is_empty() {
            out.flags.insert(ParseFlag::NoMatch);
        }
        out
    }
}

/// Parses with the default grammar.
pub fn parse_boxes(text: &str) -> ParsedAnswer {
    Grammar::default().parse_boxes(text)
}

fn last_image_label(segment: &str) -> Option<usize> {
    let p = patterns();
    let mut best: Option<(usize, usize)> = None;
    for c in p.image_label.captures_iter(segment) {
        if let Ok(k) = c[1].parse::<usize>() {
            best = Some((c.get(0).unwrap().start(), k));
        }
    }
    for c in p.ordinal.captures_iter(segment) {
        let start = c.get(0).unwrap().start();
        if best.is_none_or(|(s, _)| start > s) {
            best = ordinal_value(&c[1]).map(|k| (start, k));
        }
    }
    best.and_then(|(_, k)| k.checked_sub(1))
}

fn ordinal_value(word: &str) -> Option<usize> {
    let w = word.to_ascii_lowercase();
    ORDINALS.iter().find(|(o, _)| *o == w).map(|(_, k)| *k)
}

/// First `Image<K>` / `Image-K` / ordinal selection in text order whose K is
/// in `1..=n_images`; returns the 0-based index.
pub fn parse_image_choice(text: &str, n_images: usize) -> Option<usize> {
    let p = patterns();
    let mut hits: Vec<(usize, usize)> = p
        .image_label
        .captures_iter(text)
        .filter_map(|c| Some((c.get(0)?.start(), c[1].parse::<usize>().ok()?)))
        .chain(p.ordinal.captures_iter(text).filter_map(|c| Some((c.get(0)?.start(), ordinal_value(&c[1])?))))
        .collect();
    hits.sort_by_key(|(pos, _)| *pos);
    hits.into_iter().find(|(_, k)| (1..=n_images).contains(k)).map(|(_, k)| k - 1)
}

const ROLE_PREFIXES: &[&str] =
    &["the answer is", "final answer", "answer", "assistant", "response", "output", "object", "a"];

const MARKUP: &[&str] = &["<|object_ref_start|>", "<|object_ref_end|>", "<ref>", "</ref>", "**", "`"];

/// Pulls a bare referring expression out of a step-1 response.
pub fn extract_referring(text: &str) -> String {
    let mut s = text.to_string();
    for m in MARKUP {
        s = s.replace(m, "");
    }
    let mut s = s.trim().to_string();
    loop {
        let before = s.clone();
        s = strip_role_prefix(&s).trim().to_string();
        s = strip_quotes(&s).trim().to_string();
        if let Some(stripped) = s.strip_suffix('.') {
            s = stripped.trim_end().to_string();
        }
        if s == before {
            break;
        }
    }
    s
}

fn strip_role_prefix(s: &str) -> &str {
    let lower = s.to_ascii_lowercase();
    for p in ROLE_PREFIXES {
        if lower.starts_with(p) {
            let rest = &s[p.len()..];
            let trimmed = rest.trim_start();
            if let Some(r) = trimmed.strip_prefix(':') {
                return r;
            }
            // "The answer is red umbrella" has no colon.
            if *p == "the answer is" {
                return rest;
            }
        }
    }
    s
}

fn strip_quotes(s: &str) -> &str {
    const PAIRS: &[(char, char)] = &[('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(*open).and_then(|r| r.strip_suffix(*close)) {
            return inner;
        }
    }
    s
}

/// Renders a box in the token form the model is asked to emit.
pub fn format_box_token(b: &BBox) -> String {
    format!("<|box_start|>({},{}),({},{})<|box_end|>", b.x1, b.y1, b.x2, b.y2)
}

/// One record of the grammar fixture corpus: a response and its expected parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub response: String,
    pub expected: CorpusExpectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusExpectation {
    #[serde(default)]
    pub boxes: Vec<[f64; 4]>,
    #[serde(default)]
    pub box_images: Vec<Option<usize>>,
    #[serde(default)]
    pub flags: BTreeSet<ParseFlag>,
    /// `(n_images, expected choice)` when the case exercises image selection.
    #[serde(default)]
    pub choice: Option<(usize, Option<usize>)>,
    #[serde(default)]
    pub referring: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("corpus has {responses} responses but sidecar has {expectations} expectations")]
    CountMismatch { responses: usize, expectations: usize },
}

/// Loads a corpus: plain-text responses one per line (`\n` and `\\` escapes
/// allowed) plus a JSONL sidecar with one expectation per response.
pub fn load_corpus(responses: &Path, sidecar: &Path) -> Result<Vec<CorpusCase>, CorpusError> {
    let texts: Vec<String> = std::fs::read_to_string(responses)?.lines().map(unescape_line).collect();
    let mut expectations = Vec::new();
    for (i, line) in std::fs::read_to_string(sidecar)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        expectations.push(
            serde_json::from_str::<CorpusExpectation>(line)
                .map_err(|source| CorpusError::Json { line: i + 1, source })?,
        );
    }
    if texts.len() != expectations.len() {
        return Err(CorpusError::CountMismatch { responses: texts.len(), expectations: expectations.len() });
    }
    Ok(texts.into_iter().zip(expectations).map(|(response, expected)| CorpusCase { response, expected }).collect())
}

fn unescape_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(o) => {
                    out.push('\\');
                    out.push(o);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl CorpusCase {
    /// Checks the case against the default grammar, describing the first
    /// disagreement.
    pub fn check(&self) -> Result<(), String> {
        let got = parse_boxes(&self.response);
        let boxes: Vec<[f64; 4]> = got.boxes.iter().map(|b| b.bbox.into()).collect();
        if boxes != self.expected.boxes {
            return Err(format!("boxes: expected {:?}, got {:?}", self.expected.boxes, boxes));
        }
        if !self.expected.box_images.is_empty() {
            let imgs: Vec<Option<usize>> = got.boxes.iter().map(|b| b.image_index).collect();
            if imgs != self.expected.box_images {
                return Err(format!("box images: expected {:?}, got {:?}", self.expected.box_images, imgs));
            }
        }
        if got.flags != self.expected.flags {
            return Err(format!("flags: expected {:?}, got {:?}", self.expected.flags, got.flags));
        }
        if let Some((n, want)) = self.expected.choice {
            let c = parse_image_choice(&self.response, n);
            if c != want {
                return Err(format!("choice(n={n}): expected {want:?}, got {c:?}"));
            }
        }
        if let Some(want) = &self.expected.referring {
            let r = extract_referring(&self.response);
            if &r != want {
                return Err(format!("referring: expected {want:?}, got {r:?}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn only_box(a: &ParsedAnswer) -> [f64; 4] {
        assert_eq!(a.boxes.len(), 1, "{a:?}");
        a.boxes[0].bbox.into()
    }

    #[test]
    fn token_form() {
        let a = parse_boxes("<|box_start|>(12,34),(56,78)<|box_end|>");
        assert_eq!(only_box(&a), [12., 34., 56., 78.]);
        assert!(a.flags.is_empty());
        assert_eq!(a.tier, Some(Tier::Token));
    }

    #[test]
    fn bare_tuple_full_frame() {
        let a = parse_boxes("(0,0),(999,999)");
        assert_eq!(only_box(&a), [0., 0., 999., 999.]);
        assert_eq!(a.tier, Some(Tier::TuplePair));
    }

    #[test]
    fn bracketed_fallback() {
        let a = parse_boxes("The target is at [100, 200, 300, 400].");
        assert_eq!(only_box(&a), [100., 200., 300., 400.]);
        assert!(a.has(ParseFlag::FallbackUsed));
    }

    #[test]
    fn tiers_do_not_mix() {
        let a = parse_boxes("<|box_start|>(1,2),(3,4)<|box_end|> and also (5,6),(7,8) and [1,1,2,2]");
        assert_eq!(a.boxes.len(), 1);
        assert_eq!(only_box(&a), [1., 2., 3., 4.]);
    }

    #[test]
    fn swapped_and_clamped() {
        let a = parse_boxes("<|box_start|>(500,600),(-20,1200)<|box_end|>");
        assert_eq!(only_box(&a), [0., 600., 500., 999.]);
        assert!(a.has(ParseFlag::CornersSwapped));
        assert!(a.has(ParseFlag::Clamped));
    }

    #[test]
    fn garbage_in_parens_is_skipped() {
        let a = parse_boxes("(a,b),(c,d)");
        assert!(a.boxes.is_empty());
        assert!(a.has(ParseFlag::NoMatch));
        assert!(parse_boxes("").flags.is_empty());
    }

    #[test]
    fn boxes_attributed_to_labels() {
        let a = parse_boxes(
            "Image-1: <|box_start|>(1,1),(5,5)<|box_end|>\nImage-3: <|box_start|>(2,2),(6,6)<|box_end|> <|box_start|>(3,3),(7,7)<|box_end|>",
        );
        let imgs: Vec<_> = a.boxes.iter().map(|b| b.image_index).collect();
        assert_eq!(imgs, vec![Some(0), Some(2), None]);
    }

    #[test]
    fn image_choice() {
        assert_eq!(parse_image_choice("It is in Image2.", 4), Some(1));
        assert_eq!(parse_image_choice("Image7", 4), None);
        assert_eq!(parse_image_choice("The second picture shows it", 3), Some(1));
        assert_eq!(parse_image_choice("image-3", 3), Some(2));
        assert_eq!(parse_image_choice("nothing here", 3), None);
    }

    #[test]
    fn referring_extraction() {
        assert_eq!(extract_referring("\"a black car\""), "a black car");
        assert_eq!(extract_referring("Answer: red umbrella\n"), "red umbrella");
        assert_eq!(extract_referring(""), "");
        assert_eq!(extract_referring("<|object_ref_start|>the dog<|object_ref_end|>"), "the dog");
        assert_eq!(extract_referring("The answer is a kite."), "a kite");
    }

    proptest! {
        #[test]
        fn token_round_trip(x in 0u32..=999, y in 0u32..=999, w in 0u32..=999, h in 0u32..=999, frac in 0u32..4) {
            let f = frac as f64 * 0.25;
            let x1 = x as f64;
            let y1 = y as f64;
            let x2 = ((x + w).min(999) as f64 - f).max(x1);
            let y2 = ((y + h).min(999) as f64 - f).max(y1);
            let b = BBox::new(x1, y1, x2, y2).unwrap();
            let got = parse_boxes(&format_box_token(&b));
            prop_assert_eq!(got.boxes.len(), 1);
            prop_assert_eq!(got.boxes[0].bbox, b);
            prop_assert!(got.flags.is_empty());
        }

        #[test]
        fn never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let s = String::from_utf8_lossy(&bytes);
            let a = parse_boxes(&s);
            prop_assert!(a.boxes.iter().all(|b| b.bbox.is_canonical()));
            let _ = parse_image_choice(&s, 5);
            let _ = extract_referring(&s);
        }
    }
}
