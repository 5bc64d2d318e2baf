use std::path::PathBuf;

use migkit::outparse::{extract_referring, load_corpus, parse_boxes, parse_image_choice, ParseFlag};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn corpus_parses_as_annotated() {
    let cases = load_corpus(&fixture("parser_responses.txt"), &fixture("parser_expected.jsonl")).unwrap();
    assert!(cases.len() >= 30, "corpus has only {} cases", cases.len());
    let failures: Vec<String> = cases
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.check().err().map(|e| format!("line {}: {:?}: {e}", i + 1, c.response)))
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

const PIECES: &[&str] = &[
    "<|box_start|>",
    "<|box_end|>",
    "<ref>",
    "</ref>",
    "(",
    ")",
    "[",
    "]",
    ",",
    " ",
    "\n",
    "-",
    ".",
    "0",
    "7",
    "42",
    "999",
    "1000",
    "12.5",
    "Image-",
    "image ",
    "2",
    "third",
    "picture",
    "Answer:",
    "\"",
    "é",
    "答",
    "\\",
    "NaN",
    "{",
];

fn noise(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..40);
    (0..n).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

#[test]
fn hundred_thousand_random_inputs_stay_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100_000 {
        let s = noise(&mut rng);
        let p = parse_boxes(&s);
        for b in &p.boxes {
            let bb = b.bbox;
            assert!(bb.x1 <= bb.x2 && bb.y1 <= bb.y2, "{s:?}: {bb:?}");
            assert!([bb.x1, bb.y1, bb.x2, bb.y2].iter().all(|v| (0.0..=999.0).contains(v)), "{s:?}: {bb:?}");
        }
        assert_eq!(p.boxes.is_empty() && !s.trim().is_empty(), p.has(ParseFlag::NoMatch), "{s:?}");
        if let Some(k) = parse_image_choice(&s, 4) {
            assert!(k < 4);
        }
        extract_referring(&s);
    }
}

proptest! {
    #[test]
    fn token_form_round_trips_in_range(x1 in 0u32..1000, y1 in 0u32..1000, x2 in 0u32..1000, y2 in 0u32..1000) {
        let s = format!("<|box_start|>({x1},{y1}),({x2},{y2})<|box_end|>");
        let p = parse_boxes(&s);
        prop_assert_eq!(p.boxes.len(), 1);
        let b = p.boxes[0].bbox;
        prop_assert_eq!([b.x1, b.y1, b.x2, b.y2], [
            x1.min(x2) as f64, y1.min(y2) as f64, x1.max(x2) as f64, y1.max(y2) as f64,
        ]);
        prop_assert_eq!(p.has(ParseFlag::CornersSwapped), x1 > x2 || y1 > y2);
        prop_assert!(!p.has(ParseFlag::FallbackUsed));
    }

    #[test]
    fn arbitrary_text_never_panics(s in "\\PC{0,200}") {
        let _ = parse_boxes(&s);
        let _ = parse_image_choice(&s, 3);
        let _ = extract_referring(&s);
    }
}
