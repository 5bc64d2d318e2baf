use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use migkit::benchdata::TaskKind;
use migkit::client::{ChatClient, TransportError};
use migkit::dataforge::{
    adaptive_groups, filter_regions, make_task_set, roundtrip_check, stage_manifest, stage_shares, synthesize_freeform,
    write_crops, AnnotationRecord, EmbeddingIndex, EmbeddingRecord, ForgeConfig, GroupingConfig, ObjectAnnotation,
    RegionFilter, Span, Stage, SynthesisEndpoints,
};
use migkit::geometry::BBox;
use migkit::mock::{request_text, write_png};
use migkit::prompts::TemplateSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn obj(label: &str, b: [f64; 4]) -> ObjectAnnotation {
    ObjectAnnotation { label: label.into(), bbox: BBox::from(b), caption: None, id: None }
}

fn rec(image: &str, w: u32, h: u32, objects: Vec<ObjectAnnotation>) -> AnnotationRecord {
    AnnotationRecord {
        image: image.into(),
        width: w,
        height: h,
        objects,
        source: "test".into(),
        meta: Default::default(),
    }
}

#[test]
fn common_object_from_three_dogs() {
    let recs = vec![
        rec("a.png", 100, 100, vec![obj("dog", [0.0, 0.0, 50.0, 50.0]), obj("cat", [60.0, 60.0, 99.0, 99.0])]),
        rec("b.png", 100, 100, vec![obj("dog", [10.0, 10.0, 60.0, 40.0]), obj("knife", [0.0, 0.0, 40.0, 40.0])]),
        rec("c.png", 100, 100, vec![obj("dog", [5.0, 5.0, 45.0, 45.0]), obj("cup", [0.0, 0.0, 2.0, 2.0])]),
    ];
    let set = make_task_set(&recs, TaskKind::CommonObject, &ForgeConfig::default()).unwrap();
    assert_eq!(set.instances.len(), 1);
    let inst = &set.instances[0].instance;
    assert_eq!(inst.images.len(), 3);
    assert_eq!(inst.ground_truth.len(), 3);
    assert_eq!(inst.meta["label"], "dog");
    let d = tempfile::tempdir().unwrap();
    roundtrip_check(&set.instances, d.path()).unwrap();
}

#[test]
fn common_object_rejects_two_shared_labels() {
    let pair =
        |img: &str| rec(img, 100, 100, vec![obj("dog", [0.0, 0.0, 50.0, 50.0]), obj("ball", [50.0, 50.0, 99.0, 99.0])]);
    let set = make_task_set(&[pair("a.png"), pair("b.png")], TaskKind::CommonObject, &ForgeConfig::default()).unwrap();
    assert!(set.instances.is_empty());
}

#[test]
fn tracking_samples_strided_frames() {
    let recs: Vec<AnnotationRecord> = (0..20)
        .map(|f| {
            let mut o = obj("car", [f as f64, 10.0, f as f64 + 20.0, 30.0]);
            o.id = Some("t1".into());
            let mut r = rec(&format!("f{f:02}.png"), 100, 100, vec![o]);
            r.meta.insert("sequence".into(), json!("s"));
            r.meta.insert("frame".into(), json!(f));
            r
        })
        .collect();
    let cfg = ForgeConfig { tracking_frames: Span::new(5, 5), ..Default::default() };
    let mut shuffled = recs.clone();
    shuffled.reverse();
    let mut bare = rec("x.png", 10, 10, vec![]);
    bare.meta.insert("frame".into(), json!(1));
    shuffled.push(bare);
    let set = make_task_set(&shuffled, TaskKind::ObjectTracking, &cfg).unwrap();
    assert_eq!(set.instances.len(), 1);
    assert_eq!(set.skipped.len(), 1);
    let inst = &set.instances[0].instance;
    let paths: Vec<&str> = inst.images.iter().map(|i| i.path.as_str()).collect();
    assert_eq!(paths, vec!["f00.png", "f05.png", "f10.png", "f15.png", "f19.png"]);
    assert_eq!(inst.query_regions[0].image_index, 0);
    assert_eq!(inst.ground_truth[0].image_index, 4);
    assert_eq!(inst.ground_truth[0].bbox, BBox::from([19.0, 10.0, 39.0, 30.0]));
}

#[test]
fn group_grounding_from_four_records() {
    let recs: Vec<AnnotationRecord> = (0..4)
        .map(|i| {
            let mut o = obj("person", [10.0, 10.0, 50.0, 90.0]);
            o.caption = Some(format!("person in coat {i}"));
            rec(&format!("g{i}.png"), 100, 100, vec![o])
        })
        .collect();
    let cfg = ForgeConfig { group_grounding_size: Span::new(4, 4), ..Default::default() };
    let set = make_task_set(&recs, TaskKind::GroupGrounding, &cfg).unwrap();
    assert_eq!(set.instances.len(), 1);
    let t = &set.instances[0];
    assert_eq!(t.instance.images.len(), 4);
    assert_eq!(t.instance.ground_truth.len(), 1);
    let k = t.instance.ground_truth[0].image_index;
    assert!(t.instance.query_text.as_deref().unwrap().contains(&format!("person in coat {k}")));
    assert!(t.answer.starts_with(&format!("Image-{}:", k + 1)));
}

#[test]
fn difference_and_referring_sets() {
    let mut a = rec("p0.png", 100, 100, vec![]);
    a.meta.insert("pair".into(), json!("x"));
    a.meta.insert("pair_index".into(), json!(0));
    let mut b = rec("p1.png", 100, 100, vec![obj("umbrella", [20.0, 20.0, 40.0, 60.0])]);
    b.meta.insert("pair".into(), json!("x"));
    b.meta.insert("pair_index".into(), json!(1));
    let set = make_task_set(&[a, b], TaskKind::StaticDifference, &ForgeConfig::default()).unwrap();
    assert_eq!(set.instances.len(), 1);
    assert_eq!(set.instances[0].instance.ground_truth[0].image_index, 1);

    let mut edge = obj("mug", [0.0, 10.0, 30.0, 40.0]);
    edge.id = Some("m".into());
    let mut inner = obj("mug", [10.0, 10.0, 30.0, 40.0]);
    inner.id = Some("m".into());
    let mut far = obj("mug", [50.0, 50.0, 70.0, 90.0]);
    far.id = Some("m".into());
    let recs = vec![
        rec("r0.png", 100, 100, vec![edge]),
        rec("r1.png", 100, 100, vec![inner]),
        rec("r2.png", 100, 100, vec![far]),
    ];
    let set = make_task_set(&recs, TaskKind::ReferringGrounding, &ForgeConfig::default()).unwrap();
    assert_eq!(set.instances.len(), 1);
    let inst = &set.instances[0].instance;
    // The fully visible sighting is the reference.
    assert_eq!(inst.images[0].path, "r1.png");
    assert_eq!(inst.images[1].path, "r0.png");
    assert!(make_task_set(&recs, TaskKind::Reasoning, &ForgeConfig::default()).is_err());
}

/// 25 boxes in a 1000x800 image, exactly 7 passing every gate.
fn filter_fixture() -> (AnnotationRecord, BTreeSet<usize>) {
    let boxes: [([f64; 4], bool); 25] = [
        ([0.0, 0.0, 500.0, 400.0], true), // aspect 1.25, ratio 0.25
        ([0.0, 0.0, 400.0, 400.0], true), // 1.0, 0.2 (lower bound inclusive)
        ([0.0, 0.0, 400.0, 800.0], true), // 0.5 (inclusive), 0.4
        ([0.0, 0.0, 800.0, 400.0], true), // 2.0 (inclusive), 0.4
        ([0.0, 0.0, 700.0, 560.0], true), // ratio 0.49 (upper bound inclusive)
        ([100.0, 100.0, 700.0, 500.0], true),
        ([0.0, 0.0, 560.0, 700.0], true),
        ([0.0, 0.0, 60.0, 40.0], false),    // ratio 0.003
        ([0.0, 0.0, 399.0, 400.0], false),  // ratio just under 0.2
        ([0.0, 0.0, 701.0, 560.0], false),  // ratio just over 0.49
        ([0.0, 0.0, 390.0, 800.0], false),  // aspect 0.4875
        ([0.0, 0.0, 810.0, 400.0], false),  // aspect 2.025
        ([0.0, 0.0, 1000.0, 800.0], false), // ratio 1
        ([0.0, 0.0, 10.0, 10.0], false),
        ([0.0, 0.0, 20.0, 90.0], false),
        ([0.0, 0.0, 300.0, 100.0], false),
        ([0.0, 0.0, 100.0, 300.0], false),
        ([0.0, 0.0, 900.0, 100.0], false),
        ([0.0, 0.0, 45.0, 45.0], false), // 2025 px but ratio tiny
        ([0.0, 0.0, 200.0, 200.0], false),
        ([0.0, 0.0, 999.0, 799.0], false),
        ([0.0, 0.0, 300.0, 300.0], false),
        ([0.0, 0.0, 350.0, 450.0], false), // ratio 0.197
        ([0.0, 0.0, 600.0, 700.0], false), // ratio 0.525
        ([0.0, 0.0, 1.0, 1.0], false),
    ];
    let objects = boxes.iter().map(|(b, _)| obj("o", *b)).collect();
    let expect = boxes.iter().enumerate().filter(|(_, (_, ok))| *ok).map(|(i, _)| i).collect();
    (rec("big.png", 1000, 800, objects), expect)
}

#[test]
fn region_filter_selects_exactly_seven() {
    let (r, expect) = filter_fixture();
    assert_eq!(expect.len(), 7);
    let got: BTreeSet<usize> = filter_regions(&r, &RegionFilter::default()).into_iter().collect();
    assert_eq!(got, expect);
}

proptest! {
    #[test]
    fn loosening_never_removes(da in 0.0f64..0.4, db in 0.0f64..1.0, dr in 0.0f64..0.15, ds in 0.0f64..0.5, dp in 0.0f64..2000.0, dn in 0usize..10) {
        let (r, _) = filter_fixture();
        let base = RegionFilter::default();
        let loose = RegionFilter {
            min_annotations: base.min_annotations.saturating_sub(dn),
            aspect: Span::new(base.aspect.min - da, base.aspect.max + db),
            area_ratio: Span::new(base.area_ratio.min - dr, base.area_ratio.max + ds),
            min_pixels: base.min_pixels - dp,
        };
        let before: BTreeSet<usize> = filter_regions(&r, &base).into_iter().collect();
        let after: BTreeSet<usize> = filter_regions(&r, &loose).into_iter().collect();
        prop_assert!(before.is_subset(&after));
    }
}

fn synthetic_index(n: usize, dim: usize, seed: u64) -> EmbeddingIndex<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            EmbeddingRecord { path: format!("img{i:03}.jpg"), dim, embedding: v.iter().map(|x| x / norm).collect() }
        })
        .collect();
    EmbeddingIndex::from_records(records).unwrap()
}

#[test]
fn adaptive_groups_partition_and_sizes() {
    let idx = synthetic_index(100, 16, 1);
    let cfg = GroupingConfig::default();
    for seed in 0..10 {
        let groups = adaptive_groups(&idx, &cfg, seed, Some(1)).unwrap();
        let mut all: Vec<&String> = groups.iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 100);
        let mut remaining = 100;
        for g in &groups {
            if remaining >= 6 {
                assert!((4..=6).contains(&g.len()), "seed {seed}: group of {}", g.len());
            }
            remaining -= g.len();
        }
        assert_eq!(groups, adaptive_groups(&idx, &cfg, seed, Some(4)).unwrap());
    }
}

#[test]
fn embedding_file_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("index.jsonl");
    let lines = [
        json!({"path": "a.jpg", "dim": 2, "embedding": [0.6, 0.8]}),
        json!({"path": "b.jpg", "dim": 2, "embedding": [1.0, 0.0]}),
    ];
    std::fs::write(&p, lines.iter().map(Value::to_string).collect::<Vec<_>>().join("\n")).unwrap();
    let idx = EmbeddingIndex::<f64>::load(&p).unwrap();
    assert_eq!(idx.len(), 2);
    assert!((idx.similarity(0, 1) - 0.6).abs() < 1e-12);
    std::fs::write(&p, json!({"path": "a.jpg", "dim": 2, "embedding": [0.5, 0.5]}).to_string()).unwrap();
    assert!(EmbeddingIndex::<f64>::load(&p).is_err());
}

#[test]
fn stage_totals() {
    let avail: BTreeMap<String, usize> =
        ["s_understanding", "s_grounding", "m_understanding", "m_grounding_stage1", "m_grounding_stage2"]
            .iter()
            .map(|s| (s.to_string(), 300_000))
            .collect();
    for (stage, total) in [(Stage::One, 1_000_000usize), (Stage::Two, 200_000)] {
        let m = stage_manifest(stage, &avail, total, 11).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.count).sum::<usize>(), total);
        for (e, (name, pct)) in m.entries.iter().zip(stage_shares(stage)) {
            assert_eq!(e.source, *name);
            let got = 100.0 * e.count as f64 / total as f64;
            assert!((got - *pct as f64).abs() <= 0.5);
        }
    }
    let m = stage_manifest(Stage::One, &avail, 1_000_000, 0).unwrap();
    assert_eq!(m.entries[3].count, 540_000);
    let m = stage_manifest(Stage::Two, &avail, 200_000, 0).unwrap();
    assert_eq!(m.entries[4].count, 98_000);
}

#[test]
fn crops_are_written() {
    let d = tempfile::tempdir().unwrap();
    write_png(&d.path().join("big.png"), 1000, 800).unwrap();
    let (r, _) = filter_fixture();
    let set = make_task_set(&[r], TaskKind::RegionLocating, &ForgeConfig::default()).unwrap();
    assert_eq!(set.instances.len(), 7);
    write_crops(&set.crops, d.path(), d.path()).unwrap();
    for t in &set.instances {
        let q = &t.instance.images[0];
        let dims = image::image_dimensions(d.path().join(&q.path)).unwrap();
        assert_eq!(dims, (q.width, q.height));
    }
    roundtrip_check(&set.instances, d.path()).unwrap();
}

struct Scripted<F: Fn(&str) -> Result<String, TransportError> + Send + Sync> {
    f: F,
    seen: Mutex<Vec<String>>,
}

impl<F: Fn(&str) -> Result<String, TransportError> + Send + Sync> ChatClient for Scripted<F> {
    fn complete(&self, payload: &Value) -> Result<String, TransportError> {
        let text = request_text(payload);
        self.seen.lock().unwrap().push(text.clone());
        (self.f)(&text)
    }
}

fn scripted<F: Fn(&str) -> Result<String, TransportError> + Send + Sync>(f: F) -> Scripted<F> {
    Scripted { f, seen: Mutex::new(Vec::new()) }
}

fn synthesis_groups(dir: &std::path::Path, n: usize) -> Vec<Vec<AnnotationRecord>> {
    (0..n)
        .map(|g| {
            (0..2)
                .map(|i| {
                    let name = format!("s{g}_{i}.png");
                    write_png(&dir.join(&name), 100, 100).unwrap();
                    rec(
                        &name,
                        100,
                        100,
                        vec![obj("car", [10.0, 10.0, 50.0, 50.0]), obj("tree", [60.0, 0.0, 90.0, 80.0])],
                    )
                })
                .collect()
        })
        .collect()
}

fn endpoints<'a>(
    c: &'a dyn ChatClient,
    r: &'a dyn ChatClient,
    i: &'a dyn ChatClient,
    root: &std::path::Path,
) -> SynthesisEndpoints<'a> {
    SynthesisEndpoints {
        caption: c,
        caption_model: "cap".into(),
        refine: r,
        refine_model: "ref".into(),
        instruct: i,
        instruct_model: "ins".into(),
        image_root: root.to_path_buf(),
        threads: 2,
    }
}

const GOOD_QA: &str = "Q: Which car matches the tree's color?\nA: The <ref>car</ref> in Image-2 <|box_start|>(100,100),(500,500)<|box_end|>.";

#[test]
fn synthesis_well_formed_yields_one_per_group() {
    let d = tempfile::tempdir().unwrap();
    let groups = synthesis_groups(d.path(), 3);
    let cap = scripted(|_| Ok("A street scene.".into()));
    let refine = scripted(|_| {
        Ok("red car parked <|box_start|>(100,100),(500,500)<|box_end|>\ntall green tree <|box_start|>(600,0),(900,800)<|box_end|>".into())
    });
    let ins = scripted(|_| Ok(GOOD_QA.into()));
    let templates = TemplateSet::default().synthesis;
    let (out, stats) = synthesize_freeform(&groups, &endpoints(&cap, &refine, &ins, d.path()), &templates).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(stats.instances, 3);
    assert_eq!(stats.captions, 6);
    assert!(out.iter().all(|t| t.instance.ground_truth[0].image_index == 1));
    assert!(cap.seen.lock().unwrap()[0].starts_with("Describe this image thoroughly"));
    roundtrip_check(&out, d.path()).unwrap();
}

#[test]
fn synthesis_discards_answers_without_boxes() {
    let d = tempfile::tempdir().unwrap();
    let groups = synthesis_groups(d.path(), 1);
    let cap = scripted(|_| Ok("cap".into()));
    let refine = scripted(|_| Ok("car <|box_start|>(1,1),(5,5)<|box_end|>".into()));
    let ins = scripted(|_| Ok(format!("{GOOD_QA}\nQ: Where is it?\nA: It is the car on the left (1,1),(5,5).")));
    let templates = TemplateSet::default().synthesis;
    let (out, stats) = synthesize_freeform(&groups, &endpoints(&cap, &refine, &ins, d.path()), &templates).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(stats.qa_discarded, 1);
}

#[test]
fn synthesis_refined_objects_flow_downstream() {
    let d = tempfile::tempdir().unwrap();
    let groups = synthesis_groups(d.path(), 1);
    let cap = scripted(|_| Ok("cap".into()));
    // The refiner keeps only the car.
    let refine = scripted(|_| Ok("shiny red car <|box_start|>(100,100),(500,500)<|box_end|>".into()));
    let ins = scripted(|_| Ok(GOOD_QA.into()));
    let templates = TemplateSet::default().synthesis;
    synthesize_freeform(&groups, &endpoints(&cap, &refine, &ins, d.path()), &templates).unwrap();
    let refine_prompt = &refine.seen.lock().unwrap()[0];
    let refine_tokens = templates.refine.matches("<|box_start|>").count();
    assert_eq!(refine_prompt.matches("<|box_start|>").count() - refine_tokens, 2);
    let instruct_prompt = &ins.seen.lock().unwrap()[0];
    let template_tokens = templates.instruct.matches("<|box_start|>").count();
    assert_eq!(instruct_prompt.matches("<|box_start|>").count() - template_tokens, 2);
    assert!(instruct_prompt.contains("shiny red car") && !instruct_prompt.contains("tree <|box_start|>"));
}

#[test]
fn synthesis_skips_failed_groups() {
    let d = tempfile::tempdir().unwrap();
    let groups = synthesis_groups(d.path(), 2);
    let cap = scripted(|_| Ok("cap".into()));
    let refine = scripted(|_| Ok("car <|box_start|>(1,1),(5,5)<|box_end|>".into()));
    let ins = scripted(|_| Ok(GOOD_QA.into()));
    let cap_fail = scripted(|_| Err(TransportError::Transient("down".into())));
    let templates = TemplateSet::default().synthesis;
    let (out, stats) =
        synthesize_freeform(&groups, &endpoints(&cap_fail, &refine, &ins, d.path()), &templates).unwrap();
    assert!(out.is_empty());
    assert_eq!((stats.groups, stats.groups_skipped), (2, 2));
    let (out, _) = synthesize_freeform(&groups, &endpoints(&cap, &refine, &ins, d.path()), &templates).unwrap();
    assert_eq!(out.len(), 2);
}
