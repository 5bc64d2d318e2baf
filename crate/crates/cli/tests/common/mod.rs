//! Shared fixtures for driving the binary against the scripted chat mock.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use migkit::benchdata::{save_dataset, ImageRef, Instance, TaskKind};
use migkit::geometry::{BBox, CoordSpace, Region};
use migkit::mock::{request_images, write_png, MockReply, MockServer};
use migkit::orchestrator::{answer_token, file_data_url};

pub const NO_TARGET: &str = "There is no such object in this image.";

pub fn migkit() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_migkit"));
    c.env_remove("RUST_LOG").env_remove(migkit::client::TOKEN_ENV);
    c
}

pub fn run(args: &[&str]) -> Output {
    migkit().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A dataset whose every polled step-2 request has a known right answer.
pub struct OracleFixture {
    pub dir: tempfile::TempDir,
    pub dataset: PathBuf,
    pub instances: Vec<Instance>,
    /// Image data URL to the answer for that image when polled alone.
    pub answers: HashMap<String, String>,
}

const TASKS: [TaskKind; 3] = [TaskKind::StaticDifference, TaskKind::CommonObject, TaskKind::Reasoning];

/// `n` instances over three tasks with 2 to 4 images each. Every image has
/// distinct dimensions so its encoded bytes identify it.
pub fn oracle_fixture(n: usize) -> OracleFixture {
    let dir = tempfile::tempdir().unwrap();
    let mut instances = Vec::new();
    let mut answers = HashMap::new();
    for k in 0..n {
        let count = 2 + k % 3;
        let target = (k * 7) % count;
        let images: Vec<ImageRef> = (0..count)
            .map(|i| {
                let (w, h) = (120 + 4 * k as u32 + i as u32, 90 + 2 * k as u32 + i as u32);
                let name = format!("i{k:02}-{i}.png");
                write_png(&dir.path().join(&name), w, h).unwrap();
                ImageRef { path: name, width: w, height: h }
            })
            .collect();
        let img = &images[target];
        let gt = Region {
            image_index: target,
            bbox: BBox::from([10.0 + k as f64, 12.0, 70.0 + k as f64, 60.0]),
            space: CoordSpace::pixel(img.width, img.height).unwrap(),
        };
        for (i, r) in images.iter().enumerate() {
            let url = file_data_url(&dir.path().join(&r.path)).unwrap();
            let reply = if i == target { format!("The cup is here {}", answer_token(&gt)) } else { NO_TARGET.into() };
            answers.insert(url, reply);
        }
        instances.push(Instance {
            id: format!("inst-{k:02}"),
            task: TASKS[k % TASKS.len()],
            images,
            query_text: Some("Find the red cup.".into()),
            query_regions: vec![],
            ground_truth: vec![gt],
            meta: Default::default(),
        });
    }
    let dataset = dir.path().join("dataset.jsonl");
    save_dataset(&dataset, &instances).unwrap();
    OracleFixture { dir, dataset, instances, answers }
}

impl OracleFixture {
    /// A chat mock answering step 1 with a referring expression and each
    /// single-image request with that image's scripted answer.
    pub fn server(&self, delay: Duration) -> MockServer {
        let answers = self.answers.clone();
        MockServer::start(move |p| {
            let imgs = request_images(p);
            let text = match imgs.as_slice() {
                [one] => answers.get(one).cloned().unwrap_or_else(|| NO_TARGET.into()),
                _ => "The red cup on the wooden table.".into(),
            };
            MockReply::content(text).delayed(delay)
        })
        .unwrap()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
