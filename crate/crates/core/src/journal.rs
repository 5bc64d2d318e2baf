//! Append-only run journal.
//!
//! Line 1 is a [`JournalHeader`]. Every following line is one record entry
//! `{"sha256": "<hex>", "record": {...}}` where the digest covers the exact
//! bytes of `record`. Lines that fail to parse or verify (for example a
//! write cut short by a crash) are skipped on read and do not count as
//! completed work.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchdata::{AnsweringForm, Instance, RunRecord, StrategyKind};

pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: journal header is missing or malformed: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("journal does not belong to this run: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub version: u32,
    pub strategy: StrategyKind,
    pub form: AnsweringForm,
    /// SHA-256 over the dataset's instance ids, newline separated, in order.
    pub dataset_digest: String,
    pub instances: usize,
    /// The full run configuration, echoed for reproducibility.
    #[serde(default)]
    pub config: Value,
}

pub fn dataset_digest(dataset: &[Instance]) -> String {
    let mut h = Sha256::new();
    for inst in dataset {
        h.update(inst.id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Deserialize)]
struct EntryIn<'a> {
    sha256: String,
    #[serde(borrow)]
    record: &'a RawValue,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes one checksummed entry line, newline included.
pub fn entry_line(record: &RunRecord) -> String {
    let body = serde_json::to_string(record).expect("record serializes");
    format!("{{\"sha256\":\"{}\",\"record\":{}}}\n", digest(body.as_bytes()), body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalContents {
    pub header: JournalHeader,
    pub records: Vec<RunRecord>,
    /// 1-based line numbers that were skipped.
    pub skipped_lines: Vec<usize>,
}

pub fn read_journal(path: &Path) -> Result<JournalContents, JournalError> {
    let io = |source| JournalError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .transpose()
        .map_err(io)?
        .ok_or_else(|| JournalError::BadHeader { path: path.to_path_buf(), reason: "empty file".into() })?;
    let header: JournalHeader = serde_json::from_str(&first)
        .map_err(|e| JournalError::BadHeader { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut records = Vec::new();
    let mut skipped_lines = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<EntryIn>(&line)
            .ok()
            .filter(|e| digest(e.record.get().as_bytes()) == e.sha256)
            .and_then(|e| serde_json::from_str::<RunRecord>(e.record.get()).ok());
        match parsed {
            Some(r) if seen.insert(r.instance_id.clone()) => records.push(r),
            _ => skipped_lines.push(line_no),
        }
    }
    Ok(JournalContents { header, records, skipped_lines })
}

/// Open journal ready for appending.
pub struct JournalWriter {
    path: PathBuf,
    file: File,
}

impl JournalWriter {
    /// Creates a new journal, or reopens an existing one after checking it
    /// belongs to `header`'s run. Returns the writer plus records already
    /// completed.
    pub fn open_or_create(
        path: &Path,
        header: &JournalHeader,
        dataset: &[Instance],
    ) -> Result<(Self, Vec<RunRecord>), JournalError> {
        let io = |source| JournalError::Io { path: path.to_path_buf(), source };
        if path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0 {
            let existing = read_journal(path)?;
            let h = &existing.header;
            if h.dataset_digest != header.dataset_digest {
                return Err(JournalError::Mismatch("dataset ids differ from the journal's".into()));
            }
            if h.strategy != header.strategy || h.form != header.form {
                return Err(JournalError::Mismatch(format!(
                    "journal was written for {:?}/{:?}, not {:?}/{:?}",
                    h.strategy, h.form, header.strategy, header.form
                )));
            }
            let ids: HashSet<&str> = dataset.iter().map(|i| i.id.as_str()).collect();
            if let Some(r) = existing.records.iter().find(|r| !ids.contains(r.instance_id.as_str())) {
                return Err(JournalError::Mismatch(format!("journal has unknown instance `{}`", r.instance_id)));
            }
            let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
            truncate_partial_tail(&mut file).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
            Ok((JournalWriter { path: path.to_path_buf(), file }, existing.records))
        } else {
            let mut file = File::create(path).map_err(io)?;
            let mut line = serde_json::to_string(header).expect("header serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
            Ok((JournalWriter { path: path.to_path_buf(), file }, Vec::new()))
        }
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), JournalError> {
        let path = self.path.clone();
        let io = |source| JournalError::Io { path: path.clone(), source };
        self.file.write_all(entry_line(record).as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)
    }
}

/// Drops an unterminated last line so the next append starts cleanly.
fn truncate_partial_tail(file: &mut File) -> std::io::Result<()> {
    use std::io::Read;
    let len = file.metadata()?.len();
    if len == 0 {
        return Ok(());
    }
    let mut buf = Vec::new();
    file.seek(SeekFrom::Start(0))?;
    file.read_to_end(&mut buf)?;
    if buf.last() == Some(&b'\n') {
        return Ok(());
    }
    let keep = buf.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    file.set_len(keep as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchdata::{ImageRef, TaskKind};
    use crate::geometry::{BBox, CoordSpace, Region};

    fn inst(id: &str) -> Instance {
        Instance {
            id: id.into(),
            task: TaskKind::Reasoning,
            images: vec![ImageRef { path: "a".into(), width: 10, height: 10 }],
            query_text: Some("q".into()),
            query_regions: vec![],
            ground_truth: vec![Region {
                image_index: 0,
                bbox: BBox::from([0., 0., 1., 1.]),
                space: CoordSpace::Norm1000,
            }],
            meta: Default::default(),
        }
    }

    fn rec(id: &str) -> RunRecord {
        RunRecord {
            instance_id: id.into(),
            strategy: StrategyKind::Direct,
            form: AnsweringForm::All,
            steps: vec![],
            referring: None,
            selected_image: None,
            predictions: vec![],
            target_iou: vec![0.25],
            target_hit: vec![false],
            failed: false,
        }
    }

    fn header(data: &[Instance]) -> JournalHeader {
        JournalHeader {
            version: JOURNAL_VERSION,
            strategy: StrategyKind::Direct,
            form: AnsweringForm::All,
            dataset_digest: dataset_digest(data),
            instances: data.len(),
            config: Value::Null,
        }
    }

    #[test]
    fn corrupt_and_partial_lines_are_skipped_and_trimmed() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("j.jsonl");
        let data = vec![inst("a"), inst("b"), inst("c")];
        let (mut w, done) = JournalWriter::open_or_create(&p, &header(&data), &data).unwrap();
        assert!(done.is_empty());
        w.append(&rec("a")).unwrap();
        drop(w);
        // Tampered checksum plus a torn write.
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        let tampered = entry_line(&rec("b")).replace("0.25", "0.75");
        f.write_all(tampered.as_bytes()).unwrap();
        f.write_all(b"{\"sha256\":\"ab").unwrap();
        drop(f);

        let c = read_journal(&p).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.skipped_lines, vec![3, 4]);

        let (mut w, done) = JournalWriter::open_or_create(&p, &header(&data), &data).unwrap();
        assert_eq!(done.len(), 1);
        w.append(&rec("b")).unwrap();
        drop(w);
        let c = read_journal(&p).unwrap();
        assert_eq!(c.records.iter().map(|r| r.instance_id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(c.skipped_lines, vec![3]);
    }

    #[test]
    fn other_dataset_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("j.jsonl");
        let data = vec![inst("a")];
        JournalWriter::open_or_create(&p, &header(&data), &data).unwrap();
        let other = vec![inst("z")];
        assert!(matches!(JournalWriter::open_or_create(&p, &header(&other), &other), Err(JournalError::Mismatch(_))));
    }
}
