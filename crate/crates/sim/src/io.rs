//! File formats: embedding CSV, JSON and JSON-lines artifacts, update logs,
//! generation traces, rate trajectories and success tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use biobackdoor_core::attack::{AttackResult, GenerationTrace};
use biobackdoor_core::feature_space::{DatasetMode, PopulationDataset, UserRecord};
use biobackdoor_core::matchers::Origin;
use biobackdoor_core::metrics::{GroupKey, SuccessTable};
use biobackdoor_core::template_update::{EventKind, UpdateLog};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Writes `bytes` through a temporary sibling and a rename, creating parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads a JSON artifact; a missing file names the command that creates it.
pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    let text = read_artifact(path, producer)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

pub fn read_artifact(path: &Path, producer: &'static str) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
            command: producer,
        }),
        Err(e) => Err(HarnessError::io(path, e)),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<Vec<T>> {
    let text = read_artifact(path, producer)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Embedding CSV with header `user_id,split,e0,...`. Each user's train rows
/// come first, then its test rows.
pub fn write_embeddings_csv(path: &Path, data: &PopulationDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["user_id".to_string(), "split".to_string()];
    header.extend((0..data.d_emb).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for u in &data.users {
        for (split, idx) in [("train", &u.train), ("test", &u.test)] {
            for &i in idx {
                let mut row = vec![u.id.to_string(), split.to_string()];
                row.extend(u.embeddings[i].iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    finish_csv(path, w)
}

/// Loads an embedding CSV as an embedding-only dataset. Rows of a user keep
/// their file order within each split.
pub fn read_embeddings_csv(path: &Path) -> Result<PopulationDataset> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let parse = |line: u64, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| csv_error(path, e))?,
        None => return Err(parse(1, "empty file".into())),
    };
    let d_emb = header.len().saturating_sub(2);
    let expected: Vec<String> = ["user_id".to_string(), "split".to_string()]
        .into_iter()
        .chain((0..d_emb).map(|i| format!("e{i}")))
        .collect();
    if d_emb == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse(1, "header must be user_id,split,e0,e1,...".into()));
    }
    type Splits = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let mut users: BTreeMap<u32, Splits> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d_emb + 2 {
            return Err(parse(
                line,
                format!(
                    "expected {} embedding values, found {}",
                    d_emb,
                    rec.len().saturating_sub(2)
                ),
            ));
        }
        let id: u32 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse(line, format!("invalid user_id {:?}", &rec[0])))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse(line, format!("invalid embedding value {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let entry = users.entry(id).or_default();
        match rec[1].trim() {
            "train" => entry.0.push(values),
            "test" => entry.1.push(values),
            s => {
                return Err(parse(
                    line,
                    format!("split must be train or test, found {s:?}"),
                ))
            }
        }
    }
    if users.is_empty() {
        return Err(parse(2, "no embedding rows".into()));
    }
    let users = users
        .into_iter()
        .map(|(id, (train, test))| {
            let n_train = train.len();
            let n = n_train + test.len();
            UserRecord {
                id,
                raw: None,
                center: None,
                embeddings: train.into_iter().chain(test).collect(),
                train: (0..n_train).collect(),
                test: (n_train..n).collect(),
            }
        })
        .collect();
    Ok(PopulationDataset {
        mode: DatasetMode::EmbeddingOnly,
        d_emb,
        users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLogLine {
    pub pair_id: usize,
    pub order: u64,
    pub kind: EventKind,
    pub accepted: bool,
    pub score: Option<f64>,
    pub origin: Origin,
    pub template_size: usize,
    pub removed: usize,
}

/// Flattens update logs to JSON-lines rows, one event per line.
pub fn update_log_lines(pair_id: usize, log: &UpdateLog) -> Vec<UpdateLogLine> {
    log.events()
        .iter()
        .map(|e| UpdateLogLine {
            pair_id,
            order: e.order,
            kind: e.kind,
            accepted: e.accepted,
            score: e.score,
            origin: e.origin,
            template_size: e.template_size,
            removed: e.removed,
        })
        .collect()
}

/// `step,objective,mean_distance,victim_distance,centroid_distance`.
pub fn write_trace_csv(path: &Path, trace: &GenerationTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "step",
        "objective",
        "mean_distance",
        "victim_distance",
        "centroid_distance",
    ])
    .map_err(|e| csv_error(path, e))?;
    for j in 0..trace.len() {
        w.write_record([
            j.to_string(),
            trace.objective[j].to_string(),
            trace.mean_distance(j).to_string(),
            trace.victim_distance[j].to_string(),
            trace.centroid_distance[j].to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    finish_csv(path, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pair_id: usize,
    pub matcher: String,
    pub weighting: String,
    pub mode: String,
    pub injection_index: usize,
    pub iar: f64,
    pub far: f64,
    pub frr: f64,
}

pub fn metrics_rows(pair_id: usize, key: &GroupKey, r: &AttackResult) -> Vec<MetricsRow> {
    (0..r.iar_trajectory.len())
        .map(|i| MetricsRow {
            pair_id,
            matcher: key.matcher.clone(),
            weighting: key.weighting.clone(),
            mode: key.mode.clone(),
            injection_index: i,
            iar: r.iar_trajectory[i],
            far: r.far_trajectory[i],
            frr: r.frr_trajectory[i],
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    finish_csv(path, w)
}

fn read_rows<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<Vec<T>> {
    let text = read_artifact(path, producer)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub const METRICS_HEADER: [&str; 8] = [
    "pair_id",
    "matcher",
    "weighting",
    "mode",
    "injection_index",
    "iar",
    "far",
    "frr",
];

/// `pair_id,matcher,weighting,mode,injection_index,iar,far,frr`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(path, rows, &METRICS_HEADER)
}

pub fn read_metrics_csv(path: &Path, producer: &'static str) -> Result<Vec<MetricsRow>> {
    read_rows(path, producer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCsvRow {
    pub matcher: String,
    pub weighting: String,
    pub mode: String,
    pub injections: usize,
    pub success: f64,
    pub runs: usize,
}

pub fn write_success_csv(path: &Path, table: &SuccessTable) -> Result<()> {
    let rows: Vec<SuccessCsvRow> = table
        .rows
        .iter()
        .map(|r| SuccessCsvRow {
            matcher: r.key.matcher.clone(),
            weighting: r.key.weighting.clone(),
            mode: r.key.mode.clone(),
            injections: r.injections,
            success: r.success,
            runs: r.runs,
        })
        .collect();
    write_rows(
        path,
        &rows,
        &[
            "matcher",
            "weighting",
            "mode",
            "injections",
            "success",
            "runs",
        ],
    )
}

pub fn read_success_csv(path: &Path, producer: &'static str) -> Result<Vec<SuccessCsvRow>> {
    read_rows(path, producer)
}

/// Writes plain text, e.g. a TOML configuration echo.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
