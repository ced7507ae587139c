//! CSV ingestion for datasets and score files, and results output.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::{Dataset, Target};
use crate::primitives::{ScoreMatrix, TestScoreProfile};

use super::TaskKind;

const MAX_REPORTED: usize = 10;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::ingestion(path, e.to_string())
}

/// Collects problems and fails with the first few of them.
struct Offenders {
    messages: Vec<String>,
    total: usize,
}

impl Offenders {
    fn new() -> Self {
        Offenders { messages: Vec::new(), total: 0 }
    }

    fn push(&mut self, msg: String) {
        self.total += 1;
        if self.messages.len() < MAX_REPORTED {
            self.messages.push(msg);
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        if self.total == 0 {
            return Ok(());
        }
        let more = if self.total > self.messages.len() {
            format!(" (and {} more)", self.total - self.messages.len())
        } else {
            String::new()
        };
        Err(Error::ingestion(path, format!("{}{more}", self.messages.join("; "))))
    }
}

fn reader(path: &Path, header: bool) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

/// Numeric table, target in the last column. Class labels must be
/// nonnegative integers below `n_classes` (inferred as `max + 1` when absent).
pub fn load_dataset_csv(path: &Path, task: TaskKind, header: bool, n_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = reader(path, header)?;
    let first_line = if header { 2 } else { 1 };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut bad = Offenders::new();
    for (r, record) in rdr.records().enumerate() {
        let line = r + first_line;
        let record = record.map_err(|e| csv_error(path, e))?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            bad.push(format!("row {line} has {} fields, expected {expected}", record.len()));
            continue;
        }
        let mut row = Vec::with_capacity(expected);
        for (c, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => bad.push(format!("row {line}, column {}: '{cell}' is not a finite number", c + 1)),
            }
        }
        if row.len() == expected {
            rows.push(row);
        }
    }
    bad.finish(path)?;
    let width = width.ok_or_else(|| Error::ingestion(path, "no data rows"))?;
    if width < 2 {
        return Err(Error::ingestion(path, "need at least one feature column and a target column"));
    }
    let d = width - 1;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let target: Vec<f64> = rows.iter().map(|r| r[d]).collect();
    let y = match task {
        TaskKind::Regression => Target::Regression(target),
        TaskKind::Classification => {
            let mut bad = Offenders::new();
            let limit = n_classes.unwrap_or(usize::MAX);
            let labels: Vec<usize> = target
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v < 0.0 || v.fract() != 0.0 || v >= limit as f64 {
                        bad.push(format!("row {}: unknown class label {v}", i + first_line));
                        0
                    } else {
                        v as usize
                    }
                })
                .collect();
            bad.finish(path)?;
            let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
            Target::Classification { labels, n_classes }
        }
    };
    Dataset::new(x, y).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// One test point of a scores file: its candidates and their score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    pub id: String,
    pub candidates: Vec<String>,
    pub profiles: Vec<TestScoreProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreData {
    pub calib: ScoreMatrix,
    pub tests: Vec<TestPoint>,
}

fn parse_scores(
    line: usize,
    cells: impl Iterator<Item = (usize, String)>,
    bad: &mut Offenders,
) -> Option<Vec<f64>> {
    let mut out = Vec::new();
    let mut ok = true;
    for (c, cell) in cells {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => out.push(v),
            Ok(v) if v < 0.0 => {
                bad.push(format!("row {line}, column {c}: negative score {v}"));
                ok = false;
            }
            _ => {
                bad.push(format!("row {line}, column {c}: '{cell}' is not a finite number"));
                ok = false;
            }
        }
    }
    ok.then_some(out)
}

/// Calibration scores (`model_1..model_K`) and test scores
/// (`test_id,candidate,model_1..model_K`). Test points keep first-appearance order.
pub fn load_scores_csv(calib_path: &Path, test_path: &Path) -> Result<ScoreData> {
    let mut rdr = reader(calib_path, true)?;
    let k = rdr.headers().map_err(|e| csv_error(calib_path, e))?.len();
    if k == 0 {
        return Err(Error::ingestion(calib_path, "missing header"));
    }
    let mut bad = Offenders::new();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(calib_path, e))?;
        if record.len() != k {
            bad.push(format!("row {} has {} fields, expected {k}", r + 2, record.len()));
            continue;
        }
        let cells = record.iter().enumerate().map(|(c, s)| (c + 1, s.to_string()));
        if let Some(v) = parse_scores(r + 2, cells, &mut bad) {
            data.extend(v);
            rows += 1;
        }
    }
    bad.finish(calib_path)?;
    if rows == 0 {
        return Err(Error::ingestion(calib_path, "no calibration rows"));
    }
    let calib = ScoreMatrix::new(rows, k, data).map_err(|e| Error::ingestion(calib_path, e.to_string()))?;

    let mut rdr = reader(test_path, true)?;
    let width = rdr.headers().map_err(|e| csv_error(test_path, e))?.len();
    if width != k + 2 {
        return Err(Error::ingestion(
            test_path,
            format!("expected test_id, candidate and {k} score columns, found {width} columns"),
        ));
    }
    let mut bad = Offenders::new();
    let mut tests: Vec<TestPoint> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(test_path, e))?;
        let line = r + 2;
        if record.len() != width {
            bad.push(format!("row {line} has {} fields, expected {width}", record.len()));
            continue;
        }
        let cells = record.iter().enumerate().skip(2).map(|(c, s)| (c + 1, s.to_string()));
        let Some(scores) = parse_scores(line, cells, &mut bad) else { continue };
        let id = record[0].to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            tests.push(TestPoint { id, candidates: Vec::new(), profiles: Vec::new() });
            tests.len() - 1
        });
        let point = &mut tests[slot];
        if point.candidates.iter().any(|c| c == &record[1]) {
            bad.push(format!("row {line}: duplicate candidate '{}' for test point '{}'", &record[1], point.id));
            continue;
        }
        point.candidates.push(record[1].to_string());
        point
            .profiles
            .push(TestScoreProfile::new(scores).map_err(|e| Error::ingestion(test_path, e.to_string()))?);
    }
    bad.finish(test_path)?;
    if tests.is_empty() {
        return Err(Error::ingestion(test_path, "no test rows"));
    }
    Ok(ScoreData { calib, tests })
}

pub fn write_scores_csv(data: &ScoreData, calib_path: &Path, test_path: &Path) -> Result<()> {
    let k = data.calib.cols();
    let header: Vec<String> = (1..=k).map(|j| format!("model_{j}")).collect();
    let mut w = csv::Writer::from_writer(create(calib_path)?);
    w.write_record(&header).map_err(|e| csv_error(calib_path, e))?;
    for i in 0..data.calib.rows() {
        w.write_record(data.calib.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(calib_path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: calib_path.to_path_buf(), source })?;

    let mut w = csv::Writer::from_writer(create(test_path)?);
    let mut full = vec!["test_id".to_string(), "candidate".to_string()];
    full.extend(header);
    w.write_record(&full).map_err(|e| csv_error(test_path, e))?;
    for point in &data.tests {
        for (cand, prof) in point.candidates.iter().zip(&point.profiles) {
            let mut rec = vec![point.id.clone(), cand.clone()];
            rec.extend(prof.scores().iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(test_path, e))?;
        }
    }
    w.flush().map_err(|source| Error::Io { path: test_path.to_path_buf(), source })
}

/// `test_id,label` pairs.
pub fn load_labels_csv(path: &Path) -> Result<HashMap<String, String>> {
    let mut rdr = reader(path, true)?;
    let mut out = HashMap::new();
    let mut bad = Offenders::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 2 {
            bad.push(format!("row {} has {} fields, expected 2", r + 2, record.len()));
            continue;
        }
        if out.insert(record[0].to_string(), record[1].to_string()).is_some() {
            bad.push(format!("row {}: duplicate test id '{}'", r + 2, &record[0]));
        }
    }
    bad.finish(path)?;
    Ok(out)
}

pub(crate) fn write_csv_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
