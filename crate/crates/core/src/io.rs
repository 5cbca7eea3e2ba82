//! Text formats: dataset / score / subsample CSV and JSON documents.
//!
//! Every file is written atomically through a temporary file in the target
//! directory. Floats in CSV output carry 17 significant digits; JSON output
//! uses the shortest representation that round-trips exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CopsError, Result};
use crate::model::Dataset;
use crate::sampler::Subsample;

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CopsError::Io(e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CopsError::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Parses a JSON document; errors carry `path:line:column`.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.split(" at line ").next().unwrap_or(&msg);
        CopsError::Parse(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    parse_json(&text, &path.display().to_string())
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Number of non-reference classes. Inferred from the largest label when
    /// absent.
    pub classes: Option<usize>,
    /// Column holding per-row weights.
    pub weights_col: Option<String>,
    /// Drop the `y` column even if present.
    pub ignore_labels: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub data: Dataset,
    pub weights: Option<Vec<f64>>,
}

fn row_error(origin: &str, line: u64, msg: impl std::fmt::Display) -> CopsError {
    CopsError::Parse(format!("{origin}: line {line}: {msg}"))
}

enum Column {
    Feature(usize),
    Label,
    Weight,
}

/// Reads a dataset CSV with header `x0,...,x{d-1}[,y]` and optionally a
/// weight column.
pub fn read_dataset_csv(path: &Path, opts: &CsvOptions) -> Result<LoadedData> {
    let text = fs::read_to_string(path)?;
    parse_dataset_csv(&text, &path.display().to_string(), opts)
}

pub fn parse_dataset_csv(text: &str, origin: &str, opts: &CsvOptions) -> Result<LoadedData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| row_error(origin, 1, e))?.clone();
    let mut columns = Vec::with_capacity(header.len());
    let mut dim = 0;
    for (j, name) in header.iter().enumerate() {
        let name = name.trim();
        let col = if Some(name) == opts.weights_col.as_deref() {
            Column::Weight
        } else if name == "y" {
            Column::Label
        } else if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            if idx != dim {
                return Err(row_error(origin, 1, format!("feature column {j} is `{name}`, expected `x{dim}`")));
            }
            dim += 1;
            Column::Feature(idx)
        } else {
            return Err(row_error(origin, 1, format!("unknown column `{name}`")));
        };
        columns.push(col);
    }
    if dim == 0 {
        return Err(row_error(origin, 1, "header has no feature columns x0.."));
    }
    let has_labels = columns.iter().any(|c| matches!(c, Column::Label)) && !opts.ignore_labels;
    if let Some(w) = &opts.weights_col {
        if !columns.iter().any(|c| matches!(c, Column::Weight)) {
            return Err(row_error(origin, 1, format!("weight column `{w}` not found")));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_error(origin, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != columns.len() {
            return Err(row_error(
                origin,
                line,
                format!("expected {} fields, found {}", columns.len(), record.len()),
            ));
        }
        for (field, col) in record.iter().zip(&columns) {
            let field = field.trim();
            match col {
                Column::Feature(j) => {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| row_error(origin, line, format!("x{j} = `{field}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(row_error(origin, line, format!("x{j} is not finite")));
                    }
                    features.push(v);
                }
                Column::Label if has_labels => {
                    let y: usize = field
                        .parse()
                        .map_err(|_| row_error(origin, line, format!("label `{field}` is not a class index")))?;
                    if let Some(k) = opts.classes {
                        if y > k {
                            return Err(row_error(origin, line, format!("label {y} outside [0, {k}]")));
                        }
                    }
                    labels.push(y);
                }
                Column::Label => {}
                Column::Weight => {
                    let w: f64 = field
                        .parse()
                        .map_err(|_| row_error(origin, line, format!("weight `{field}` is not a number")))?;
                    weights.push(w);
                }
            }
        }
    }
    if features.is_empty() {
        return Err(CopsError::Parse(format!("{origin}: no data rows")));
    }
    let classes = opts
        .classes
        .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(1).max(1));
    let data = if has_labels {
        Dataset::labeled(dim, classes, features, labels)?
    } else {
        Dataset::unlabeled(dim, classes, features)?
    };
    Ok(LoadedData {
        data,
        weights: opts.weights_col.as_ref().map(|_| weights),
    })
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    if data.is_labeled() {
        out.push_str(",y");
    }
    out.push('\n');
    for i in 0..data.len() {
        let row: Vec<String> = data.x(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(","));
        if let Some(labels) = data.labels() {
            out.push_str(&format!(",{}", labels[i]));
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, dataset_to_csv(data).as_bytes())
}

pub fn scores_to_csv(u: &[f64]) -> String {
    let mut out = String::from("index,u\n");
    for (i, v) in u.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", fmt_f64(*v)));
    }
    out
}

pub fn write_scores_csv(path: &Path, u: &[f64]) -> Result<()> {
    write_atomic(path, scores_to_csv(u).as_bytes())
}

/// Reads an `index,u` CSV; indices must run 0, 1, 2, ... in order.
pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>> {
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CopsError::Parse(format!("{origin}: {e}")))?;
    let header = reader.headers().map_err(|e| row_error(&origin, 1, e))?;
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["index", "u"] {
        return Err(row_error(&origin, 1, "header must be `index,u`"));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| row_error(&origin, e.position().map_or(0, |p| p.line()), e))?;
        let line = record.position().map_or(0, |p| p.line());
        let index: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| row_error(&origin, line, "index is not an integer"))?;
        if index != out.len() {
            return Err(row_error(&origin, line, format!("expected index {}, found {index}", out.len())));
        }
        let u: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| row_error(&origin, line, "score is not a number"))?;
        if !(u >= 0.0 && u.is_finite()) {
            return Err(row_error(&origin, line, format!("score {u} must be finite and nonnegative")));
        }
        out.push(u);
    }
    Ok(out)
}

pub fn subsample_to_csv(sub: &Subsample) -> String {
    let mut out = String::from("draw_index,source_row,weight\n");
    for (t, (i, w)) in sub.indices.iter().zip(&sub.weights).enumerate() {
        out.push_str(&format!("{t},{i},{}\n", fmt_f64(*w)));
    }
    out
}
