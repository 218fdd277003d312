//! Import of externally produced embeddings.
//!
//! A manifest is a plain-text file of whitespace-separated directives:
//!
//! ```text
//! # comment
//! d 768
//! l 8
//! task classification      # or: regression
//! num_classes 10           # classification only
//! dtype f32                # raw dump width: f32 (default) or f64
//! record 0 3 emb/000.bin   # domain id, label (`-` = unlabeled), path
//! ```
//!
//! Each dump holds exactly `l·d` little-endian floats, row-major. Relative
//! paths resolve against the manifest's directory.

use std::fs;
use std::path::Path;

use super::record::{Dataset, DatasetHeader, EmbeddingRecord, Label, Storage, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse<T: std::str::FromStr>(line_no: usize, what: &str, v: Option<&str>) -> Result<T> {
    v.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(line_no as u64, format!("expected {what} on line {line_no}")))
}

pub fn import_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut d: Option<usize> = None;
    let mut l: Option<usize> = None;
    let mut task = Task::Classification;
    let mut num_classes = 0usize;
    let mut dtype = Storage::F32;
    let mut entries = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next().unwrap() {
            "d" => d = Some(parse(line_no, "d", parts.next())?),
            "l" => l = Some(parse(line_no, "l", parts.next())?),
            "num_classes" => num_classes = parse(line_no, "num_classes", parts.next())?,
            "task" => {
                task = match parts.next() {
                    Some("classification") => Task::Classification,
                    Some("regression") => Task::Regression,
                    _ => return Err(Error::format(line_no as u64, "unknown task")),
                }
            }
            "dtype" => {
                dtype = match parts.next() {
                    Some("f32") => Storage::F32,
                    Some("f64") => Storage::F64,
                    _ => return Err(Error::format(line_no as u64, "dtype must be f32 or f64")),
                }
            }
            "record" => {
                let domain: u32 = parse(line_no, "domain id", parts.next())?;
                let label = parts
                    .next()
                    .ok_or_else(|| Error::format(line_no as u64, "missing label"))?
                    .to_string();
                let file = parts
                    .next()
                    .ok_or_else(|| Error::format(line_no as u64, "missing dump path"))?;
                entries.push((line_no, domain, label, base.join(file)));
            }
            other => {
                return Err(Error::format(
                    line_no as u64,
                    format!("unknown directive `{other}`"),
                ))
            }
        }
    }

    let d = d.ok_or_else(|| Error::format(0, "manifest lacks `d`"))?;
    let l = l.ok_or_else(|| Error::format(0, "manifest lacks `l`"))?;
    let header = match task {
        Task::Classification => DatasetHeader::classification(d, l, num_classes),
        Task::Regression => DatasetHeader::regression(d, l),
    };

    let mut records = Vec::with_capacity(entries.len());
    for (line_no, domain, label, file) in entries {
        let label = match (label.as_str(), task) {
            ("-", _) => Label::Unlabeled,
            (s, Task::Classification) => Label::Class(parse(line_no, "class label", Some(s))?),
            (s, Task::Regression) => Label::Value(parse(line_no, "target value", Some(s))?),
        };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let width = dtype.width();
        if bytes.len() != l * d * width {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "{} holds {} bytes, expected {}",
                    file.display(),
                    bytes.len(),
                    l * d * width
                ),
            ));
        }
        let data = bytes
            .chunks_exact(width)
            .map(|c| match dtype {
                Storage::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Storage::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        records.push(EmbeddingRecord::new(domain, label, Tensor::matrix(l, d, data)?));
    }
    Dataset::new(header, records)
}
