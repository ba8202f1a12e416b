//! JSON-lines persistence of measurement datasets.
//!
//! One [`Measurement`] per line. Blank lines and lines starting with `#` are
//! skipped. Hardware data uses the same format with no noise realization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kinematics::KinematicTree;
use crate::measurement::Measurement;

/// Parses a dataset; errors carry the 1-based line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<Measurement>> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let m: Measurement = serde_json::from_str(trimmed).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Serializes a dataset, one record per line.
pub fn to_jsonl(dataset: &[Measurement]) -> Result<String> {
    let mut s = String::new();
    for m in dataset {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Measurement>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lines(BufReader::new(file).lines().map(|l| l.map_err(|e| Error::io(path, e))))
}

pub fn write_jsonl(path: impl AsRef<Path>, dataset: &[Measurement]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in dataset {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset and checks every record against `tree`; validation
/// failures are reported with their line number.
pub fn read_validated(path: impl AsRef<Path>, tree: &KinematicTree) -> Result<Vec<Measurement>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord { line: i + 1, message };
        let m: Measurement = serde_json::from_str(trimmed).map_err(|e| malformed(e.to_string()))?;
        m.validate(tree).map_err(|e| malformed(e.to_string()))?;
        out.push(m);
    }
    Ok(out)
}
