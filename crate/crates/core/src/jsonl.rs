//! Line-delimited JSON helpers shared by every file format in the crate.
//!
//! Blank lines are skipped. A line holding an object with a top-level
//! `run_header` key is report metadata and is skipped by readers too, so
//! command outputs can be piped straight into other commands.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const HEADER_KEY: &str = "run_header";

/// Parses each record with its 1-based line number.
pub fn parse_lines<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || is_header_line(trimmed) {
            continue;
        }
        let value: T =
            serde_json::from_str(trimmed).map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push((line_no, value));
    }
    Ok(out)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path)?;
    parse_lines(BufReader::new(file)).map_err(|e| e.with_path(path))
}

pub fn write_records<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn is_header_line(line: &str) -> bool {
    line.starts_with('{')
        && line.contains(HEADER_KEY)
        && serde_json::from_str::<serde_json::Value>(line)
            .map(|v| v.get(HEADER_KEY).is_some())
            .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_blank_and_header_lines() {
        let input = "{\"run_header\":{\"cmd\":\"x\"}}\n\n{\"a\":1}\n";
        let rows: Vec<(usize, serde_json::Value)> = parse_lines(input.as_bytes()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 3);
    }

    #[test]
    fn reports_line_number() {
        let input = "{\"a\":1}\nnot json\n";
        let err = parse_lines::<serde_json::Value>(input.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
