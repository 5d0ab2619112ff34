use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use simt_core::experiment::RunHeader;

use crate::Format;

/// Where results go and how reports are rendered.
pub struct Output {
    path: Option<PathBuf>,
    pub format: Format,
}

impl Output {
    pub fn new(path: Option<PathBuf>, format: Format) -> Self {
        Output { path, format }
    }

    pub fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.path {
            Some(p) => {
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                Box::new(BufWriter::new(f))
            }
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    /// Report output: the header as a comment line in text mode, a JSON line
    /// otherwise.
    pub fn report(&self, header: &RunHeader, text: &str, jsonl: &str) -> Result<()> {
        let mut w = self.writer()?;
        match self.format {
            Format::Text => {
                writeln!(w, "# {} {}", simt_core::jsonl::HEADER_KEY, serde_json::to_string(header)?)?;
                w.write_all(text.as_bytes())?;
            }
            Format::Jsonl => {
                writeln!(w, "{}", header.to_line())?;
                w.write_all(jsonl.as_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Data output meant to be read back by other commands; always JSONL.
    pub fn data(&self, header: &RunHeader, body: &str) -> Result<()> {
        let mut w = self.writer()?;
        writeln!(w, "{}", header.to_line())?;
        w.write_all(body.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}
