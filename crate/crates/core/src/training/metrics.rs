// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// No fence: cross-entropy only.
    Plain,
    /// Stage 1: flags injected, cross-entropy only.
    Injection,
    /// Stage 2: no injection, cross-entropy plus λ_t·position loss.
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mode: Mode,
    pub stage: Stage,
    pub lambda: f32,
    pub ce_loss: f32,
    pub position_loss: Option<f32>,
    /// Position loss per layer, empty without a fence.
    pub per_layer: Vec<f32>,
}

/// Append-only record list, optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    sink: Option<BufWriter<File>>,
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog").field("records", &self.records.len()).finish()
    }
}

impl MetricsLog {
    pub fn with_sink(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.mode == Mode::Eval)
    }

    pub fn load(path: &Path) -> Result<Vec<MetricsRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        Ok(out)
    }

    pub fn save(records: &[MetricsRecord], path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        if let Some(w) = &mut self.sink {
            let _ = w.flush();
        }
    }
}
