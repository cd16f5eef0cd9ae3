//! JSONL training metrics: one record per optimizer step.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::StepStats;

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub blocks: usize,
    pub elapsed_secs: f64,
}

pub struct MetricsWriter {
    file: std::fs::File,
    start: Instant,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: std::fs::File::create(path)?,
            start: Instant::now(),
        })
    }

    pub fn log(&mut self, stats: &StepStats) -> Result<()> {
        let record = MetricsRecord {
            step: stats.step,
            loss: stats.loss,
            lr: stats.lr,
            blocks: stats.blocks,
            elapsed_secs: self.start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Checkpoint(format!("metrics encode: {e}")))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}
