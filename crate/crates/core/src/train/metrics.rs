//! Append-only JSON-lines training log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the log, written after every training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    /// 1-based global step.
    pub step: u64,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub divergence: f64,
    pub penalty: f64,
    /// Seconds since the run (or resumed run) started. Not deterministic.
    pub wall_time_s: f64,
}

impl MetricRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &MetricRecord) -> bool {
        self.epoch == other.epoch
            && self.step == other.step
            && self.generator_loss.to_bits() == other.generator_loss.to_bits()
            && self.discriminator_loss.to_bits() == other.discriminator_loss.to_bits()
            && self.divergence.to_bits() == other.divergence.to_bits()
            && self.penalty.to_bits() == other.penalty.to_bits()
    }
}

/// File-backed log. Records must arrive with strictly increasing step.
#[derive(Debug)]
pub struct MetricLog {
    path: PathBuf,
    file: File,
    last_step: u64,
}

impl MetricLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            path: path.to_path_buf(),
            file,
            last_step: 0,
        })
    }

    /// Reopens a log for a run resumed after `step`, dropping any records
    /// written past it by the interrupted run.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<MetricRecord> = if path.exists() {
            read_log(path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        if kept.len() as u64 != step {
            return Err(Error::integrity(
                path,
                format!("log holds {} records up to step {step}", kept.len()),
            ));
        }
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            path: path.to_path_buf(),
            file,
            last_step: step,
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        if record.step <= self.last_step {
            return Err(Error::integrity(
                &self.path,
                format!("step {} after step {}", record.step, self.last_step),
            ));
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_step = record.step;
        Ok(())
    }

    pub fn last_step(&self) -> u64 {
        self.last_step
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a log file, checking that steps increase.
pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<MetricRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if let Some(prev) = out.last() {
            if r.step <= prev.step || r.epoch < prev.epoch {
                return Err(Error::integrity(path, format!("line {}: steps out of order", i + 1)));
            }
        }
        out.push(r);
    }
    Ok(out)
}
