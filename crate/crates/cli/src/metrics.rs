//! Per-epoch metrics CSV.
//!
//! ```text
//! # config_hash=<sha256>
//! epoch,split,loss,top1,top5,lr
//! 0,train,1.71,0.31,0.93,0.01
//! 0,val,1.52,0.40,0.97,0.01
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const HEADER: &str = "epoch,split,loss,top1,top5,lr";
const HASH_PREFIX: &str = "# config_hash=";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.top1, self.top5, self.lr
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(MetricsRow {
            epoch: f[0].parse().ok()?,
            split: f[1].to_string(),
            loss: f[2].parse().ok()?,
            top1: f[3].parse().ok()?,
            top5: f[4].parse().ok()?,
            lr: f[5].parse().ok()?,
        })
    }
}

pub struct MetricsFile {
    path: PathBuf,
}

impl MetricsFile {
    /// Starts a fresh file, or when `keep_before` is set keeps the existing
    /// rows of earlier epochs (resuming).
    pub fn open(path: &Path, config_hash: &str, keep_before: Option<usize>) -> Result<Self> {
        let kept = match keep_before {
            Some(epoch) if path.exists() => read_metrics(path)?
                .1
                .into_iter()
                .filter(|r| r.epoch < epoch)
                .collect(),
            _ => Vec::new(),
        };
        let mut text = format!("{HASH_PREFIX}{config_hash}\n{HEADER}\n");
        for r in kept {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(MetricsFile {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        writeln!(f, "{}", row.to_line()).map_err(|e| CliError::io(&self.path, e))
    }
}

/// Returns the embedded config hash and the rows.
pub fn read_metrics(path: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix(HASH_PREFIX))
        .ok_or_else(|| CliError::Config(format!("{}: missing config hash line", path.display())))?
        .to_string();
    if lines.next() != Some(HEADER) {
        return Err(CliError::Config(format!("{}: missing header", path.display())));
    }
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| MetricsRow::parse(l).ok_or_else(|| CliError::Config(format!("bad metrics row '{l}'"))))
        .collect::<Result<_>>()?;
    Ok((hash, rows))
}
