//! Per-step records and the metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Lines buffered between explicit flushes.
pub const FLUSH_EVERY: u64 = 50;

pub const COLUMNS: [&str; 8] = [
    "step",
    "loss_total",
    "loss_nce",
    "loss_l2",
    "loss_id",
    "loss_perc",
    "cos_dir",
    "wall_ms",
];

/// Batch means for one step. Terms inactive for the profile are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_nce: f64,
    pub loss_l2: f64,
    pub loss_id: f64,
    pub loss_perc: f64,
    pub cos_dir: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn values(&self) -> [f64; 7] {
        [
            self.loss_total,
            self.loss_nce,
            self.loss_l2,
            self.loss_id,
            self.loss_perc,
            self.cos_dir,
            self.wall_ms,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Tab-separated line without the newline.
    pub fn to_line(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.values() {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::BadDims(format!("malformed metrics line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(bad());
        }
        let step = f[0].parse().map_err(|_| bad())?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            step,
            loss_total: v[0],
            loss_nce: v[1],
            loss_l2: v[2],
            loss_id: v[3],
            loss_perc: v[4],
            cos_dir: v[5],
            wall_ms: v[6],
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(StepRecord::parse_line)
        .collect()
}

/// Append-only writer, flushed every [`FLUSH_EVERY`] lines and on drop.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    pending: u64,
}

impl MetricsWriter {
    /// Starts an empty log.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
            pending: 0,
        })
    }

    /// Continues a log after `step`, dropping any later lines left by a run
    /// that went further than the checkpoint.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<String> = match std::fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .filter(|l| {
                    l.split('\t')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_some_and(|s| s <= step)
                })
                .map(|l| format!("{l}\n"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        std::fs::write(path, kept.concat())?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            pending: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", r.to_line())?;
        self.pending += 1;
        if self.pending >= FLUSH_EVERY {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        self.pending = 0;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Mean of `loss_total` over the `window` records ending at `step`.
pub fn trailing_mean(records: &[StepRecord], step: u64, window: u64) -> Option<f64> {
    let lo = step.saturating_sub(window);
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.step > lo && r.step <= step)
        .map(|r| r.loss_total)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
