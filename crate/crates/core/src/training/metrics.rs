use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,split,loss_nats,bpc,dzone_mean,lr,elapsed_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub loss_nats: f64,
    pub bpc: f64,
    pub dzone_mean: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.3}",
            self.step, self.split, self.loss_nats, self.bpc, self.dzone_mean, self.lr, self.elapsed_s
        )
    }
}

/// Append-only CSV sink. The header is written once, when the file is new or
/// empty; an absent path collects rows in memory only.
pub struct MetricsLog {
    file: Option<(PathBuf, BufWriter<File>)>,
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        MetricsLog {
            file: None,
            rows: Vec::new(),
        }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut w = BufWriter::new(file);
        if empty {
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog {
            file: Some((path.to_path_buf(), w)),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some((path, w)) = self.file.as_mut() {
            writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = self.file.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
