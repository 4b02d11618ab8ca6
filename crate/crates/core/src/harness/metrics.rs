//! JSON Lines metric files: one `MetricRecord` per line, step indices
//! nondecreasing, single writer.

use crate::error::{Error, Result};
use crate::eval::MetricRecord;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub struct MetricWriter {
    out: BufWriter<std::fs::File>,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<MetricWriter> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricWriter { out: BufWriter::new(file), path: path.to_path_buf(), last_step: None })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if record.step < last {
                return Err(Error::Data(format!(
                    "metric step {} after {} in {}",
                    record.step,
                    last,
                    self.path.display()
                )));
            }
        }
        self.last_step = Some(record.step);
        let line = serde_json::to_string(record).map_err(|e| Error::json(&self.path, e))?;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}
