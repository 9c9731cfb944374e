use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SceneError;

pub const METRICS_HEADER: [&str; 8] = [
    "iter",
    "level",
    "views_per_iter",
    "n_gaussians",
    "train_loss",
    "val_psnr",
    "val_ssim",
    "wall_seconds",
];

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub level: usize,
    pub views_per_iter: usize,
    pub n_gaussians: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_seconds: f64,
}

/// Streams records to a CSV file, flushing after every row.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, SceneError> {
        let file = File::create(path).map_err(|e| SceneError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner
            .write_record(METRICS_HEADER)
            .map_err(|e| SceneError::io(path, e))?;
        inner.flush().map_err(|e| SceneError::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), SceneError> {
        self.inner
            .serialize(record)
            .map_err(|e| SceneError::io(&self.path, e))?;
        self.inner.flush().map_err(|e| SceneError::io(&self.path, e))
    }
}

/// Writes the header and one row per record.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), SceneError> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize) -> MetricsRecord {
        MetricsRecord {
            iter,
            level: 3,
            views_per_iter: 8,
            n_gaussians: 1234,
            train_loss: 0.05,
            val_psnr: 28.5,
            val_ssim: 0.93,
            wall_seconds: 12.0,
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "iter,level,views_per_iter,n_gaussians,train_loss,val_psnr,val_ssim,wall_seconds\n"
        );
    }

    #[test]
    fn rows_parse_back_with_eight_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &[record(500), record(1000)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        let mut reader = csv::Reader::from_path(&p).unwrap();
        let rows: Vec<MetricsRecord> = reader.deserialize().map(Result::unwrap).collect();
        assert_eq!(rows, vec![record(500), record(1000)]);
        for line in text.lines() {
            assert_eq!(line.split(',').count(), 8);
        }
    }
}
