//! CSV output.
//!
//! Run files use the fixed [`RUN_HEADER`]. Missing metric values are written
//! as empty fields, floats in Rust's shortest round-trip form, and the stop
//! columns hold `1` on the epoch at which the configured monitor's t1 or t2
//! controller fired.

use std::path::{Path, PathBuf};

use crate::harness::trainer::RunResult;
use crate::stopping::ThresholdKind;
use crate::{Error, Result};

pub const RUN_HEADER: [&str; 13] = [
    "epoch",
    "train_loss",
    "test_loss",
    "train_err",
    "test_err",
    "gd",
    "gd_norm",
    "grad_var",
    "cos",
    "inner",
    "sign",
    "stop_t1",
    "stop_t2",
];

pub const TRAINVAL_HEADER: [&str; 9] = [
    "epoch", "val_loss", "val_err", "gd", "gd_norm", "grad_var", "cos", "inner", "sign",
];

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Companion file holding validation values and train-val statistics.
pub fn trainval_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}.trainval.csv"))
}

/// Writes the run CSV, plus the train-val companion when validation data
/// was present.
pub fn write_run_csv(path: &Path, run: &RunResult) -> Result<()> {
    let t1 = run.stop_epoch(run.monitor, ThresholdKind::AnyIncrease);
    let t2 = run.stop_epoch(run.monitor, ThresholdKind::ConsecutiveIncrease);
    let flag = |stop: Option<usize>, e: usize| if stop == Some(e) { "1" } else { "0" }.to_string();
    let mut w = writer(path)?;
    w.write_record(RUN_HEADER)?;
    for r in &run.records {
        w.write_record([
            r.epoch.to_string(),
            fmt(r.train_loss),
            fmt(r.test_loss),
            fmt(r.train_err),
            fmt(r.test_err),
            fmt_opt(r.gd),
            fmt_opt(r.gd_norm),
            fmt_opt(r.grad_var),
            fmt_opt(r.cos),
            fmt_opt(r.inner),
            fmt_opt(r.sign),
            flag(t1, r.epoch),
            flag(t2, r.epoch),
        ])?;
    }
    finish(w, path)?;

    if run.records.iter().any(|r| r.val_loss.is_some()) {
        let path = trainval_path(path);
        let mut w = writer(&path)?;
        w.write_record(TRAINVAL_HEADER)?;
        for r in &run.records {
            let tv = r.train_val;
            w.write_record([
                r.epoch.to_string(),
                fmt_opt(r.val_loss),
                fmt_opt(r.val_err),
                fmt_opt(tv.map(|s| s.gd)),
                fmt_opt(tv.map(|s| s.gd_norm)),
                fmt_opt(tv.map(|s| s.variance)),
                fmt_opt(tv.and_then(|s| s.cosine)),
                fmt_opt(tv.map(|s| s.inner)),
                fmt_opt(tv.map(|s| s.sign)),
            ])?;
        }
        finish(w, &path)?;
    }
    Ok(())
}

/// A CSV read back as named columns of optional floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn has_header(&self, expected: &[&str]) -> bool {
        self.header.len() == expected.len() && self.header.iter().zip(expected).all(|(a, b)| a == b)
    }
}

/// Reads a numeric CSV. Empty fields become `None`; anything else that
/// fails to parse is a format error.
pub fn read_numeric_csv(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        Error::format(path, format!("row {}: not a number: {f:?}", line + 2))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::harness::trainer::run_training;

    #[test]
    fn run_csv_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.train_size = 64;
        cfg.dataset.test_size = 32;
        cfg.dataset.val_size = 32;
        cfg.dataset.features = 4;
        cfg.dataset.classes = 2;
        cfg.model.hidden = vec![5];
        cfg.training.batch_size = 8;
        cfg.training.max_epochs = 3;
        let run = run_training(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        write_run_csv(&path, &run).unwrap();

        let t = read_numeric_csv(&path).unwrap();
        assert!(t.has_header(&RUN_HEADER));
        assert_eq!(t.rows.len(), 3);
        let gd = t.column("gd").unwrap();
        for (r, v) in run.records.iter().zip(gd) {
            assert_eq!(r.gd, v);
        }
        let tv = read_numeric_csv(&trainval_path(&path)).unwrap();
        assert!(tv.has_header(&TRAINVAL_HEADER));
        assert_eq!(tv.column("gd").unwrap()[0], run.records[0].train_val.map(|s| s.gd));
    }

    #[test]
    fn malformed_field_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,x\n").unwrap();
        assert!(matches!(read_numeric_csv(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn trainval_path_keeps_directory() {
        assert_eq!(trainval_path(Path::new("d/run.csv")), PathBuf::from("d/run.trainval.csv"));
    }
}
