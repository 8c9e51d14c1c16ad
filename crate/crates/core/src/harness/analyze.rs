//! Correlation and sensitivity analysis over a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::harness::compare::ThresholdRow;
use crate::harness::report::{self, read_numeric_csv, Table, RUN_HEADER};
use crate::metrics::pearson;
use crate::stopping::{sensitivity, SetStats};
use crate::{Error, Result};

pub const CORRELATIONS_FILE: &str = "analysis_correlations.csv";
pub const SENSITIVITY_FILE: &str = "analysis_sensitivity.csv";

/// One Pearson coefficient, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub scope: String,
    pub x: String,
    pub y: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub error: Option<String>,
}

impl CorrelationRow {
    pub fn compute(scope: &str, x: &str, y: &str, xs: &[f64], ys: &[f64]) -> Self {
        let (rho, error) = match pearson(xs, ys) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CorrelationRow {
            scope: scope.to_string(),
            x: x.to_string(),
            y: y.to_string(),
            n: xs.len(),
            rho,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub method: String,
    pub outcome: String,
    pub sets: usize,
    pub sensitivity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Analysis {
    pub correlations: Vec<CorrelationRow>,
    pub sensitivity: Vec<SensitivityRow>,
}

impl Analysis {
    pub fn find(&self, scope: &str, x: &str, y: &str) -> Option<&CorrelationRow> {
        self.correlations
            .iter()
            .find(|r| r.scope == scope && r.x == x && r.y == y)
    }
}

/// Values of columns `x` and `y` at epochs after `warmup` where both exist.
pub fn post_warmup_pairs(
    epochs: &[Option<f64>],
    xs: &[Option<f64>],
    ys: &[Option<f64>],
    warmup: usize,
    out: &mut (Vec<f64>, Vec<f64>),
) {
    for ((e, x), y) in epochs.iter().zip(xs).zip(ys) {
        if let (Some(e), Some(x), Some(y)) = (e, x, y) {
            if *e > warmup as f64 {
                out.0.push(*x);
                out.1.push(*y);
            }
        }
    }
}

const RUN_PAIRS: [(&str, &str); 4] = [
    ("gd", "test_loss"),
    ("gd", "test_err"),
    ("gd_norm", "test_loss"),
    ("gd_norm", "test_err"),
];

/// Pooled rows over all run tables, in the given order.
pub fn pooled_correlations(runs: &[(String, Table)], pairs: &[(&str, &str)], warmup: usize) -> Vec<CorrelationRow> {
    pairs
        .iter()
        .map(|&(x, y)| {
            let mut acc = (Vec::new(), Vec::new());
            for (_, t) in runs {
                collect(t, x, y, warmup, &mut acc);
            }
            CorrelationRow::compute("pooled", x, y, &acc.0, &acc.1)
        })
        .collect()
}

fn collect(t: &Table, x: &str, y: &str, warmup: usize, acc: &mut (Vec<f64>, Vec<f64>)) {
    if let (Some(e), Some(xs), Some(ys)) = (t.column("epoch"), t.column(x), t.column(y)) {
        post_warmup_pairs(&e, &xs, &ys, warmup, acc);
    }
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn is_companion(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".trainval.csv"))
}

/// Loads every run CSV in `dir`, sorted by file name, keyed by file stem.
pub fn load_runs(dir: &Path) -> Result<Vec<(String, Table)>> {
    let mut runs = Vec::new();
    for path in csv_files(dir)? {
        if is_companion(&path) {
            continue;
        }
        // only files that start with the run header are runs; others are reports
        let first = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if first.lines().next() != Some(RUN_HEADER.join(",").as_str()) {
            continue;
        }
        let table = read_numeric_csv(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        runs.push((stem, table));
    }
    Ok(runs)
}

pub fn analyze(dir: &Path, warmup: usize) -> Result<Analysis> {
    let runs = load_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Precondition(format!("no run CSVs in {}", dir.display())));
    }
    let mut out = Analysis::default();
    for (stem, t) in &runs {
        for (x, y) in [("gd", "test_loss"), ("gd", "test_err")] {
            let mut acc = (Vec::new(), Vec::new());
            collect(t, x, y, warmup, &mut acc);
            out.correlations.push(CorrelationRow::compute(stem, x, y, &acc.0, &acc.1));
        }
    }
    out.correlations.extend(pooled_correlations(&runs, &RUN_PAIRS, warmup));

    // train-train against train-val disparity, where a companion file exists
    let mut acc = (Vec::new(), Vec::new());
    let mut any = false;
    for (stem, t) in &runs {
        let path = dir.join(format!("{stem}.trainval.csv"));
        if !path.exists() {
            continue;
        }
        let tv = read_numeric_csv(&path)?;
        let (Some(e), Some(tt), Some(vv)) = (t.column("epoch"), t.column("gd"), tv.column("gd")) else {
            return Err(Error::format(&path, "missing epoch or gd column"));
        };
        if vv.len() != tt.len() {
            return Err(Error::format(&path, "row count differs from the run file"));
        }
        any = true;
        post_warmup_pairs(&e, &tt, &vv, warmup, &mut acc);
    }
    if any {
        out.correlations
            .push(CorrelationRow::compute("pooled", "gd", "gd_train_val", &acc.0, &acc.1));
    }

    let thresholds = dir.join(super::compare::THRESHOLDS_FILE);
    if thresholds.exists() {
        out.sensitivity = threshold_sensitivity(&read_thresholds(&thresholds)?);
    }
    Ok(out)
}

pub fn read_thresholds(path: &Path) -> Result<Vec<ThresholdRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Sensitivity per method and outcome. Each seed contributes one set, made
/// of the outcomes across all thresholds.
pub fn threshold_sensitivity(rows: &[ThresholdRow]) -> Vec<SensitivityRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&ThresholdRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.seed)).or_default().push(r);
    }
    let methods: Vec<String> = {
        let mut m: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    let mut out = Vec::new();
    for method in methods {
        for outcome in ["test_acc", "test_loss"] {
            let sets: Result<Vec<SetStats>> = groups
                .iter()
                .filter(|((m, _), _)| *m == method)
                .map(|(_, rs)| {
                    let v: Vec<f64> = rs
                        .iter()
                        .map(|r| if outcome == "test_acc" { r.test_acc } else { r.test_loss })
                        .collect();
                    SetStats::from_values(&v)
                })
                .collect();
            let (n, value) = match sets {
                Ok(s) => (s.len(), sensitivity(&s)),
                Err(e) => (0, Err(e)),
            };
            out.push(SensitivityRow {
                method: method.clone(),
                outcome: outcome.to_string(),
                sets: n,
                sensitivity: value.as_ref().ok().copied(),
                error: value.err().map(|e| e.to_string()),
            });
        }
    }
    out
}

pub fn write_correlations(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = report::writer(path)?;
    w.write_record(["scope", "x", "y", "n", "rho", "error"])?;
    for r in rows {
        w.write_record([
            r.scope.clone(),
            r.x.clone(),
            r.y.clone(),
            r.n.to_string(),
            report::fmt_opt(r.rho),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    report::finish(w, path)
}

pub fn write_sensitivity(path: &Path, rows: &[SensitivityRow]) -> Result<()> {
    let mut w = report::writer(path)?;
    w.write_record(["method", "outcome", "sets", "sensitivity", "error"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.outcome.clone(),
            r.sets.to_string(),
            report::fmt_opt(r.sensitivity),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    report::finish(w, path)
}

/// Writes both analysis files into `out_dir`.
pub fn write_analysis(out_dir: &Path, a: &Analysis) -> Result<()> {
    write_correlations(&out_dir.join(CORRELATIONS_FILE), &a.correlations)?;
    write_sensitivity(&out_dir.join(SENSITIVITY_FILE), &a.sensitivity)
}

/// Reads a correlations file written by [`write_correlations`].
pub fn read_correlations(path: &Path) -> Result<Vec<CorrelationRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let num = |s: String| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::format(path, format!("bad number {s:?}")))
            }
        };
        out.push(CorrelationRow {
            scope: get(0),
            x: get(1),
            y: get(2),
            n: get(3).parse().map_err(|_| Error::format(path, "bad count"))?,
            rho: num(get(4))?,
            error: Some(get(5)).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_run(dir: &Path, name: &str, gd: &[f64], loss: &[f64]) {
        let mut s = RUN_HEADER.join(",") + "\n";
        for (i, (g, l)) in gd.iter().zip(loss).enumerate() {
            s += &format!("{},0.1,{l},0.1,{l},{g},{g},1,,1,1,0,0\n", i + 1);
        }
        std::fs::write(dir.join(name), s).unwrap();
    }

    #[test]
    fn linear_relation_gives_unit_rho() {
        let dir = tempfile::tempdir().unwrap();
        let gd: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let loss: Vec<f64> = gd.iter().map(|g| 2.0 * g + 1.0).collect();
        write_run(dir.path(), "a.csv", &gd, &loss);
        let a = analyze(dir.path(), 0).unwrap();
        let row = a.find("a", "gd", "test_loss").unwrap();
        assert!((row.rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(row.n, 10);
    }

    #[test]
    fn constant_run_reports_error_and_others_still_computed() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "flat.csv", &[1.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_run(dir.path(), "good.csv", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
        let a = analyze(dir.path(), 0).unwrap();
        let flat = a.find("flat", "gd", "test_loss").unwrap();
        assert!(flat.rho.is_none());
        assert!(flat.error.as_deref().unwrap().contains("zero variance"));
        assert!(a.find("good", "gd", "test_loss").unwrap().rho.is_some());
        assert!(a.find("pooled", "gd", "test_loss").unwrap().rho.is_some());
    }

    #[test]
    fn warmup_epochs_are_excluded() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "a.csv", &[9.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]);
        let a = analyze(dir.path(), 1).unwrap();
        let row = a.find("a", "gd", "test_loss").unwrap();
        assert_eq!(row.n, 3);
        assert!((row.rho.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("summary.csv"), "a,b\n1,2\n").unwrap();
        assert!(analyze(dir.path(), 0).is_err());
    }

    #[test]
    fn malformed_run_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = RUN_HEADER.join(",") + "\n1,oops,1,1,1,1,1,1,1,1,1,0,0\n";
        std::fs::write(dir.path().join("r.csv"), s).unwrap();
        assert!(matches!(analyze(dir.path(), 0), Err(Error::Format { .. })));
    }

    #[test]
    fn correlations_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            CorrelationRow::compute("s", "gd", "y", &[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]),
            CorrelationRow::compute("s", "gd", "z", &[1.0, 1.0], &[1.0, 2.0]),
        ];
        let p = dir.path().join("c.csv");
        write_correlations(&p, &rows).unwrap();
        assert_eq!(read_correlations(&p).unwrap(), rows);
    }
}
