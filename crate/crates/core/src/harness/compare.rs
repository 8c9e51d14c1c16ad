//! Gradient-disparity stopping against k-fold and k⁺-fold cross-validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossval::{kplus_from_cv, run_kfold_on};
use crate::harness::config::{ExperimentConfig, Monitor};
use crate::harness::report;
use crate::harness::trainer::{prepare_data, train_on};
use crate::par::Exec;
use crate::stopping::{PatiencePolicy, ThresholdKind};
use crate::{Error, Result};

pub const COMPARE_FILE: &str = "compare.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";

/// Largest patience included in the threshold table.
pub const MAX_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full-data training stopped on gradient disparity.
    Gd,
    /// Mean over the k fold models at the CV stop epoch.
    Kfold,
    /// Full-data retrain for the CV stop epoch.
    Kplus,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Kfold => "kfold",
            Method::Kplus => "kplus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub method: Method,
    /// Empty when the controller never fired and the last epoch was used.
    pub stop_epoch: Option<usize>,
    pub train_samples: usize,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Mean wall-clock seconds per training epoch (all folds for k-fold).
    pub epoch_seconds: f64,
}

/// Outcome of one stopping threshold for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub seed: u64,
    /// `gd` or `cv`.
    pub method: String,
    pub kind: String,
    pub patience: usize,
    pub stop_epoch: Option<usize>,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub thresholds: Vec<ThresholdRow>,
}

impl CompareReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &CompareRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn mean_acc(&self, method: Method) -> f64 {
        let v: Vec<f64> = self.rows_for(method).map(|r| r.test_acc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_epoch_seconds(&self, method: Method) -> f64 {
        let v: Vec<f64> = self.rows_for(method).map(|r| r.epoch_seconds).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn kinds() -> [ThresholdKind; 2] {
    [ThresholdKind::AnyIncrease, ThresholdKind::ConsecutiveIncrease]
}

/// Runs the three methods for each seed with the patience policy from
/// `cfg.stopping`. GD stopping watches `gd`; CV watches the fold-averaged
/// validation loss.
pub fn compare_gd_vs_cv(cfg: &ExperimentConfig, k: usize, seeds: &[u64], exec: Exec) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let mut report = CompareReport::default();
    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        cfg.metrics.enabled = true;
        cfg.stopping.monitor = Monitor::Gd;
        cfg.stopping.terminal = false;
        cfg.validate()?;
        let splits = prepare_data(&cfg)?;
        let splits = crate::harness::trainer::Splits { val: None, ..splits };

        let gd = train_on(&cfg, &splits, exec)?;
        if gd.diverged() {
            return Err(Error::Numerical(format!("GD run diverged for seed {seed}")));
        }
        let at = gd.at_stop().expect("at least one epoch");
        report.rows.push(CompareRow {
            seed,
            method: Method::Gd,
            stop_epoch: gd.configured_stop(),
            train_samples: gd.train_samples,
            test_loss: at.test_loss,
            test_acc: 1.0 - at.test_err,
            epoch_seconds: gd.mean_epoch_seconds(),
        });

        let cv = run_kfold_on(&cfg, k, &splits, exec)?;
        report.rows.push(CompareRow {
            seed,
            method: Method::Kfold,
            stop_epoch: cv.stop_epoch,
            train_samples: cv.fold_train_sizes()[0],
            test_loss: cv.mean_test_loss(),
            test_acc: 1.0 - cv.mean_test_err(),
            epoch_seconds: cv.epoch_seconds(),
        });

        for kind in kinds() {
            for p in 1..=MAX_PATIENCE {
                let policy = PatiencePolicy::new(p, kind)?;
                let gs = crate::harness::trainer::sparse_stop_epoch(&policy, &gd.series(Monitor::Gd));
                let rec = gs.and_then(|e| gd.record(e)).or_else(|| gd.last()).expect("non-empty run");
                report.thresholds.push(ThresholdRow {
                    seed,
                    method: "gd".into(),
                    kind: kind.label().into(),
                    patience: p,
                    stop_epoch: gs,
                    test_loss: rec.test_loss,
                    test_acc: 1.0 - rec.test_err,
                });
                let cs = policy.stop_epoch(&cv.mean_val_loss);
                let at = cs.unwrap_or(cv.mean_val_loss.len());
                let recs: Vec<_> = cv.folds.iter().map(|f| f.record(at).expect("equal lengths")).collect();
                let n = recs.len() as f64;
                report.thresholds.push(ThresholdRow {
                    seed,
                    method: "cv".into(),
                    kind: kind.label().into(),
                    patience: p,
                    stop_epoch: cs,
                    test_loss: recs.iter().map(|r| r.test_loss).sum::<f64>() / n,
                    test_acc: 1.0 - recs.iter().map(|r| r.test_err).sum::<f64>() / n,
                });
            }
        }

        let kp = kplus_from_cv(&cfg, cv, &splits)?;
        report.rows.push(CompareRow {
            seed,
            method: Method::Kplus,
            stop_epoch: (!kp.fallback).then_some(kp.epochs),
            train_samples: kp.retrain.train_samples,
            test_loss: kp.test_loss,
            test_acc: 1.0 - kp.test_err,
            epoch_seconds: kp.retrain.mean_epoch_seconds(),
        });
    }
    Ok(report)
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = report::writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    report::finish(w, path)
}

/// Writes `compare.csv` and `thresholds.csv`. The compare file includes
/// wall-clock columns and is therefore not byte-reproducible.
pub fn write_compare(dir: &Path, rep: &CompareReport) -> Result<()> {
    write_serialized(&dir.join(COMPARE_FILE), &rep.rows)?;
    write_serialized(&dir.join(THRESHOLDS_FILE), &rep.thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dataset.train_size = 60;
        c.dataset.test_size = 30;
        c.dataset.features = 4;
        c.dataset.classes = 2;
        c.model.hidden = vec![5];
        c.training.batch_size = 6;
        c.training.max_epochs = 6;
        c.stopping.patience = 2;
        c
    }

    #[test]
    fn three_rows_per_seed_and_full_threshold_grid() {
        let rep = compare_gd_vs_cv(&cfg(), 3, &[1, 2], Exec::Sequential).unwrap();
        assert_eq!(rep.rows.len(), 6);
        for seed in [1, 2] {
            let methods: Vec<Method> = rep.rows.iter().filter(|r| r.seed == seed).map(|r| r.method).collect();
            assert_eq!(methods, vec![Method::Gd, Method::Kfold, Method::Kplus]);
        }
        assert_eq!(rep.thresholds.len(), 2 * 2 * 2 * MAX_PATIENCE);
        let gd = rep.rows_for(Method::Gd).next().unwrap();
        let kf = rep.rows_for(Method::Kfold).next().unwrap();
        assert_eq!(gd.train_samples, 60);
        assert_eq!(kf.train_samples, 40);
    }

    #[test]
    fn threshold_file_round_trips_through_analysis() {
        let dir = tempfile::tempdir().unwrap();
        let rep = compare_gd_vs_cv(&cfg(), 2, &[3], Exec::Sequential).unwrap();
        write_compare(dir.path(), &rep).unwrap();
        let back = crate::harness::analyze::read_thresholds(&dir.path().join(THRESHOLDS_FILE)).unwrap();
        assert_eq!(back, rep.thresholds);
        let sens = crate::harness::analyze::threshold_sensitivity(&back);
        assert_eq!(sens.len(), 4);
    }
}
