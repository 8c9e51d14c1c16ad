//! k-fold and k⁺-fold cross-validation baselines, and the per-epoch cost model.
//!
//! Fold runs train for the full epoch budget with metrics switched off and
//! the train-loss cutoff disabled, so every fold yields a series of the same
//! length. The stopping controller is applied once to the fold-averaged
//! validation loss.

use serde::Serialize;

use crate::data::kfold_assign;
use crate::harness::config::{ExperimentConfig, Monitor};
use crate::harness::trainer::{prepare_data, train_on, RunResult, Splits};
use crate::par::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CvResult {
    pub k: usize,
    pub folds: Vec<RunResult>,
    /// `val_loss[f][e]`: validation loss of fold `f` after epoch `e + 1`.
    pub val_loss: Vec<Vec<f64>>,
    pub val_err: Vec<Vec<f64>>,
    pub mean_val_loss: Vec<f64>,
    /// Epoch at which the controller fired on `mean_val_loss`.
    pub stop_epoch: Option<usize>,
    pub per_fold_stop: Vec<Option<usize>>,
    /// `(test_loss, test_err)` of each fold's model at the stop epoch, or at
    /// the last epoch when the controller never fired.
    pub test_at_stop: Vec<(f64, f64)>,
}

impl CvResult {
    /// Stop epoch, or the final epoch when the controller never fired.
    pub fn effective_stop(&self) -> usize {
        self.stop_epoch.unwrap_or(self.mean_val_loss.len())
    }

    pub fn mean_test_err(&self) -> f64 {
        mean(self.test_at_stop.iter().map(|t| t.1))
    }

    pub fn mean_test_loss(&self) -> f64 {
        mean(self.test_at_stop.iter().map(|t| t.0))
    }

    /// Sum over folds of the mean per-epoch time, i.e. wall-clock for one
    /// CV epoch when folds run one after another.
    pub fn epoch_seconds(&self) -> f64 {
        self.folds.iter().map(RunResult::mean_epoch_seconds).sum()
    }

    /// Number of samples each fold trained on.
    pub fn fold_train_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(|f| f.train_samples).collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Config used for each fold run.
fn fold_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.metrics.enabled = false;
    c.training.train_loss_threshold = 0.0;
    c.stopping.terminal = false;
    c.stopping.monitor = Monitor::ValLoss;
    c
}

pub fn run_kfold(cfg: &ExperimentConfig, k: usize) -> Result<CvResult> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    run_kfold_on(cfg, k, &splits, Exec::default())
}

/// k-fold CV over `splits.train`. The validation split, if any, is unused.
pub fn run_kfold_on(cfg: &ExperimentConfig, k: usize, splits: &Splits, exec: Exec) -> Result<CvResult> {
    let n = splits.train.len();
    let folds = kfold_assign(n, k, cfg.seed)?;
    let fcfg = fold_config(cfg);
    let policy = cfg.stopping.policy()?;

    let runs = exec.map_range(k, |f| -> Result<RunResult> {
        let fold_splits = Splits {
            train: splits.train.subset(&folds.training_indices(f))?,
            val: Some(splits.train.subset(&folds.validation_indices(f))?),
            test: splits.test.clone(),
        };
        // one fold is single-threaded; parallelism lives across folds
        train_on(&fcfg, &fold_splits, Exec::Sequential)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(f) = runs.iter().position(RunResult::diverged) {
        return Err(Error::Numerical(format!("fold {f} diverged")));
    }

    let val_loss: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| r.records.iter().map(|x| x.val_loss.unwrap_or(f64::NAN)).collect())
        .collect();
    let val_err: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| r.records.iter().map(|x| x.val_err.unwrap_or(f64::NAN)).collect())
        .collect();
    let epochs = val_loss[0].len();
    let mean_val_loss: Vec<f64> = (0..epochs)
        .map(|e| val_loss.iter().map(|s| s[e]).sum::<f64>() / k as f64)
        .collect();
    let stop_epoch = policy.stop_epoch(&mean_val_loss);
    let per_fold_stop = val_loss.iter().map(|s| policy.stop_epoch(s)).collect();
    let at = stop_epoch.unwrap_or(epochs);
    let test_at_stop = runs
        .iter()
        .map(|r| {
            let rec = r.record(at).expect("fold series share one length");
            (rec.test_loss, rec.test_err)
        })
        .collect();

    Ok(CvResult {
        k,
        folds: runs,
        val_loss,
        val_err,
        mean_val_loss,
        stop_epoch,
        per_fold_stop,
        test_at_stop,
    })
}

#[derive(Debug, Clone)]
pub struct KPlusResult {
    pub cv: CvResult,
    /// Epochs the full-data retrain ran for.
    pub epochs: usize,
    /// Set when the CV controller never fired and the epoch cap was used.
    pub fallback: bool,
    pub retrain: RunResult,
    pub test_loss: f64,
    pub test_err: f64,
}

impl KPlusResult {
    pub fn total_runs(&self) -> usize {
        self.cv.folds.len() + 1
    }
}

pub fn run_kplus_fold(cfg: &ExperimentConfig, k: usize) -> Result<KPlusResult> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    let cv = run_kfold_on(cfg, k, &splits, Exec::default())?;
    kplus_from_cv(cfg, cv, &splits)
}

/// Retrains on all of `splits.train` for the CV stop epoch.
pub fn kplus_from_cv(cfg: &ExperimentConfig, cv: CvResult, splits: &Splits) -> Result<KPlusResult> {
    let epochs = cv.effective_stop();
    let mut rcfg = fold_config(cfg);
    rcfg.training.max_epochs = epochs;
    rcfg.stopping.monitor = Monitor::TestLoss;
    let full = Splits {
        train: splits.train.clone(),
        val: None,
        test: splits.test.clone(),
    };
    let retrain = train_on(&rcfg, &full, Exec::Sequential)?;
    if retrain.diverged() {
        return Err(Error::Numerical("k+ retrain diverged".into()));
    }
    let last = retrain.last().expect("at least one epoch");
    Ok(KPlusResult {
        fallback: cv.stop_epoch.is_none(),
        test_loss: last.test_loss,
        test_err: last.test_err,
        epochs,
        cv,
        retrain,
    })
}

/// Timing inputs for one epoch of either method, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    /// One mini-batch gradient.
    pub t1: f64,
    /// One pairwise gradient distance.
    pub t2: f64,
    /// One parameter update.
    pub t3: f64,
    /// Evaluating one batch (validation loss and error).
    pub t4: f64,
    /// Batches per epoch on the full training set.
    pub batches: usize,
    pub k: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochCost {
    pub cv_seconds: f64,
    pub gd_seconds: f64,
}

/// `CV = k((k−1)/k·B(t1+t3) + B/k·t4)` and `GD = B(t1+t3) + s(t1 + (s−1)/2·t2)`.
pub fn epoch_cost(m: &CostModel) -> Result<EpochCost> {
    for (name, t) in [("t1", m.t1), ("t2", m.t2), ("t3", m.t3), ("t4", m.t4)] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("{name} must be a positive time, got {t}")));
        }
    }
    if m.batches == 0 || m.k < 2 {
        return Err(Error::Config(format!(
            "need batches >= 1 and k >= 2, got batches={}, k={}",
            m.batches, m.k
        )));
    }
    let (b, k, s) = (m.batches as f64, m.k as f64, m.s as f64);
    let cv_seconds = k * ((k - 1.0) / k * b * (m.t1 + m.t3) + b / k * m.t4);
    let gd_seconds = b * (m.t1 + m.t3) + s * (m.t1 + (s - 1.0) / 2.0 * m.t2);
    Ok(EpochCost {
        cv_seconds,
        gd_seconds,
    })
}
