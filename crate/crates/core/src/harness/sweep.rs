//! Sweeps over one configuration axis and several seeds.

use std::path::Path;

use crate::harness::analyze::{self, CorrelationRow};
use crate::harness::config::{ExperimentConfig, SweepAxis};
use crate::harness::report::{self, read_numeric_csv, write_run_csv};
use crate::harness::trainer::{prepare_data, train_on, RunResult};
use crate::par::Exec;
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_CORRELATIONS_FILE: &str = "correlations.csv";

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    /// File stem used for this run's CSV.
    pub name: String,
    pub result: RunResult,
}

/// Mean and population std over the seeds of one sweep value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Spread { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub value: f64,
    pub runs: usize,
    pub epochs: Spread,
    /// Per-run mean of D̄ after the warmup epochs.
    pub gd: Option<Spread>,
    pub gd_norm: Option<Spread>,
    pub final_test_loss: Spread,
    pub final_test_err: Spread,
    pub final_train_loss: Spread,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SummaryRow>,
    pub correlations: Vec<CorrelationRow>,
}

impl SweepReport {
    pub fn runs_for(&self, value: f64) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(move |r| r.value == value)
    }
}

/// Copy of `base` with the swept field set to `value`.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let count = || -> Result<usize> {
        if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
            Ok(value as usize)
        } else {
            Err(Error::Config(format!("{} sweep needs positive integers, got {value}", axis.label())))
        }
    };
    match axis {
        SweepAxis::Noise => cfg.noise = value,
        SweepAxis::TrainSize => cfg.dataset.train_size = count()?,
        SweepAxis::BatchSize => cfg.training.batch_size = count()?,
        SweepAxis::Width => {
            let w = count()?;
            if cfg.model.hidden.is_empty() {
                cfg.model.hidden.push(w);
            } else {
                cfg.model.hidden.iter_mut().for_each(|h| *h = w);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_name(axis: SweepAxis, value: f64, seed: u64) -> String {
    format!("{}_{}_seed{}", axis.label(), value, seed)
}

/// Mean of a metric over epochs after `warmup`, or over all epochs when the
/// run was shorter than that.
pub fn post_warmup_mean(series: &[Option<f64>], warmup: usize) -> Option<f64> {
    let pick = |skip: usize| -> Vec<f64> { series.iter().skip(skip).flatten().copied().collect() };
    let mut v = pick(warmup);
    if v.is_empty() {
        v = pick(0);
    }
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every `(value, seed)` combination, writing one CSV per run plus the
/// summary and correlation files into `out` when given.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    exec: Exec,
    out: Option<&Path>,
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = apply_axis(base, axis, value)?;
            cfg.seed = seed;
            jobs.push((value, seed, cfg));
        }
    }
    // runs are independent and single-threaded; only the outer loop is parallel
    let results = exec.try_map(&jobs, |(value, seed, cfg)| -> Result<SweepRun> {
        let splits = prepare_data(cfg)?;
        Ok(SweepRun {
            value: *value,
            seed: *seed,
            name: run_name(axis, *value, *seed),
            result: train_on(cfg, &splits, Exec::Sequential)?,
        })
    })?;
    let mut runs = results;
    runs.sort_by(|a, b| a.name.cmp(&b.name));

    let warmup = base.warmup_epochs;
    let mut summary = Vec::new();
    for &value in values {
        let group: Vec<&SweepRun> = runs.iter().filter(|r| r.value == value).collect();
        let col = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Vec<f64> {
            group.iter().filter_map(|r| f(&r.result)).collect()
        };
        let last = |f: fn(&crate::metrics::MetricRecord) -> f64| col(&|r| r.last().map(f));
        summary.push(SummaryRow {
            value,
            runs: group.len(),
            epochs: Spread::of(&col(&|r| Some(r.epochs() as f64))).expect("non-empty group"),
            gd: Spread::of(&col(&|r| post_warmup_mean(&r.series(super::config::Monitor::Gd), warmup))),
            gd_norm: Spread::of(&col(&|r| {
                post_warmup_mean(&r.series(super::config::Monitor::GdNorm), warmup)
            })),
            final_test_loss: Spread::of(&last(|m| m.test_loss)).unwrap_or(Spread { mean: f64::NAN, std: f64::NAN }),
            final_test_err: Spread::of(&last(|m| m.test_err)).unwrap_or(Spread { mean: f64::NAN, std: f64::NAN }),
            final_train_loss: Spread::of(&last(|m| m.train_loss)).unwrap_or(Spread { mean: f64::NAN, std: f64::NAN }),
        });
    }

    let correlations = match out {
        Some(dir) => {
            for r in &runs {
                write_run_csv(&dir.join(format!("{}.csv", r.name)), &r.result)?;
            }
            // pool from the written files so `analyze` sees exactly the same numbers
            let tables = runs
                .iter()
                .map(|r| Ok((r.name.clone(), read_numeric_csv(&dir.join(format!("{}.csv", r.name)))?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = analyze::pooled_correlations(&tables, &sweep_pairs(axis), warmup);
            write_summary(&dir.join(SUMMARY_FILE), axis, &summary)?;
            analyze::write_correlations(&dir.join(SWEEP_CORRELATIONS_FILE), &rows)?;
            rows
        }
        None => pooled_in_memory(&runs, axis, warmup),
    };

    Ok(SweepReport {
        axis,
        runs,
        summary,
        correlations,
    })
}

/// Widths change `d`, so width sweeps correlate the normalised disparity.
fn sweep_pairs(axis: SweepAxis) -> Vec<(&'static str, &'static str)> {
    let x = if axis == SweepAxis::Width { "gd_norm" } else { "gd" };
    vec![(x, "test_loss"), (x, "test_err")]
}

fn run_column(r: &RunResult, name: &str) -> Vec<Option<f64>> {
    r.records
        .iter()
        .map(|m| match name {
            "epoch" => Some(m.epoch as f64),
            "gd" => m.gd,
            "gd_norm" => m.gd_norm,
            "test_loss" => Some(m.test_loss),
            "test_err" => Some(m.test_err),
            _ => None,
        })
        .collect()
}

fn pooled_in_memory(runs: &[SweepRun], axis: SweepAxis, warmup: usize) -> Vec<CorrelationRow> {
    sweep_pairs(axis)
        .into_iter()
        .map(|(x, y)| {
            let mut acc = (Vec::new(), Vec::new());
            for r in runs {
                let e = run_column(&r.result, "epoch");
                analyze::post_warmup_pairs(&e, &run_column(&r.result, x), &run_column(&r.result, y), warmup, &mut acc);
            }
            CorrelationRow::compute("pooled", x, y, &acc.0, &acc.1)
        })
        .collect()
}

pub fn write_summary(path: &Path, axis: SweepAxis, rows: &[SummaryRow]) -> Result<()> {
    let mut w = report::writer(path)?;
    w.write_record([
        axis.label(),
        "runs",
        "epochs_mean",
        "gd_mean",
        "gd_std",
        "gd_norm_mean",
        "gd_norm_std",
        "test_loss_mean",
        "test_loss_std",
        "test_err_mean",
        "test_err_std",
        "train_loss_mean",
        "train_loss_std",
    ])?;
    let f = report::fmt;
    for r in rows {
        w.write_record([
            f(r.value),
            r.runs.to_string(),
            f(r.epochs.mean),
            report::fmt_opt(r.gd.map(|s| s.mean)),
            report::fmt_opt(r.gd.map(|s| s.std)),
            report::fmt_opt(r.gd_norm.map(|s| s.mean)),
            report::fmt_opt(r.gd_norm.map(|s| s.std)),
            f(r.final_test_loss.mean),
            f(r.final_test_loss.std),
            f(r.final_test_err.mean),
            f(r.final_test_err.std),
            f(r.final_train_loss.mean),
            f(r.final_train_loss.std),
        ])?;
    }
    report::finish(w, path)
}
