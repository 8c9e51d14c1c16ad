//! Instrumented training loop.

use std::time::Instant;

use crate::data::{self, Dataset, NoiseSpec};
use crate::harness::config::{DataSource, ExperimentConfig, Monitor};
use crate::metrics::{self, GradientStats, MetricRecord};
use crate::nn::{DenseNet, InitScheme};
use crate::par::Exec;
use crate::rng::{self, tags};
use crate::stopping::{Decision, PatiencePolicy, StopState, ThresholdKind};
use crate::{Error, Result};

/// Training, optional validation, and test data for one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

/// Builds the datasets described by `cfg`.
///
/// The training and validation samples are drawn from one pool, which is the
/// only part that receives label noise. The test set is always clean.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = &cfg.dataset;
    let pool_size = ds.train_size + ds.val_size;
    let (pool, test) = match ds.source {
        DataSource::Blobs => {
            let pool = data::gen_synthetic_blobs(pool_size, ds.features, ds.classes, ds.spread, cfg.seed)?;
            let test_seed = rng::derive(cfg.seed, tags::SPLIT);
            let test = data::gen_synthetic_blobs(ds.test_size, ds.features, ds.classes, ds.spread, test_seed)?;
            (pool, test)
        }
        DataSource::Mnist => {
            let need = |p: &Option<std::path::PathBuf>, what: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("mnist source needs dataset.{what}")))
            };
            let train = data::load_mnist_idx(&need(&ds.train_images, "train_images")?, &need(&ds.train_labels, "train_labels")?)?;
            let test = data::load_mnist_idx(&need(&ds.test_images, "test_images")?, &need(&ds.test_labels, "test_labels")?)?;
            (sample_rows(&train, pool_size, cfg.seed)?, head_rows(&test, ds.test_size)?)
        }
        DataSource::Cifar10 => {
            if ds.train_files.is_empty() || ds.test_files.is_empty() {
                return Err(Error::Config("cifar10 source needs dataset.train_files and dataset.test_files".into()));
            }
            let train = data::load_cifar10_bin(&ds.train_files)?;
            let test = data::load_cifar10_bin(&ds.test_files)?;
            (sample_rows(&train, pool_size, cfg.seed)?, head_rows(&test, ds.test_size)?)
        }
    };
    let pool = data::inject_label_noise(
        &pool,
        NoiseSpec {
            fraction: cfg.noise,
            seed: cfg.seed,
        },
    )?;
    let train_idx: Vec<usize> = (0..ds.train_size).collect();
    let train = pool.subset(&train_idx)?;
    let val = if ds.val_size > 0 {
        let val_idx: Vec<usize> = (ds.train_size..pool_size).collect();
        Some(pool.subset(&val_idx)?)
    } else {
        None
    };
    Ok(Splits { train, val, test })
}

fn sample_rows(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Config(format!(
            "requested {n} training samples but {} are available",
            ds.len()
        )));
    }
    let perm = data::epoch_permutation(ds.len(), rng::derive(seed, tags::SPLIT), 0);
    ds.subset(&perm[..n])
}

fn head_rows(ds: &Dataset, n: usize) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Config(format!(
            "requested {n} test samples but {} are available",
            ds.len()
        )));
    }
    ds.subset(&(0..n).collect::<Vec<_>>())
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxEpochs,
    /// The configured stopping policy fired and was marked terminal.
    Policy(usize),
    TrainLoss(usize),
    /// A non-finite loss, gradient or parameter appeared during this epoch.
    /// Records stop at the previous epoch.
    Diverged(usize),
}

/// Epoch at which a patience policy fired on one monitored series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopEvent {
    pub monitor: Monitor,
    pub kind: ThresholdKind,
    pub patience: usize,
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// One record per completed epoch, epochs `1..=n`.
    pub records: Vec<MetricRecord>,
    /// Configured patience, both kinds, on every monitor with data.
    pub stops: Vec<StopEvent>,
    pub termination: Termination,
    /// Time spent on updates, metric gradients and validation per epoch.
    /// Train/test evaluation is excluded.
    pub epoch_seconds: Vec<f64>,
    pub param_count: usize,
    pub train_samples: usize,
    pub monitor: Monitor,
    pub policy: PatiencePolicy,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        matches!(self.termination, Termination::Diverged(_))
    }

    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn record(&self, epoch: usize) -> Option<&MetricRecord> {
        epoch.checked_sub(1).and_then(|i| self.records.get(i))
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn series(&self, monitor: Monitor) -> Vec<Option<f64>> {
        self.records.iter().map(|r| monitor_value(r, monitor)).collect()
    }

    pub fn stop_epoch(&self, monitor: Monitor, kind: ThresholdKind) -> Option<usize> {
        self.stops
            .iter()
            .find(|s| s.monitor == monitor && s.kind == kind)
            .and_then(|s| s.epoch)
    }

    /// Stop epoch of the configured monitor and policy, if it fired.
    pub fn configured_stop(&self) -> Option<usize> {
        self.stop_epoch(self.monitor, self.policy.kind)
    }

    /// Record at the configured stop epoch, or the last record if the
    /// policy never fired.
    pub fn at_stop(&self) -> Option<&MetricRecord> {
        self.configured_stop()
            .and_then(|e| self.record(e))
            .or_else(|| self.last())
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }
}

pub fn monitor_value(r: &MetricRecord, monitor: Monitor) -> Option<f64> {
    match monitor {
        Monitor::Gd => r.gd,
        Monitor::GdNorm => r.gd_norm,
        Monitor::GradVar => r.grad_var,
        Monitor::ValLoss => r.val_loss,
        Monitor::TestLoss => Some(r.test_loss),
        Monitor::TrainLoss => Some(r.train_loss),
    }
}

/// Like [`PatiencePolicy::stop_epoch`] but skips epochs without a value.
pub fn sparse_stop_epoch(policy: &PatiencePolicy, series: &[Option<f64>]) -> Option<usize> {
    let mut state = StopState::default();
    for (i, v) in series.iter().enumerate() {
        if let Some(v) = *v {
            if state.observe(policy, i + 1, v) == Decision::Stop {
                return state.stopped_at;
            }
        }
    }
    None
}

/// Prepares the data for `cfg` and trains on it.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    train_on(cfg, &splits, Exec::default())
}

struct EpochOutput {
    stats: Option<GradientStats>,
    train_val: Option<GradientStats>,
    degenerate: usize,
    val: Option<(f64, f64)>,
}

/// Trains a freshly initialised network on `splits.train`.
///
/// `exec` only affects the metric computations inside an epoch; the result
/// is identical for either strategy.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits, exec: Exec) -> Result<RunResult> {
    let train = &splits.train;
    let sizes = cfg.layer_sizes(train.features(), train.classes);
    let init = InitScheme::new(cfg.model.init, rng::derive(cfg.seed, tags::INIT));
    let mut net = DenseNet::init_with_hidden(&sizes, init, cfg.model.hidden_activation)?;
    let d = net.param_count();
    let mut opt = cfg.optimizer.build(d)?;
    let loss = cfg.model.loss;
    let policy = cfg.stopping.policy()?;
    let mut controller = StopState::default();

    let mut records = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut termination = Termination::MaxEpochs;

    for epoch in 1..=cfg.training.max_epochs {
        let started = Instant::now();
        let out = match run_epoch(cfg, splits, &mut net, &mut opt, exec, epoch) {
            Ok(out) => out,
            Err(Error::Numerical(_)) => {
                termination = Termination::Diverged(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        epoch_seconds.push(started.elapsed().as_secs_f64());

        let evals = net
            .evaluate(&train.inputs, &train.labels, loss)
            .and_then(|tr| Ok((tr, net.evaluate(&splits.test.inputs, &splits.test.labels, loss)?)));
        let ((train_loss, train_err), (test_loss, test_err)) = match evals {
            Ok(v) if v.0 .0.is_finite() && v.1 .0.is_finite() => v,
            Ok(_) | Err(Error::Numerical(_)) => {
                epoch_seconds.pop();
                termination = Termination::Diverged(epoch);
                break;
            }
            Err(e) => return Err(e),
        };

        let stats = out.stats;
        let record = MetricRecord {
            epoch,
            train_loss,
            test_loss,
            train_err,
            test_err,
            val_loss: out.val.map(|v| v.0),
            val_err: out.val.map(|v| v.1),
            gd: stats.map(|s| s.gd),
            gd_norm: stats.map(|s| s.gd_norm),
            grad_var: stats.map(|s| s.variance),
            cos: stats.and_then(|s| s.cosine),
            inner: stats.map(|s| s.inner),
            sign: stats.map(|s| s.sign),
            train_val: out.train_val,
            degenerate_batches: out.degenerate,
        };
        let watched = monitor_value(&record, cfg.stopping.monitor);
        records.push(record);

        if let Some(v) = watched {
            if controller.observe(&policy, epoch, v) == Decision::Stop && cfg.stopping.terminal {
                termination = Termination::Policy(epoch);
                break;
            }
        }
        let threshold = cfg.training.train_loss_threshold;
        if threshold > 0.0 && train_loss < threshold {
            termination = Termination::TrainLoss(epoch);
            break;
        }
    }

    let mut result = RunResult {
        records,
        stops: Vec::new(),
        termination,
        epoch_seconds,
        param_count: d,
        train_samples: train.len(),
        monitor: cfg.stopping.monitor,
        policy,
    };
    for monitor in Monitor::ALL {
        let series = result.series(monitor);
        if series.iter().all(Option::is_none) {
            continue;
        }
        for kind in [ThresholdKind::AnyIncrease, ThresholdKind::ConsecutiveIncrease] {
            let p = PatiencePolicy::new(policy.patience, kind)?;
            result.stops.push(StopEvent {
                monitor,
                kind,
                patience: policy.patience,
                epoch: sparse_stop_epoch(&p, &series),
            });
        }
    }
    Ok(result)
}

fn run_epoch(
    cfg: &ExperimentConfig,
    splits: &Splits,
    net: &mut DenseNet,
    opt: &mut crate::optim::OptimizerState,
    exec: Exec,
    epoch: usize,
) -> Result<EpochOutput> {
    let loss = cfg.model.loss;
    let batches = data::epoch_batches(&splits.train, cfg.training.batch_size, cfg.seed, epoch)?;
    for batch in &batches {
        let (l, grad) = net.loss_and_grad(batch, loss)?;
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
        }
        opt.step(net.params_mut(), &grad)?;
    }

    let mut out = EpochOutput {
        stats: None,
        train_val: None,
        degenerate: 0,
        val: None,
    };
    let mc = &cfg.metrics;
    // Metric batches are the first s of this epoch's permutation, re-used
    // with the post-epoch parameters. Fewer than two batches gives no pairs.
    let s = mc.s.min(batches.len());
    if mc.enabled && s >= 2 {
        let tr = metrics::metric_gradients_with(exec, net, &batches[..s], mc.rescale, loss)?;
        out.stats = Some(metrics::gradient_stats(exec, &tr.grads)?);
        out.degenerate = tr.degenerate;
        if let Some(val) = &splits.val {
            let vb = data::epoch_batches(
                val,
                cfg.training.batch_size,
                rng::derive(cfg.seed, tags::VAL_BATCHES),
                epoch,
            )?;
            let sv = mc.s.min(vb.len());
            let vg = metrics::metric_gradients_with(exec, net, &vb[..sv], mc.rescale, loss)?;
            out.train_val = Some(metrics::cross_gradient_stats(exec, &tr.grads, &vg.grads)?);
            out.degenerate += vg.degenerate;
        }
    }
    if let Some(val) = &splits.val {
        let v = net.evaluate(&val.inputs, &val.labels, loss)?;
        if !v.0.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        out.val = Some(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.train_size = 96;
        cfg.dataset.test_size = 64;
        cfg.dataset.features = 6;
        cfg.dataset.classes = 3;
        cfg.model.hidden = vec![8];
        cfg.training.batch_size = 16;
        cfg.training.max_epochs = 4;
        cfg.training.train_loss_threshold = 0.0;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn one_epoch_gives_one_record() {
        let mut cfg = small();
        cfg.training.max_epochs = 1;
        let r = run_training(&cfg).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].epoch, 1);
        assert_eq!(r.termination, Termination::MaxEpochs);
        assert!(r.records[0].gd.unwrap() > 0.0);
    }

    #[test]
    fn records_are_contiguous_and_deterministic() {
        let cfg = small();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        for (i, r) in a.records.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
        }
    }

    #[test]
    fn metrics_do_not_change_the_trajectory() {
        let cfg = small();
        let mut off = cfg.clone();
        off.metrics.enabled = false;
        let a = run_training(&cfg).unwrap();
        let b = run_training(&off).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.test_err.to_bits(), y.test_err.to_bits());
            assert!(y.gd.is_none());
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut cfg = small();
        cfg.dataset.val_size = 32;
        let splits = prepare_data(&cfg).unwrap();
        let a = train_on(&cfg, &splits, Exec::Sequential).unwrap();
        let b = train_on(&cfg, &splits, Exec::Parallel).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records[0].train_val.is_some());
        assert!(a.records[0].val_loss.is_some());
    }

    #[test]
    fn test_set_is_clean_and_pool_is_noisy() {
        let mut cfg = small();
        cfg.noise = 1.0;
        let noisy = prepare_data(&cfg).unwrap();
        cfg.noise = 0.0;
        let clean = prepare_data(&cfg).unwrap();
        assert_eq!(noisy.test.labels, clean.test.labels);
        assert_ne!(noisy.train.labels, clean.train.labels);
        assert_eq!(noisy.train.inputs, clean.train.inputs);
    }

    #[test]
    fn terminal_policy_ends_the_run() {
        let mut cfg = small();
        cfg.training.max_epochs = 30;
        cfg.stopping.monitor = Monitor::TestLoss;
        cfg.stopping.patience = 1;
        cfg.stopping.terminal = true;
        cfg.optimizer = crate::optim::OptimizerSpec::Sgd { lr: 0.5 };
        cfg.noise = 0.8;
        let r = run_training(&cfg).unwrap();
        if let Termination::Policy(e) = r.termination {
            assert_eq!(r.records.len(), e);
            assert_eq!(r.configured_stop(), Some(e));
        } else {
            // the policy never fired, so every epoch ran
            assert_eq!(r.records.len(), 30);
            assert_eq!(r.configured_stop(), None);
        }
    }

    #[test]
    fn separable_blobs_hit_the_train_loss_threshold() {
        let mut cfg = small();
        cfg.dataset.spread = 0.05;
        cfg.training.max_epochs = 200;
        cfg.training.train_loss_threshold = 0.01;
        cfg.optimizer = crate::optim::OptimizerSpec::Sgd { lr: 0.1 };
        let r = run_training(&cfg).unwrap();
        match r.termination {
            Termination::TrainLoss(e) => {
                assert!(e < 200);
                assert!(r.last().unwrap().train_loss < 0.01);
            }
            other => panic!("expected train-loss stop, got {other:?}"),
        }
    }

    #[test]
    fn huge_learning_rate_is_flagged_as_divergence() {
        let mut cfg = small();
        cfg.optimizer = crate::optim::OptimizerSpec::Sgd { lr: 1e200 };
        cfg.model.loss = crate::nn::LossKind::MeanSquare;
        let r = run_training(&cfg).unwrap();
        assert!(r.diverged(), "{:?}", r.termination);
    }

    #[test]
    fn sparse_stop_skips_missing_values() {
        let p = PatiencePolicy::t1(2).unwrap();
        let s = [Some(1.0), None, Some(2.0), None, Some(3.0)];
        assert_eq!(sparse_stop_epoch(&p, &s), Some(5));
    }
}
