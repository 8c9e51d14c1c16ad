//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! noise = 0.5                    # fraction of training labels redrawn
//! output_dir = "out"
//! warmup_epochs = 3              # analysis only
//!
//! [dataset]
//! source = "blobs"               # blobs | mnist | cifar10
//! train_size = 512
//! test_size = 1000
//! val_size = 0                   # > 0 enables val loss and train-val GD
//! features = 20                  # blobs only
//! classes = 4                    # blobs only
//! spread = 1.0                   # blobs only
//! # mnist: train_images, train_labels, test_images, test_labels
//! # cifar10: train_files = [...], test_files = [...]
//!
//! [model]
//! hidden = [64]                  # hidden widths; input/output sizes come from the data
//! init = "he_normal"             # he_normal | xavier_uniform
//! loss = "cross_entropy"         # cross_entropy | mean_square
//! hidden_activation = "relu"     # relu | identity
//!
//! [optimizer]
//! kind = "sgd"                   # sgd | momentum | adagrad | adadelta | rmsprop | adam
//! lr = 0.01
//!
//! [training]
//! batch_size = 128
//! max_epochs = 50
//! train_loss_threshold = 0.01    # set to 0 to disable
//!
//! [metrics]
//! s = 5
//! rescale = "std"                # none | std | min_max
//! source = "train_train"         # train_train | train_val
//! enabled = true
//!
//! [stopping]
//! monitor = "gd"                 # gd | gd_norm | grad_var | val_loss | test_loss | train_loss
//! patience = 5
//! kind = "t1"                    # t1 (any increases) | t2 (consecutive)
//! terminal = false               # end the run when the policy fires
//!
//! [crossval]
//! k = 5
//!
//! [sweep]
//! axis = "noise"                 # noise | train_size | batch_size | width
//! values = [0.0, 0.5]
//! seeds = [1, 2, 3]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricConfig, MetricSource};
use crate::nn::{Activation, InitKind, LossKind};
use crate::optim::OptimizerSpec;
use crate::stopping::{PatiencePolicy, ThresholdKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    pub val_size: usize,
    pub features: usize,
    pub classes: usize,
    pub spread: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Blobs,
            train_size: 1280,
            test_size: 1000,
            val_size: 0,
            features: 20,
            classes: 4,
            spread: 1.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_files: Vec::new(),
            test_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub init: InitKind,
    pub loss: LossKind,
    pub hidden_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            init: InitKind::HeNormal,
            loss: LossKind::CrossEntropy,
            hidden_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the full training loss falls below this; `0` disables it.
    pub train_loss_threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            max_epochs: 50,
            train_loss_threshold: 0.01,
        }
    }
}

/// Epoch-level series a stopping controller can watch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Gd,
    GdNorm,
    GradVar,
    ValLoss,
    TestLoss,
    TrainLoss,
}

impl Monitor {
    pub const ALL: [Monitor; 6] = [
        Monitor::Gd,
        Monitor::GdNorm,
        Monitor::GradVar,
        Monitor::ValLoss,
        Monitor::TestLoss,
        Monitor::TrainLoss,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Monitor::Gd => "gd",
            Monitor::GdNorm => "gd_norm",
            Monitor::GradVar => "grad_var",
            Monitor::ValLoss => "val_loss",
            Monitor::TestLoss => "test_loss",
            Monitor::TrainLoss => "train_loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    pub monitor: Monitor,
    pub patience: usize,
    pub kind: ThresholdKind,
    pub terminal: bool,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            monitor: Monitor::Gd,
            patience: 5,
            kind: ThresholdKind::AnyIncrease,
            terminal: false,
        }
    }
}

impl StoppingConfig {
    pub fn policy(&self) -> Result<PatiencePolicy> {
        PatiencePolicy::new(self.patience, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Noise,
    TrainSize,
    BatchSize,
    Width,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::TrainSize => "train_size",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Width => "width",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub noise: f64,
    pub output_dir: PathBuf,
    pub warmup_epochs: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub training: TrainingConfig,
    pub metrics: MetricConfig,
    pub stopping: StoppingConfig,
    pub crossval: CrossvalConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            noise: 0.0,
            output_dir: PathBuf::from("out"),
            warmup_epochs: 3,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerSpec::default(),
            training: TrainingConfig::default(),
            metrics: MetricConfig::default(),
            stopping: StoppingConfig::default(),
            crossval: CrossvalConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative data paths are resolved against the config file
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            let ds = &mut cfg.dataset;
            for p in [
                &mut ds.train_images,
                &mut ds.train_labels,
                &mut ds.test_images,
                &mut ds.test_labels,
            ]
            .into_iter()
            .flatten()
            {
                fix(p);
            }
            ds.train_files.iter_mut().for_each(fix);
            ds.test_files.iter_mut().for_each(fix);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0,1], got {}", self.noise));
        }
        let ds = &self.dataset;
        if ds.train_size == 0 || ds.test_size == 0 {
            return bad("train_size and test_size must be >= 1".into());
        }
        if ds.source == DataSource::Blobs && ds.classes < 2 {
            return bad("blobs need at least 2 classes".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if self.training.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.training.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.training.train_loss_threshold >= 0.0) {
            return bad("train_loss_threshold must be >= 0".into());
        }
        self.metrics.validate()?;
        if self.metrics.source == MetricSource::TrainVal && ds.val_size == 0 {
            return bad("train_val metrics need dataset.val_size > 0".into());
        }
        if self.stopping.monitor == Monitor::ValLoss && ds.val_size == 0 {
            return bad("val_loss monitor needs dataset.val_size > 0".into());
        }
        self.stopping.policy()?;
        self.optimizer.build(1)?;
        if self.crossval.k < 2 {
            return bad(format!("crossval.k must be >= 2, got {}", self.crossval.k));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return bad("sweep.values must be non-empty".into());
            }
        }
        Ok(())
    }

    /// Full layer sizes for a dataset with `features` inputs and `classes` outputs.
    pub fn layer_sizes(&self, features: usize, classes: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.model.hidden.len() + 2);
        sizes.push(features);
        sizes.extend_from_slice(&self.model.hidden);
        sizes.push(classes);
        sizes
    }
}
