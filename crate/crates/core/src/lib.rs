//! Gradient disparity as a training-time generalization signal.
//!
//! The crate trains small dense networks from scratch while measuring the
//! pairwise distance between mini-batch gradients (gradient disparity) and a
//! handful of related gradient-similarity statistics. Those series drive
//! patience-based early stopping, which can be compared against k-fold
//! cross-validation on the same data.
//!
//! Module map:
//!
//! - [`nn`]: dense feed-forward network, losses, exact backprop.
//! - [`optim`]: SGD, momentum, Adagrad, Adadelta/RMSProp and Adam, plus the
//!   matching KL factors between the two posteriors induced by two batches.
//! - [`data`]: IDX / CIFAR-10 loaders, synthetic blobs, label noise, folds and
//!   epoch batching.
//! - [`metrics`]: loss re-scaling, gradient disparity, variance, cosine and
//!   inner-product statistics, Pearson correlation.
//! - [`stopping`]: patience controllers and the threshold-sensitivity statistic.
//! - [`crossval`]: k-fold and k⁺-fold baselines and the per-epoch cost model.
//! - [`theory`]: closed-form KL, penalty bound, Taylor penalty and Hoeffding tail.
//! - [`harness`]: config-driven runs, sweeps, comparisons and CSV analysis.
//!
//! Data-parallel loops (metric gradients, folds, sweep runs) go through
//! [`par::Exec`], which uses rayon when the `parallel` feature is enabled and
//! plain iterators otherwise. Results are identical either way.

pub mod crossval;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod rng;
pub mod stopping;
pub mod theory;

pub use error::{Error, Result};
