//! Patience-based early stopping.
//!
//! An increase is a value strictly greater than the immediately previous
//! observation. `AnyIncrease` (t1) stops once `p` increases have been seen
//! since the start; `ConsecutiveIncrease` (t2) stops once `p` of them occur
//! in a row.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    #[serde(alias = "t1")]
    AnyIncrease,
    #[serde(alias = "t2")]
    ConsecutiveIncrease,
}

impl ThresholdKind {
    pub fn label(&self) -> &'static str {
        match self {
            ThresholdKind::AnyIncrease => "t1",
            ThresholdKind::ConsecutiveIncrease => "t2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatiencePolicy {
    pub patience: usize,
    pub kind: ThresholdKind,
}

impl PatiencePolicy {
    pub fn new(patience: usize, kind: ThresholdKind) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(PatiencePolicy { patience, kind })
    }

    pub fn t1(patience: usize) -> Result<Self> {
        Self::new(patience, ThresholdKind::AnyIncrease)
    }

    pub fn t2(patience: usize) -> Result<Self> {
        Self::new(patience, ThresholdKind::ConsecutiveIncrease)
    }

    /// Epoch at which this policy fires on `series`, where `series[i]` is
    /// the value observed at epoch `i + 1`.
    pub fn stop_epoch(&self, series: &[f64]) -> Option<usize> {
        let mut state = StopState::default();
        for (i, &v) in series.iter().enumerate() {
            if state.observe(self, i + 1, v) == Decision::Stop {
                return state.stopped_at;
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopState {
    pub previous: Option<f64>,
    pub increases: usize,
    pub run: usize,
    pub stopped_at: Option<usize>,
}

impl StopState {
    /// Folds one observation into the state. Once stopped, the state is frozen
    /// and every later call returns `Stop`.
    pub fn observe(&mut self, policy: &PatiencePolicy, epoch: usize, value: f64) -> Decision {
        if self.stopped_at.is_some() {
            return Decision::Stop;
        }
        if let Some(prev) = self.previous {
            if value > prev {
                self.increases += 1;
                self.run += 1;
            } else {
                self.run = 0;
            }
        }
        self.previous = Some(value);
        let count = match policy.kind {
            ThresholdKind::AnyIncrease => self.increases,
            ThresholdKind::ConsecutiveIncrease => self.run,
        };
        if count >= policy.patience {
            self.stopped_at = Some(epoch);
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Mean and standard deviation of one outcome across stopping thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub mean: f64,
    pub std: f64,
}

impl SetStats {
    /// Population mean and std of `values`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(SetStats {
            mean,
            std: var.sqrt(),
        })
    }
}

/// `Σ_i std_i / mean_i`; lower means less sensitive to the threshold choice.
pub fn sensitivity(sets: &[SetStats]) -> Result<f64> {
    sets.iter().try_fold(0.0, |acc, s| {
        if s.mean == 0.0 {
            Err(Error::Precondition("set with zero mean".into()))
        } else {
            Ok(acc + s.std / s.mean)
        }
    })
}

/// Index of the earliest minimum.
pub fn oracle_best_epoch(series: &[f64]) -> Result<usize> {
    if series.is_empty() {
        return Err(Error::Precondition("empty series".into()));
    }
    let mut best = 0;
    for (i, &v) in series.iter().enumerate().skip(1) {
        if v < series[best] {
            best = i;
        }
    }
    Ok(best)
}
