//! Parameter update rules and their two-batch KL factors.
//!
//! Each optimizer also knows how far apart the two Gaussian posteriors
//! `N(w_1, σ²I)` and `N(w_2, σ²I)` land when the same step is taken with
//! gradient `g1` instead of `g2`. For SGD and momentum this is exact; for the
//! adaptive methods it is the elementwise upper-bound expression evaluated
//! with the optimizer's current accumulators.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Declarative optimizer choice, as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd {
        #[serde(default = "default_lr")]
        lr: f64,
    },
    Momentum {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_decay")]
        decay: f64,
    },
    Adagrad {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    #[serde(alias = "rmsprop")]
    Adadelta {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_decay() -> f64 {
    DEFAULT_DECAY
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Sgd { lr: DEFAULT_LR }
    }
}

impl OptimizerSpec {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr }
            | OptimizerSpec::Momentum { lr, .. }
            | OptimizerSpec::Adagrad { lr, .. }
            | OptimizerSpec::Adadelta { lr, .. }
            | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    pub fn build(&self, d: usize) -> Result<OptimizerState> {
        let state = match *self {
            OptimizerSpec::Sgd { lr } => OptimizerState::sgd(lr),
            OptimizerSpec::Momentum { lr, decay } => OptimizerState::momentum(lr, decay, d),
            OptimizerSpec::Adagrad { lr, eps } => OptimizerState::adagrad(lr, eps, d),
            OptimizerSpec::Adadelta { lr, decay, eps } => {
                OptimizerState::adadelta(lr, decay, eps, d)
            }
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => OptimizerState::adam(lr, beta1, beta2, eps, d),
        };
        state.validate()?;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    /// `v ← ηv + γg`, `w ← w − v`.
    Momentum {
        lr: f64,
        decay: f64,
        velocity: Vec<f64>,
    },
    /// `G ← G + g²`, `w ← w − γ g / √(G + ε)`.
    Adagrad {
        lr: f64,
        eps: f64,
        accum: Vec<f64>,
    },
    /// `v ← ηv + (1−η)g²`, `w ← w − γ g / √(v + ε)`. This is the RMSProp form.
    Adadelta {
        lr: f64,
        decay: f64,
        eps: f64,
        sq_avg: Vec<f64>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        OptimizerState::Sgd { lr }
    }

    pub fn momentum(lr: f64, decay: f64, d: usize) -> Self {
        OptimizerState::Momentum {
            lr,
            decay,
            velocity: vec![0.0; d],
        }
    }

    pub fn adagrad(lr: f64, eps: f64, d: usize) -> Self {
        OptimizerState::Adagrad {
            lr,
            eps,
            accum: vec![0.0; d],
        }
    }

    pub fn adadelta(lr: f64, decay: f64, eps: f64, d: usize) -> Self {
        OptimizerState::Adadelta {
            lr,
            decay,
            eps,
            sq_avg: vec![0.0; d],
        }
    }

    /// Same update as [`OptimizerState::adadelta`].
    pub fn rmsprop(lr: f64, decay: f64, eps: f64, d: usize) -> Self {
        Self::adadelta(lr, decay, eps, d)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64, d: usize) -> Self {
        OptimizerState::Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerState::Sgd { lr }
            | OptimizerState::Momentum { lr, .. }
            | OptimizerState::Adagrad { lr, .. }
            | OptimizerState::Adadelta { lr, .. }
            | OptimizerState::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1), got {x}")))
            }
        };
        let positive = |name: &str, x: f64| {
            if x > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {x}")))
            }
        };
        match self {
            OptimizerState::Sgd { .. } => Ok(()),
            OptimizerState::Momentum { decay, .. } => unit("momentum decay", *decay),
            OptimizerState::Adagrad { eps, .. } => positive("eps", *eps),
            OptimizerState::Adadelta { decay, eps, .. } => {
                unit("decay", *decay)?;
                positive("eps", *eps)
            }
            OptimizerState::Adam {
                beta1, beta2, eps, ..
            } => {
                unit("beta1", *beta1)?;
                unit("beta2", *beta2)?;
                positive("eps", *eps)
            }
        }
    }

    fn state_len(&self) -> Option<usize> {
        match self {
            OptimizerState::Sgd { .. } => None,
            OptimizerState::Momentum { velocity, .. } => Some(velocity.len()),
            OptimizerState::Adagrad { accum, .. } => Some(accum.len()),
            OptimizerState::Adadelta { sq_avg, .. } => Some(sq_avg.len()),
            OptimizerState::Adam { m, .. } => Some(m.len()),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        match self.state_len() {
            Some(d) if d != n => Err(Error::Shape(format!(
                "optimizer state has length {d}, vector has {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradient entries",
                params.len(),
                grad.len()
            )));
        }
        self.check_len(params.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        match self {
            OptimizerState::Sgd { lr } => {
                for (w, g) in params.iter_mut().zip(grad) {
                    *w -= *lr * g;
                }
            }
            OptimizerState::Momentum {
                lr,
                decay,
                velocity,
            } => {
                for ((w, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = *decay * *v + *lr * g;
                    *w -= *v;
                }
            }
            OptimizerState::Adagrad { lr, eps, accum } => {
                for ((w, g), acc) in params.iter_mut().zip(grad).zip(accum.iter_mut()) {
                    *acc += g * g;
                    *w -= *lr * g / (*acc + *eps).sqrt();
                }
            }
            OptimizerState::Adadelta {
                lr,
                decay,
                eps,
                sq_avg,
            } => {
                for ((w, g), s) in params.iter_mut().zip(grad).zip(sq_avg.iter_mut()) {
                    *s = *decay * *s + (1.0 - *decay) * g * g;
                    *w -= *lr * g / (*s + *eps).sqrt();
                }
            }
            OptimizerState::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powf(*t as f64);
                let c2 = 1.0 - beta2.powf(*t as f64);
                for (((w, g), mi), vi) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }

    /// KL between the posteriors reached by stepping with `g1` versus `g2`.
    ///
    /// SGD and momentum: `½(γ²/σ²)‖g1−g2‖²` (exact). Adagrad:
    /// `½(γ²/σ²)‖(g1−g2)/(G+ε)‖²`. Adadelta: same with `v` in place of `G`.
    /// Adam: `½(γ²/σ²)·(1−β1)/(1−β1ᵗ)·‖(g1−g2)/(√v̂+ε)‖²`, which needs `t ≥ 1`.
    pub fn kl_bound_factor(&self, g1: &[f64], g2: &[f64], sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::Precondition(format!("sigma must be > 0, got {sigma}")));
        }
        if g1.len() != g2.len() {
            return Err(Error::Shape(format!(
                "gradient lengths differ: {} vs {}",
                g1.len(),
                g2.len()
            )));
        }
        self.check_len(g1.len())?;
        let lr = self.lr();
        let pre = 0.5 * lr * lr / (sigma * sigma);
        let weighted = |denom: &dyn Fn(usize) -> f64| -> f64 {
            g1.iter()
                .zip(g2)
                .enumerate()
                .map(|(i, (a, b))| {
                    let r = (a - b) / denom(i);
                    r * r
                })
                .sum()
        };
        let value = match self {
            OptimizerState::Sgd { .. } | OptimizerState::Momentum { .. } => {
                pre * weighted(&|_| 1.0)
            }
            OptimizerState::Adagrad { eps, accum, .. } => pre * weighted(&|i| accum[i] + eps),
            OptimizerState::Adadelta { eps, sq_avg, .. } => pre * weighted(&|i| sq_avg[i] + eps),
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                v,
                t,
                ..
            } => {
                if *t == 0 {
                    return Err(Error::Precondition(
                        "Adam KL factor needs at least one step (t >= 1)".into(),
                    ));
                }
                let tf = *t as f64;
                let c2 = 1.0 - beta2.powf(tf);
                let bias = (1.0 - beta1) / (1.0 - beta1.powf(tf));
                pre * bias * weighted(&|i| (v[i] / c2).sqrt() + eps)
            }
        };
        Ok(value)
    }
}
