//! Closed-form quantities behind gradient disparity: Gaussian KL, the
//! two-batch penalty bound, its first-order Taylor form, the measured
//! penalties of a real network, and the Hoeffding tail.

use crate::nn::{zero_one_error, Batch, DenseNet, LossKind};
use crate::{Error, Result};

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    variances: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, variances {}",
                mean.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Precondition("variances must be positive".into()));
        }
        Ok(GaussianDiag { mean, variances })
    }

    /// `N(mean, σ²I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        GaussianDiag::new(mean, vec![sigma * sigma; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// `KL(n1 ‖ n2) = ½(tr(Σ2⁻¹Σ1) − d + (μ2−μ1)ᵀΣ2⁻¹(μ2−μ1) + ln(det Σ2 / det Σ1))`.
pub fn kl_gaussian(n1: &GaussianDiag, n2: &GaussianDiag) -> Result<f64> {
    if n1.dim() != n2.dim() {
        return Err(Error::Shape(format!(
            "dimensions differ: {} vs {}",
            n1.dim(),
            n2.dim()
        )));
    }
    let mut trace = 0.0;
    let mut maha = 0.0;
    let mut log_det = 0.0;
    for i in 0..n1.dim() {
        let (v1, v2) = (n1.variances[i], n2.variances[i]);
        let dm = n2.mean[i] - n1.mean[i];
        trace += v1 / v2;
        maha += dm * dm / v2;
        log_det += v2.ln() - v1.ln();
    }
    let kl = 0.5 * (trace - n1.dim() as f64 + maha + log_det);
    Ok(kl.max(0.0))
}

/// `KL(Q1 ‖ Q2) = ½(γ²/σ²)‖g1 − g2‖²` for `Q_i = N(w − γ g_i, σ²I)`.
pub fn kl_sgd_posteriors(lr: f64, g1: &[f64], g2: &[f64], sigma: f64) -> Result<f64> {
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
    let sq: f64 = g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * lr * lr / (sigma * sigma) * sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub m1: usize,
    pub m2: usize,
    pub delta: f64,
    /// `KL(Q1 ‖ Q2)`
    pub kl12: f64,
    /// `KL(Q2 ‖ Q1)`
    pub kl21: f64,
}

/// Upper bound on `E[R1] + E[R2]` holding with probability `1 − δ`:
/// `√((2 KL21 + 2 ln(2 m2/δ))/(m2 − 2)) + √((2 KL12 + 2 ln(2 m1/δ))/(m1 − 2))`.
pub fn penalty_bound(b: &BoundInputs) -> Result<f64> {
    if b.m1 <= 2 || b.m2 <= 2 {
        return Err(Error::Precondition(format!(
            "batch sizes must exceed 2, got m1={}, m2={}",
            b.m1, b.m2
        )));
    }
    if !(b.delta > 0.0 && b.delta <= 1.0) {
        return Err(Error::Precondition(format!("delta must be in (0,1], got {}", b.delta)));
    }
    if !(b.kl12 >= 0.0 && b.kl21 >= 0.0) {
        return Err(Error::Precondition("KL terms must be nonnegative".into()));
    }
    let term = |kl: f64, m: usize| {
        let m = m as f64;
        ((2.0 * kl + 2.0 * (2.0 * m / b.delta).ln()) / (m - 2.0)).sqrt()
    };
    Ok(term(b.kl21, b.m2) + term(b.kl12, b.m1))
}

/// First-order approximation of `R1 + R2`: `γ‖g1 − g2‖²`.
pub fn taylor_penalty(lr: f64, g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    Ok(lr * g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Penalties measured by actually taking the two candidate steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    /// `L_{S1}(w2) − L_{S1}(w1)` on the surrogate loss.
    pub r1: f64,
    /// `L_{S2}(w1) − L_{S2}(w2)` on the surrogate loss.
    pub r2: f64,
    /// Same gaps measured with the 0-1 loss.
    pub r1_01: f64,
    pub r2_01: f64,
}

/// From the current parameters `w`, forms `w_i = w − γ g_i` for each batch
/// and measures how much worse each batch does under the other's update.
pub fn empirical_penalties(
    net: &DenseNet,
    batch1: &Batch,
    batch2: &Batch,
    lr: f64,
    kind: LossKind,
) -> Result<Penalties> {
    let (_, g1) = net.loss_and_grad(batch1, kind)?;
    let (_, g2) = net.loss_and_grad(batch2, kind)?;
    let step = |g: &[f64]| -> Result<DenseNet> {
        let w: Vec<f64> = net.params().iter().zip(g).map(|(w, g)| w - lr * g).collect();
        net.with_params(&w)
    };
    let net1 = step(&g1)?;
    let net2 = step(&g2)?;
    let eval = |n: &DenseNet, b: &Batch| -> Result<(f64, f64)> {
        let logits = n.forward(&b.inputs)?.into_logits();
        let losses = crate::nn::per_sample_losses(&logits, &b.labels, kind)?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((loss, zero_one_error(&logits, &b.labels)))
    };
    let (l1_w1, e1_w1) = eval(&net1, batch1)?;
    let (l1_w2, e1_w2) = eval(&net2, batch1)?;
    let (l2_w1, e2_w1) = eval(&net1, batch2)?;
    let (l2_w2, e2_w2) = eval(&net2, batch2)?;
    Ok(Penalties {
        r1: l1_w2 - l1_w1,
        r2: l2_w1 - l2_w2,
        r1_01: e1_w2 - e1_w1,
        r2_01: e2_w1 - e2_w2,
    })
}

/// `P(mean − E[mean] ≥ t) ≤ exp(−2 n t² / (b − a)²)` for `n` independent
/// variables bounded in `[a, b]`.
pub fn hoeffding_tail(n: usize, t: f64, a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Err(Error::Precondition(format!("need b > a, got [{a}, {b}]")));
    }
    if n == 0 || t < 0.0 {
        return Err(Error::Precondition(format!("need n >= 1 and t >= 0, got n={n}, t={t}")));
    }
    let w = b - a;
    Ok((-2.0 * n as f64 * t * t / (w * w)).exp())
}
