//! Gradient disparity and related gradient-similarity statistics.
//!
//! Metric gradients are taken on a re-scaled batch loss. The scale factor
//! (`1/std` or `1/(max−min)` of the per-sample losses) is treated as a
//! constant, so each metric gradient is a scalar multiple of the plain batch
//! gradient. Training itself never sees the re-scaling.

use serde::{Deserialize, Serialize};

use crate::nn::{per_sample_losses, Batch, DenseNet, GradientVector, LossKind};
use crate::par::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    None,
    /// `(1/m) Σ l_i / std(l)` with the population std.
    #[default]
    Std,
    /// `(1/m) Σ (l_i − min l) / (max l − min l)`.
    MinMax,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    #[default]
    TrainTrain,
    TrainVal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Number of batches averaged over.
    pub s: usize,
    pub rescale: RescaleMode,
    pub source: MetricSource,
    pub enabled: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            s: 5,
            rescale: RescaleMode::Std,
            source: MetricSource::TrainTrain,
            enabled: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::Config(format!("metric batch count s must be >= 2, got {}", self.s)));
        }
        Ok(())
    }
}

/// Per-epoch values written to the run CSV. Metric fields are `None` when
/// metrics were not computed for the run (or a statistic was undefined).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub val_loss: Option<f64>,
    pub val_err: Option<f64>,
    /// D̄ over the training batches.
    pub gd: Option<f64>,
    /// D̄ / √d.
    pub gd_norm: Option<f64>,
    pub grad_var: Option<f64>,
    pub cos: Option<f64>,
    pub inner: Option<f64>,
    pub sign: Option<f64>,
    /// Statistics over train × validation batch pairs, when a validation set exists.
    pub train_val: Option<GradientStats>,
    /// Number of metric batches that fell back to the plain loss.
    pub degenerate_batches: usize,
}

/// Scale applied to the batch loss for `mode`.
pub fn rescale_factor(losses: &[f64], mode: RescaleMode) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    match mode {
        RescaleMode::None => Ok(1.0),
        RescaleMode::Std => {
            let m = losses.len() as f64;
            let mean = losses.iter().sum::<f64>() / m;
            let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / m;
            let std = var.sqrt();
            if std > 0.0 {
                Ok(1.0 / std)
            } else {
                Err(Error::DegenerateBatch("per-sample loss std is zero".into()))
            }
        }
        RescaleMode::MinMax => {
            let (min, max) = min_max(losses);
            if max > min {
                Ok(1.0 / (max - min))
            } else {
                Err(Error::DegenerateBatch("per-sample losses are all equal".into()))
            }
        }
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub fn rescaled_batch_loss(losses: &[f64], mode: RescaleMode) -> Result<f64> {
    let factor = rescale_factor(losses, mode)?;
    let m = losses.len() as f64;
    let shift = match mode {
        RescaleMode::MinMax => min_max(losses).0,
        _ => 0.0,
    };
    Ok(losses.iter().map(|l| (l - shift) * factor).sum::<f64>() / m)
}

/// Gradient of the re-scaled loss of one batch. The flag is set when the
/// batch was degenerate and the plain loss gradient was used instead.
pub fn metric_gradient(
    net: &DenseNet,
    batch: &Batch,
    mode: RescaleMode,
    kind: LossKind,
) -> Result<(GradientVector, bool)> {
    let cache = net.forward(&batch.inputs)?;
    let mut grad = net.backward(&cache, &batch.labels, kind)?;
    if mode == RescaleMode::None {
        return Ok((grad, false));
    }
    let losses = per_sample_losses(cache.logits(), &batch.labels, kind)?;
    match rescale_factor(&losses, mode) {
        Ok(factor) => {
            grad.scale(factor);
            Ok((grad, false))
        }
        Err(Error::DegenerateBatch(_)) => Ok((grad, true)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricGradients {
    pub grads: Vec<GradientVector>,
    pub degenerate: usize,
}

pub fn metric_gradients(
    net: &DenseNet,
    batches: &[Batch],
    mode: RescaleMode,
    kind: LossKind,
) -> Result<MetricGradients> {
    metric_gradients_with(Exec::default(), net, batches, mode, kind)
}

pub fn metric_gradients_with(
    exec: Exec,
    net: &DenseNet,
    batches: &[Batch],
    mode: RescaleMode,
    kind: LossKind,
) -> Result<MetricGradients> {
    let out = exec.try_map(batches, |b| metric_gradient(net, b, mode, kind))?;
    let degenerate = out.iter().filter(|(_, d)| *d).count();
    Ok(MetricGradients {
        grads: out.into_iter().map(|(g, _)| g).collect(),
        degenerate,
    })
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `‖g1 − g2‖₂`.
pub fn gradient_disparity(g1: &[f64], g2: &[f64]) -> Result<f64> {
    same_len(g1, g2)?;
    Ok(g1
        .iter()
        .zip(g2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn need_two<G>(gs: &[G]) -> Result<()> {
    if gs.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 gradients, got {}",
            gs.len()
        )));
    }
    Ok(())
}

fn unordered_pairs(s: usize) -> Vec<(usize, usize)> {
    (0..s)
        .flat_map(|i| (i + 1..s).map(move |j| (i, j)))
        .collect()
}

/// D̄: mean of `D_{i,j}` over all ordered pairs `i ≠ j`.
pub fn average_gd<G: AsRef<[f64]> + Sync>(gs: &[G]) -> Result<f64> {
    average_gd_with(Exec::Sequential, gs)
}

pub fn average_gd_with<G: AsRef<[f64]> + Sync>(exec: Exec, gs: &[G]) -> Result<f64> {
    need_two(gs)?;
    let pairs = unordered_pairs(gs.len());
    let ds = exec.try_map(&pairs, |&(i, j)| gradient_disparity(gs[i].as_ref(), gs[j].as_ref()))?;
    Ok(ds.iter().sum::<f64>() / pairs.len() as f64)
}

/// D̃ = D̄ / √d.
pub fn normalized_gd(avg_gd: f64, d: usize) -> f64 {
    avg_gd / (d.max(1) as f64).sqrt()
}

/// Trace of the unbiased sample covariance: `(1/(s−1)) Σ ‖g_i − ḡ‖²`.
pub fn variance_of_gradients<G: AsRef<[f64]>>(gs: &[G]) -> Result<f64> {
    need_two(gs)?;
    let d = gs[0].as_ref().len();
    for g in gs {
        same_len(gs[0].as_ref(), g.as_ref())?;
    }
    let s = gs.len() as f64;
    let mut mean = vec![0.0; d];
    for g in gs {
        for (m, v) in mean.iter_mut().zip(g.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s);
    let total: f64 = gs
        .iter()
        .map(|g| {
            g.as_ref()
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    Ok(total / (s - 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(cosine, inner product, sign of inner product)`.
pub fn cosine_inner_sign(g1: &[f64], g2: &[f64]) -> Result<(f64, f64, f64)> {
    same_len(g1, g2)?;
    let inner = dot(g1, g2);
    let n1 = dot(g1, g1).sqrt();
    let n2 = dot(g2, g2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Precondition("cosine of a zero-norm gradient".into()));
    }
    let cos = (inner / (n1 * n2)).clamp(-1.0, 1.0);
    Ok((cos, inner, sign(inner)))
}

/// Pairwise summary over a set of gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStats {
    pub gd: f64,
    pub gd_norm: f64,
    pub variance: f64,
    /// `None` if any gradient had zero norm.
    pub cosine: Option<f64>,
    pub inner: f64,
    pub sign: f64,
}

struct PairTerms {
    dist: f64,
    inner: f64,
    cos: Option<f64>,
}

fn pair_terms(a: &[f64], b: &[f64]) -> Result<PairTerms> {
    let dist = gradient_disparity(a, b)?;
    let inner = dot(a, b);
    let cos = cosine_inner_sign(a, b).ok().map(|(c, _, _)| c);
    Ok(PairTerms { dist, inner, cos })
}

fn summarise(terms: &[PairTerms], variance: f64, d: usize) -> GradientStats {
    let n = terms.len() as f64;
    let gd = terms.iter().map(|t| t.dist).sum::<f64>() / n;
    let inner = terms.iter().map(|t| t.inner).sum::<f64>() / n;
    let sign_mean = terms.iter().map(|t| sign(t.inner)).sum::<f64>() / n;
    let cosine = terms
        .iter()
        .map(|t| t.cos)
        .sum::<Option<f64>>()
        .map(|c| c / n);
    GradientStats {
        gd,
        gd_norm: normalized_gd(gd, d),
        variance,
        cosine,
        inner,
        sign: sign_mean,
    }
}

/// Means over all pairs within `gs` of distance, cosine, inner product and
/// its sign, plus the gradient variance.
pub fn gradient_stats<G: AsRef<[f64]> + Sync>(exec: Exec, gs: &[G]) -> Result<GradientStats> {
    need_two(gs)?;
    let pairs = unordered_pairs(gs.len());
    let terms = exec.try_map(&pairs, |&(i, j)| pair_terms(gs[i].as_ref(), gs[j].as_ref()))?;
    let variance = variance_of_gradients(gs)?;
    Ok(summarise(&terms, variance, gs[0].as_ref().len()))
}

/// Same statistics over the cross pairs `train[i]` × `val[j]`. The variance
/// is taken over the pooled set.
pub fn cross_gradient_stats<G: AsRef<[f64]> + Sync>(
    exec: Exec,
    train: &[G],
    val: &[G],
) -> Result<GradientStats> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("cross statistics need both sides non-empty".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|i| (0..val.len()).map(move |j| (i, j)))
        .collect();
    let terms = exec.try_map(&pairs, |&(i, j)| pair_terms(train[i].as_ref(), val[j].as_ref()))?;
    let pooled: Vec<&[f64]> = train
        .iter()
        .map(AsRef::as_ref)
        .chain(val.iter().map(AsRef::as_ref))
        .collect();
    let variance = variance_of_gradients(&pooled)?;
    Ok(summarise(&terms, variance, train[0].as_ref().len()))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Precondition("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("series has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InitKind, InitScheme, Matrix};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn random_vecs(s: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::rng(seed);
        (0..s)
            .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn toy_batch(m: usize, seed: u64) -> Batch {
        let mut r = rng::rng(seed);
        let x = Matrix::new(m, 3, (0..3 * m).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        Batch::new(x, (0..m).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn rescaled_losses_by_hand() {
        assert_eq!(rescaled_batch_loss(&[0.7; 4], RescaleMode::None).unwrap(), 0.7);
        let v = rescaled_batch_loss(&[1.0, 2.0, 3.0], RescaleMode::Std).unwrap();
        assert_relative_eq!(v, 2.0 / (2.0f64 / 3.0).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(v, 2.449_489_742_783_178, epsilon = 1e-12);
        let v = rescaled_batch_loss(&[1.0, 2.0, 3.0], RescaleMode::MinMax).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_batches_are_reported() {
        for mode in [RescaleMode::Std, RescaleMode::MinMax] {
            assert!(matches!(
                rescaled_batch_loss(&[2.0, 2.0], mode),
                Err(Error::DegenerateBatch(_))
            ));
            assert!(matches!(
                rescaled_batch_loss(&[2.0], mode),
                Err(Error::DegenerateBatch(_))
            ));
        }
    }

    #[test]
    fn metric_gradient_without_rescaling_is_backward() {
        let net = DenseNet::init(&[3, 4, 3], InitScheme::new(InitKind::HeNormal, 1)).unwrap();
        let b = toy_batch(8, 2);
        let (g, flag) = metric_gradient(&net, &b, RescaleMode::None, LossKind::CrossEntropy).unwrap();
        let (_, plain) = net.loss_and_grad(&b, LossKind::CrossEntropy).unwrap();
        assert!(!flag);
        assert_eq!(g, plain);
    }

    #[test]
    fn std_rescaled_gradient_is_detached_scalar_multiple() {
        let net = DenseNet::init(&[3, 4, 3], InitScheme::new(InitKind::HeNormal, 1)).unwrap();
        let b = toy_batch(8, 3);
        let (g, flag) = metric_gradient(&net, &b, RescaleMode::Std, LossKind::CrossEntropy).unwrap();
        assert!(!flag);
        let cache = net.forward(&b.inputs).unwrap();
        let losses = per_sample_losses(cache.logits(), &b.labels, LossKind::CrossEntropy).unwrap();
        let m = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / m;
        let std = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / m).sqrt();
        let plain = net.backward(&cache, &b.labels, LossKind::CrossEntropy).unwrap();
        for (a, p) in g.iter().zip(plain.iter()) {
            assert_relative_eq!(*a, p / std, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn degenerate_metric_batch_falls_back_to_plain_gradient() {
        let mut net = DenseNet::init(&[3, 3], InitScheme::new(InitKind::HeNormal, 1)).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let b = toy_batch(6, 4);
        let out = metric_gradients(&net, &[b.clone(), b], RescaleMode::Std, LossKind::CrossEntropy)
            .unwrap();
        assert_eq!(out.degenerate, 2);
        assert_eq!(out.grads[0], out.grads[1]);
    }

    #[test]
    fn disparity_basics() {
        assert_eq!(gradient_disparity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gradient_disparity(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(matches!(gradient_disparity(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        let v = random_vecs(2, 10, 5);
        let mut acc = 0.0;
        for i in 0..10 {
            let diff = v[0][i] - v[1][i];
            acc += diff * diff;
        }
        assert_relative_eq!(gradient_disparity(&v[0], &v[1]).unwrap(), acc.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn average_gd_by_enumeration() {
        let v = random_vecs(2, 4, 1);
        assert_relative_eq!(
            average_gd(&v).unwrap(),
            gradient_disparity(&v[0], &v[1]).unwrap(),
            epsilon = 1e-15
        );
        assert_eq!(average_gd(&vec![vec![1.0, -1.0]; 4]).unwrap(), 0.0);
        assert!(average_gd(&random_vecs(1, 3, 0)).is_err());

        let v = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 0.0]];
        // ordered pairs: (0,1)=5 (0,2)=6 (1,0)=5 (1,2)=5 (2,0)=6 (2,1)=5
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    total += d.sqrt();
                }
            }
        }
        assert_relative_eq!(total / 6.0, 32.0 / 6.0, epsilon = 1e-14);
        assert_relative_eq!(average_gd(&v).unwrap(), total / 6.0, epsilon = 1e-14);
    }

    #[test]
    fn normalized_gd_scaling() {
        assert_eq!(normalized_gd(3.0, 1), 3.0);
        assert_eq!(normalized_gd(2.0, 4), 1.0);
        assert_relative_eq!(normalized_gd(2.0, 400), normalized_gd(2.0, 100) / 2.0);
    }

    #[test]
    fn variance_by_hand() {
        assert_eq!(variance_of_gradients(&vec![vec![2.0, 1.0]; 3]).unwrap(), 0.0);
        assert_relative_eq!(
            variance_of_gradients(&[vec![1.0], vec![-1.0]]).unwrap(),
            2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_inner_sign_cases() {
        let g = [1.0, -2.0, 2.0];
        let (c, i, s) = cosine_inner_sign(&g, &g).unwrap();
        assert_relative_eq!(c, 1.0, epsilon = 1e-15);
        assert_eq!((i, s), (9.0, 1.0));
        assert_eq!(cosine_inner_sign(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), (0.0, 0.0, 0.0));
        assert!(cosine_inner_sign(&[0.0, 0.0], &[0.0, 1.0]).is_err());

        let v = random_vecs(2, 12, 8);
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for k in 0..12 {
            ab += v[0][k] * v[1][k];
            aa += v[0][k] * v[0][k];
            bb += v[1][k] * v[1][k];
        }
        let (c, i, s) = cosine_inner_sign(&v[0], &v[1]).unwrap();
        assert_relative_eq!(i, ab, epsilon = 1e-12);
        assert_relative_eq!(c, ab / (aa.sqrt() * bb.sqrt()), epsilon = 1e-12);
        assert_eq!(s, ab.signum());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_relative_eq!(pearson(&x, &y).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson(&x, &neg).unwrap(), -1.0, epsilon = 1e-15);
        // direct formula on a fixed series
        let y = [2.0, 1.0, 4.0, 3.0, 7.0];
        let n = 5.0;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert_relative_eq!(pearson(&x, &y).unwrap(), r, epsilon = 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 5]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn stats_match_individual_functions() {
        let v = random_vecs(5, 30, 3);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let st = gradient_stats(exec, &v).unwrap();
            assert_eq!(st.gd, average_gd(&v).unwrap());
            assert_eq!(st.variance, variance_of_gradients(&v).unwrap());
            assert_eq!(st.gd_norm, normalized_gd(st.gd, 30));
            assert!(st.cosine.unwrap().abs() <= 1.0);
        }
        let cross = cross_gradient_stats(Exec::Sequential, &v[..2], &v[2..]).unwrap();
        let mut total = 0.0;
        for a in &v[..2] {
            for b in &v[2..] {
                total += gradient_disparity(a, b).unwrap();
            }
        }
        assert_relative_eq!(cross.gd, total / 6.0, epsilon = 1e-14);
    }
}
