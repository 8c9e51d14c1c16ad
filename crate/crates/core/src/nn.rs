//! Dense feed-forward network with exact backpropagation.
//!
//! Parameters live in one flat buffer so optimizers and gradient metrics can
//! treat the network as a vector `w` of length `d`. Layout, per layer in
//! order: the weight matrix `(out, in)` row-major, then the `out` biases.
//! Gradients use the same layout.

use std::ops::{Deref, DerefMut};

use rand_distr::{Distribution, Normal, Uniform};

use crate::rng;
use crate::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matrix entry at {pos}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides, `a` is `m x k`,
/// `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `U[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`
    XavierUniform,
    /// `N(0, 2/fan_in)`
    HeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        InitScheme { kind, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Squared error against one-hot targets, averaged over the `k` outputs.
    MeanSquare,
}

/// A mini-batch `S_i`: rows of the dataset plus their original indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let indices = (0..labels.len()).collect();
        Ok(Batch {
            inputs,
            labels,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Flattened gradient of a batch loss, same layout as [`DenseNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for GradientVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Activations kept by [`DenseNet::forward`]: `acts[0]` is the input,
/// `acts[l + 1]` is the output of layer `l`, and the last entry the logits.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("cache always holds the input")
    }

    pub fn into_logits(mut self) -> Matrix {
        self.acts.pop().expect("cache always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl DenseNet {
    /// ReLU hidden layers and identity logits.
    pub fn init(sizes: &[usize], scheme: InitScheme) -> Result<Self> {
        Self::init_with_hidden(sizes, scheme, Activation::Relu)
    }

    pub fn init_with_hidden(
        sizes: &[usize],
        scheme: InitScheme,
        hidden: Activation,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layer sizes, got {}",
                sizes.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        let n_layers = sizes.len() - 1;
        let activations = (0..n_layers)
            .map(|l| if l + 1 == n_layers { Activation::Identity } else { hidden })
            .collect();
        let d: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(d);
        let mut rng = rng::rng(scheme.seed);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let count = fan_in * fan_out;
            match scheme.kind {
                InitKind::XavierUniform => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    params.extend((0..count).map(|_| dist.sample(&mut rng)));
                }
                InitKind::HeNormal => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::Config(e.to_string()))?;
                    params.extend((0..count).map(|_| dist.sample(&mut rng)));
                }
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        debug_assert_eq!(params.len(), d);
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            activations,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Total scalar parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Returns a copy with parameters `w`.
    pub fn with_params(&self, params: &[f64]) -> Result<DenseNet> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    /// (weights offset, bias offset, fan_in, fan_out) for each layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_off = offset;
            let b_off = w_off + fan_in * fan_out;
            offset = b_off + fan_out;
            (w_off, b_off, fan_in, fan_out)
        })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match first layer {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let m = inputs.rows();
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(inputs.clone());
        for ((w_off, b_off, fan_in, fan_out), act) in self.layout().zip(&self.activations) {
            let prev = acts.last().unwrap();
            let mut z = Matrix::zeros(m, fan_out);
            let bias = &self.params[b_off..b_off + fan_out];
            for row in z.data.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
            gemm(
                m,
                fan_in,
                fan_out,
                1.0,
                &prev.data,
                (fan_in, 1),
                &self.params[w_off..b_off],
                (1, fan_in),
                1.0,
                &mut z.data,
                (fan_out, 1),
            );
            if *act == Activation::Relu {
                z.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let logits = acts.last().unwrap();
        if logits.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(ForwardCache { acts })
    }

    /// Gradient of the mean per-sample loss with respect to all parameters.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &[usize],
        kind: LossKind,
    ) -> Result<GradientVector> {
        if cache.acts.len() != self.sizes.len()
            || cache
                .acts
                .iter()
                .zip(&self.sizes)
                .any(|(a, &s)| a.cols() != s)
        {
            return Err(Error::Shape("forward cache does not match network".into()));
        }
        let logits = cache.logits();
        let m = logits.rows();
        let mut delta = output_delta(logits, labels, kind)?;
        let mut grad = vec![0.0; self.params.len()];
        let layout: Vec<_> = self.layout().collect();
        for (l, &(w_off, b_off, fan_in, fan_out)) in layout.iter().enumerate().rev() {
            if self.activations[l] == Activation::Relu {
                let out = &cache.acts[l + 1];
                for (d, &a) in delta.data.iter_mut().zip(&out.data) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.acts[l];
            // dW = delta^T * input
            gemm(
                fan_out,
                m,
                fan_in,
                1.0,
                &delta.data,
                (1, fan_out),
                &input.data,
                (fan_in, 1),
                0.0,
                &mut grad[w_off..b_off],
                (fan_in, 1),
            );
            let db = &mut grad[b_off..b_off + fan_out];
            for row in delta.data.chunks_exact(fan_out) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            if l > 0 {
                let mut prev = Matrix::zeros(m, fan_in);
                gemm(
                    m,
                    fan_out,
                    fan_in,
                    1.0,
                    &delta.data,
                    (fan_out, 1),
                    &self.params[w_off..b_off],
                    (fan_in, 1),
                    0.0,
                    &mut prev.data,
                    (fan_in, 1),
                );
                delta = prev;
            }
        }
        Ok(GradientVector(grad))
    }

    /// Mean loss and its gradient on one batch.
    pub fn loss_and_grad(&self, batch: &Batch, kind: LossKind) -> Result<(f64, GradientVector)> {
        let cache = self.forward(&batch.inputs)?;
        let losses = per_sample_losses(cache.logits(), &batch.labels, kind)?;
        let grad = self.backward(&cache, &batch.labels, kind)?;
        Ok((mean(&losses), grad))
    }

    /// Mean loss and 0-1 error over a whole input set, evaluated in chunks.
    pub fn evaluate(&self, inputs: &Matrix, labels: &[usize], kind: LossKind) -> Result<(f64, f64)> {
        const CHUNK: usize = 1024;
        let n = inputs.rows();
        if n == 0 || n != labels.len() {
            return Err(Error::Shape(format!("{n} inputs, {} labels", labels.len())));
        }
        let mut loss_sum = 0.0;
        let mut wrong = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = inputs.select_rows(&idx);
            let cache = self.forward(&chunk)?;
            let ys = &labels[start..end];
            loss_sum += per_sample_losses(cache.logits(), ys, kind)?.iter().sum::<f64>();
            wrong += zero_one_error(cache.logits(), ys) * (end - start) as f64;
            start = end;
        }
        Ok((loss_sum / n as f64, wrong / n as f64))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    Ok(())
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

pub fn per_sample_losses(logits: &Matrix, labels: &[usize], kind: LossKind) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let k = logits.cols();
    let mut scratch = vec![0.0; k];
    let losses = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = logits.row(i);
            match kind {
                LossKind::CrossEntropy => {
                    log_softmax_row(z, &mut scratch);
                    // log-softmax is <= 0 up to rounding
                    (-scratch[y]).max(0.0)
                }
                LossKind::MeanSquare => {
                    z.iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let t = if j == y { 1.0 } else { 0.0 };
                            (v - t) * (v - t)
                        })
                        .sum::<f64>()
                        / k as f64
                }
            }
        })
        .collect();
    Ok(losses)
}

/// d(mean loss)/d(logits).
fn output_delta(logits: &Matrix, labels: &[usize], kind: LossKind) -> Result<Matrix> {
    check_labels(logits, labels)?;
    let (m, k) = (logits.rows(), logits.cols());
    let mut delta = Matrix::zeros(m, k);
    let inv_m = 1.0 / m as f64;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let d = &mut delta.data[i * k..(i + 1) * k];
        match kind {
            LossKind::CrossEntropy => {
                log_softmax_row(z, d);
                for (j, v) in d.iter_mut().enumerate() {
                    let t = if j == y { 1.0 } else { 0.0 };
                    *v = (v.exp() - t) * inv_m;
                }
            }
            LossKind::MeanSquare => {
                for (j, (v, &zj)) in d.iter_mut().zip(z).enumerate() {
                    let t = if j == y { 1.0 } else { 0.0 };
                    *v = 2.0 * (zj - t) / k as f64 * inv_m;
                }
            }
        }
    }
    Ok(delta)
}

/// Fraction of rows whose label logit fails to strictly exceed every other
/// logit. Ties count as errors.
pub fn zero_one_error(logits: &Matrix, labels: &[usize]) -> f64 {
    let m = labels.len().min(logits.rows());
    if m == 0 {
        return 0.0;
    }
    let wrong = (0..m)
        .filter(|&i| {
            let z = logits.row(i);
            let y = labels[i];
            y >= z.len()
                || z
                    .iter()
                    .enumerate()
                    .any(|(j, &v)| j != y && v >= z[y])
        })
        .count();
    wrong as f64 / m as f64
}
