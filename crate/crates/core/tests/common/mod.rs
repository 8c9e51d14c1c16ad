#![allow(dead_code)]

use gd_core::nn::{Batch, DenseNet, InitKind, InitScheme, LossKind, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn random_batch(m: usize, n: usize, k: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..m).map(|_| rng.random_range(0..k)).collect();
    Batch::new(Matrix::new(m, n, data).unwrap(), labels).unwrap()
}

/// Xavier init plus a uniform jitter on every parameter. Zero biases make
/// exact ReLU kinks (preactivation == 0) common, where central differences
/// disagree with any one-sided derivative; the jitter keeps us off them.
pub fn random_net(sizes: &[usize], seed: u64) -> DenseNet {
    let net = DenseNet::init(sizes, InitScheme::new(InitKind::XavierUniform, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let p: Vec<f64> = net.params().iter().map(|w| w + rng.random_range(-0.1..0.1)).collect();
    net.with_params(&p).unwrap()
}

/// Largest relative error between backprop and central differences over
/// `coords` randomly chosen parameters.
pub fn max_fd_error(net: &DenseNet, batch: &Batch, kind: LossKind, coords: usize, h: f64, seed: u64) -> f64 {
    let (_, grad) = net.loss_and_grad(batch, kind).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let d = net.param_count();
    let mut worst: f64 = 0.0;
    let mut p = net.params().to_vec();
    for _ in 0..coords {
        let i = rng.random_range(0..d);
        let orig = p[i];
        p[i] = orig + h;
        let up = net.with_params(&p).unwrap().loss_and_grad(batch, kind).unwrap().0;
        p[i] = orig - h;
        let down = net.with_params(&p).unwrap().loss_and_grad(batch, kind).unwrap().0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], numeric));
    }
    worst
}
