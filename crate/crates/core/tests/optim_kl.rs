use gd_core::optim::{OptimizerSpec, OptimizerState};
use gd_core::theory::{kl_gaussian, kl_sgd_posteriors, GaussianDiag};
use proptest::prelude::*;

fn grads(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, d), prop::collection::vec(-3.0f64..3.0, d))
}

fn warmed(kind: &str, d: usize, g: &[f64]) -> OptimizerState {
    let spec: OptimizerSpec = toml::from_str(&format!("kind = \"{kind}\"\nlr = 0.05")).unwrap();
    let mut st = spec.build(d).unwrap();
    let mut w = vec![0.0; d];
    st.step(&mut w, g).unwrap();
    st
}

proptest! {
    #[test]
    fn kl_factor_is_symmetric_and_scales_with_inverse_sigma_squared(
        (g1, g2) in grads(6),
        sigma in 0.01f64..10.0,
        kind in prop::sample::select(vec!["sgd", "momentum", "adagrad", "adadelta", "adam"]),
    ) {
        let st = warmed(kind, 6, &g1);
        let a = st.kl_bound_factor(&g1, &g2, sigma).unwrap();
        let b = st.kl_bound_factor(&g2, &g1, sigma).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        let half = st.kl_bound_factor(&g1, &g2, sigma / 2.0).unwrap();
        prop_assert!((half - 4.0 * a).abs() <= 1e-9 * (1.0 + half));
        prop_assert!(a >= 0.0);
        prop_assert_eq!(st.kl_bound_factor(&g1, &g1, sigma).unwrap(), 0.0);
    }

    #[test]
    fn sgd_factor_equals_gaussian_kl_of_the_induced_posteriors(
        (g1, g2) in grads(5),
        w in prop::collection::vec(-2.0f64..2.0, 5),
        lr in 1e-4f64..1.0,
        sigma in 0.05f64..5.0,
    ) {
        let st = OptimizerState::sgd(lr);
        let f = st.kl_bound_factor(&g1, &g2, sigma).unwrap();
        let m1: Vec<f64> = w.iter().zip(&g1).map(|(w, g)| w - lr * g).collect();
        let m2: Vec<f64> = w.iter().zip(&g2).map(|(w, g)| w - lr * g).collect();
        let q1 = GaussianDiag::isotropic(m1, sigma).unwrap();
        let q2 = GaussianDiag::isotropic(m2, sigma).unwrap();
        let kl = kl_gaussian(&q1, &q2).unwrap();
        prop_assert!((f - kl).abs() <= 1e-10 * (1.0 + kl));
        prop_assert!((kl_sgd_posteriors(lr, &g1, &g2, sigma).unwrap() - kl).abs() <= 1e-10 * (1.0 + kl));
    }
}

#[test]
fn adam_factor_needs_a_step() {
    let st = OptimizerState::adam(0.01, 0.9, 0.999, 1e-8, 3);
    assert!(st.kl_bound_factor(&[1.0; 3], &[0.0; 3], 1.0).is_err());
}
