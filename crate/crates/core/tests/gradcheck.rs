//! f64 central-finite-difference gradient checks for every layer type.

mod common;

use common::{conv_arch, bn_arch, fixed_batch, gradcheck, mlp_arch, residual_arch};
use prunelab::nn;
use prunelab::store::ParamStore;

#[test]
fn dense_path() {
    let arch = mlp_arch();
    let batch = fixed_batch(&[2, 3, 2, 2], 0.3);
    let max = gradcheck(&arch, 11, &batch, &[0, 2]);
    assert!(max <= common::FD_REL_TOL);
}

#[test]
fn conv_and_pool_path() {
    let arch = conv_arch();
    let batch = fixed_batch(&[2, 2, 8, 8], 0.9);
    gradcheck(&arch, 12, &batch, &[1, 0]);
}

#[test]
fn batchnorm_path() {
    let arch = bn_arch();
    let batch = fixed_batch(&[3, 2, 6, 6], 1.7);
    gradcheck(&arch, 13, &batch, &[2, 1, 0]);
}

#[test]
fn residual_path() {
    let arch = residual_arch();
    let batch = fixed_batch(&[2, 2, 6, 6], 0.5);
    gradcheck(&arch, 14, &batch, &[0, 1]);
}

#[test]
fn masked_weight_gradient_is_zero() {
    let arch = mlp_arch();
    let batch = fixed_batch(&[2, 3, 2, 2], 0.3);
    let mut store = ParamStore::<f64>::init(&arch, 3).unwrap();
    {
        let e = store.get_mut("fc1.weight").unwrap();
        e.mask[5] = 0;
        e.enforce_mask();
    }
    let (logits, cache) = nn::forward_train(&mut store.clone(), &arch, &batch).unwrap();
    let (_, grad) = nn::cross_entropy(&logits, &[0, 1]).unwrap();
    nn::backward(&mut store, &arch, &cache, &grad).unwrap();
    let grads = store.get("fc1.weight").unwrap().grad.data();
    assert_eq!(grads[5], 0.0);
    assert!(grads.iter().any(|&g| g != 0.0), "some gradient must flow");
}

#[test]
fn f32_and_f64_forward_agree() {
    let arch = conv_arch();
    let store64 = ParamStore::<f64>::init(&arch, 9).unwrap();
    let store32 = store64.to_f32();
    let batch64 = fixed_batch(&[2, 2, 8, 8], 2.2);
    let batch32 = batch64.to_f32();
    let l64 = nn::forward_eval(&store64, &arch, &batch64).unwrap();
    let l32 = nn::forward_eval(&store32, &arch, &batch32).unwrap();
    for (a, b) in l64.data().iter().zip(l32.data()) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
