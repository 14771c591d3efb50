//! Shared fixtures and oracles for the integration suites.

#![allow(dead_code)]

use prunelab::arch::{Architecture, Layer, Shortcut};
use prunelab::nn;
use prunelab::store::ParamStore;
use prunelab::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;

/// Deterministic pseudo-random batch in roughly [-1, 1].
pub fn fixed_batch(shape: &[usize], phase: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|i| ((i as f64 * 0.7310 + phase) * 1.37).sin())
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn ce_loss(store: &mut ParamStore<f64>, arch: &Architecture, batch: &Tensor<f64>, labels: &[u16]) -> f64 {
    let (logits, _) = nn::forward_train(store, arch, batch).expect("forward");
    let (loss, _) = nn::cross_entropy(&logits, labels).expect("loss");
    loss
}

/// Largest relative error between analytic and central finite-difference
/// gradients over every trainable coordinate.
pub fn gradcheck(arch: &Architecture, seed: u64, batch: &Tensor<f64>, labels: &[u16]) -> f64 {
    let mut store = ParamStore::<f64>::init(arch, seed).expect("init");
    let (logits, cache) = nn::forward_train(&mut store.clone(), arch, batch).expect("forward");
    let (_, grad) = nn::cross_entropy(&logits, labels).expect("loss");
    nn::backward(&mut store, arch, &cache, &grad).expect("backward");

    let mut max_rel = 0.0f64;
    let names: Vec<String> = store
        .entries()
        .iter()
        .filter(|e| e.kind.trainable())
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        let len = store.get(&name).unwrap().weight.len();
        for i in 0..len {
            let analytic = store.get(&name).unwrap().grad.data()[i];
            let base = store.get(&name).unwrap().weight.data()[i];

            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().weight.data_mut()[i] = base + FD_EPS;
            let lp = ce_loss(&mut plus, arch, batch, labels);

            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().weight.data_mut()[i] = base - FD_EPS;
            let lm = ce_loss(&mut minus, arch, batch, labels);

            let fd = (lp - lm) / (2.0 * FD_EPS);
            let denom = analytic.abs().max(fd.abs());
            let rel = if denom >= 1e-7 {
                (fd - analytic).abs() / denom
            } else if (fd - analytic).abs() <= 1e-9 {
                0.0
            } else {
                f64::INFINITY
            };
            assert!(
                rel <= FD_REL_TOL,
                "{name}[{i}]: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
            );
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

fn conv(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Layer {
    Layer::Conv2d {
        name: name.into(),
        in_ch,
        out_ch,
        kernel: k,
        stride,
        pad,
        bias,
    }
}

fn bn(name: &str, channels: usize) -> Layer {
    Layer::BatchNorm {
        name: name.into(),
        channels,
    }
}

fn linear(name: &str, i: usize, o: usize) -> Layer {
    Layer::Linear {
        name: name.into(),
        in_features: i,
        out_features: o,
        bias: true,
    }
}

/// Flatten → Linear → ReLU → Linear (pure dense path).
pub fn mlp_arch() -> Architecture {
    let a = Architecture {
        id: "grad-mlp".into(),
        input_shape: (3, 2, 2),
        classes: 3,
        layers: vec![
            Layer::Flatten,
            linear("fc1", 12, 10),
            Layer::Relu,
            linear("fc2", 10, 3),
        ],
    };
    a.validate().unwrap();
    a
}

/// Conv (stride 1 and 2, with/without bias) + pooling, no batchnorm.
pub fn conv_arch() -> Architecture {
    let a = Architecture {
        id: "grad-conv".into(),
        input_shape: (2, 8, 8),
        classes: 3,
        layers: vec![
            conv("c1", 2, 4, 3, 1, 1, true),
            Layer::Relu,
            Layer::AvgPool2d { kernel: 2, stride: 2 },
            conv("c2", 4, 6, 3, 2, 1, false),
            Layer::Relu,
            Layer::GlobalAvgPool,
            linear("fc", 6, 3),
        ],
    };
    a.validate().unwrap();
    a
}

/// Conv + batchnorm in training mode.
pub fn bn_arch() -> Architecture {
    let a = Architecture {
        id: "grad-bn".into(),
        input_shape: (2, 6, 6),
        classes: 3,
        layers: vec![
            conv("c1", 2, 4, 3, 1, 1, false),
            bn("b1", 4),
            Layer::Relu,
            Layer::GlobalAvgPool,
            linear("fc", 4, 3),
        ],
    };
    a.validate().unwrap();
    a
}

/// Residual blocks with identity and pad-channel shortcuts.
pub fn residual_arch() -> Architecture {
    let a = Architecture {
        id: "grad-res".into(),
        input_shape: (2, 6, 6),
        classes: 3,
        layers: vec![
            conv("stem", 2, 4, 3, 1, 1, false),
            bn("bn0", 4),
            Layer::Relu,
            Layer::Residual {
                name: "res1".into(),
                body: vec![
                    conv("res1.conv1", 4, 4, 3, 1, 1, false),
                    bn("res1.bn1", 4),
                    Layer::Relu,
                    conv("res1.conv2", 4, 4, 3, 1, 1, false),
                    bn("res1.bn2", 4),
                ],
                shortcut: Shortcut::Identity,
            },
            Layer::Residual {
                name: "res2".into(),
                body: vec![
                    conv("res2.conv1", 4, 6, 3, 2, 1, false),
                    bn("res2.bn1", 6),
                    Layer::Relu,
                    conv("res2.conv2", 6, 6, 3, 1, 1, false),
                    bn("res2.bn2", 6),
                ],
                shortcut: Shortcut::PadChannels { stride: 2, out_ch: 6 },
            },
            Layer::GlobalAvgPool,
            linear("fc", 6, 3),
        ],
    };
    a.validate().unwrap();
    a
}

/// Plain conv chain without batchnorm, used by the shrink equivalence checks.
pub fn plain_cnn_arch(filters: usize) -> Architecture {
    let a = Architecture {
        id: "plain-cnn".into(),
        input_shape: (2, 6, 6),
        classes: 3,
        layers: vec![
            conv("c1", 2, filters, 3, 1, 1, true),
            Layer::Relu,
            conv("c2", filters, 5, 3, 1, 1, true),
            Layer::Relu,
            Layer::GlobalAvgPool,
            linear("fc", 5, 3),
        ],
    };
    a.validate().unwrap();
    a
}
