//! Parameter/MAC counting, accuracy, and mask-quality functionals.
//!
//! The FLOPs convention is `flops = 2 × macs`; every report that prints
//! FLOPs carries the convention string so tables stay comparable.

use crate::arch::{compute_out_shape, ActShape, Architecture, Layer};
use crate::error::{Error, Result};
use crate::nn;
use crate::prune::Mask;
use crate::store::ParamStore;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

pub const FLOPS_CONVENTION: &str = "flops=2*macs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub label: String,
    pub params: usize,
    pub macs: usize,
    /// Elementwise operation count (BN/ReLU/pool work, excluded from MACs).
    pub elementwise: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub params: usize,
    pub macs: usize,
    pub flops: usize,
    pub per_layer: Vec<LayerCost>,
    pub convention: String,
}

fn layer_cost(layer: &Layer, input: ActShape, out: &mut Vec<LayerCost>) -> Result<ActShape> {
    let output = compute_out_shape(layer, input)?;
    match layer {
        Layer::Conv2d {
            name,
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => {
            let ActShape::Chw(_, oh, ow) = output else { unreachable!() };
            let params = out_ch * in_ch * kernel * kernel + if *bias { *out_ch } else { 0 };
            out.push(LayerCost {
                label: name.clone(),
                params,
                macs: in_ch * kernel * kernel * out_ch * oh * ow,
                elementwise: if *bias { output.elems() } else { 0 },
            });
        }
        Layer::BatchNorm { name, channels } => {
            out.push(LayerCost {
                label: name.clone(),
                params: 2 * channels,
                macs: 0,
                elementwise: output.elems(),
            });
        }
        Layer::Relu | Layer::AvgPool2d { .. } | Layer::GlobalAvgPool => {
            out.push(LayerCost {
                label: match layer {
                    Layer::Relu => "relu".into(),
                    Layer::AvgPool2d { .. } => "avgpool".into(),
                    _ => "gap".into(),
                },
                params: 0,
                macs: 0,
                elementwise: output.elems(),
            });
        }
        Layer::Flatten => {}
        Layer::Linear {
            name,
            in_features,
            out_features,
            bias,
        } => {
            out.push(LayerCost {
                label: name.clone(),
                params: in_features * out_features + if *bias { *out_features } else { 0 },
                macs: in_features * out_features,
                elementwise: if *bias { *out_features } else { 0 },
            });
        }
        Layer::Residual { name, body, .. } => {
            let mut s = input;
            for l in body {
                s = layer_cost(l, s, out)?;
            }
            out.push(LayerCost {
                label: format!("{name}.add"),
                params: 0,
                macs: 0,
                elementwise: output.elems(),
            });
        }
    }
    Ok(output)
}

/// Static cost of an architecture (per single input sample).
pub fn count_cost(arch: &Architecture) -> Result<ModelCost> {
    let (c, h, w) = arch.input_shape;
    let mut per_layer = Vec::new();
    let mut s = ActShape::Chw(c, h, w);
    for l in &arch.layers {
        s = layer_cost(l, s, &mut per_layer)?;
    }
    let params = per_layer.iter().map(|l| l.params).sum();
    let macs = per_layer.iter().map(|l| l.macs).sum();
    Ok(ModelCost {
        params,
        macs,
        flops: 2 * macs,
        per_layer,
        convention: FLOPS_CONVENTION.into(),
    })
}

/// Percentage drops (params, flops) from `unpruned` to `pruned`.
/// Negative values mean the "pruned" model is larger.
pub fn reduction(unpruned: &ModelCost, pruned: &ModelCost) -> (f64, f64) {
    let pct = |a: usize, b: usize| {
        if a == 0 {
            0.0
        } else {
            (a as f64 - b as f64) / a as f64 * 100.0
        }
    };
    (
        pct(unpruned.params, pruned.params),
        pct(unpruned.flops, pruned.flops),
    )
}

/// Top-1 accuracy in eval mode over pre-assembled batches.
pub fn accuracy<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    data: impl IntoIterator<Item = (Tensor<E>, Vec<u16>)>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (images, labels) in data {
        let logits = nn::forward_eval(store, arch, &images)?;
        let classes = arch.classes;
        for (row, &label) in logits.data().chunks(classes).zip(labels.iter()) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("accuracy over an empty split".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn mean_loss<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    data: &[(Tensor<E>, Vec<u16>)],
) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut total = 0usize;
    for (images, labels) in data {
        let logits = nn::forward_eval(store, arch, images)?;
        let (loss, _) = nn::cross_entropy(&logits, labels)?;
        sum += loss.to_f64_val() * labels.len() as f64;
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::Data("loss over an empty split".into()));
    }
    Ok(sum / total as f64)
}

/// Appendix-style mask quality: loss(θ ⊙ m) − loss(θ) on the same data.
pub fn mask_loss_gap<E: Element>(
    store_unmasked: &ParamStore<E>,
    arch: &Architecture,
    mask: &Mask,
    data: &[(Tensor<E>, Vec<u16>)],
) -> Result<f64> {
    let base = mean_loss(store_unmasked, arch, data)?;
    let mut masked = store_unmasked.clone();
    crate::prune::apply_mask(&mut masked, arch, mask)?;
    let gap = mean_loss(&masked, arch, data)?;
    Ok(gap - base)
}

/// Mean squared pre-softmax output difference between θ ⊙ m and θ.
pub fn output_gap<E: Element>(
    store_unmasked: &ParamStore<E>,
    arch: &Architecture,
    mask: &Mask,
    data: &[(Tensor<E>, Vec<u16>)],
) -> Result<f64> {
    let mut masked = store_unmasked.clone();
    crate::prune::apply_mask(&mut masked, arch, mask)?;
    let mut sum = 0.0f64;
    let mut total = 0usize;
    for (images, _) in data {
        let a = nn::forward_eval(store_unmasked, arch, images)?;
        let b = nn::forward_eval(&masked, arch, images)?;
        let n = images.shape()[0];
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = x.to_f64_val() - y.to_f64_val();
            sum += d * d;
        }
        total += n;
    }
    if total == 0 {
        return Err(Error::Data("output gap over an empty split".into()));
    }
    Ok(sum / total as f64)
}
