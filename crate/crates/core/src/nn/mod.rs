//! Forward/backward engine over `Architecture` + `ParamStore`.
//!
//! Training forward returns an activation cache consumed by [`backward`];
//! eval forward borrows the store immutably, so eval-mode purity (no running
//! stat updates, no any other mutation) is enforced by the type system.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use loss::cross_entropy;
pub use norm::{BN_EPS, BN_MOMENTUM};

use crate::arch::{Architecture, Layer, Shortcut};
use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{all_finite, Element, Tensor};
use conv::ConvDims;
use norm::BnStats;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The training loop frees and reallocates multi-megabyte activation
/// buffers every step; keep glibc from bouncing them through mmap.
fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    });
}

#[derive(Debug)]
enum Aux<E> {
    None,
    Bn(BnStats<E>),
    Residual(SeqCache<E>),
}

#[derive(Debug)]
struct SeqCache<E> {
    /// Output of each layer in the sequence.
    acts: Vec<Tensor<E>>,
    aux: Vec<Aux<E>>,
}

/// Activation record from a training-mode forward pass.
#[derive(Debug)]
pub struct Cache<E> {
    arch_id: String,
    batch: Tensor<E>,
    seq: SeqCache<E>,
}

fn check_finite<E: Element>(t: &Tensor<E>, label: &str) -> Result<()> {
    if all_finite(t.data()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation after {label}")))
    }
}

fn layer_label(layer: &Layer, idx: usize) -> String {
    match layer {
        Layer::Conv2d { name, .. } => name.clone(),
        Layer::BatchNorm { name, .. } => name.clone(),
        Layer::Linear { name, .. } => name.clone(),
        Layer::Residual { name, .. } => name.clone(),
        Layer::Relu => format!("relu#{idx}"),
        Layer::AvgPool2d { .. } => format!("avgpool#{idx}"),
        Layer::GlobalAvgPool => format!("gap#{idx}"),
        Layer::Flatten => format!("flatten#{idx}"),
    }
}

fn conv_dims(layer: &Layer, input: &Tensor<impl Element>) -> Result<ConvDims> {
    let Layer::Conv2d {
        name,
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
        ..
    } = layer
    else {
        unreachable!()
    };
    let s = input.shape();
    if s.len() != 4 || s[1] != *in_ch {
        return Err(Error::Shape(format!(
            "conv {name} expects (N,{in_ch},H,W) input, got {s:?}"
        )));
    }
    Ok(ConvDims::new(*in_ch, *out_ch, *kernel, *stride, *pad, s[2], s[3]))
}

fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    // fully overwritten below
    let mut y = unsafe { Tensor::uninit(x.shape()) };
    let f = |(ys, xs): (&mut [E], &[E])| {
        for (yo, &xi) in ys.iter_mut().zip(xs) {
            *yo = if xi > E::zero() { xi } else { E::zero() };
        }
    };
    if crate::par::intra_op() {
        y.data_mut()
            .par_chunks_mut(1 << 14)
            .zip(x.data().par_chunks(1 << 14))
            .for_each(f);
    } else {
        y.data_mut()
            .chunks_mut(1 << 14)
            .zip(x.data().chunks(1 << 14))
            .for_each(f);
    }
    y
}

/// dx = dy where the forward output was positive, else 0.
fn relu_backward<E: Element>(dy: &Tensor<E>, out: &Tensor<E>) -> Tensor<E> {
    let mut dx = unsafe { Tensor::uninit(dy.shape()) };
    let f = |(dxs, (dys, os)): (&mut [E], (&[E], &[E]))| {
        for ((d, &g), &o) in dxs.iter_mut().zip(dys).zip(os) {
            *d = if o > E::zero() { g } else { E::zero() };
        }
    };
    if crate::par::intra_op() {
        dx.data_mut()
            .par_chunks_mut(1 << 14)
            .zip(dy.data().par_chunks(1 << 14).zip(out.data().par_chunks(1 << 14)))
            .for_each(f);
    } else {
        dx.data_mut()
            .chunks_mut(1 << 14)
            .zip(dy.data().chunks(1 << 14).zip(out.data().chunks(1 << 14)))
            .for_each(f);
    }
    dx
}

fn shortcut_forward<E: Element>(x: &Tensor<E>, shortcut: &Shortcut) -> Tensor<E> {
    match shortcut {
        Shortcut::Identity => x.clone(),
        Shortcut::PadChannels { stride, out_ch } => {
            let s = x.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let mut y = Tensor::zeros(&[n, *out_ch, oh, ow]);
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = x.data()[((ni * c + ci) * h + oy * stride) * w + ox * stride];
                            y.data_mut()[((ni * out_ch + ci) * oh + oy) * ow + ox] = v;
                        }
                    }
                }
            }
            y
        }
    }
}

/// Scatter the shortcut branch gradient back onto the block input gradient.
fn shortcut_backward_into<E: Element>(dpre: &Tensor<E>, shortcut: &Shortcut, dx: &mut Tensor<E>) {
    match shortcut {
        Shortcut::Identity => {
            for (d, g) in dx.data_mut().iter_mut().zip(dpre.data()) {
                *d += *g;
            }
        }
        Shortcut::PadChannels { stride, .. } => {
            let s = dx.shape().to_vec();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let os = dpre.shape();
            let (oc, oh, ow) = (os[1], os[2], os[3]);
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dpre.data()[((ni * oc + ci) * oh + oy) * ow + ox];
                            dx.data_mut()[((ni * c + ci) * h + oy * stride) * w + ox * stride] += g;
                        }
                    }
                }
            }
        }
    }
}

fn add_relu<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "residual add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut y = unsafe { Tensor::uninit(a.shape()) };
    let f = |(ys, (xs, ss)): (&mut [E], (&[E], &[E]))| {
        for ((yo, &av), &bv) in ys.iter_mut().zip(xs).zip(ss) {
            let v = av + bv;
            *yo = if v > E::zero() { v } else { E::zero() };
        }
    };
    if crate::par::intra_op() {
        y.data_mut()
            .par_chunks_mut(1 << 14)
            .zip(a.data().par_chunks(1 << 14).zip(b.data().par_chunks(1 << 14)))
            .for_each(f);
    } else {
        y.data_mut()
            .chunks_mut(1 << 14)
            .zip(a.data().chunks(1 << 14).zip(b.data().chunks(1 << 14)))
            .for_each(f);
    }
    Ok(y)
}

/// Deferred running-stat update: (bn name, new mean, new var).
type BnUpdate<E> = (String, Vec<E>, Vec<E>);

fn forward_seq_train<E: Element>(
    store: &ParamStore<E>,
    layers: &[Layer],
    input: &Tensor<E>,
    bn_updates: &mut Vec<BnUpdate<E>>,
) -> Result<SeqCache<E>> {
    let mut acts: Vec<Tensor<E>> = Vec::with_capacity(layers.len());
    let mut aux: Vec<Aux<E>> = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.iter().enumerate() {
        let x = if idx == 0 { input } else { &acts[idx - 1] };
        let label = layer_label(layer, idx);
        let (out, a) = match layer {
            Layer::Conv2d { name, bias, .. } => {
                let d = conv_dims(layer, x)?;
                let w = store.get(&format!("{name}.weight"))?.weight.data();
                let b = if *bias {
                    Some(store.get(&format!("{name}.bias"))?.weight.data())
                } else {
                    None
                };
                (conv::forward(w, b, x, &d), Aux::None)
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = store.get(&format!("{name}.gamma"))?.weight.data();
                let beta = store.get(&format!("{name}.beta"))?.weight.data();
                let mut rm = store.get(&format!("{name}.running_mean"))?.weight.data().to_vec();
                let mut rv = store.get(&format!("{name}.running_var"))?.weight.data().to_vec();
                let (y, stats) = norm::forward_train(gamma, beta, &mut rm, &mut rv, x);
                bn_updates.push((name.clone(), rm, rv));
                (y, Aux::Bn(stats))
            }
            Layer::Relu => (relu_forward(x), Aux::None),
            Layer::AvgPool2d { kernel, stride } => {
                (pool::avgpool_forward(x, *kernel, *stride), Aux::None)
            }
            Layer::GlobalAvgPool => (pool::global_avgpool_forward(x), Aux::None),
            Layer::Flatten => {
                let n = x.shape()[0];
                let f = x.len() / n;
                (x.clone().reshaped(&[n, f])?, Aux::None)
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let w = store.get(&format!("{name}.weight"))?.weight.data();
                let b = if *bias {
                    Some(store.get(&format!("{name}.bias"))?.weight.data())
                } else {
                    None
                };
                (
                    linear::forward(w, b, x, *in_features, *out_features),
                    Aux::None,
                )
            }
            Layer::Residual { body, shortcut, .. } => {
                let body_cache = forward_seq_train(store, body, x, bn_updates)?;
                let body_out = body_cache
                    .acts
                    .last()
                    .ok_or_else(|| Error::Shape(format!("residual {label} has empty body")))?;
                let short = shortcut_forward(x, shortcut);
                let y = add_relu(body_out, &short)?;
                (y, Aux::Residual(body_cache))
            }
        };
        check_finite(&out, &label)?;
        acts.push(out);
        aux.push(a);
    }
    Ok(SeqCache { acts, aux })
}

fn forward_seq_eval<E: Element>(
    store: &ParamStore<E>,
    layers: &[Layer],
    input: &Tensor<E>,
) -> Result<Tensor<E>> {
    let mut act = input.clone();
    for (idx, layer) in layers.iter().enumerate() {
        let label = layer_label(layer, idx);
        act = match layer {
            Layer::Conv2d { name, bias, .. } => {
                let d = conv_dims(layer, &act)?;
                let w = store.get(&format!("{name}.weight"))?.weight.data();
                let b = if *bias {
                    Some(store.get(&format!("{name}.bias"))?.weight.data())
                } else {
                    None
                };
                conv::forward(w, b, &act, &d)
            }
            Layer::BatchNorm { name, .. } => norm::forward_eval(
                store.get(&format!("{name}.gamma"))?.weight.data(),
                store.get(&format!("{name}.beta"))?.weight.data(),
                store.get(&format!("{name}.running_mean"))?.weight.data(),
                store.get(&format!("{name}.running_var"))?.weight.data(),
                &act,
            ),
            Layer::Relu => relu_forward(&act),
            Layer::AvgPool2d { kernel, stride } => pool::avgpool_forward(&act, *kernel, *stride),
            Layer::GlobalAvgPool => pool::global_avgpool_forward(&act),
            Layer::Flatten => {
                let n = act.shape()[0];
                let f = act.len() / n;
                act.reshaped(&[n, f])?
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let w = store.get(&format!("{name}.weight"))?.weight.data();
                let b = if *bias {
                    Some(store.get(&format!("{name}.bias"))?.weight.data())
                } else {
                    None
                };
                linear::forward(w, b, &act, *in_features, *out_features)
            }
            Layer::Residual { body, shortcut, .. } => {
                let body_out = forward_seq_eval(store, body, &act)?;
                let short = shortcut_forward(&act, shortcut);
                add_relu(&body_out, &short)?
            }
        };
        check_finite(&act, &label)?;
    }
    Ok(act)
}

fn validate_batch<E: Element>(arch: &Architecture, batch: &Tensor<E>) -> Result<()> {
    let (c, h, w) = arch.input_shape;
    let s = batch.shape();
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(Error::Shape(format!(
            "batch shape {s:?} does not match architecture input ({c},{h},{w})"
        )));
    }
    Ok(())
}

/// Training-mode forward pass. Updates batchnorm running statistics and
/// returns the logits plus the activation cache needed by [`backward`].
pub fn forward_train<E: Element>(
    store: &mut ParamStore<E>,
    arch: &Architecture,
    batch: &Tensor<E>,
) -> Result<(Tensor<E>, Cache<E>)> {
    tune_allocator();
    validate_batch(arch, batch)?;
    let mut bn_updates = Vec::new();
    let seq = forward_seq_train(store, &arch.layers, batch, &mut bn_updates)?;
    for (name, rm, rv) in bn_updates {
        store
            .get_mut(&format!("{name}.running_mean"))?
            .weight
            .data_mut()
            .copy_from_slice(&rm);
        store
            .get_mut(&format!("{name}.running_var"))?
            .weight
            .data_mut()
            .copy_from_slice(&rv);
    }
    let logits = seq.acts.last().expect("non-empty architecture").clone();
    Ok((
        logits,
        Cache {
            arch_id: arch.id.clone(),
            batch: batch.clone(),
            seq,
        },
    ))
}

/// Eval-mode forward pass: batchnorm uses running statistics and nothing is
/// mutated (the store is borrowed immutably).
pub fn forward_eval<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    batch: &Tensor<E>,
) -> Result<Tensor<E>> {
    tune_allocator();
    validate_batch(arch, batch)?;
    forward_seq_eval(store, &arch.layers, batch)
}

fn backward_seq<E: Element>(
    store: &mut ParamStore<E>,
    layers: &[Layer],
    input: &Tensor<E>,
    cache: &SeqCache<E>,
    dy_top: Tensor<E>,
    need_input_grad: bool,
) -> Result<Option<Tensor<E>>> {
    let mut dy = dy_top;
    for (idx, layer) in layers.iter().enumerate().rev() {
        let x = if idx == 0 { input } else { &cache.acts[idx - 1] };
        let need_dx = idx > 0 || need_input_grad;
        dy = match layer {
            Layer::Conv2d { name, bias, .. } => {
                let d = conv_dims(layer, x)?;
                let (dw, db, dx) = {
                    let w = store.get(&format!("{name}.weight"))?.weight.data();
                    conv::backward(w, *bias, x, &dy, &d, need_dx)
                };
                accumulate_grad(store, &format!("{name}.weight"), &dw)?;
                if let Some(db) = db {
                    accumulate_grad(store, &format!("{name}.bias"), &db)?;
                }
                match dx {
                    Some(dx) => dx,
                    None => break,
                }
            }
            Layer::BatchNorm { name, .. } => {
                let Aux::Bn(stats) = &cache.aux[idx] else {
                    return Err(Error::Usage(format!("cache missing batchnorm stats for {name}")));
                };
                let (dgamma, dbeta, dx) = {
                    let gamma = store.get(&format!("{name}.gamma"))?.weight.data();
                    norm::backward(gamma, x, &dy, stats)
                };
                accumulate_grad(store, &format!("{name}.gamma"), &dgamma)?;
                accumulate_grad(store, &format!("{name}.beta"), &dbeta)?;
                dx
            }
            Layer::Relu => relu_backward(&dy, &cache.acts[idx]),
            Layer::AvgPool2d { kernel, stride } => {
                pool::avgpool_backward(&dy, x.shape(), *kernel, *stride)
            }
            Layer::GlobalAvgPool => pool::global_avgpool_backward(&dy, x.shape()),
            Layer::Flatten => dy.reshaped(x.shape())?,
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let (dw, db, dx) = {
                    let w = store.get(&format!("{name}.weight"))?.weight.data();
                    linear::backward(w, *bias, x, &dy, *in_features, *out_features)
                };
                accumulate_grad(store, &format!("{name}.weight"), &dw)?;
                if let Some(db) = db {
                    accumulate_grad(store, &format!("{name}.bias"), &db)?;
                }
                dx.reshaped(x.shape())?
            }
            Layer::Residual { name, body, shortcut } => {
                let Aux::Residual(body_cache) = &cache.aux[idx] else {
                    return Err(Error::Usage(format!("cache missing residual body for {name}")));
                };
                let dpre = relu_backward(&dy, &cache.acts[idx]);
                let dx_body = backward_seq(store, body, x, body_cache, dpre.clone(), true)?
                    .ok_or_else(|| Error::Usage(format!("residual {name}: body produced no input grad")))?;
                let mut dx = dx_body;
                shortcut_backward_into(&dpre, shortcut, &mut dx);
                dx
            }
        };
        if idx == 0 {
            return Ok(Some(dy));
        }
    }
    Ok(None)
}

fn accumulate_grad<E: Element>(store: &mut ParamStore<E>, name: &str, g: &[E]) -> Result<()> {
    let entry = store.get_mut(name)?;
    if entry.grad.len() != g.len() {
        return Err(Error::Shape(format!("gradient size mismatch for {name}")));
    }
    for (acc, v) in entry.grad.data_mut().iter_mut().zip(g) {
        *acc += *v;
    }
    Ok(())
}

/// Backpropagate `loss_grad` (d loss / d logits) through the cached forward
/// pass, writing gradients into the store. Gradients of masked weights are
/// zeroed before returning.
pub fn backward<E: Element>(
    store: &mut ParamStore<E>,
    arch: &Architecture,
    cache: &Cache<E>,
    loss_grad: &Tensor<E>,
) -> Result<()> {
    if cache.arch_id != arch.id || cache.arch_id != store.arch_id {
        return Err(Error::Usage(format!(
            "cache for '{}' used with arch '{}' / store '{}'",
            cache.arch_id, arch.id, store.arch_id
        )));
    }
    let logits_shape = cache.seq.acts.last().expect("non-empty architecture").shape();
    if loss_grad.shape() != logits_shape {
        return Err(Error::Usage(format!(
            "loss grad shape {:?} does not match logits {:?}",
            loss_grad.shape(),
            logits_shape
        )));
    }
    store.zero_grads();
    backward_seq(store, &arch.layers, &cache.batch, &cache.seq, loss_grad.clone(), false)?;
    for e in store.entries_mut() {
        e.mask_grad();
    }
    Ok(())
}
