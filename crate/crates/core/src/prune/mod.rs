//! Saliency scoring, mask construction, soft filter pruning, and physical
//! shrinking of structured-pruned networks.
//!
//! Residual policy: in networks with residual blocks, only the convolutions
//! strictly inside a block body (all but the body's last conv) are
//! filter-prunable; everything feeding a residual add keeps its channel
//! count so shapes stay composable. Plain networks prune every conv.

pub mod shrink;

pub use shrink::shrink_structured;

use crate::arch::{Architecture, Layer};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::store::ParamStore;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    L1Filter,
    MagnitudeGlobal,
    RandomFilter,
    RandomWeight,
    TaylorFo,
    Sfp,
}

impl PruneMethod {
    pub fn is_structured(self) -> bool {
        matches!(
            self,
            PruneMethod::L1Filter | PruneMethod::RandomFilter | PruneMethod::TaylorFo | PruneMethod::Sfp
        )
    }
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PruneMethod::L1Filter => "l1_filter",
            PruneMethod::MagnitudeGlobal => "magnitude_global",
            PruneMethod::RandomFilter => "random_filter",
            PruneMethod::RandomWeight => "random_weight",
            PruneMethod::TaylorFo => "taylor_fo",
            PruneMethod::Sfp => "sfp",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1_filter" => Ok(PruneMethod::L1Filter),
            "magnitude_global" => Ok(PruneMethod::MagnitudeGlobal),
            "random_filter" => Ok(PruneMethod::RandomFilter),
            "random_weight" => Ok(PruneMethod::RandomWeight),
            "taylor_fo" => Ok(PruneMethod::TaylorFo),
            "sfp" => Ok(PruneMethod::Sfp),
            other => Err(Error::Config(format!("unknown prune method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Equal prune ratio in every prunable layer.
    UniformPerBlock,
    /// One ratio per prunable layer, in architecture order.
    PerLayerList(Vec<f64>),
    /// One global score pool across all prunable units.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    /// Fraction removed, in [0, 1).
    pub ratio: f64,
    pub policy: LayerPolicy,
    pub seed: u64,
    pub rounds: usize,
}

impl PruneSpec {
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} not in [0, 1)", self.ratio)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if let LayerPolicy::PerLayerList(list) = &self.policy {
            let prunable = prunable_convs(arch).len();
            if list.len() != prunable {
                return Err(Error::Config(format!(
                    "per-layer list has {} ratios for {} prunable layers",
                    list.len(),
                    prunable
                )));
            }
            if list.iter().any(|r| !(0.0..1.0).contains(r)) {
                return Err(Error::Config("per-layer ratios must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// A conv layer's identity within the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvRef {
    pub name: String,
    pub out_ch: usize,
    pub filter_elems: usize,
    pub prunable: bool,
}

fn walk_convs(layers: &[Layer], inside_residual: bool, out: &mut Vec<ConvRef>, has_residual: bool) {
    let last_conv_idx = layers
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| matches!(l, Layer::Conv2d { .. }).then_some(i));
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv2d {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let prunable = if has_residual {
                    inside_residual && Some(i) != last_conv_idx
                } else {
                    true
                };
                out.push(ConvRef {
                    name: name.clone(),
                    out_ch: *out_ch,
                    filter_elems: in_ch * kernel * kernel,
                    prunable,
                });
            }
            Layer::Residual { body, .. } => walk_convs(body, true, out, has_residual),
            _ => {}
        }
    }
}

fn has_residual(layers: &[Layer]) -> bool {
    layers.iter().any(|l| matches!(l, Layer::Residual { .. }))
}

/// Every conv layer with its residual-policy prunability flag.
pub fn conv_layers(arch: &Architecture) -> Vec<ConvRef> {
    let mut out = Vec::new();
    walk_convs(&arch.layers, false, &mut out, has_residual(&arch.layers));
    out
}

/// The filter-prunable conv layers only.
pub fn prunable_convs(arch: &Architecture) -> Vec<ConvRef> {
    conv_layers(arch).into_iter().filter(|c| c.prunable).collect()
}

/// Per-layer filter scores over the prunable conv layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterScores {
    pub layers: Vec<(String, Vec<f64>)>,
}

/// Keep-vectors for every conv layer (non-prunable layers stay all-true).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    pub layers: Vec<(String, Vec<bool>)>,
}

impl FilterMask {
    pub fn keep(&self, name: &str) -> Option<&[bool]> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, k)| k.as_slice())
    }

    pub fn keep_counts(&self) -> Vec<(String, usize, usize)> {
        self.layers
            .iter()
            .map(|(n, k)| (n.clone(), k.iter().filter(|&&b| b).count(), k.len()))
            .collect()
    }
}

/// Per-tensor element masks over prunable (conv/linear weight) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub tensors: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Filter(FilterMask),
    Weight(WeightMask),
}

/// Per-element saliency over prunable weight tensors, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScores {
    pub tensors: Vec<(String, Vec<f64>)>,
}

/// ℓ1 norm of each filter of each prunable conv layer.
pub fn score_filters_l1<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
) -> Result<FilterScores> {
    let convs = prunable_convs(arch);
    if convs.is_empty() {
        return Err(Error::Config(format!(
            "architecture '{}' has no filter-prunable conv layers",
            arch.id
        )));
    }
    let mut layers = Vec::with_capacity(convs.len());
    for c in &convs {
        let w = store.get(&format!("{}.weight", c.name))?;
        layers.push((c.name.clone(), l1_per_filter(w.weight.data(), c.out_ch)));
    }
    Ok(FilterScores { layers })
}

fn l1_per_filter<E: Element>(w: &[E], out_ch: usize) -> Vec<f64> {
    let per = w.len() / out_ch;
    (0..out_ch)
        .map(|j| {
            let mut s = 0.0f64;
            for v in &w[j * per..(j + 1) * per] {
                s += v.to_f64_val().abs();
            }
            s
        })
        .collect()
}

/// |w| for every element of every prunable tensor (global pool). Elements
/// already masked score −∞ so iterative rounds only ever shrink the kept set.
pub fn score_weights_magnitude<E: Element>(store: &ParamStore<E>) -> WeightScores {
    let mut tensors = Vec::new();
    for e in store.entries() {
        if !e.kind.decays() {
            continue;
        }
        let scores = e
            .weight
            .data()
            .iter()
            .zip(e.mask.iter())
            .map(|(v, &m)| {
                if m == 0 {
                    f64::NEG_INFINITY
                } else {
                    v.to_f64_val().abs()
                }
            })
            .collect();
        tensors.push((e.name.clone(), scores));
    }
    WeightScores { tensors }
}

/// Uniform(0,1) scores per prunable filter, drawn in deterministic layer order.
pub fn score_random_filters(arch: &Architecture, seed: u64) -> Result<FilterScores> {
    let convs = prunable_convs(arch);
    if convs.is_empty() {
        return Err(Error::Config(format!(
            "architecture '{}' has no filter-prunable conv layers",
            arch.id
        )));
    }
    let mut rng = rng::stream(seed, "prune/random");
    let layers = convs
        .iter()
        .map(|c| {
            let scores: Vec<f64> = (0..c.out_ch).map(|_| rng.gen::<f64>()).collect();
            (c.name.clone(), scores)
        })
        .collect();
    Ok(FilterScores { layers })
}

/// Uniform(0,1) scores per prunable weight element; masked elements score −∞.
pub fn score_random_weights<E: Element>(store: &ParamStore<E>, seed: u64) -> WeightScores {
    let mut rng = rng::stream(seed, "prune/random");
    let mut tensors = Vec::new();
    for e in store.entries() {
        if !e.kind.decays() {
            continue;
        }
        let scores = e
            .mask
            .iter()
            .map(|&m| {
                let r = rng.gen::<f64>();
                if m == 0 {
                    f64::NEG_INFINITY
                } else {
                    r
                }
            })
            .collect();
        tensors.push((e.name.clone(), scores));
    }
    WeightScores { tensors }
}

/// First-order Taylor filter saliency: per filter, (Σ g·w)² accumulated over
/// the given batches and averaged. Scoring runs on a private clone so the
/// caller's running statistics and gradients stay untouched.
pub fn score_filters_taylor_fo<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    batches: &[(Tensor<E>, Vec<u16>)],
) -> Result<FilterScores> {
    if batches.is_empty() {
        return Err(Error::Config("taylor scoring needs at least one batch".into()));
    }
    let convs = prunable_convs(arch);
    if convs.is_empty() {
        return Err(Error::Config(format!(
            "architecture '{}' has no filter-prunable conv layers",
            arch.id
        )));
    }
    let mut scratch = store.clone();
    let mut acc: Vec<Vec<f64>> = convs.iter().map(|c| vec![0.0; c.out_ch]).collect();
    for (images, labels) in batches {
        let (logits, cache) = nn::forward_train(&mut scratch, arch, images)?;
        let (_, grad) = nn::cross_entropy(&logits, labels)?;
        nn::backward(&mut scratch, arch, &cache, &grad)?;
        for (c, acc_l) in convs.iter().zip(acc.iter_mut()) {
            let e = scratch.get(&format!("{}.weight", c.name))?;
            let per = e.weight.len() / c.out_ch;
            for (j, a) in acc_l.iter_mut().enumerate() {
                let mut dot = 0.0f64;
                for (w, g) in e.weight.data()[j * per..(j + 1) * per]
                    .iter()
                    .zip(&e.grad.data()[j * per..(j + 1) * per])
                {
                    dot += w.to_f64_val() * g.to_f64_val();
                }
                *a += dot * dot;
            }
        }
    }
    let n = batches.len() as f64;
    let layers = convs
        .iter()
        .zip(acc)
        .map(|(c, mut scores)| {
            for s in &mut scores {
                *s /= n;
            }
            (c.name.clone(), scores)
        })
        .collect();
    Ok(FilterScores { layers })
}

/// A unit plus its removal-ordering key. Lower score removes first; among
/// ties the lower (layer, index) unit is kept first, i.e. removed last.
fn removal_order(units: &mut [(f64, usize, usize)]) {
    units.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("scores must not be NaN")
            .then_with(|| (b.1, b.2).cmp(&(a.1, a.2)))
    });
}

fn keep_count(n: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * n as f64).round() as usize
}

/// Build keep-vectors from filter scores. Returns the mask plus warnings for
/// any layer whose keep count was clamped up to one.
pub fn build_filter_mask(
    scores: &FilterScores,
    spec: &PruneSpec,
    arch: &Architecture,
) -> Result<(FilterMask, Vec<String>)> {
    spec.validate(arch)?;
    let all = conv_layers(arch);
    let mut warnings = Vec::new();
    let score_map: HashMap<&str, &Vec<f64>> =
        scores.layers.iter().map(|(n, s)| (n.as_str(), s)).collect();
    for c in all.iter().filter(|c| c.prunable) {
        let s = score_map
            .get(c.name.as_str())
            .ok_or_else(|| Error::Usage(format!("scores missing layer '{}'", c.name)))?;
        if s.len() != c.out_ch {
            return Err(Error::Shape(format!(
                "layer '{}' has {} filters but {} scores",
                c.name,
                c.out_ch,
                s.len()
            )));
        }
    }

    let mut keep: HashMap<String, Vec<bool>> = all
        .iter()
        .map(|c| (c.name.clone(), vec![true; c.out_ch]))
        .collect();

    let prunable: Vec<&ConvRef> = all.iter().filter(|c| c.prunable).collect();
    match &spec.policy {
        LayerPolicy::UniformPerBlock | LayerPolicy::PerLayerList(_) => {
            for (li, c) in prunable.iter().enumerate() {
                let ratio = match &spec.policy {
                    LayerPolicy::PerLayerList(list) => list[li],
                    _ => spec.ratio,
                };
                let mut k = keep_count(c.out_ch, ratio);
                if k == 0 {
                    warnings.push(format!("layer '{}': keep count clamped to 1", c.name));
                    k = 1;
                }
                let mut units: Vec<(f64, usize, usize)> = score_map[c.name.as_str()]
                    .iter()
                    .enumerate()
                    .map(|(j, &s)| (s, li, j))
                    .collect();
                removal_order(&mut units);
                let kv = keep.get_mut(&c.name).unwrap();
                for &(_, _, j) in units.iter().take(c.out_ch - k) {
                    kv[j] = false;
                }
            }
        }
        LayerPolicy::Global => {
            let total: usize = prunable.iter().map(|c| c.out_ch).sum();
            let target_remove = (spec.ratio * total as f64).round() as usize;
            let mut units: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
            for (li, c) in prunable.iter().enumerate() {
                for (j, &s) in score_map[c.name.as_str()].iter().enumerate() {
                    units.push((s, li, j));
                }
            }
            removal_order(&mut units);
            let mut kept_per_layer: Vec<usize> = prunable.iter().map(|c| c.out_ch).collect();
            let mut removed = 0usize;
            for &(_, li, j) in &units {
                if removed == target_remove {
                    break;
                }
                if kept_per_layer[li] == 1 {
                    warnings.push(format!(
                        "layer '{}': keep count clamped to 1",
                        prunable[li].name
                    ));
                    continue;
                }
                keep.get_mut(&prunable[li].name).unwrap()[j] = false;
                kept_per_layer[li] -= 1;
                removed += 1;
            }
        }
    }

    let layers = all
        .iter()
        .map(|c| (c.name.clone(), keep.remove(&c.name).unwrap()))
        .collect();
    Ok((FilterMask { layers }, warnings))
}

/// Build element masks from weight scores: remove the `round(ratio·total)`
/// lowest-scored elements of the pooled (global) or per-tensor set.
pub fn build_weight_mask(
    scores: &WeightScores,
    spec: &PruneSpec,
) -> Result<WeightMask> {
    if !(0.0..1.0).contains(&spec.ratio) {
        return Err(Error::Config(format!("ratio {} not in [0, 1)", spec.ratio)));
    }
    let mut masks: Vec<(String, Vec<u8>)> = scores
        .tensors
        .iter()
        .map(|(n, s)| (n.clone(), vec![1u8; s.len()]))
        .collect();
    match spec.policy {
        LayerPolicy::Global => {
            let total: usize = scores.tensors.iter().map(|(_, s)| s.len()).sum();
            let remove = (spec.ratio * total as f64).round() as usize;
            let mut units: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
            for (ti, (_, s)) in scores.tensors.iter().enumerate() {
                for (j, &v) in s.iter().enumerate() {
                    units.push((v, ti, j));
                }
            }
            removal_order(&mut units);
            for &(_, ti, j) in units.iter().take(remove) {
                masks[ti].1[j] = 0;
            }
        }
        _ => {
            for (ti, (_, s)) in scores.tensors.iter().enumerate() {
                let remove = (spec.ratio * s.len() as f64).round() as usize;
                let mut units: Vec<(f64, usize, usize)> =
                    s.iter().enumerate().map(|(j, &v)| (v, ti, j)).collect();
                removal_order(&mut units);
                for &(_, _, j) in units.iter().take(remove) {
                    masks[ti].1[j] = 0;
                }
            }
        }
    }
    Ok(WeightMask { tensors: masks })
}

/// Names of the batchnorm layer directly following each conv, if any.
pub(crate) fn conv_bn_pairs(layers: &[Layer], out: &mut HashMap<String, String>) {
    for pair in layers.windows(2) {
        if let (Layer::Conv2d { name: cn, .. }, Layer::BatchNorm { name: bn, .. }) =
            (&pair[0], &pair[1])
        {
            out.insert(cn.clone(), bn.clone());
        }
    }
    for layer in layers {
        if let Layer::Residual { body, .. } = layer {
            conv_bn_pairs(body, out);
        }
    }
}

/// Install a mask: zero the selected weights (and momenta) and record the
/// mask so training keeps them at zero. Structured masks also zero the
/// batchnorm parameters and running statistics of removed channels.
pub fn apply_mask<E: Element>(
    store: &mut ParamStore<E>,
    arch: &Architecture,
    mask: &Mask,
) -> Result<()> {
    match mask {
        Mask::Weight(wm) => {
            for (name, m) in &wm.tensors {
                let e = store.get_mut(name)?;
                if e.mask.len() != m.len() {
                    return Err(Error::Shape(format!("mask size mismatch for '{name}'")));
                }
                e.mask = m.clone();
                e.enforce_mask();
            }
        }
        Mask::Filter(fm) => {
            let mut bn_of = HashMap::new();
            conv_bn_pairs(&arch.layers, &mut bn_of);
            for c in conv_layers(arch) {
                let keep = fm
                    .keep(&c.name)
                    .ok_or_else(|| Error::Usage(format!("mask missing layer '{}'", c.name)))?;
                if keep.len() != c.out_ch {
                    return Err(Error::Shape(format!(
                        "mask for '{}' has {} entries for {} filters",
                        c.name,
                        keep.len(),
                        c.out_ch
                    )));
                }
                let wname = format!("{}.weight", c.name);
                {
                    let e = store.get_mut(&wname)?;
                    let per = e.mask.len() / c.out_ch;
                    for (j, &k) in keep.iter().enumerate() {
                        if !k {
                            e.mask[j * per..(j + 1) * per].fill(0);
                        }
                    }
                    e.enforce_mask();
                }
                let bname = format!("{}.bias", c.name);
                if store.contains(&bname) {
                    let e = store.get_mut(&bname)?;
                    for (j, &k) in keep.iter().enumerate() {
                        if !k {
                            e.mask[j] = 0;
                        }
                    }
                    e.enforce_mask();
                }
                if let Some(bn) = bn_of.get(&c.name) {
                    for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                        let e = store.get_mut(&format!("{bn}.{suffix}"))?;
                        for (j, &k) in keep.iter().enumerate() {
                            if !k {
                                e.mask[j] = 0;
                                e.weight.data_mut()[j] = E::zero();
                            }
                        }
                        e.enforce_mask();
                    }
                }
            }
        }
    }
    Ok(())
}

/// Soft filter pruning hook: at an epoch boundary, zero the weights (not the
/// masks) of the `round(rate·n)` lowest-ℓ1 filters of every conv layer. The
/// filters may regrow at the next optimizer step.
pub fn sfp_epoch_hook<E: Element>(
    store: &mut ParamStore<E>,
    arch: &Architecture,
    prune_rate: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&prune_rate) {
        return Err(Error::Config(format!("prune rate {prune_rate} not in [0, 1)")));
    }
    for c in conv_layers(arch) {
        let remove = (prune_rate * c.out_ch as f64).round() as usize;
        if remove == 0 {
            continue;
        }
        let wname = format!("{}.weight", c.name);
        let scores = l1_per_filter(store.get(&wname)?.weight.data(), c.out_ch);
        let mut units: Vec<(f64, usize, usize)> =
            scores.iter().enumerate().map(|(j, &s)| (s, 0, j)).collect();
        removal_order(&mut units);
        let victims: Vec<usize> = units.iter().take(remove).map(|&(_, _, j)| j).collect();
        {
            let e = store.get_mut(&wname)?;
            let per = e.weight.len() / c.out_ch;
            for &j in &victims {
                e.weight.data_mut()[j * per..(j + 1) * per].fill(E::zero());
            }
        }
        let bname = format!("{}.bias", c.name);
        if store.contains(&bname) {
            let e = store.get_mut(&bname)?;
            for &j in &victims {
                e.weight.data_mut()[j] = E::zero();
            }
        }
    }
    Ok(())
}

/// The hard mask an SFP run installs after its final epoch: the currently
/// lowest-ℓ1 `rate` fraction of every conv layer.
pub fn sfp_final_mask<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    prune_rate: f64,
) -> Result<FilterMask> {
    let mut layers = Vec::new();
    for c in conv_layers(arch) {
        let scores = l1_per_filter(store.get(&format!("{}.weight", c.name))?.weight.data(), c.out_ch);
        let remove = (prune_rate * c.out_ch as f64).round() as usize;
        let mut units: Vec<(f64, usize, usize)> =
            scores.iter().enumerate().map(|(j, &s)| (s, 0, j)).collect();
        removal_order(&mut units);
        let mut keep = vec![true; c.out_ch];
        for &(_, _, j) in units.iter().take(remove) {
            keep[j] = false;
        }
        layers.push((c.name.clone(), keep));
    }
    Ok(FilterMask { layers })
}

/// Score with `spec.method` and build the corresponding mask in one call.
/// Taylor scoring needs `batches`; other methods ignore them.
pub fn score_and_mask<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    spec: &PruneSpec,
    batches: &[(Tensor<E>, Vec<u16>)],
) -> Result<(Mask, Vec<String>)> {
    spec.validate(arch)?;
    match spec.method {
        PruneMethod::L1Filter | PruneMethod::Sfp => {
            let scores = score_filters_l1(store, arch)?;
            let (m, w) = build_filter_mask(&scores, spec, arch)?;
            Ok((Mask::Filter(m), w))
        }
        PruneMethod::RandomFilter => {
            let scores = score_random_filters(arch, spec.seed)?;
            let (m, w) = build_filter_mask(&scores, spec, arch)?;
            Ok((Mask::Filter(m), w))
        }
        PruneMethod::TaylorFo => {
            let scores = score_filters_taylor_fo(store, arch, batches)?;
            let (m, w) = build_filter_mask(&scores, spec, arch)?;
            Ok((Mask::Filter(m), w))
        }
        PruneMethod::MagnitudeGlobal => {
            let scores = score_weights_magnitude(store);
            Ok((Mask::Weight(build_weight_mask(&scores, spec)?), Vec::new()))
        }
        PruneMethod::RandomWeight => {
            let scores = score_random_weights(store, spec.seed);
            Ok((Mask::Weight(build_weight_mask(&scores, spec)?), Vec::new()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_architecture;

    fn spec(method: PruneMethod, ratio: f64, policy: LayerPolicy) -> PruneSpec {
        PruneSpec {
            method,
            ratio,
            policy,
            seed: 7,
            rounds: 1,
        }
    }

    #[test]
    fn l1_score_sums_magnitudes() {
        assert_eq!(l1_per_filter(&[1.0f64, -1.0, 0.5, 0.5], 1), vec![3.0]);
        assert_eq!(l1_per_filter(&[0.0f64, 0.0, 2.0, -3.0], 2), vec![0.0, 5.0]);
    }

    #[test]
    fn l1_ranking_matches_brute_force_resum() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let store = ParamStore::<f32>::init(&arch, 3).unwrap();
        let scores = score_filters_l1(&store, &arch).unwrap();
        for (name, s) in &scores.layers {
            let e = store.get(&format!("{name}.weight")).unwrap();
            let per = e.weight.len() / s.len();
            for (j, &v) in s.iter().enumerate() {
                let brute: f64 = e.weight.data()[j * per..(j + 1) * per]
                    .iter()
                    .map(|w| (w.abs()) as f64)
                    .sum();
                assert!((v - brute).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_policy_marks_body_first_convs_only() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let convs = conv_layers(&arch);
        for c in &convs {
            let expect = c.name.ends_with(".conv1") && c.name.starts_with("layer");
            assert_eq!(c.prunable, expect, "{}", c.name);
        }
        // plain networks prune everything
        let vgg = build_architecture("vgg16-cifar", 10).unwrap();
        assert!(conv_layers(&vgg).iter().all(|c| c.prunable));
    }

    #[test]
    fn build_mask_keeps_top_scores() {
        // 4 filters, scores {3,1,2,4}, ratio 0.5 -> keep filters 0 and 3
        let arch = tiny_conv_arch(4);
        let scores = FilterScores {
            layers: vec![("c".into(), vec![3.0, 1.0, 2.0, 4.0])],
        };
        let (mask, warnings) = build_filter_mask(
            &scores,
            &spec(PruneMethod::L1Filter, 0.5, LayerPolicy::UniformPerBlock),
            &arch,
        )
        .unwrap();
        assert!(warnings.is_empty());
        assert_eq!(mask.keep("c").unwrap(), &[true, false, false, true]);
    }

    fn tiny_conv_arch(filters: usize) -> crate::arch::Architecture {
        use crate::arch::{Architecture, Layer};
        let arch = Architecture {
            id: "tiny-conv".into(),
            input_shape: (1, 4, 4),
            classes: 2,
            layers: vec![
                Layer::Conv2d {
                    name: "c".into(),
                    in_ch: 1,
                    out_ch: filters,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    bias: true,
                },
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear {
                    name: "fc".into(),
                    in_features: filters,
                    out_features: 2,
                    bias: true,
                },
            ],
        };
        arch.validate().unwrap();
        arch
    }

    #[test]
    fn ratio_zero_gives_identity_mask() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let store = ParamStore::<f32>::init(&arch, 0).unwrap();
        let scores = score_filters_l1(&store, &arch).unwrap();
        let (mask, _) = build_filter_mask(
            &scores,
            &spec(PruneMethod::L1Filter, 0.0, LayerPolicy::UniformPerBlock),
            &arch,
        )
        .unwrap();
        assert!(mask.layers.iter().all(|(_, k)| k.iter().all(|&b| b)));
    }

    #[test]
    fn magnitude_example_keeps_3_and_2() {
        let scores = WeightScores {
            tensors: vec![("w".into(), vec![3.0, 1.0, 0.5, 2.0])],
        };
        let m = build_weight_mask(
            &scores,
            &spec(PruneMethod::MagnitudeGlobal, 0.5, LayerPolicy::Global),
        )
        .unwrap();
        assert_eq!(m.tensors[0].1, vec![1, 0, 0, 1]);
    }

    #[test]
    fn tie_break_keeps_lower_index() {
        let scores = WeightScores {
            tensors: vec![("w".into(), vec![1.0, 1.0, 1.0, 1.0])],
        };
        let m = build_weight_mask(
            &scores,
            &spec(PruneMethod::MagnitudeGlobal, 0.5, LayerPolicy::Global),
        )
        .unwrap();
        assert_eq!(m.tensors[0].1, vec![1, 1, 0, 0]);
    }

    #[test]
    fn random_masks_deterministic_and_structure_matched() {
        let arch = build_architecture("resnet56", 10).unwrap();
        let store = ParamStore::<f32>::init(&arch, 1).unwrap();
        let sp = spec(PruneMethod::RandomFilter, 0.3, LayerPolicy::UniformPerBlock);

        let a = score_random_filters(&arch, 7).unwrap();
        let b = score_random_filters(&arch, 7).unwrap();
        assert_eq!(a, b);

        let (rand_mask, _) = build_filter_mask(&a, &sp, &arch).unwrap();
        let l1 = score_filters_l1(&store, &arch).unwrap();
        let (l1_mask, _) = build_filter_mask(&l1, &sp, &arch).unwrap();
        assert_eq!(rand_mask.keep_counts().iter().map(|(_, k, _)| *k).collect::<Vec<_>>(),
                   l1_mask.keep_counts().iter().map(|(_, k, _)| *k).collect::<Vec<_>>());

        // different seeds disagree somewhere (≥100 filters in play)
        let c = score_random_filters(&arch, 8).unwrap();
        let (other_mask, _) = build_filter_mask(&c, &sp, &arch).unwrap();
        assert_ne!(rand_mask, other_mask);
    }

    #[test]
    fn uniform_per_block_equal_loss_within_width() {
        let arch = build_architecture("resnet56", 10).unwrap();
        let store = ParamStore::<f32>::init(&arch, 2).unwrap();
        let scores = score_filters_l1(&store, &arch).unwrap();
        let (mask, _) = build_filter_mask(
            &scores,
            &spec(PruneMethod::L1Filter, 0.3, LayerPolicy::UniformPerBlock),
            &arch,
        )
        .unwrap();
        let mut by_width: HashMap<usize, Vec<usize>> = HashMap::new();
        for (name, kept, total) in mask.keep_counts() {
            if name.ends_with(".conv1") && name.starts_with("layer") {
                by_width.entry(total).or_default().push(total - kept);
            }
        }
        for (width, losses) in by_width {
            assert!(
                losses.windows(2).all(|w| w[0] == w[1]),
                "width {width} loses unevenly: {losses:?}"
            );
        }
    }

    #[test]
    fn apply_filter_mask_zeroes_weights_bias_and_bn() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 3).unwrap();
        let scores = score_filters_l1(&store, &arch).unwrap();
        let (mask, _) = build_filter_mask(
            &scores,
            &spec(PruneMethod::L1Filter, 0.5, LayerPolicy::UniformPerBlock),
            &arch,
        )
        .unwrap();
        apply_mask(&mut store, &arch, &Mask::Filter(mask.clone())).unwrap();
        let keep = mask.keep("layer1.0.conv1").unwrap();
        let w = store.get("layer1.0.conv1.weight").unwrap();
        let per = w.weight.len() / keep.len();
        for (j, &k) in keep.iter().enumerate() {
            let all_zero = w.weight.data()[j * per..(j + 1) * per].iter().all(|&v| v == 0.0);
            assert_eq!(all_zero, !k);
        }
        let g = store.get("layer1.0.bn1.gamma").unwrap();
        let rv = store.get("layer1.0.bn1.running_var").unwrap();
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                assert_eq!(g.weight.data()[j], 0.0);
                assert_eq!(rv.weight.data()[j], 0.0);
            }
        }

        // idempotence
        let snapshot = store.clone();
        apply_mask(&mut store, &arch, &Mask::Filter(mask)).unwrap();
        for (a, b) in snapshot.entries().iter().zip(store.entries()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn magnitude_sparsity_is_exact() {
        let arch = build_architecture("mlp-small", 2).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 5).unwrap();
        let sp = spec(PruneMethod::MagnitudeGlobal, 0.5, LayerPolicy::Global);
        let (mask, _) = score_and_mask(&store, &arch, &sp, &[]).unwrap();
        apply_mask(&mut store, &arch, &mask).unwrap();
        let total: usize = store
            .entries()
            .iter()
            .filter(|e| e.kind.decays())
            .map(|e| e.mask.len())
            .sum();
        assert!((store.sparsity() - 0.5).abs() <= 1.0 / total as f64);
    }

    #[test]
    fn iterative_magnitude_masks_are_monotone() {
        let arch = build_architecture("mlp-small", 2).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 5).unwrap();
        let sp1 = spec(PruneMethod::MagnitudeGlobal, 0.3, LayerPolicy::Global);
        let (m1, _) = score_and_mask(&store, &arch, &sp1, &[]).unwrap();
        apply_mask(&mut store, &arch, &m1).unwrap();
        let sp2 = spec(PruneMethod::MagnitudeGlobal, 0.6, LayerPolicy::Global);
        let (m2, _) = score_and_mask(&store, &arch, &sp2, &[]).unwrap();
        let (Mask::Weight(m1), Mask::Weight(m2)) = (&m1, &m2) else { panic!() };
        for ((_, a), (_, b)) in m1.tensors.iter().zip(&m2.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert!(!(x == &0 && y == &1), "round 2 revived a pruned weight");
            }
        }
    }

    #[test]
    fn sfp_hook_zeroes_exact_count_and_allows_regrowth() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 9).unwrap();
        sfp_epoch_hook(&mut store, &arch, 0.3).unwrap();
        for c in conv_layers(&arch) {
            let e = store.get(&format!("{}.weight", c.name)).unwrap();
            let per = e.weight.len() / c.out_ch;
            let zero_filters = (0..c.out_ch)
                .filter(|&j| e.weight.data()[j * per..(j + 1) * per].iter().all(|&v| v == 0.0))
                .count();
            assert_eq!(zero_filters, (0.3 * c.out_ch as f64).round() as usize, "{}", c.name);
            // no masks installed
            assert!(e.mask.iter().all(|&m| m == 1));
        }

        // a zeroed filter with nonzero gradient moves after one step
        let name = "layer1.0.conv1.weight";
        let per = {
            let e = store.get(name).unwrap();
            e.weight.len() / 16
        };
        let dead = {
            let e = store.get(name).unwrap();
            (0..16)
                .find(|&j| e.weight.data()[j * per..(j + 1) * per].iter().all(|&v| v == 0.0))
                .unwrap()
        };
        store.get_mut(name).unwrap().grad.data_mut()[dead * per] = 1.0;
        crate::optim::step(&mut store, &crate::optim::OptimConfig::default(), 0.1).unwrap();
        assert_ne!(store.get(name).unwrap().weight.data()[dead * per], 0.0);
    }

    #[test]
    fn sfp_rate_zero_is_noop() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 9).unwrap();
        let snap = store.clone();
        sfp_epoch_hook(&mut store, &arch, 0.0).unwrap();
        for (a, b) in snap.entries().iter().zip(store.entries()) {
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn taylor_zero_gradient_scores_zero() {
        // zero classifier weights block all gradient flow into the convs
        let arch = tiny_conv_arch(3);
        let mut store = ParamStore::<f64>::init(&arch, 2).unwrap();
        store.get_mut("fc.weight").unwrap().weight.data_mut().fill(0.0);
        store.get_mut("fc.bias").unwrap().weight.data_mut().fill(0.0);
        let batch = crate::tensor::Tensor::from_vec(
            &[2, 1, 4, 4],
            (0..32).map(|i| (i as f64 * 0.31).sin()).collect(),
        )
        .unwrap();
        let scores =
            score_filters_taylor_fo(&store, &arch, &[(batch, vec![0, 1])]).unwrap();
        assert!(scores.layers[0].1.iter().all(|&v| v == 0.0), "{scores:?}");
    }

    #[test]
    fn taylor_score_matches_manual_accumulation() {
        let arch = tiny_conv_arch(3);
        let store = ParamStore::<f64>::init(&arch, 5).unwrap();
        let batch = crate::tensor::Tensor::from_vec(
            &[2, 1, 4, 4],
            (0..32).map(|i| (i as f64 * 0.47).cos()).collect(),
        )
        .unwrap();
        let labels = vec![1u16, 0];
        let scores =
            score_filters_taylor_fo(&store, &arch, &[(batch.clone(), labels.clone())]).unwrap();

        // manual route: one forward/backward, then (Σ g·w)² per filter
        let mut scratch = store.clone();
        let (logits, cache) = nn::forward_train(&mut scratch, &arch, &batch).unwrap();
        let (_, grad) = nn::cross_entropy(&logits, &labels).unwrap();
        nn::backward(&mut scratch, &arch, &cache, &grad).unwrap();
        let e = scratch.get("c.weight").unwrap();
        let per = e.weight.len() / 3;
        for (j, &got) in scores.layers[0].1.iter().enumerate() {
            let dot: f64 = e.weight.data()[j * per..(j + 1) * per]
                .iter()
                .zip(&e.grad.data()[j * per..(j + 1) * per])
                .map(|(w, g)| w * g)
                .sum();
            assert!((got - dot * dot).abs() < 1e-12, "filter {j}: {got} vs {}", dot * dot);
        }
    }
}
