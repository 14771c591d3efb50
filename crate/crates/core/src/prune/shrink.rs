//! Physically remove masked-out filters: output channels disappear from a
//! conv, the following batchnorm, the next layer's input channels, and the
//! classifier's input features.

use super::FilterMask;
use crate::arch::{ActShape, Architecture, Layer};
use crate::error::{Error, Result};
use crate::store::{ParamEntry, ParamStore};
use crate::tensor::{Element, Tensor};

/// Indices of kept channels entering the next layer; `None` means all.
type KeptIn = Option<Vec<usize>>;

struct Shrinker<'a, E> {
    store: &'a ParamStore<E>,
    mask: &'a FilterMask,
    out: Vec<ParamEntry<E>>,
}

impl<'a, E: Element> Shrinker<'a, E> {
    fn keep_of(&self, name: &str, out_ch: usize) -> Result<Vec<usize>> {
        let keep = self
            .mask
            .keep(name)
            .ok_or_else(|| Error::Usage(format!("mask missing layer '{name}'")))?;
        if keep.len() != out_ch {
            return Err(Error::Shape(format!("mask length mismatch for '{name}'")));
        }
        let kept: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(j, &k)| k.then_some(j))
            .collect();
        if kept.is_empty() {
            return Err(Error::Policy(format!("layer '{name}' would keep no filters")));
        }
        Ok(kept)
    }

    fn push_sliced_conv(
        &mut self,
        name: &str,
        bias: bool,
        in_ch: usize,
        kernel: usize,
        kept_out: &[usize],
        kept_in: &KeptIn,
    ) -> Result<()> {
        let wname = format!("{name}.weight");
        let src = self.store.get(&wname)?;
        let k2 = kernel * kernel;
        let in_idx: Vec<usize> = match kept_in {
            Some(v) => v.clone(),
            None => (0..in_ch).collect(),
        };
        let mut data = Vec::with_capacity(kept_out.len() * in_idx.len() * k2);
        for &o in kept_out {
            for &i in &in_idx {
                let base = (o * in_ch + i) * k2;
                data.extend_from_slice(&src.weight.data()[base..base + k2]);
            }
        }
        let w = Tensor::from_vec(&[kept_out.len(), in_idx.len(), kernel, kernel], data)?;
        self.out.push(entry_like(src, w));
        if bias {
            let bname = format!("{name}.bias");
            let src = self.store.get(&bname)?;
            let data: Vec<E> = kept_out.iter().map(|&o| src.weight.data()[o]).collect();
            let t = Tensor::from_vec(&[kept_out.len()], data)?;
            self.out.push(entry_like(src, t));
        }
        Ok(())
    }

    fn push_sliced_bn(&mut self, name: &str, kept: &[usize]) -> Result<()> {
        for suffix in ["gamma", "beta", "running_mean", "running_var"] {
            let src = self.store.get(&format!("{name}.{suffix}"))?;
            let data: Vec<E> = kept.iter().map(|&j| src.weight.data()[j]).collect();
            let t = Tensor::from_vec(&[kept.len()], data)?;
            self.out.push(entry_like(src, t));
        }
        Ok(())
    }

    fn shrink_seq(
        &mut self,
        layers: &[Layer],
        mut shape: ActShape,
        mut kept_in: KeptIn,
    ) -> Result<(Vec<Layer>, ActShape, KeptIn)> {
        let mut new_layers = Vec::with_capacity(layers.len());
        for layer in layers {
            match layer {
                Layer::Conv2d {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => {
                    let kept_out = self.keep_of(name, *out_ch)?;
                    self.push_sliced_conv(name, *bias, *in_ch, *kernel, &kept_out, &kept_in)?;
                    let new_in = kept_in.as_ref().map_or(*in_ch, |v| v.len());
                    let new_layer = Layer::Conv2d {
                        name: name.clone(),
                        in_ch: new_in,
                        out_ch: kept_out.len(),
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                        bias: *bias,
                    };
                    shape = crate::arch::compute_out_shape(&new_layer, shape)?;
                    kept_in = if kept_out.len() == *out_ch {
                        None
                    } else {
                        Some(kept_out)
                    };
                    new_layers.push(new_layer);
                }
                Layer::BatchNorm { name, channels } => {
                    let kept: Vec<usize> = match &kept_in {
                        Some(v) => v.clone(),
                        None => (0..*channels).collect(),
                    };
                    self.push_sliced_bn(name, &kept)?;
                    new_layers.push(Layer::BatchNorm {
                        name: name.clone(),
                        channels: kept.len(),
                    });
                }
                Layer::Relu | Layer::AvgPool2d { .. } => {
                    new_layers.push(layer.clone());
                    shape = crate::arch::compute_out_shape(layer, shape)?;
                }
                Layer::GlobalAvgPool => {
                    // channel indices become feature indices unchanged
                    new_layers.push(Layer::GlobalAvgPool);
                    shape = ActShape::Flat(match shape {
                        ActShape::Chw(c, _, _) => c,
                        ActShape::Flat(f) => f,
                    });
                }
                Layer::Flatten => {
                    let ActShape::Chw(c, h, w) = shape else {
                        return Err(Error::Shape("flatten expects spatial input".into()));
                    };
                    if let Some(kept) = &kept_in {
                        // expand channel selection to feature selection
                        let hw = h * w;
                        kept_in = Some(
                            kept.iter()
                                .flat_map(|&ci| (0..hw).map(move |s| ci * hw + s))
                                .collect(),
                        );
                    }
                    shape = ActShape::Flat(c * h * w);
                    new_layers.push(Layer::Flatten);
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => {
                    let src = self.store.get(&format!("{name}.weight"))?;
                    let in_idx: Vec<usize> = match &kept_in {
                        Some(v) => v.clone(),
                        None => (0..*in_features).collect(),
                    };
                    let mut data = Vec::with_capacity(out_features * in_idx.len());
                    for o in 0..*out_features {
                        for &i in &in_idx {
                            data.push(src.weight.data()[o * in_features + i]);
                        }
                    }
                    let t = Tensor::from_vec(&[*out_features, in_idx.len()], data)?;
                    self.out.push(entry_like(src, t));
                    if *bias {
                        let src = self.store.get(&format!("{name}.bias"))?;
                        self.out.push(entry_like(src, src.weight.clone()));
                    }
                    new_layers.push(Layer::Linear {
                        name: name.clone(),
                        in_features: in_idx.len(),
                        out_features: *out_features,
                        bias: *bias,
                    });
                    shape = ActShape::Flat(*out_features);
                    kept_in = None;
                }
                Layer::Residual { name, body, shortcut } => {
                    if kept_in.is_some() {
                        return Err(Error::Policy(format!(
                            "residual '{name}' input channels were pruned; \
                             the default policy keeps block inputs intact"
                        )));
                    }
                    let (new_body, body_shape, body_kept) =
                        self.shrink_seq(body, shape, None)?;
                    if body_kept.is_some() {
                        return Err(Error::Policy(format!(
                            "residual '{name}' body output channels were pruned; \
                             the last body conv must keep every filter"
                        )));
                    }
                    let new_layer = Layer::Residual {
                        name: name.clone(),
                        body: new_body,
                        shortcut: shortcut.clone(),
                    };
                    shape = body_shape;
                    new_layers.push(new_layer);
                }
            }
        }
        Ok((new_layers, shape, kept_in))
    }
}

fn entry_like<E: Element>(src: &ParamEntry<E>, weight: Tensor<E>) -> ParamEntry<E> {
    let shape = weight.shape().to_vec();
    ParamEntry {
        name: src.name.clone(),
        mask: vec![1u8; weight.len()],
        grad: Tensor::zeros(&shape),
        momentum: Tensor::zeros(&shape),
        kind: src.kind,
        weight,
    }
}

/// Build the physically smaller network described by a structured mask.
/// Removed output channels disappear, downstream input channels follow, and
/// optimizer state comes back zeroed.
pub fn shrink_structured<E: Element>(
    store: &ParamStore<E>,
    arch: &Architecture,
    mask: &FilterMask,
) -> Result<(ParamStore<E>, Architecture)> {
    let mut sh = Shrinker {
        store,
        mask,
        out: Vec::new(),
    };
    let (c, h, w) = arch.input_shape;
    let (layers, _, kept_out) = sh.shrink_seq(&arch.layers, ActShape::Chw(c, h, w), None)?;
    if kept_out.is_some() {
        return Err(Error::Policy("network output features were pruned".into()));
    }
    let new_arch = Architecture {
        id: arch.id.clone(),
        input_shape: arch.input_shape,
        classes: arch.classes,
        layers,
    };
    new_arch.validate()?;
    let mut new_store = ParamStore::<E>::init(&new_arch, store.seed)?;
    for entry in sh.out {
        let dst = new_store.get_mut(&entry.name)?;
        if dst.weight.shape() != entry.weight.shape() {
            return Err(Error::Shape(format!(
                "shrunk entry '{}' shaped {:?}, expected {:?}",
                entry.name,
                entry.weight.shape(),
                dst.weight.shape()
            )));
        }
        *dst = entry;
    }
    Ok((new_store, new_arch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_architecture;
    use crate::prune::{
        apply_mask, build_filter_mask, score_filters_l1, LayerPolicy, Mask, PruneMethod, PruneSpec,
    };

    #[test]
    fn identity_mask_preserves_everything() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let store = ParamStore::<f64>::init(&arch, 4).unwrap();
        let mask = FilterMask {
            layers: crate::prune::conv_layers(&arch)
                .iter()
                .map(|c| (c.name.clone(), vec![true; c.out_ch]))
                .collect(),
        };
        let (small, new_arch) = shrink_structured(&store, &arch, &mask).unwrap();
        assert_eq!(new_arch, arch);
        for (a, b) in store.entries().iter().zip(small.entries()) {
            assert_eq!(a.weight, b.weight, "{}", a.name);
        }
    }

    #[test]
    fn shrunk_resnet_param_count_matches_analytic() {
        let arch = build_architecture("resnet56", 10).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 4).unwrap();
        let spec = PruneSpec {
            method: PruneMethod::L1Filter,
            ratio: 0.3,
            policy: LayerPolicy::UniformPerBlock,
            seed: 0,
            rounds: 1,
        };
        let scores = score_filters_l1(&store, &arch).unwrap();
        let (mask, _) = build_filter_mask(&scores, &spec, &arch).unwrap();
        apply_mask(&mut store, &arch, &Mask::Filter(mask.clone())).unwrap();
        let (_, small_arch) = shrink_structured(&store, &arch, &mask).unwrap();

        // analytic: every block conv1 keeps round(0.7·n) filters; conv1 and
        // the bn shrink by keep/n, conv2 input likewise
        let mut expect = 0usize;
        for layer in &arch.layers {
            match layer {
                Layer::Conv2d { in_ch, out_ch, kernel, .. } => {
                    expect += in_ch * out_ch * kernel * kernel;
                }
                Layer::BatchNorm { channels, .. } => expect += 2 * channels,
                Layer::Linear { in_features, out_features, .. } => {
                    expect += in_features * out_features + out_features;
                }
                Layer::Residual { body, .. } => {
                    let (mut cin, mut kept) = (0usize, 0usize);
                    for l in body {
                        match l {
                            Layer::Conv2d { name, in_ch, out_ch, kernel, .. } => {
                                if name.ends_with(".conv1") {
                                    kept = (0.7 * *out_ch as f64).round() as usize;
                                    cin = *in_ch;
                                    expect += cin * kept * kernel * kernel;
                                } else {
                                    expect += kept * out_ch * kernel * kernel;
                                }
                            }
                            Layer::BatchNorm { name, channels } => {
                                expect += 2 * if name.ends_with(".bn1") { kept } else { *channels };
                            }
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
        assert_eq!(small_arch.param_count(), expect);
    }

    #[test]
    fn pruned_residual_input_is_a_policy_error() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let store = ParamStore::<f32>::init(&arch, 4).unwrap();
        let mut layers: Vec<(String, Vec<bool>)> = crate::prune::conv_layers(&arch)
            .iter()
            .map(|c| (c.name.clone(), vec![true; c.out_ch]))
            .collect();
        // pruning the stem conv's output feeds stage-1 identity adds
        for (name, keep) in &mut layers {
            if name == "conv1" {
                keep[0] = false;
            }
        }
        let mask = FilterMask { layers };
        assert!(matches!(
            shrink_structured(&store, &arch, &mask),
            Err(Error::Policy(_))
        ));
    }
}
