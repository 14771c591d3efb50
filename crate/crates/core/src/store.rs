//! Named parameter tensors with per-tensor binary masks and optimizer state.

use crate::arch::{Architecture, ParamKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub weight: Tensor<E>,
    /// {0,1} per element; 0 marks a pruned weight.
    pub mask: Vec<u8>,
    pub grad: Tensor<E>,
    pub momentum: Tensor<E>,
    pub kind: ParamKind,
}

impl<E: Element> ParamEntry<E> {
    fn new(name: String, weight: Tensor<E>, kind: ParamKind) -> Self {
        let shape = weight.shape().to_vec();
        let len = weight.len();
        ParamEntry {
            name,
            weight,
            mask: vec![1u8; len],
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            kind,
        }
    }

    /// Re-establish weight ⊙ (1−mask) == 0 (and likewise for momentum).
    pub fn enforce_mask(&mut self) {
        if self.mask.iter().all(|&m| m == 1) {
            return;
        }
        for ((w, v), &m) in self
            .weight
            .data_mut()
            .iter_mut()
            .zip(self.momentum.data_mut().iter_mut())
            .zip(self.mask.iter())
        {
            if m == 0 {
                *w = E::zero();
                *v = E::zero();
            }
        }
    }

    /// Zero gradients of masked elements.
    pub fn mask_grad(&mut self) {
        if self.mask.iter().all(|&m| m == 1) {
            return;
        }
        for (g, &m) in self.grad.data_mut().iter_mut().zip(self.mask.iter()) {
            if m == 0 {
                *g = E::zero();
            }
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0).count()
    }
}

/// Ordered map name → parameter entry. Iteration order is insertion order and
/// therefore deterministic for a given architecture.
#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
    pub arch_id: String,
    pub seed: u64,
}

impl<E: Element> ParamStore<E> {
    /// Initialize parameters for `arch`: Kaiming fan-in normal for conv and
    /// linear weights, zeros for biases, γ=1/β=0 for batchnorm, running
    /// mean 0 / variance 1.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "init");
        let mut store = ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            arch_id: arch.id.clone(),
            seed,
        };
        for (name, shape, kind) in arch.param_decls() {
            let len: usize = shape.iter().product();
            let weight = match kind {
                ParamKind::ConvWeight | ParamKind::LinearWeight => {
                    // fan_in = in_ch · k² for conv, in_features for linear
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std)
                        .map_err(|e| Error::Config(format!("init: {e}")))?;
                    let data: Vec<E> = (0..len)
                        .map(|_| E::from_f64(normal.sample(&mut rng)))
                        .collect();
                    Tensor::from_vec(&shape, data)?
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor::full(&shape, E::one()),
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                    Tensor::zeros(&shape)
                }
            };
            store.insert(ParamEntry::new(name, weight, kind))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, entry: ParamEntry<E>) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::Usage(format!("duplicate parameter '{}'", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<E>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Usage(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Fraction of masked-out elements among prunable (conv/linear weight) tensors.
    pub fn sparsity(&self) -> f64 {
        let mut total = 0usize;
        let mut masked = 0usize;
        for e in &self.entries {
            if e.kind.decays() {
                total += e.mask.len();
                masked += e.masked_count();
            }
        }
        if total == 0 {
            0.0
        } else {
            masked as f64 / total as f64
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(E::zero());
        }
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    weight: e.weight.to_f64(),
                    mask: e.mask.clone(),
                    grad: e.grad.to_f64(),
                    momentum: e.momentum.to_f64(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
            arch_id: self.arch_id.clone(),
            seed: self.seed,
        }
    }

    pub fn to_f32(&self) -> ParamStore<f32> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    weight: e.weight.to_f32(),
                    mask: e.mask.clone(),
                    grad: e.grad.to_f32(),
                    momentum: e.momentum.to_f32(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
            arch_id: self.arch_id.clone(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_architecture;

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = build_architecture("mlp-small", 2).unwrap();
        let a = ParamStore::<f32>::init(&arch, 3).unwrap();
        let b = ParamStore::<f32>::init(&arch, 3).unwrap();
        let c = ParamStore::<f32>::init(&arch, 4).unwrap();
        assert_eq!(a.get("fc1.weight").unwrap().weight, b.get("fc1.weight").unwrap().weight);
        assert_ne!(a.get("fc1.weight").unwrap().weight, c.get("fc1.weight").unwrap().weight);
    }

    #[test]
    fn bn_buffers_initialized() {
        let arch = build_architecture("resnet20", 10).unwrap();
        let s = ParamStore::<f32>::init(&arch, 0).unwrap();
        let gamma = s.get("bn1.gamma").unwrap();
        assert!(gamma.weight.data().iter().all(|&v| v == 1.0));
        let rv = s.get("bn1.running_var").unwrap();
        assert!(rv.weight.data().iter().all(|&v| v == 1.0));
        let rm = s.get("bn1.running_mean").unwrap();
        assert!(rm.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enforce_mask_zeroes_weight_and_momentum() {
        let arch = build_architecture("mlp-small", 2).unwrap();
        let mut s = ParamStore::<f32>::init(&arch, 0).unwrap();
        let e = s.get_mut("fc1.weight").unwrap();
        e.mask[0] = 0;
        e.momentum.data_mut()[0] = 5.0;
        e.enforce_mask();
        assert_eq!(e.weight.data()[0], 0.0);
        assert_eq!(e.momentum.data()[0], 0.0);
        assert_ne!(e.weight.data()[1], 0.0);
    }
}
