//! Dataset acquisition, splitting, augmentation and deterministic batching.

pub mod cifar;
pub mod synthetic;

pub use cifar::{load_cifar10, load_cifar10_file};
pub use synthetic::{make_synthetic, SyntheticKind};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that holds dataset files.
pub const DATA_DIR_ENV: &str = "PRUNELAB_DATA_DIR";

/// An in-memory labeled image set. Images are u8 in (N, C, H, W) layout;
/// `mean`/`std` are the per-channel normalization constants on the 0..1
/// scale that [`Dataset::normalize`] applies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<u8>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.9,
            seed: 0,
        }
    }
}

/// One normalized minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<u8>,
        (n, c, h, w): (usize, usize, usize, usize),
        labels: Vec<u16>,
        classes: usize,
    ) -> Result<Self> {
        if images.len() != n * c * h * w {
            return Err(Error::Data(format!(
                "image buffer holds {} bytes, expected {}",
                images.len(),
                n * c * h * w
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} records", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} exceeds {classes} classes")));
        }
        let mut ds = Dataset {
            name: name.into(),
            images,
            n,
            channels: c,
            height: h,
            width: w,
            labels,
            classes,
            mean: vec![0.0; c],
            std: vec![1.0; c],
        };
        ds.compute_stats();
        Ok(ds)
    }

    pub fn sample_elems(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Per-channel mean/std of the 0..1-scaled pixels, with a small floor on
    /// std so normalization stays invertible.
    fn compute_stats(&mut self) {
        let plane = self.height * self.width;
        let per_ch = self.n * plane;
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for ni in 0..self.n {
                let base = (ni * self.channels + c) * plane;
                for &b in &self.images[base..base + plane] {
                    let v = b as f64 / 255.0;
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / per_ch as f64;
            let var = (sumsq / per_ch as f64 - mean * mean).max(0.0);
            self.mean[c] = mean as f32;
            self.std[c] = (var.sqrt() as f32).max(1e-3);
        }
    }

    /// Normalize one raw sample (u8, CHW) into an f32 buffer.
    pub fn normalize_into(&self, raw: &[u8], out: &mut [f32]) {
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let m = self.mean[c];
            let s_inv = 1.0 / self.std[c];
            for (o, &b) in out[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&raw[c * plane..(c + 1) * plane])
            {
                *o = (b as f32 / 255.0 - m) * s_inv;
            }
        }
    }

    /// Invert [`Dataset::normalize_into`] on the f32 scale.
    pub fn denormalize(&self, data: &[f32]) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; data.len()];
        for c in 0..self.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for (o, &v) in out[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&data[c * plane..(c + 1) * plane])
            {
                *o = (v * s + m) * 255.0;
            }
        }
        out
    }

    fn gather(&self, indices: &[usize], name: &str) -> Dataset {
        let se = self.sample_elems();
        let mut images = Vec::with_capacity(indices.len() * se);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(&self.images[i * se..(i + 1) * se]);
            labels.push(self.labels[i]);
        }
        Dataset {
            name: name.to_string(),
            images,
            n: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels,
            classes: self.classes,
            // children keep the parent's normalization
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Seed-deterministic disjoint exhaustive split into (train, val).
    pub fn split(&self, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
        if !(spec.train_frac > 0.0 && spec.train_frac < 1.0) {
            return Err(Error::Config(format!(
                "train_frac {} not in (0, 1)",
                spec.train_frac
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng::stream(spec.seed, "split"));
        let k = (spec.train_frac * self.n as f64).round() as usize;
        let k = k.clamp(1, self.n - 1);
        Ok((
            self.gather(&idx[..k], &format!("{}-train", self.name)),
            self.gather(&idx[k..], &format!("{}-val", self.name)),
        ))
    }

    /// Seed-deterministic subset of `n` records.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.n {
            return Err(Error::Range(format!(
                "subset of {n} from {} records",
                self.n
            )));
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng::stream(seed, "subset"));
        idx.truncate(n);
        Ok(self.gather(&idx, &format!("{}-sub{n}", self.name)))
    }
}

/// Deterministic per-epoch batch stream. Shuffling derives from
/// (seed, epoch); the final partial batch is kept.
pub struct EpochBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<rand_chacha::ChaCha8Rng>,
}

/// Iterate the epoch's batches. With `augment`, image data goes through
/// pad-4 random crop plus horizontal flip before normalization.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
) -> Result<EpochBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.n).collect();
    order.shuffle(&mut rng::epoch_stream(seed, "data", epoch));
    Ok(EpochBatches {
        dataset,
        order,
        batch_size,
        cursor: 0,
        augment: augment.then(|| rng::epoch_stream(seed, "augment", epoch)),
    })
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Unshuffled, unaugmented normalized batches for evaluation.
pub fn eval_batches(
    dataset: &Dataset,
    batch_size: usize,
) -> impl Iterator<Item = (Tensor<f32>, Vec<u16>)> + '_ {
    let se = dataset.sample_elems();
    (0..dataset.n).step_by(batch_size.max(1)).map(move |start| {
        let end = (start + batch_size).min(dataset.n);
        let n = end - start;
        let mut images =
            Tensor::<f32>::zeros(&[n, dataset.channels, dataset.height, dataset.width]);
        for (bi, i) in (start..end).enumerate() {
            dataset.normalize_into(
                &dataset.images[i * se..(i + 1) * se],
                &mut images.data_mut()[bi * se..(bi + 1) * se],
            );
        }
        (images, dataset.labels[start..end].to_vec())
    })
}

const PAD: usize = 4;

fn augment_sample(
    raw: &[u8],
    (c, h, w): (usize, usize, usize),
    rng: &mut rand_chacha::ChaCha8Rng,
    out: &mut [u8],
) {
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen_bool(0.5);
    let plane = h * w;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // position in the zero-padded image
                let sy = y as isize + dy as isize - PAD as isize;
                let sx_raw = x as isize + dx as isize - PAD as isize;
                let sx = if flip {
                    w as isize - 1 - sx_raw
                } else {
                    sx_raw
                };
                // a flipped out-of-pad coordinate stays out of range
                let v = if sy < 0 || sy >= h as isize || sx_raw < 0 || sx_raw >= w as isize {
                    0
                } else {
                    raw[ci * plane + sy as usize * w + sx as usize]
                };
                out[ci * plane + y * w + x] = v;
            }
        }
    }
}

impl<'a> Iterator for EpochBatches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let ds = self.dataset;
        let se = ds.sample_elems();
        let n = idx.len();
        let mut images = Tensor::<f32>::zeros(&[n, ds.channels, ds.height, ds.width]);
        let mut labels = Vec::with_capacity(n);
        let mut scratch = vec![0u8; se];
        for (bi, &i) in idx.iter().enumerate() {
            let raw = &ds.images[i * se..(i + 1) * se];
            let out = &mut images.data_mut()[bi * se..(bi + 1) * se];
            match self.augment.as_mut() {
                Some(rng) if ds.height > 2 * PAD && ds.width > 2 * PAD => {
                    augment_sample(raw, (ds.channels, ds.height, ds.width), rng, &mut scratch);
                    ds.normalize_into(&scratch, out);
                }
                _ => ds.normalize_into(raw, out),
            }
            labels.push(ds.labels[i]);
        }
        Some(Batch { images, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images: Vec<u8> = (0..n * 3 * 4 * 4).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u16> = (0..n).map(|i| (i % 5) as u16).collect();
        Dataset::new("toy", images, (n, 3, 4, 4), labels, 5).unwrap()
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let ds = toy(100);
        let spec = SplitSpec { train_frac: 0.9, seed: 3 };
        let (tr, va) = ds.split(spec).unwrap();
        assert_eq!(tr.n, 90);
        assert_eq!(va.n, 10);
        let (tr2, _) = ds.split(spec).unwrap();
        assert_eq!(tr.images, tr2.images);

        // union of per-sample byte blocks equals the original multiset
        let se = ds.sample_elems();
        let mut all: Vec<&[u8]> = ds.images.chunks(se).collect();
        let mut got: Vec<&[u8]> = tr.images.chunks(se).chain(va.images.chunks(se)).collect();
        all.sort();
        got.sort();
        assert_eq!(all, got);
    }

    #[test]
    fn epoch_covers_every_record_once_and_keeps_partial_batch() {
        let ds = toy(10);
        // reference normalization of each record (identical f32 math)
        let mut expect: Vec<Vec<f32>> = Vec::new();
        for i in 0..10 {
            let mut buf = vec![0.0f32; 48];
            ds.normalize_into(&ds.images[i * 48..(i + 1) * 48], &mut buf);
            expect.push(buf);
        }
        let mut seen = vec![0usize; 10];
        let mut batch_sizes = Vec::new();
        for b in batches(&ds, 4, 9, 0, false).unwrap() {
            batch_sizes.push(b.labels.len());
            for bi in 0..b.labels.len() {
                let sample = &b.images.data()[bi * 48..(bi + 1) * 48];
                let rec = expect
                    .iter()
                    .position(|e| e.as_slice() == sample)
                    .expect("batch sample must match exactly one record");
                seen[rec] += 1;
            }
        }
        assert_eq!(batch_sizes, vec![4, 4, 2]);
        assert_eq!(seen, vec![1; 10]);
    }

    #[test]
    fn single_batch_when_batch_size_is_n() {
        let ds = toy(6);
        let got: Vec<_> = batches(&ds, 6, 0, 0, false).unwrap().collect();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].labels.len(), 6);
    }

    #[test]
    fn same_seed_same_stream() {
        let ds = toy(12);
        let a: Vec<Batch> = batches(&ds, 5, 4, 2, false).unwrap().collect();
        let b: Vec<Batch> = batches(&ds, 5, 4, 2, false).unwrap().collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images.data(), y.images.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn augmented_crop_keeps_shape_and_determinism() {
        let images: Vec<u8> = (0..2 * 3 * 32 * 32).map(|i| (i % 255) as u8).collect();
        let ds = Dataset::new("img", images, (2, 3, 32, 32), vec![0, 1], 2).unwrap();
        let a: Vec<Batch> = batches(&ds, 2, 1, 0, true).unwrap().collect();
        let b: Vec<Batch> = batches(&ds, 2, 1, 0, true).unwrap().collect();
        assert_eq!(a[0].images.shape(), &[2, 3, 32, 32]);
        assert_eq!(a[0].images.data(), b[0].images.data());
    }

    #[test]
    fn normalize_roundtrip_within_f32_eps() {
        let ds = toy(4);
        let raw = &ds.images[..48];
        let mut norm = vec![0.0f32; 48];
        ds.normalize_into(raw, &mut norm);
        let back = ds.denormalize(&norm);
        for (&b, r) in raw.iter().zip(back) {
            assert!((b as f32 - r).abs() < 1e-3, "{b} vs {r}");
        }
    }
}
