//! Synthetic datasets: desk-scale substitutes for large image sets.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Two interleaved spirals in the plane (2 classes, 2 features).
    TwoSpirals { turns: f64, noise: f64 },
    /// Isotropic Gaussian clusters on a circle (2 features).
    GaussianBlobs { classes: usize, sigma: f64 },
    /// 32×32×3 images: per-class low-frequency templates under random
    /// translation and pixel noise.
    TinyImages { classes: usize, noise: f64 },
}

impl SyntheticKind {
    pub fn two_spirals() -> Self {
        SyntheticKind::TwoSpirals { turns: 1.5, noise: 0.04 }
    }

    pub fn gaussian_blobs() -> Self {
        SyntheticKind::GaussianBlobs { classes: 3, sigma: 0.15 }
    }

    pub fn tiny_images() -> Self {
        SyntheticKind::TinyImages { classes: 10, noise: 0.22 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "two-spirals" => Ok(Self::two_spirals()),
            "gaussian-blobs" => Ok(Self::gaussian_blobs()),
            "tiny-images" => Ok(Self::tiny_images()),
            other => Err(Error::Config(format!("unknown synthetic dataset '{other}'"))),
        }
    }
}

fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    (((v - lo) / (hi - lo) * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Generate a deterministic synthetic dataset of `n` records.
pub fn make_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    match kind {
        SyntheticKind::TwoSpirals { turns, noise } => spirals(n, seed, turns, noise),
        SyntheticKind::GaussianBlobs { classes, sigma } => blobs(n, seed, classes, sigma),
        SyntheticKind::TinyImages { classes, noise } => tiny_images(n, seed, classes, noise),
    }
}

fn spirals(n: usize, seed: u64, turns: f64, noise: f64) -> Result<Dataset> {
    let mut rng = rng::stream(seed, "synthetic");
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let bound = 1.2 + 4.0 * noise;
    let mut images = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u16;
        let t: f64 = 0.2 + 0.8 * rng.gen::<f64>();
        let theta = t * turns * std::f64::consts::TAU + class as f64 * std::f64::consts::PI;
        let r = t;
        let x = r * theta.cos() + normal.sample(&mut rng);
        let y = r * theta.sin() + normal.sample(&mut rng);
        images.push(quantize(x, -bound, bound));
        images.push(quantize(y, -bound, bound));
        labels.push(class);
    }
    Dataset::new("two-spirals", images, (n, 2, 1, 1), labels, 2)
}

fn blobs(n: usize, seed: u64, classes: usize, sigma: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("blobs need >= 2 classes".into()));
    }
    let mut rng = rng::stream(seed, "synthetic");
    let bound = 1.0 + 6.0 * sigma.max(0.05);
    let mut images = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = class as f64 / classes as f64 * std::f64::consts::TAU;
        let (cx, cy) = (angle.cos(), angle.sin());
        let (dx, dy): (f64, f64) = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        images.push(quantize(cx + dx, -bound, bound));
        images.push(quantize(cy + dy, -bound, bound));
        labels.push(class as u16);
    }
    Dataset::new("gaussian-blobs", images, (n, 2, 1, 1), labels, classes)
}

const TI_SIZE: usize = 32;
const TI_GRID: usize = 8;
const TI_SHIFT: isize = 4;

/// Smooth per-class template: a coarse random grid bilinearly upsampled.
fn class_template(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut grid = vec![0.0f64; 3 * TI_GRID * TI_GRID];
    for v in &mut grid {
        *v = rng.gen::<f64>();
    }
    let mut tpl = vec![0.0f64; 3 * TI_SIZE * TI_SIZE];
    let scale = TI_GRID as f64 / TI_SIZE as f64;
    for c in 0..3 {
        for y in 0..TI_SIZE {
            for x in 0..TI_SIZE {
                let gy = y as f64 * scale;
                let gx = x as f64 * scale;
                let (y0, x0) = (gy.floor() as usize % TI_GRID, gx.floor() as usize % TI_GRID);
                let (y1, x1) = ((y0 + 1) % TI_GRID, (x0 + 1) % TI_GRID);
                let (fy, fx) = (gy.fract(), gx.fract());
                let g = |yy: usize, xx: usize| grid[(c * TI_GRID + yy) * TI_GRID + xx];
                let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + g(y0, x1) * (1.0 - fy) * fx
                    + g(y1, x0) * fy * (1.0 - fx)
                    + g(y1, x1) * fy * fx;
                tpl[(c * TI_SIZE + y) * TI_SIZE + x] = v;
            }
        }
    }
    tpl
}

fn tiny_images(n: usize, seed: u64, classes: usize, noise: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("tiny-images need >= 2 classes".into()));
    }
    let mut trng = rng::stream(seed, "synthetic/templates");
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| class_template(&mut trng)).collect();
    let mut rng = rng::stream(seed, "synthetic");
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let plane = TI_SIZE * TI_SIZE;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let tpl = &templates[class];
        let dy = rng.gen_range(-TI_SHIFT..=TI_SHIFT);
        let dx = rng.gen_range(-TI_SHIFT..=TI_SHIFT);
        for c in 0..3 {
            for y in 0..TI_SIZE {
                for x in 0..TI_SIZE {
                    // wrap-around translation keeps template energy constant
                    let sy = (y as isize + dy).rem_euclid(TI_SIZE as isize) as usize;
                    let sx = (x as isize + dx).rem_euclid(TI_SIZE as isize) as usize;
                    let v = tpl[(c * TI_SIZE + sy) * TI_SIZE + sx] + normal.sample(&mut rng);
                    images.push(quantize(v, -0.5, 1.5));
                }
            }
        }
        labels.push(class as u16);
    }
    Dataset::new("tiny-images", images, (n, 3, TI_SIZE, TI_SIZE), labels, classes)
}
