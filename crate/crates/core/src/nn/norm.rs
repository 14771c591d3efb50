//! Batch normalization.
//!
//! Training mode normalizes with biased batch statistics and maintains
//! running estimates by exponential moving average (running variance uses
//! the unbiased estimator). Eval mode reads the running estimates only.

use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics captured during the training forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    pub invstd: Vec<E>,
}

/// Training forward. `x` is (N, C, H, W). Returns the output and batch stats,
/// and updates `running_mean`/`running_var` in place.
pub fn forward_train<E: Element>(
    gamma: &[E],
    beta: &[E],
    running_mean: &mut [E],
    running_var: &mut [E],
    x: &Tensor<E>,
) -> (Tensor<E>, BnStats<E>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let count = n * hw;
    let cs = c * hw;

    // Two-pass statistics in fixed order: samples outer, spatial inner.
    let mut mean = vec![E::zero(); c];
    for ni in 0..n {
        for (ci, m) in mean.iter_mut().enumerate() {
            let mut s = E::zero();
            for v in &x.data()[ni * cs + ci * hw..ni * cs + (ci + 1) * hw] {
                s += *v;
            }
            *m += s;
        }
    }
    let inv_count = E::from_f64(1.0 / count as f64);
    for m in &mut mean {
        *m *= inv_count;
    }
    let mut var = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let m = mean[ci];
            let mut s = E::zero();
            for v in &x.data()[ni * cs + ci * hw..ni * cs + (ci + 1) * hw] {
                let d = *v - m;
                s += d * d;
            }
            var[ci] += s;
        }
    }
    for v in &mut var {
        *v *= inv_count;
    }

    let eps = E::from_f64(BN_EPS);
    let invstd: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

    let mom = E::from_f64(BN_MOMENTUM);
    let keep = E::one() - mom;
    let unbias = if count > 1 {
        E::from_f64(count as f64 / (count - 1) as f64)
    } else {
        E::one()
    };
    for ci in 0..c {
        running_mean[ci] = keep * running_mean[ci] + mom * mean[ci];
        running_var[ci] = keep * running_var[ci] + mom * var[ci] * unbias;
    }

    let mut y = unsafe { Tensor::uninit(x.shape()) };
    let apply = |(ys, xs): (&mut [E], &[E])| {
        for ci in 0..c {
            let (m, is, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            for (yo, xi) in ys[ci * hw..(ci + 1) * hw]
                .iter_mut()
                .zip(&xs[ci * hw..(ci + 1) * hw])
            {
                *yo = g * (*xi - m) * is + b;
            }
        }
    };
    if crate::par::intra_op() {
        y.data_mut()
            .par_chunks_mut(cs)
            .zip(x.data().par_chunks(cs))
            .for_each(apply);
    } else {
        y.data_mut().chunks_mut(cs).zip(x.data().chunks(cs)).for_each(apply);
    }
    (y, BnStats { mean, invstd })
}

/// Eval forward using running statistics; mutates nothing.
pub fn forward_eval<E: Element>(
    gamma: &[E],
    beta: &[E],
    running_mean: &[E],
    running_var: &[E],
    x: &Tensor<E>,
) -> Tensor<E> {
    let (_, c, h, w) = dims4(x);
    let hw = h * w;
    let cs = c * hw;
    let eps = E::from_f64(BN_EPS);
    let mut y = unsafe { Tensor::uninit(x.shape()) };
    let apply = |(ys, xs): (&mut [E], &[E])| {
        for ci in 0..c {
            let is = (running_var[ci] + eps).sqrt().recip();
            let (m, g, b) = (running_mean[ci], gamma[ci], beta[ci]);
            for (yo, xi) in ys[ci * hw..(ci + 1) * hw]
                .iter_mut()
                .zip(&xs[ci * hw..(ci + 1) * hw])
            {
                *yo = g * (*xi - m) * is + b;
            }
        }
    };
    if crate::par::intra_op() {
        y.data_mut()
            .par_chunks_mut(cs)
            .zip(x.data().par_chunks(cs))
            .for_each(apply);
    } else {
        y.data_mut().chunks_mut(cs).zip(x.data().chunks(cs)).for_each(apply);
    }
    y
}

/// Training backward. Returns (d_gamma, d_beta, d_input).
pub fn backward<E: Element>(
    gamma: &[E],
    x: &Tensor<E>,
    dy: &Tensor<E>,
    stats: &BnStats<E>,
) -> (Vec<E>, Vec<E>, Tensor<E>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let count = n * hw;
    let cs = c * hw;

    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let (m, is) = (stats.mean[ci], stats.invstd[ci]);
            let mut sg = E::zero();
            let mut sb = E::zero();
            let xs = &x.data()[ni * cs + ci * hw..ni * cs + (ci + 1) * hw];
            let dys = &dy.data()[ni * cs + ci * hw..ni * cs + (ci + 1) * hw];
            for (xi, dyi) in xs.iter().zip(dys) {
                sg += *dyi * (*xi - m) * is;
                sb += *dyi;
            }
            dgamma[ci] += sg;
            dbeta[ci] += sb;
        }
    }

    let inv_count = E::from_f64(1.0 / count as f64);
    let mut dx = unsafe { Tensor::uninit(x.shape()) };
    let apply = |(dxs, (xs, dys)): (&mut [E], (&[E], &[E]))| {
        for ci in 0..c {
            let (m, is, g) = (stats.mean[ci], stats.invstd[ci], gamma[ci]);
            let mean_dy = dbeta[ci] * inv_count;
            let mean_dy_xhat = dgamma[ci] * inv_count;
            for ((dxo, xi), dyi) in dxs[ci * hw..(ci + 1) * hw]
                .iter_mut()
                .zip(&xs[ci * hw..(ci + 1) * hw])
                .zip(&dys[ci * hw..(ci + 1) * hw])
            {
                let xhat = (*xi - m) * is;
                *dxo = g * is * (*dyi - mean_dy - xhat * mean_dy_xhat);
            }
        }
    };
    if crate::par::intra_op() {
        dx.data_mut()
            .par_chunks_mut(cs)
            .zip(x.data().par_chunks(cs).zip(dy.data().par_chunks(cs)))
            .for_each(apply);
    } else {
        dx.data_mut()
            .chunks_mut(cs)
            .zip(x.data().chunks(cs).zip(dy.data().chunks(cs)))
            .for_each(apply);
    }
    (dgamma, dbeta, dx)
}

fn dims4<E: Element>(x: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batchnorm expects NCHW input");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_normalizes_per_channel() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, stats) = forward_train(&[1.0], &[0.0], &mut rm, &mut rv, &x);
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        // running stats moved toward batch stats
        assert!((rm[0] - 0.25).abs() < 1e-12);
        let unbiased = 1.25 * 4.0 / 3.0;
        assert!((rv[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0f64, 5.0]).unwrap();
        let y = forward_eval(&[2.0], &[1.0], &[3.0], &[4.0 - BN_EPS], &x);
        // invstd = 1/2, so y = 2*(x-3)/2 + 1
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
    }
}
