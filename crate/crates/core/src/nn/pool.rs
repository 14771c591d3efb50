//! Average pooling (windowed and global).

use crate::tensor::{Element, Tensor};

pub fn avgpool_forward<E: Element>(x: &Tensor<E>, kernel: usize, stride: usize) -> Tensor<E> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let scale = E::from_f64(1.0 / (kernel * kernel) as f64);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let (xs, ys) = (x.data(), y.data_mut());
    for nc in 0..n * c {
        let xp = &xs[nc * h * w..(nc + 1) * h * w];
        let yp = &mut ys[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::zero();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += xp[(oy * stride + ky) * w + (ox * stride + kx)];
                    }
                }
                yp[oy * ow + ox] = acc * scale;
            }
        }
    }
    y
}

pub fn avgpool_backward<E: Element>(
    dy: &Tensor<E>,
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
) -> Tensor<E> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let s = dy.shape();
    let (oh, ow) = (s[2], s[3]);
    let scale = E::from_f64(1.0 / (kernel * kernel) as f64);
    let mut dx = Tensor::zeros(in_shape);
    let (dys, dxs) = (dy.data(), dx.data_mut());
    for nc in 0..n * c {
        let dyp = &dys[nc * oh * ow..(nc + 1) * oh * ow];
        let dxp = &mut dxs[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyp[oy * ow + ox] * scale;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        dxp[(oy * stride + ky) * w + (ox * stride + kx)] += g;
                    }
                }
            }
        }
    }
    dx
}

/// (N, C, H, W) → (N, C) channel means.
pub fn global_avgpool_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let scale = E::from_f64(1.0 / hw as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = E::zero();
            for v in &x.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                acc += *v;
            }
            y.data_mut()[ni * c + ci] = acc * scale;
        }
    }
    y
}

pub fn global_avgpool_backward<E: Element>(dy: &Tensor<E>, in_shape: &[usize]) -> Tensor<E> {
    let (n, c, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let scale = E::from_f64(1.0 / hw as f64);
    let mut dx = Tensor::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.data()[ni * c + ci] * scale;
            for v in &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                *v = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avgpool_2x2_means_windows() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool_forward(&x, 2, 2);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn global_pool_roundtrip_gradient() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let y = global_avgpool_forward(&x);
        assert_eq!(y.data(), &[2.0, 6.0]);
        let dy = Tensor::from_vec(&[1, 2], vec![2.0, 4.0]).unwrap();
        let dx = global_avgpool_backward(&dy, &[1, 2, 1, 2]);
        assert_eq!(dx.data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
