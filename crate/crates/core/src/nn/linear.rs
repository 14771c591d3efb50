//! Fully connected layer.

use crate::tensor::{gemm, gemm_at, gemm_bt, Element, Tensor};

/// y(N×out) = x(N×in)·Wᵀ + b, with W stored row-major as (out, in).
pub fn forward<E: Element>(
    weight: &[E],
    bias: Option<&[E]>,
    x: &Tensor<E>,
    in_features: usize,
    out_features: usize,
) -> Tensor<E> {
    let n = x.shape()[0];
    let mut y = Tensor::zeros(&[n, out_features]);
    gemm_bt(n, in_features, out_features, x.data(), weight, E::zero(), y.data_mut());
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(out_features) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += *bv;
            }
        }
    }
    y
}

/// Returns (d_weight, d_bias, d_input).
pub fn backward<E: Element>(
    weight: &[E],
    has_bias: bool,
    x: &Tensor<E>,
    dy: &Tensor<E>,
    in_features: usize,
    out_features: usize,
) -> (Vec<E>, Option<Vec<E>>, Tensor<E>) {
    let n = x.shape()[0];
    // dW(out×in) = dyᵀ(out×N)·x(N×in)
    let mut dw = vec![E::zero(); out_features * in_features];
    gemm_at(out_features, n, in_features, dy.data(), x.data(), E::zero(), &mut dw);
    let db = has_bias.then(|| {
        let mut db = vec![E::zero(); out_features];
        for row in dy.data().chunks(out_features) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        db
    });
    // dx(N×in) = dy(N×out)·W(out×in)
    let mut dx = Tensor::zeros(&[n, in_features]);
    gemm(n, out_features, in_features, dy.data(), weight, E::zero(), dx.data_mut());
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_is_affine_map() {
        // W = [[1,2],[3,4],[5,6]], b = [10, 20, 30], x = [1, 1]
        let w = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![10.0, 20.0, 30.0];
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = forward(&w, Some(&b), &x, 2, 3);
        assert_eq!(y.data(), &[13.0, 27.0, 41.0]);
    }

    #[test]
    fn weight_grad_broadcasts_input_for_sum_loss() {
        // y = Wx, loss = sum(y) ⇒ dy = 1 ⇒ dW rows equal xᵀ
        let w = vec![0.0f64; 6];
        let x = Tensor::from_vec(&[1, 2], vec![3.0, -1.5]).unwrap();
        let dy = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let (dw, db, _) = backward(&w, true, &x, &dy, 2, 3);
        assert_eq!(dw, vec![3.0, -1.5, 3.0, -1.5, 3.0, -1.5]);
        assert_eq!(db.unwrap(), vec![1.0, 1.0, 1.0]);
    }
}
