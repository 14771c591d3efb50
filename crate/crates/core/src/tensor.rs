//! Dense row-major tensors over f32 or f64.
//!
//! f32 is the training dtype. f64 exists for oracle checks (finite
//! differences, exhaustive mask enumeration) where exactly reproducible
//! summation order matters, so its matmul is a fixed-order loop nest
//! rather than a blocked kernel.

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Tag describing the element type of a serialized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }
}

/// Scalar element type usable by the engine.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + Debug + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64_val(self) -> f64;
    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>>;

    /// Run `f` with a reusable per-thread scratch slice of length `len`.
    fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;

    /// c = a·b + beta·c for row-major slices with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover m×k, k×n and m×n elements under the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scratch {
    ($name:ident, $ty:ty) => {
        fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [$ty]) -> R) -> R {
            thread_local! {
                static $name: std::cell::RefCell<Vec<$ty>> =
                    const { std::cell::RefCell::new(Vec::new()) };
            }
            $name.with(|buf| {
                let mut b = buf.borrow_mut();
                if b.len() < len {
                    b.resize(len, 0.0);
                }
                f(&mut b[..len])
            })
        }
    };
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    impl_scratch!(SCRATCH_F32, f32);

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_val(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(data.len() * 4);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if !bytes.len().is_multiple_of(4) {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    impl_scratch!(SCRATCH_F64, f64);

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_val(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(data.len() * 8);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if !bytes.len().is_multiple_of(8) {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect(),
        )
    }

    // Fixed-order loop nest: every output element is a single left-to-right
    // accumulation over k, so inserting or deleting exact-zero terms cannot
    // perturb the remaining sum. The structured-shrink equivalence check
    // relies on this.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    let av = *a.offset(i as isize * rsa + p as isize * csa);
                    let bv = *b.offset(p as isize * rsb + j as isize * csb);
                    acc += av * bv;
                }
                let cp = c.offset(i as isize * rsc + j as isize * csc);
                *cp = acc + beta * *cp;
            }
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); len],
        }
    }

    /// Allocate without initialization.
    ///
    /// # Safety
    /// The caller must overwrite every element before reading any.
    pub unsafe fn uninit(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        data.set_len(len);
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64_val()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64_val() as f32).collect(),
        }
    }
}

/// Branch-light finiteness scan suitable for the per-layer activation check.
pub fn all_finite<E: Element>(data: &[E]) -> bool {
    let mut bad = 0u32;
    for v in data {
        bad |= !v.is_finite() as u32;
    }
    bad == 0
}

/// c(m×n) = a(m×k)·b(k×n) + beta·c for contiguous row-major slices.
pub fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    assert_eq!(a.len(), m * k, "gemm: a buffer size");
    assert_eq!(b.len(), k * n, "gemm: b buffer size");
    assert_eq!(c.len(), m * n, "gemm: c buffer size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m×n) = a(m×k)·bᵀ where b is given row-major as n×k.
pub fn gemm_bt<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    assert_eq!(a.len(), m * k, "gemm_bt: a buffer size");
    assert_eq!(b.len(), n * k, "gemm_bt: b buffer size");
    assert_eq!(c.len(), m * n, "gemm_bt: c buffer size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m×n) = aᵀ·b where a is given row-major as k×m.
pub fn gemm_at<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    assert_eq!(a.len(), k * m, "gemm_at: a buffer size");
    assert_eq!(b.len(), k * n, "gemm_at: b buffer size");
    assert_eq!(c.len(), m * n, "gemm_at: c buffer size");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        let a32: Vec<f32> = a.iter().map(|v| *v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|v| *v as f32).collect();
        let mut c32 = [0.0f32; 4];
        gemm(2, 2, 2, &a32, &b32, 0.0, &mut c32);
        assert_eq!(c32, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.7 - 2.0).collect();
        let mut c_ref = vec![0.0f64; m * n];
        gemm(m, k, n, &a, &b, 0.0, &mut c_ref);

        // b stored transposed (n×k), multiply via gemm_bt
        let mut bt = vec![0.0f64; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c = vec![0.0f64; m * n];
        gemm_bt(m, k, n, &a, &bt, 0.0, &mut c);
        assert_eq!(c, c_ref);

        // a stored transposed (k×m), multiply via gemm_at
        let mut at = vec![0.0f64; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c = vec![0.0f64; m * n];
        gemm_at(m, k, n, &at, &b, 0.0, &mut c);
        assert_eq!(c, c_ref);
    }

    #[test]
    fn finite_scan_flags_nan_and_inf() {
        assert!(all_finite(&[1.0f32, -2.0, 0.0]));
        assert!(!all_finite(&[1.0f32, f32::NAN]));
        assert!(!all_finite(&[f32::INFINITY]));
    }
}
