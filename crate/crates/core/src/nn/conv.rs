//! 2-D convolution via im2col + gemm.
//!
//! Work splits over fixed-size sample chunks; every reduction over samples
//! combines per-chunk partials in chunk order, so results are bitwise
//! identical whatever the thread count (or with intra-op parallelism off).

use crate::par;
use crate::tensor::{gemm, gemm_at, gemm_bt, Element, Tensor};
use rayon::prelude::*;

/// Samples per task. Fixed (not thread-count derived) so partial-sum
/// grouping, and therefore rounding, never depends on the pool.
const SAMPLE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Self {
        ConvDims {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            h,
            w,
            oh: (h + 2 * pad - kernel) / stride + 1,
            ow: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Run `f` over (dst chunk, src chunk) pairs, parallel or serial by the
/// process-wide switch. Chunk pairing is identical in both modes.
fn for_chunks<E: Element>(
    dst: &mut [E],
    dst_stride: usize,
    src: &[E],
    src_stride: usize,
    f: impl Fn(&mut [E], &[E]) + Sync + Send,
) {
    if par::intra_op() {
        dst.par_chunks_mut(dst_stride * SAMPLE_CHUNK)
            .zip(src.par_chunks(src_stride * SAMPLE_CHUNK))
            .for_each(|(d, s)| f(d, s));
    } else {
        dst.chunks_mut(dst_stride * SAMPLE_CHUNK)
            .zip(src.chunks(src_stride * SAMPLE_CHUNK))
            .for_each(|(d, s)| f(d, s));
    }
}

/// Expand one sample (C·H·W) into the patch matrix (C·K² rows × OH·OW cols).
pub fn im2col<E: Element>(x: &[E], d: &ConvDims, col: &mut [E]) {
    let (k, s, p) = (d.kernel, d.stride, d.pad);
    let ohw = d.out_hw();
    debug_assert_eq!(col.len(), d.col_rows() * ohw);
    for c in 0..d.in_ch {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * ohw..((c * k + ky) * k + kx + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src_row = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if s == 1 {
                        // zero prefix, bulk copy, zero suffix
                        let shift = kx as isize - p as isize;
                        let start = (-shift).max(0) as usize;
                        let end = (d.w as isize - shift).clamp(0, d.ow as isize) as usize;
                        dst[..start.min(d.ow)].fill(E::zero());
                        if end > start {
                            dst[start..end].copy_from_slice(
                                &src_row[(start as isize + shift) as usize
                                    ..(end as isize + shift) as usize],
                            );
                        }
                        dst[end.max(start)..].fill(E::zero());
                    } else {
                        for (ox, out) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *out = if ix < 0 || ix >= d.w as isize {
                                E::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter the patch matrix gradient back onto the input gradient (accumulating).
fn col2im<E: Element>(col: &[E], d: &ConvDims, dx: &mut [E]) {
    let (k, s, p) = (d.kernel, d.stride, d.pad);
    let ohw = d.out_hw();
    for c in 0..d.in_ch {
        let xc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * ohw..((c * k + ky) * k + kx + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if s == 1 {
                        // bulk accumulate over the valid segment
                        let shift = kx as isize - p as isize;
                        let start = (-shift).max(0) as usize;
                        let end = (d.w as isize - shift).clamp(0, d.ow as isize) as usize;
                        if end > start {
                            let off = shift;
                            for (o, v) in ((start as isize + off) as usize
                                ..(end as isize + off) as usize)
                                .zip(&src[start..end])
                            {
                                dst[o] += *v;
                            }
                        }
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is (N, C, H, W); returns (N, Cout, OH, OW).
pub fn forward<E: Element>(
    weight: &[E],
    bias: Option<&[E]>,
    x: &Tensor<E>,
    d: &ConvDims,
) -> Tensor<E> {
    let n = x.shape()[0];
    let in_stride = d.in_ch * d.h * d.w;
    let out_stride = d.out_ch * d.out_hw();
    let ck2 = d.col_rows();
    let ohw = d.out_hw();
    // gemm with beta=0 writes every output element
    let mut out = unsafe { Tensor::uninit(&[n, d.out_ch, d.oh, d.ow]) };
    for_chunks(out.data_mut(), out_stride, x.data(), in_stride, |out_chunk, x_chunk| {
        E::with_scratch(ck2 * ohw, |col| {
            for (o, xi) in out_chunk
                .chunks_mut(out_stride)
                .zip(x_chunk.chunks(in_stride))
            {
                im2col(xi, d, col);
                gemm(d.out_ch, ck2, ohw, weight, col, E::zero(), o);
                if let Some(b) = bias {
                    for (oc, bv) in b.iter().enumerate() {
                        for v in &mut o[oc * ohw..(oc + 1) * ohw] {
                            *v += *bv;
                        }
                    }
                }
            }
        });
    });
    out
}

/// Batched convolution backward.
///
/// Returns (d_weight, d_bias, d_input). `d_input` is skipped when
/// `need_dx` is false (first layer).
pub fn backward<E: Element>(
    weight: &[E],
    has_bias: bool,
    x: &Tensor<E>,
    dy: &Tensor<E>,
    d: &ConvDims,
    need_dx: bool,
) -> (Vec<E>, Option<Vec<E>>, Option<Tensor<E>>) {
    let n = x.shape()[0];
    let in_stride = d.in_ch * d.h * d.w;
    let out_stride = d.out_ch * d.out_hw();
    let ck2 = d.col_rows();
    let ohw = d.out_hw();

    // Weight gradient: per-chunk partials accumulated in chunk order. The
    // chunk partials exist in both scheduling modes so the summation tree
    // is identical.
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    let mut partials: Vec<Vec<E>> = vec![Vec::new(); n_chunks];
    let dw_part = |(part, (x_chunk, dy_chunk)): (&mut Vec<E>, (&[E], &[E]))| {
        part.resize(d.out_ch * ck2, E::zero());
        E::with_scratch(ck2 * ohw, |col| {
            for (xi, dyi) in x_chunk.chunks(in_stride).zip(dy_chunk.chunks(out_stride)) {
                im2col(xi, d, col);
                // dW += dy_i (Cout×OHW) · colᵀ (OHW×CK²)
                gemm_bt(d.out_ch, ohw, ck2, dyi, col, E::one(), part);
            }
        });
    };
    if par::intra_op() {
        partials
            .par_iter_mut()
            .zip(
                x.data()
                    .par_chunks(in_stride * SAMPLE_CHUNK)
                    .zip(dy.data().par_chunks(out_stride * SAMPLE_CHUNK)),
            )
            .for_each(dw_part);
    } else {
        partials
            .iter_mut()
            .zip(
                x.data()
                    .chunks(in_stride * SAMPLE_CHUNK)
                    .zip(dy.data().chunks(out_stride * SAMPLE_CHUNK)),
            )
            .for_each(dw_part);
    }
    let mut dw = vec![E::zero(); d.out_ch * ck2];
    for part in &partials {
        for (acc, v) in dw.iter_mut().zip(part.iter()) {
            *acc += *v;
        }
    }

    let db = has_bias.then(|| {
        let mut db = vec![E::zero(); d.out_ch];
        for dyi in dy.data().chunks(out_stride) {
            for (oc, acc) in db.iter_mut().enumerate() {
                let mut s = E::zero();
                for v in &dyi[oc * ohw..(oc + 1) * ohw] {
                    s += *v;
                }
                *acc += s;
            }
        }
        db
    });

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(&[n, d.in_ch, d.h, d.w]);
        for_chunks(dx.data_mut(), in_stride, dy.data(), out_stride, |dx_chunk, dy_chunk| {
            E::with_scratch(ck2 * ohw, |dcol| {
                for (dxi, dyi) in dx_chunk
                    .chunks_mut(in_stride)
                    .zip(dy_chunk.chunks(out_stride))
                {
                    // dcol = Wᵀ (CK²×Cout) · dy_i (Cout×OHW)
                    gemm_at(ck2, d.out_ch, ohw, weight, dyi, E::zero(), dcol);
                    col2im(dcol, d, dxi);
                }
            });
        });
        dx
    });

    (dw, db, dx)
}
