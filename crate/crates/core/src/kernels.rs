//! Low-level compute kernels for convolution and matrix multiplication.
//!
//! Layout conventions:
//! - activations `[N, H, W, C]`, row-major, channel innermost
//! - shared conv kernels `[k, k, Cin, Cout]`
//! - per-sample conv kernels `[N, k, k, Cin, Cout]`
//!
//! Convolution is direct cross-correlation over a zero-padded copy of the
//! input, so every output position executes the full `k*k*Cin*Cout` multiply
//! block and the returned multiply count matches the closed-form product of
//! the loop bounds. The input-gradient kernel scatters from grad positions,
//! so its count is `H_g * W_g * k * k * Cin * Cout` with `H_g, W_g` the grad
//! (smaller, for stride > 1) extents.
//!
//! Batch-level parallelism splits work so that every output element is fully
//! accumulated by exactly one task in a fixed loop order, which keeps results
//! bitwise identical regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline(always)]
fn mad<T: Scalar>(acc: T, a: T, b: T) -> T {
    acc + a * b
}

#[inline(always)]
fn axpy<T: Scalar>(out: &mut [T], a: T, row: &[T]) {
    debug_assert_eq!(out.len(), row.len());
    for (o, &r) in out.iter_mut().zip(row.iter()) {
        *o = mad(*o, a, r);
    }
}

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Copies `[N, H, W, C]` into a buffer zero-padded by `pad` on both spatial sides.
fn pad_nhwc<T: Scalar>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, h, w, c) = dims4(x);
    if pad == 0 {
        return x.clone();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, hp, wp, c]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for y in 0..h {
            let s = ((ni * h + y) * w) * c;
            let d = ((ni * hp + y + pad) * wp + pad) * c;
            dst[d..d + w * c].copy_from_slice(&src[s..s + w * c]);
        }
    }
    out
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// Direct convolution with a shared kernel.
///
/// `x: [N, H, W, Ci]`, `kernel: [k, k, Ci, Co]` -> `([N, H', W', Co], macs)`.
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, u64) {
    let (n, h, w, ci) = dims4(x);
    let ks = kernel.shape();
    let (k, co) = (ks[0], ks[3]);
    debug_assert_eq!(ks[1], k);
    debug_assert_eq!(ks[2], ci);
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let xp = pad_nhwc(x, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, ho, wo, co]);
    let xd = xp.data();
    let kd = kernel.data();

    out.data_mut()
        .par_chunks_mut(wo * co)
        .enumerate()
        .for_each(|(row, orow)| {
            let (ni, yo) = (row / ho, row % ho);
            for xo in 0..wo {
                let dst = &mut orow[xo * co..(xo + 1) * co];
                for ky in 0..k {
                    let ybase = ((ni * hp + yo * stride + ky) * wp + xo * stride) * ci;
                    for kx in 0..k {
                        let xbase = ybase + kx * ci;
                        let kbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let a = xd[xbase + c];
                            let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                            axpy(dst, a, krow);
                        }
                    }
                }
            }
        });

    let macs = (n * ho * wo * k * k * ci * co) as u64;
    (out, macs)
}

/// Direct convolution with one kernel per sample.
///
/// `x: [N, H, W, Ci]`, `kernel: [N, k, k, Ci, Co]` -> `([N, H', W', Co], macs)`.
pub fn conv2d_fwd_batched<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, u64) {
    let (n, h, w, ci) = dims4(x);
    let ks = kernel.shape();
    debug_assert_eq!(ks[0], n);
    let (k, co) = (ks[1], ks[4]);
    debug_assert_eq!(ks[3], ci);
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let xp = pad_nhwc(x, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, ho, wo, co]);
    let xd = xp.data();
    let kd = kernel.data();
    let kpage = k * k * ci * co;

    out.data_mut()
        .par_chunks_mut(wo * co)
        .enumerate()
        .for_each(|(row, orow)| {
            let (ni, yo) = (row / ho, row % ho);
            let kern = &kd[ni * kpage..(ni + 1) * kpage];
            for xo in 0..wo {
                let dst = &mut orow[xo * co..(xo + 1) * co];
                for ky in 0..k {
                    let ybase = ((ni * hp + yo * stride + ky) * wp + xo * stride) * ci;
                    for kx in 0..k {
                        let xbase = ybase + kx * ci;
                        let kbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let a = xd[xbase + c];
                            let krow = &kern[kbase + c * co..kbase + (c + 1) * co];
                            axpy(dst, a, krow);
                        }
                    }
                }
            }
        });

    let macs = (n * ho * wo * k * k * ci * co) as u64;
    (out, macs)
}

/// Swaps the trailing `[Ci, Co]` axes of a rank-4 or rank-5 kernel so scatter
/// loops can run contiguous over `Ci`.
fn transpose_kernel<T: Scalar>(kernel: &Tensor<T>) -> Tensor<T> {
    let ks = kernel.shape();
    let (ci, co) = (ks[ks.len() - 2], ks[ks.len() - 1]);
    let pages = kernel.numel() / (ci * co);
    let src = kernel.data();
    let mut dst = vec![T::ZERO; src.len()];
    for page in 0..pages {
        let base = page * ci * co;
        for c in 0..ci {
            for l in 0..co {
                dst[base + l * ci + c] = src[base + c * co + l];
            }
        }
    }
    Tensor::from_vec(ks, dst).unwrap()
}

/// Adjoint of [`conv2d_fwd`] with respect to its input.
///
/// `g: [N, Hg, Wg, Co]`, `kernel: [k, k, Ci, Co]` -> `([N, H, W, Ci], macs)`
/// where `(H, W)` is the forward input extent. Used both as the
/// backward-input pass of convolution and as the forward pass of stride-2
/// transposed convolution.
pub fn conv2d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> (Tensor<T>, u64) {
    let (n, hg, wg, co) = dims4(g);
    let ks = kernel.shape();
    let (k, ci) = (ks[0], ks[2]);
    debug_assert_eq!(ks[3], co);
    let (h, w) = in_hw;
    debug_assert_eq!(conv_out_extent(h, k, stride, pad), hg);
    debug_assert_eq!(conv_out_extent(w, k, stride, pad), wg);
    let kt = transpose_kernel(kernel);
    let ktd = kt.data();
    let gd = g.data();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut padded = Tensor::<T>::zeros(&[n, hp, wp, ci]);
    let page = hp * wp * ci;

    padded
        .data_mut()
        .par_chunks_mut(page)
        .enumerate()
        .for_each(|(ni, out)| {
            for yg in 0..hg {
                for xg in 0..wg {
                    let grow = &gd[((ni * hg + yg) * wg + xg) * co..((ni * hg + yg) * wg + xg + 1) * co];
                    for ky in 0..k {
                        let obase = ((yg * stride + ky) * wp + xg * stride) * ci;
                        for kx in 0..k {
                            let orow = &mut out[obase + kx * ci..obase + (kx + 1) * ci];
                            let kbase = (ky * k + kx) * ci * co;
                            for (l, &gv) in grow.iter().enumerate() {
                                let krow = &ktd[kbase + l * ci..kbase + (l + 1) * ci];
                                axpy(orow, gv, krow);
                            }
                        }
                    }
                }
            }
        });

    let out = crop_nhwc(&padded, pad, (h, w));
    let macs = (n * hg * wg * k * k * ci * co) as u64;
    (out, macs)
}

/// Per-sample-kernel variant of [`conv2d_input_grad`].
pub fn conv2d_input_grad_batched<T: Scalar>(
    g: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> (Tensor<T>, u64) {
    let (n, hg, wg, co) = dims4(g);
    let ks = kernel.shape();
    debug_assert_eq!(ks[0], n);
    let (k, ci) = (ks[1], ks[3]);
    debug_assert_eq!(ks[4], co);
    let (h, w) = in_hw;
    let kt = transpose_kernel(kernel);
    let ktd = kt.data();
    let gd = g.data();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut padded = Tensor::<T>::zeros(&[n, hp, wp, ci]);
    let page = hp * wp * ci;
    let kpage = k * k * ci * co;

    padded
        .data_mut()
        .par_chunks_mut(page)
        .enumerate()
        .for_each(|(ni, out)| {
            let kern = &ktd[ni * kpage..(ni + 1) * kpage];
            for yg in 0..hg {
                for xg in 0..wg {
                    let grow = &gd[((ni * hg + yg) * wg + xg) * co..((ni * hg + yg) * wg + xg + 1) * co];
                    for ky in 0..k {
                        let obase = ((yg * stride + ky) * wp + xg * stride) * ci;
                        for kx in 0..k {
                            let orow = &mut out[obase + kx * ci..obase + (kx + 1) * ci];
                            let kbase = (ky * k + kx) * ci * co;
                            for (l, &gv) in grow.iter().enumerate() {
                                let krow = &kern[kbase + l * ci..kbase + (l + 1) * ci];
                                axpy(orow, gv, krow);
                            }
                        }
                    }
                }
            }
        });

    let out = crop_nhwc(&padded, pad, (h, w));
    let macs = (n * hg * wg * k * k * ci * co) as u64;
    (out, macs)
}

fn crop_nhwc<T: Scalar>(padded: &Tensor<T>, pad: usize, hw: (usize, usize)) -> Tensor<T> {
    if pad == 0 {
        return padded.clone();
    }
    let s = padded.shape();
    let (n, hp, wp, c) = (s[0], s[1], s[2], s[3]);
    let (h, w) = hw;
    let mut out = Tensor::zeros(&[n, h, w, c]);
    let src = padded.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for y in 0..h {
            let sidx = ((ni * hp + y + pad) * wp + pad) * c;
            let didx = ((ni * h + y) * w) * c;
            dst[didx..didx + w * c].copy_from_slice(&src[sidx..sidx + w * c]);
        }
    }
    out
}

/// Gradient of [`conv2d_fwd`] with respect to a shared kernel.
///
/// `x: [N, H, W, Ci]`, `g: [N, Hg, Wg, Co]` -> `([k, k, Ci, Co], macs)`.
pub fn conv2d_kernel_grad<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    k: usize,
) -> (Tensor<T>, u64) {
    let (n, h, w, ci) = dims4(x);
    let (gn, hg, wg, co) = dims4(g);
    debug_assert_eq!(n, gn);
    let xp = pad_nhwc(x, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let xd = xp.data();
    let gd = g.data();
    let mut gk = Tensor::zeros(&[k, k, ci, co]);

    gk.data_mut()
        .par_chunks_mut(co)
        .enumerate()
        .for_each(|(row, krow)| {
            let (ky, rest) = (row / (k * ci), row % (k * ci));
            let (kx, c) = (rest / ci, rest % ci);
            for ni in 0..n {
                for yg in 0..hg {
                    let xbase = ((ni * hp + yg * stride + ky) * wp + kx) * ci + c;
                    let gbase = ((ni * hg + yg) * wg) * co;
                    for xg in 0..wg {
                        let a = xd[xbase + xg * stride * ci];
                        let grow = &gd[gbase + xg * co..gbase + (xg + 1) * co];
                        axpy(krow, a, grow);
                    }
                }
            }
        });

    let macs = (n * hg * wg * k * k * ci * co) as u64;
    (gk, macs)
}

/// Gradient of [`conv2d_fwd_batched`] with respect to its per-sample kernel.
pub fn conv2d_kernel_grad_batched<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    k: usize,
) -> (Tensor<T>, u64) {
    let (n, h, w, ci) = dims4(x);
    let (gn, hg, wg, co) = dims4(g);
    debug_assert_eq!(n, gn);
    let xp = pad_nhwc(x, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let xd = xp.data();
    let gd = g.data();
    let mut gk = Tensor::zeros(&[n, k, k, ci, co]);
    let kpage = k * k * ci * co;

    gk.data_mut()
        .par_chunks_mut(kpage)
        .enumerate()
        .for_each(|(ni, page)| {
            for ky in 0..k {
                for kx in 0..k {
                    for c in 0..ci {
                        let krow = &mut page[((ky * k + kx) * ci + c) * co..((ky * k + kx) * ci + c + 1) * co];
                        for yg in 0..hg {
                            let xbase = ((ni * hp + yg * stride + ky) * wp + kx) * ci + c;
                            let gbase = ((ni * hg + yg) * wg) * co;
                            for xg in 0..wg {
                                let a = xd[xbase + xg * stride * ci];
                                let grow = &gd[gbase + xg * co..gbase + (xg + 1) * co];
                                axpy(krow, a, grow);
                            }
                        }
                    }
                }
            }
        });

    let macs = (n * hg * wg * k * k * ci * co) as u64;
    (gk, macs)
}

/// Matrix product over the last axis: `x: [M, Ci] * w: [Ci, Co] -> [M, Co]`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, m: usize, ci: usize, co: usize) -> (Tensor<T>, u64) {
    debug_assert_eq!(x.numel(), m * ci);
    debug_assert_eq!(w.numel(), ci * co);
    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor::zeros(&[m, co]);

    out.data_mut()
        .par_chunks_mut(co)
        .enumerate()
        .for_each(|(row, orow)| {
            let xrow = &xd[row * ci..(row + 1) * ci];
            for (c, &a) in xrow.iter().enumerate() {
                axpy(orow, a, &wd[c * co..(c + 1) * co]);
            }
        });

    (out, (m * ci * co) as u64)
}

/// Gradient of [`matmul`] with respect to `x`: `g: [M, Co] * w^T -> [M, Ci]`.
pub fn matmul_gx<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, m: usize, ci: usize, co: usize) -> (Tensor<T>, u64) {
    let mut wt = vec![T::ZERO; ci * co];
    let wd = w.data();
    for c in 0..ci {
        for l in 0..co {
            wt[l * ci + c] = wd[c * co + l];
        }
    }
    let gd = g.data();
    let mut out = Tensor::zeros(&[m, ci]);

    out.data_mut()
        .par_chunks_mut(ci)
        .enumerate()
        .for_each(|(row, orow)| {
            let grow = &gd[row * co..(row + 1) * co];
            for (l, &gv) in grow.iter().enumerate() {
                axpy(orow, gv, &wt[l * ci..(l + 1) * ci]);
            }
        });

    (out, (m * ci * co) as u64)
}

/// Gradient of [`matmul`] with respect to `w`: `x^T * g -> [Ci, Co]`.
pub fn matmul_gw<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, m: usize, ci: usize, co: usize) -> (Tensor<T>, u64) {
    let xd = x.data();
    let gd = g.data();
    let mut out = Tensor::zeros(&[ci, co]);

    out.data_mut()
        .par_chunks_mut(co)
        .enumerate()
        .for_each(|(c, orow)| {
            for row in 0..m {
                let a = xd[row * ci + c];
                axpy(orow, a, &gd[row * co..(row + 1) * co]);
            }
        });

    (out, (m * ci * co) as u64)
}
