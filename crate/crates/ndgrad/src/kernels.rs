//! Raw compute kernels for matmul and 3D convolution, plus their gradient
//! kernels. All kernels are gather-style: each output element is written by
//! exactly one task and accumulates its contributions in a fixed order, so
//! results are bitwise identical at any thread count.

use crate::{GradError, Result, Scalar};
use rayon::prelude::*;

/// Spatial extents triple.
pub type Extents = [usize; 3];

/// Output extent of a cross-correlation along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(GradError::InvalidParameter {
            op: "conv3d",
            message: "stride must be positive".into(),
        });
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(GradError::InvalidParameter {
            op: "conv3d",
            message: format!("kernel extent {kernel} exceeds padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of the transposed op (adjoint of `conv_out_extent`).
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(GradError::InvalidParameter {
            op: "conv3d_transpose",
            message: "stride must be positive".into(),
        });
    }
    let full = (input - 1) * stride + kernel;
    if full < 2 * pad + 1 {
        return Err(GradError::InvalidParameter {
            op: "conv3d_transpose",
            message: format!("padding {pad} larger than produced extent {full}"),
        });
    }
    Ok(full - 2 * pad)
}

/// Shape bundle for one conv3d / conv3d_transpose invocation.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: Extents,
    pub output: Extents,
    pub kernel: Extents,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    fn in_spatial(&self) -> usize {
        self.input[0] * self.input[1] * self.input[2]
    }
    fn out_spatial(&self) -> usize {
        self.output[0] * self.output[1] * self.output[2]
    }
}

/// Valid output range [lo, hi) along one axis for a kernel offset `k`:
/// positions where `o*stride + k - pad` lands inside `[0, input)`.
#[inline]
fn out_range(input: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_in = input as isize - 1 + pad as isize - k as isize;
    if hi_in < 0 {
        return (0, 0);
    }
    let hi = (hi_in as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Cross-correlation. x: [N, Ci, D, H, W], w: [Co, Ci, kd, kh, kw],
/// out: [N, Co, OD, OH, OW]. Per-output accumulation order is (ci, kd, kh, kw)
/// ascending, matching a naive nested-loop reference bit for bit.
pub fn conv3d_fwd<T: Scalar>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let mut out = vec![T::zero(); d.batch * d.c_out * out_sp];

    out.par_chunks_mut(out_sp).enumerate().for_each(|(nc, o)| {
        let n = nc / d.c_out;
        let co = nc % d.c_out;
        for ci in 0..d.c_in {
            let x_base = (n * d.c_in + ci) * in_sp;
            let w_base = ((co * d.c_in + ci) * kd * kh) * kw;
            for fd in 0..kd {
                let (d_lo, d_hi) = out_range(id, od, s, p, fd);
                for fh in 0..kh {
                    let (h_lo, h_hi) = out_range(ih, oh, s, p, fh);
                    for fw in 0..kw {
                        let (w_lo, w_hi) = out_range(iw, ow, s, p, fw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let kval = w[w_base + (fd * kh + fh) * kw + fw];
                        for zd in d_lo..d_hi {
                            let src_d = zd * s + fd - p;
                            for zh in h_lo..h_hi {
                                let src_h = zh * s + fh - p;
                                let src_row = x_base + (src_d * ih + src_h) * iw;
                                let dst_row = (zd * oh + zh) * ow;
                                let src_w0 = w_lo * s + fw - p;
                                if s == 1 {
                                    let src = &x[src_row + src_w0..src_row + src_w0 + (w_hi - w_lo)];
                                    let dst = &mut o[dst_row + w_lo..dst_row + w_hi];
                                    for (dv, sv) in dst.iter_mut().zip(src) {
                                        *dv += kval * *sv;
                                    }
                                } else {
                                    for (j, zw) in (w_lo..w_hi).enumerate() {
                                        o[dst_row + zw] += kval * x[src_row + src_w0 + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of conv3d w.r.t. its input. g: [N, Co, OD, OH, OW] upstream.
pub fn conv3d_grad_x<T: Scalar>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let [_, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let mut dx = vec![T::zero(); d.batch * d.c_in * in_sp];

    dx.par_chunks_mut(in_sp).enumerate().for_each(|(nc, o)| {
        let n = nc / d.c_in;
        let ci = nc % d.c_in;
        for co in 0..d.c_out {
            let g_base = (n * d.c_out + co) * out_sp;
            let w_base = ((co * d.c_in + ci) * kd * kh) * kw;
            for fd in 0..kd {
                let (d_lo, d_hi) = out_range(d.input[0], od, s, p, fd);
                for fh in 0..kh {
                    let (h_lo, h_hi) = out_range(ih, oh, s, p, fh);
                    for fw in 0..kw {
                        let (w_lo, w_hi) = out_range(iw, ow, s, p, fw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let kval = w[w_base + (fd * kh + fh) * kw + fw];
                        for zd in d_lo..d_hi {
                            let src_d = zd * s + fd - p;
                            for zh in h_lo..h_hi {
                                let src_h = zh * s + fh - p;
                                let dst_row = (src_d * ih + src_h) * iw;
                                let g_row = g_base + (zd * oh + zh) * ow;
                                let dst_w0 = w_lo * s + fw - p;
                                if s == 1 {
                                    let src = &g[g_row + w_lo..g_row + w_hi];
                                    let dst = &mut o[dst_row + dst_w0..dst_row + dst_w0 + (w_hi - w_lo)];
                                    for (dv, sv) in dst.iter_mut().zip(src) {
                                        *dv += kval * *sv;
                                    }
                                } else {
                                    for (j, zw) in (w_lo..w_hi).enumerate() {
                                        o[dst_row + dst_w0 + j * s] += kval * g[g_row + zw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of conv3d w.r.t. its kernel.
pub fn conv3d_grad_w<T: Scalar>(x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let ksp = kd * kh * kw;
    let mut dw = vec![T::zero(); d.c_out * d.c_in * ksp];

    dw.par_chunks_mut(ksp).enumerate().for_each(|(cc, o)| {
        let co = cc / d.c_in;
        let ci = cc % d.c_in;
        for fd in 0..kd {
            let (d_lo, d_hi) = out_range(id, od, s, p, fd);
            for fh in 0..kh {
                let (h_lo, h_hi) = out_range(ih, oh, s, p, fh);
                for fw in 0..kw {
                    let (w_lo, w_hi) = out_range(iw, ow, s, p, fw);
                    let mut acc = T::zero();
                    for n in 0..d.batch {
                        let x_base = (n * d.c_in + ci) * in_sp;
                        let g_base = (n * d.c_out + co) * out_sp;
                        for zd in d_lo..d_hi {
                            let src_d = zd * s + fd - p;
                            for zh in h_lo..h_hi {
                                let src_h = zh * s + fh - p;
                                let x_row = x_base + (src_d * ih + src_h) * iw;
                                let g_row = g_base + (zd * oh + zh) * ow;
                                let src_w0 = w_lo * s + fw - p;
                                if s == 1 {
                                    let xs = &x[x_row + src_w0..x_row + src_w0 + (w_hi - w_lo)];
                                    let gs = &g[g_row + w_lo..g_row + w_hi];
                                    for (xv, gv) in xs.iter().zip(gs) {
                                        acc += *xv * *gv;
                                    }
                                } else {
                                    for (j, zw) in (w_lo..w_hi).enumerate() {
                                        acc += x[x_row + src_w0 + j * s] * g[g_row + zw];
                                    }
                                }
                            }
                        }
                    }
                    o[(fd * kh + fh) * kw + fw] = acc;
                }
            }
        }
    });
    dw
}

/// Transposed convolution (adjoint of conv3d). x: [N, Ci, D, H, W],
/// w: [Ci, Co, kd, kh, kw], out: [N, Co, OD, OH, OW] where the output extent
/// inverts `conv_out_extent`.
pub fn conv3d_transpose_fwd<T: Scalar>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let mut out = vec![T::zero(); d.batch * d.c_out * out_sp];

    out.par_chunks_mut(out_sp).enumerate().for_each(|(nc, o)| {
        let n = nc / d.c_out;
        let co = nc % d.c_out;
        for ci in 0..d.c_in {
            let x_base = (n * d.c_in + ci) * in_sp;
            let w_base = ((ci * d.c_out + co) * kd * kh) * kw;
            for fd in 0..kd {
                // output position zd = src_d*s + fd - p must be in [0, od)
                let (d_lo, d_hi) = out_range(od, id, s, p, fd);
                for fh in 0..kh {
                    let (h_lo, h_hi) = out_range(oh, ih, s, p, fh);
                    for fw in 0..kw {
                        let (w_lo, w_hi) = out_range(ow, iw, s, p, fw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let kval = w[w_base + (fd * kh + fh) * kw + fw];
                        for src_d in d_lo..d_hi {
                            let zd = src_d * s + fd - p;
                            for src_h in h_lo..h_hi {
                                let zh = src_h * s + fh - p;
                                let x_row = x_base + (src_d * ih + src_h) * iw;
                                let dst_row = (zd * oh + zh) * ow;
                                let zw0 = w_lo * s + fw - p;
                                for (j, src_w) in (w_lo..w_hi).enumerate() {
                                    o[dst_row + zw0 + j * s] += kval * x[x_row + src_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of conv3d_transpose w.r.t. its input: a conv3d of the upstream
/// gradient with the same kernel (kernel layout [Ci, Co, ...]).
pub fn conv3d_transpose_grad_x<T: Scalar>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let mut dx = vec![T::zero(); d.batch * d.c_in * in_sp];

    dx.par_chunks_mut(in_sp).enumerate().for_each(|(nc, o)| {
        let n = nc / d.c_in;
        let ci = nc % d.c_in;
        for co in 0..d.c_out {
            let g_base = (n * d.c_out + co) * out_sp;
            let w_base = ((ci * d.c_out + co) * kd * kh) * kw;
            for fd in 0..kd {
                let (d_lo, d_hi) = out_range(od, id, s, p, fd);
                for fh in 0..kh {
                    let (h_lo, h_hi) = out_range(oh, ih, s, p, fh);
                    for fw in 0..kw {
                        let (w_lo, w_hi) = out_range(ow, iw, s, p, fw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let kval = w[w_base + (fd * kh + fh) * kw + fw];
                        for src_d in d_lo..d_hi {
                            let zd = src_d * s + fd - p;
                            for src_h in h_lo..h_hi {
                                let zh = src_h * s + fh - p;
                                let dst_row = (src_d * ih + src_h) * iw;
                                let g_row = g_base + (zd * oh + zh) * ow;
                                let zw0 = w_lo * s + fw - p;
                                for (j, src_w) in (w_lo..w_hi).enumerate() {
                                    o[dst_row + src_w] += kval * g[g_row + zw0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of conv3d_transpose w.r.t. its kernel.
pub fn conv3d_transpose_grad_w<T: Scalar>(x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = d.kernel;
    let (s, p) = (d.stride, d.pad);
    let in_sp = d.in_spatial();
    let out_sp = d.out_spatial();
    let ksp = kd * kh * kw;
    let mut dw = vec![T::zero(); d.c_in * d.c_out * ksp];

    dw.par_chunks_mut(ksp).enumerate().for_each(|(cc, o)| {
        let ci = cc / d.c_out;
        let co = cc % d.c_out;
        for fd in 0..kd {
            let (d_lo, d_hi) = out_range(od, id, s, p, fd);
            for fh in 0..kh {
                let (h_lo, h_hi) = out_range(oh, ih, s, p, fh);
                for fw in 0..kw {
                    let (w_lo, w_hi) = out_range(ow, iw, s, p, fw);
                    let mut acc = T::zero();
                    for n in 0..d.batch {
                        let x_base = (n * d.c_in + ci) * in_sp;
                        let g_base = (n * d.c_out + co) * out_sp;
                        for src_d in d_lo..d_hi {
                            let zd = src_d * s + fd - p;
                            for src_h in h_lo..h_hi {
                                let zh = src_h * s + fh - p;
                                let x_row = x_base + (src_d * ih + src_h) * iw;
                                let g_row = g_base + (zd * oh + zh) * ow;
                                let zw0 = w_lo * s + fw - p;
                                for (j, src_w) in (w_lo..w_hi).enumerate() {
                                    acc += x[x_row + src_w] * g[g_row + zw0 + j * s];
                                }
                            }
                        }
                    }
                    o[(fd * kh + fh) * kw + fw] = acc;
                }
            }
        }
    });
    dw
}

const MATMUL_PAR_THRESHOLD: usize = 1 << 14;

/// out[m,n] = a[m,k] @ b[k,n]. Accumulates over `k` in ascending order for
/// every output element.
pub fn matmul2d<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    let body = |(i, row): (usize, &mut [T])| {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    };
    if m * k * n >= MATMUL_PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out[m,q] = a[m,p] @ b[q,p]^T (dot products of rows).
pub fn matmul2d_nt<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * q);
    let body = |(i, row): (usize, &mut [T])| {
        let arow = &a[i * p..i * p + p];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * p..j * p + p];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o += acc;
        }
    };
    if m * p * q >= MATMUL_PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(q).enumerate().for_each(body);
    } else {
        out.chunks_mut(q).enumerate().for_each(body);
    }
}

/// out[m,q] = a[p,m]^T @ b[p,q]. Accumulates over `p` in ascending order.
pub fn matmul2d_tn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, q: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * q);
    let body = |(i, row): (usize, &mut [T])| {
        for pp in 0..p {
            let av = a[pp * m + i];
            let brow = &b[pp * q..pp * q + q];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    };
    if m * p * q >= MATMUL_PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(q).enumerate().for_each(body);
    } else {
        out.chunks_mut(q).enumerate().for_each(body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        // floor((in + 2p - k)/s) + 1
        assert_eq!(conv_out_extent(32, 2, 2, 0).unwrap(), 16);
        assert_eq!(conv_out_extent(5, 3, 1, 1).unwrap(), 5);
        assert_eq!(conv_out_extent(4, 3, 2, 1).unwrap(), 2);
        assert!(conv_out_extent(4, 3, 0, 0).is_err());
    }

    #[test]
    fn transpose_extent_inverts() {
        for (i, k, s, p) in [(16usize, 2usize, 2usize, 0usize), (5, 3, 1, 1), (4, 4, 2, 1)] {
            let o = conv_out_extent(i, k, s, p).unwrap();
            assert_eq!(conv_transpose_out_extent(o, k, s, p).unwrap(), i);
        }
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 4];
        matmul2d(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let a = vec![1.0f64, 2.0];
        let b = vec![3.0, 4.0];
        let mut out = vec![0.0; 1];
        matmul2d(&a, &b, 1, 2, 1, &mut out);
        assert_eq!(out, vec![11.0]);
    }
}
