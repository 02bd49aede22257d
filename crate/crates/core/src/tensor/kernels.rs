//! Slice-level forward and backward kernels. Backward kernels accumulate into
//! their gradient buffers so shared inputs sum their contributions.

use crate::scalar::Scalar;

#[inline]
fn acc<S: Scalar>(dst: &mut S, v: f64) {
    *dst = S::narrow(dst.widen() + v);
}

// ---------------------------------------------------------------- matmul

/// `[batch, m, k] x [k, n]` (shared rhs) or `[batch, m, k] x [batch, k, n]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

pub(crate) fn matmul_fwd<S: Scalar>(a: &[S], b: &[S], d: MatMulDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        S::gemm(d.batch * d.m, d.k, d.n, a, (d.k, 1), b, (d.n, 1), &mut out, (d.n, 1), false);
    } else {
        for i in 0..d.batch {
            S::gemm(
                d.m,
                d.k,
                d.n,
                &a[i * d.m * d.k..],
                (d.k, 1),
                &b[i * d.k * d.n..],
                (d.n, 1),
                &mut out[i * d.m * d.n..],
                (d.n, 1),
                false,
            );
        }
    }
    out
}

pub(crate) fn matmul_bwd<S: Scalar>(
    a: &[S],
    b: &[S],
    dc: &[S],
    d: MatMulDims,
    da: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    if let Some(da) = da {
        if d.shared_rhs {
            S::gemm(d.batch * d.m, d.n, d.k, dc, (d.n, 1), b, (1, d.n), da, (d.k, 1), true);
        } else {
            for i in 0..d.batch {
                S::gemm(
                    d.m,
                    d.n,
                    d.k,
                    &dc[i * d.m * d.n..],
                    (d.n, 1),
                    &b[i * d.k * d.n..],
                    (1, d.n),
                    &mut da[i * d.m * d.k..],
                    (d.k, 1),
                    true,
                );
            }
        }
    }
    if let Some(db) = db {
        if d.shared_rhs {
            S::gemm(d.k, d.batch * d.m, d.n, a, (1, d.k), dc, (d.n, 1), db, (d.n, 1), true);
        } else {
            for i in 0..d.batch {
                S::gemm(
                    d.k,
                    d.m,
                    d.n,
                    &a[i * d.m * d.k..],
                    (1, d.k),
                    &dc[i * d.m * d.n..],
                    (d.n, 1),
                    &mut db[i * d.k * d.n..],
                    (d.n, 1),
                    true,
                );
            }
        }
    }
}

// ---------------------------------------------------------------- conv

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let hw_out = d.spatial_out();
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let line = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], d: &ConvDims, dx: &mut [S]) {
    let hw_out = d.spatial_out();
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_fwd<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let hw_out = d.spatial_out();
    let in_plane = d.c_in * d.h * d.w;
    let out_plane = d.c_out * hw_out;
    let mut out = vec![S::zero(); d.batch * out_plane];
    let mut col = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); d.col_rows() * hw_out]
    };
    for b in 0..d.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let cols: &[S] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut col);
            &col
        };
        let ob = &mut out[b * out_plane..(b + 1) * out_plane];
        S::gemm(d.c_out, d.col_rows(), hw_out, w, (d.col_rows(), 1), cols, (hw_out, 1), ob, (hw_out, 1), false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * hw_out..(co + 1) * hw_out] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_bwd<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    d: &ConvDims,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    let hw_out = d.spatial_out();
    let in_plane = d.c_in * d.h * d.w;
    let out_plane = d.c_out * hw_out;
    let rows = d.col_rows();
    let mut col = vec![S::zero(); if d.is_pointwise() { 0 } else { rows * hw_out }];
    let mut dcol = vec![S::zero(); if d.is_pointwise() { 0 } else { rows * hw_out }];
    for b in 0..d.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let db = &dout[b * out_plane..(b + 1) * out_plane];
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[S] = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, d, &mut col);
                &col
            };
            S::gemm(d.c_out, hw_out, rows, db, (hw_out, 1), cols, (1, hw_out), dw, (rows, 1), true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
            if d.is_pointwise() {
                S::gemm(rows, d.c_out, hw_out, w, (1, rows), db, (hw_out, 1), dxb, (hw_out, 1), true);
            } else {
                S::gemm(rows, d.c_out, hw_out, w, (1, rows), db, (hw_out, 1), &mut dcol, (hw_out, 1), false);
                col2im(&dcol, d, dxb);
            }
        }
    }
    if let Some(dbias) = dbias {
        for (co, g) in dbias.iter_mut().enumerate() {
            let mut s = 0.0;
            for b in 0..d.batch {
                let off = b * out_plane + co * hw_out;
                s += dout[off..off + hw_out].iter().map(|v| v.widen()).sum::<f64>();
            }
            acc(g, s);
        }
    }
}

/// Per-channel convolution; `w` is `[c, 1, kh, kw]` and `c_out == c_in`.
pub(crate) fn depthwise_fwd<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.batch * d.c_in * d.spatial_out()];
    let ksz = d.kh * d.kw;
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let plane = &x[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
            let k = &w[c * ksz..(c + 1) * ksz];
            let o = &mut out[(b * d.c_in + c) * d.spatial_out()..][..d.spatial_out()];
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut s = bias.map_or(0.0, |bv| bv[c].widen());
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            s += plane[iy as usize * d.w + ix as usize].widen() * k[ky * d.kw + kx].widen();
                        }
                    }
                    o[oy * d.w_out + ox] = S::narrow(s);
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_bwd<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    d: &ConvDims,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    mut dbias: Option<&mut [S]>,
) {
    let ksz = d.kh * d.kw;
    let hw = d.h * d.w;
    for c in 0..d.c_in {
        let k = &w[c * ksz..(c + 1) * ksz];
        let mut kgrad = vec![0.0f64; ksz];
        let mut bgrad = 0.0;
        for b in 0..d.batch {
            let plane = &x[(b * d.c_in + c) * hw..][..hw];
            let g = &dout[(b * d.c_in + c) * d.spatial_out()..][..d.spatial_out()];
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let go = g[oy * d.w_out + ox].widen();
                    bgrad += go;
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let idx = iy as usize * d.w + ix as usize;
                            kgrad[ky * d.kw + kx] += go * plane[idx].widen();
                            if let Some(dx) = dx.as_deref_mut() {
                                acc(&mut dx[(b * d.c_in + c) * hw + idx], go * k[ky * d.kw + kx].widen());
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for (i, g) in kgrad.iter().enumerate() {
                acc(&mut dw[c * ksz + i], *g);
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            acc(&mut db[c], bgrad);
        }
    }
}

// ---------------------------------------------------------------- activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU and its derivative.
#[inline]
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Softmax over rows of length `n`, max-subtracted.
pub(crate) fn softmax_fwd<S: Scalar>(x: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
        let exps: Vec<f64> = row.iter().map(|v| (v.widen() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (dst, e) in o.iter_mut().zip(&exps) {
            *dst = S::narrow(e / total);
        }
    }
    out
}

pub(crate) fn softmax_bwd<S: Scalar>(y: &[S], dy: &[S], n: usize, dx: &mut [S]) {
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.widen() * b.widen()).sum();
        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
            acc(d, yv.widen() * (gv.widen() - dot));
        }
    }
}

/// Layer norm over rows of length `n`; returns output plus per-row (mean, rstd).
pub(crate) fn layer_norm_fwd<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    n: usize,
    eps: f64,
) -> (Vec<S>, Vec<(f64, f64)>) {
    let mut out = vec![S::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / n);
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().map(|v| v.widen()).sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            let xhat = (row[i].widen() - mean) * rstd;
            o[i] = S::narrow(xhat * gamma[i].widen() + beta[i].widen());
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_bwd<S: Scalar>(
    x: &[S],
    gamma: &[S],
    stats: &[(f64, f64)],
    dy: &[S],
    n: usize,
    dx: Option<&mut [S]>,
    dgamma: Option<&mut [S]>,
    dbeta: Option<&mut [S]>,
) {
    let mut gsum = vec![0.0f64; n];
    let mut bsum = vec![0.0f64; n];
    let mut dx = dx;
    for (r, ((row, g), &(mean, rstd))) in x.chunks(n).zip(dy.chunks(n)).zip(stats).enumerate() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let xhat: Vec<f64> = row.iter().map(|v| (v.widen() - mean) * rstd).collect();
        for i in 0..n {
            let gi = g[i].widen();
            let dxhat = gi * gamma[i].widen();
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[i];
            gsum[i] += gi * xhat[i];
            bsum[i] += gi;
        }
        mean_dxhat /= n as f64;
        mean_dxhat_xhat /= n as f64;
        if let Some(dx) = dx.as_deref_mut() {
            let drow = &mut dx[r * n..(r + 1) * n];
            for i in 0..n {
                let dxhat = g[i].widen() * gamma[i].widen();
                acc(&mut drow[i], rstd * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat));
            }
        }
    }
    if let Some(dg) = dgamma {
        for (d, s) in dg.iter_mut().zip(&gsum) {
            acc(d, *s);
        }
    }
    if let Some(db) = dbeta {
        for (d, s) in db.iter_mut().zip(&bsum) {
            acc(d, *s);
        }
    }
}

// ---------------------------------------------------------------- pooling

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Returns the pooled values and the flat input index of each window's max
/// (first occurrence on ties).
pub(crate) fn max_pool_fwd<S: Scalar>(x: &[S], d: &PoolDims) -> (Vec<S>, Vec<usize>) {
    let n = d.planes * d.h_out * d.w_out;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut best = base + oy * d.stride * d.w + ox * d.stride;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let idx = base + (oy * d.stride + ky) * d.w + ox * d.stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_fwd<S: Scalar>(x: &[S], d: &PoolDims) -> Vec<S> {
    let mut out = Vec::with_capacity(d.planes * d.h_out * d.w_out);
    let inv = 1.0 / (d.k * d.k) as f64;
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut s = 0.0;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        s += x[base + (oy * d.stride + ky) * d.w + ox * d.stride + kx].widen();
                    }
                }
                out.push(S::narrow(s * inv));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_bwd<S: Scalar>(dy: &[S], d: &PoolDims, dx: &mut [S]) {
    let inv = 1.0 / (d.k * d.k) as f64;
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let g = dy[(p * d.h_out + oy) * d.w_out + ox].widen() * inv;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        acc(&mut dx[base + (oy * d.stride + ky) * d.w + ox * d.stride + kx], g);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- layout

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn transpose<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Cyclic shift along `axis` (element `i` moves to `i + shift`).
pub(crate) fn roll<S: Scalar>(x: &[S], shape: &[usize], axis: usize, shift: isize) -> Vec<S> {
    let n = shape[axis] as isize;
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let s = shift.rem_euclid(n) as usize;
    let n = n as usize;
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..n {
            let dst = (i + s) % n;
            let src_off = (o * n + i) * inner;
            let dst_off = (o * n + dst) * inner;
            out[dst_off..dst_off + inner].copy_from_slice(&x[src_off..src_off + inner]);
        }
    }
    out
}
