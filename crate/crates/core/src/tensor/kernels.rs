//! Dense kernels shared by the graph executor.
//!
//! Every kernel accumulates each output element in a fixed sequential order;
//! parallelism only ever distributes disjoint output slabs across threads.
//! Results are therefore bit-identical for any worker count.

use rayon::prelude::*;

use super::Scalar;

/// Row-major matmul: `a [m,k] x b [k,n] -> [m,n]`.
///
/// ikj loop order with 4-row register blocking; the inner j-loop is a pure
/// elementwise FMA over output rows, which vectorizes without reassociating
/// the k-accumulation.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![S::ZERO; m * n];
    let work = m * k * n;
    if work < (1 << 15) {
        matmul_rows(a, b, k, n, 0, m, &mut out);
    } else {
        let rows_per_block = 4;
        out.par_chunks_mut(rows_per_block * n).enumerate().for_each(|(blk, chunk)| {
            let row0 = blk * rows_per_block;
            let rows = chunk.len() / n;
            matmul_rows(a, b, k, n, row0, rows, chunk);
        });
    }
    out
}

/// Compute `rows` output rows starting at `row0` into `out` (len rows*n).
fn matmul_rows<S: Scalar>(a: &[S], b: &[S], k: usize, n: usize, row0: usize, rows: usize, out: &mut [S]) {
    let mut i = 0;
    while i + 4 <= rows {
        let (a0, a1, a2, a3) = (
            &a[(row0 + i) * k..(row0 + i + 1) * k],
            &a[(row0 + i + 1) * k..(row0 + i + 2) * k],
            &a[(row0 + i + 2) * k..(row0 + i + 3) * k],
            &a[(row0 + i + 3) * k..(row0 + i + 4) * k],
        );
        // split out rows without aliasing
        let (r0, rest) = out[i * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, rest) = rest.split_at_mut(n);
        let r3 = &mut rest[..n];
        for p in 0..k {
            let (s0, s1, s2, s3) = (a0[p], a1[p], a2[p], a3[p]);
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] = r0[j] + s0 * bv;
                r1[j] = r1[j] + s1 * bv;
                r2[j] = r2[j] + s2 * bv;
                r3[j] = r3[j] + s3 * bv;
            }
        }
        i += 4;
    }
    while i < rows {
        let arow = &a[(row0 + i) * k..(row0 + i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
        i += 1;
    }
}

/// `a [m,k] x b^T` where `b` is `[n,k]` row-major: result `[m,n]`.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![S::ZERO; m * n];
    let dot = |x: &[S], y: &[S]| {
        // 4 independent accumulator lanes, folded in fixed order
        let mut acc = [S::ZERO; 4];
        let chunks = x.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] = acc[0] + x[i] * y[i];
            acc[1] = acc[1] + x[i + 1] * y[i + 1];
            acc[2] = acc[2] + x[i + 2] * y[i + 2];
            acc[3] = acc[3] + x[i + 3] * y[i + 3];
        }
        let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + S::ZERO;
        for i in chunks * 4..x.len() {
            s = s + x[i] * y[i];
        }
        s
    };
    let run_rows = |range: std::ops::Range<usize>, chunk: &mut [S]| {
        for (local, i) in range.enumerate() {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                chunk[local * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    };
    if m * k * n < (1 << 15) {
        run_rows(0..m, &mut out);
    } else {
        out.par_chunks_mut(2 * n).enumerate().for_each(|(blk, chunk)| {
            let row0 = blk * 2;
            let rows = chunk.len() / n;
            run_rows(row0..row0 + rows, chunk);
        });
    }
    out
}

/// `a^T x b` where `a` is `[k,m]` and `b` is `[k,n]`: result `[m,n]`.
/// Accumulates rank-1 updates over k in fixed order.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut out = vec![S::ZERO; m * n];
    // parallel over output rows i (columns of a); each row scans all k
    let run_rows = |range: std::ops::Range<usize>, chunk: &mut [S]| {
        for (local, i) in range.enumerate() {
            let orow = &mut chunk[local * n..(local + 1) * n];
            for p in 0..k {
                let av = a[p * m + i];
                let brow = &b[p * n..p * n + n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    };
    if k * m * n < (1 << 15) {
        run_rows(0..m, &mut out);
    } else {
        out.par_chunks_mut(2 * n).enumerate().for_each(|(blk, chunk)| {
            let row0 = blk * 2;
            let rows = chunk.len() / n;
            run_rows(row0..row0 + rows, chunk);
        });
    }
    out
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Right-aligned broadcast shape of two shapes, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` embedded in `out_shape` with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Elementwise binary op with right-aligned broadcasting.
pub fn broadcast_binary<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; out_shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for axis in (0..out_shape.len()).rev() {
            coords[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            coords[axis] = 0;
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
        }
    }
    out
}

/// Sum `grad` (of shape `grad_shape`) down to `target_shape`, reversing a
/// broadcast.
pub fn reduce_broadcast<S: Scalar>(grad: &[S], grad_shape: &[usize], target_shape: &[usize]) -> Vec<S> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let numel: usize = target_shape.iter().product();
    let mut out = vec![S::ZERO; numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let mut coords = vec![0usize; grad_shape.len()];
    let mut it = 0usize;
    for &g in grad {
        out[it] = out[it] + g;
        for axis in (0..grad_shape.len()).rev() {
            coords[axis] += 1;
            it += st[axis];
            if coords[axis] < grad_shape[axis] {
                break;
            }
            coords[axis] = 0;
            it -= st[axis] * grad_shape[axis];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dDims {
    pub fn infer(
        batch: usize,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return None;
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Some(Conv2dDims { batch, in_c, in_h, in_w, out_c, kh, kw, stride, pad, out_h, out_w })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[C,H,W]` into columns `[C*kh*kw, out_h*out_w]`.
fn im2col<S: Scalar>(img: &[S], d: &Conv2dDims, col: &mut [S]) {
    let ohw = d.out_hw();
    for c in 0..d.in_c {
        let plane = &img[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut col[((c * d.kh + ki) * d.kw + kj) * ohw..][..ohw];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    let dst = &mut row[oh * d.out_w..(oh + 1) * d.out_w];
                    if ih < 0 || ih >= d.in_h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[ih as usize * d.in_w..(ih as usize + 1) * d.in_w];
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        dst[ow] = if iw < 0 || iw >= d.in_w as isize {
                            S::ZERO
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold column gradients back into one image gradient (accumulating).
fn col2im_add<S: Scalar>(col: &[S], d: &Conv2dDims, img_grad: &mut [S]) {
    let ohw = d.out_hw();
    for c in 0..d.in_c {
        let plane = &mut img_grad[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &col[((c * d.kh + ki) * d.kw + kj) * ohw..][..ohw];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.in_w..(ih as usize + 1) * d.in_w];
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.in_w as isize {
                            dst[iw as usize] = dst[iw as usize] + row[oh * d.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: x `[B,C,H,W]`, w `[F,C,kh,kw]` -> `[B,F,oh,ow]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], d: &Conv2dDims) -> Vec<S> {
    let img_len = d.in_c * d.in_h * d.in_w;
    let out_len = d.out_c * d.out_hw();
    let mut out = vec![S::ZERO; d.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, out_img)| {
        let mut col = vec![S::ZERO; d.col_rows() * d.out_hw()];
        im2col(&x[b * img_len..(b + 1) * img_len], d, &mut col);
        let prod = matmul_serial(w, &col, d.out_c, d.col_rows(), d.out_hw());
        out_img.copy_from_slice(&prod);
    });
    out
}

/// Serial matmul used inside per-image parallel loops.
fn matmul_serial<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    matmul_rows(a, b, k, n, 0, m, &mut out);
    out
}

/// Backward convolution. Returns (dx, dw).
pub fn conv2d_backward<S: Scalar>(x: &[S], w: &[S], dy: &[S], d: &Conv2dDims) -> (Vec<S>, Vec<S>) {
    let img_len = d.in_c * d.in_h * d.in_w;
    let out_len = d.out_c * d.out_hw();
    let w_t = transpose(w, d.out_c, d.col_rows());

    let mut dx = vec![S::ZERO; d.batch * img_len];
    // per-image weight-gradient partials, reduced in batch order below
    let partials: Vec<Vec<S>> = dx
        .par_chunks_mut(img_len)
        .enumerate()
        .map(|(b, dx_img)| {
            let mut col = vec![S::ZERO; d.col_rows() * d.out_hw()];
            im2col(&x[b * img_len..(b + 1) * img_len], d, &mut col);
            let dy_img = &dy[b * out_len..(b + 1) * out_len];
            // dW partial: dy [F,OHW] x col^T [OHW,CKK]
            let dw_part = matmul_nt(dy_img, &col, d.out_c, d.out_hw(), d.col_rows());
            // dX: col-grad = w^T [CKK,F] x dy [F,OHW]
            let col_grad = matmul_serial(&w_t, dy_img, d.col_rows(), d.out_c, d.out_hw());
            col2im_add(&col_grad, d, dx_img);
            dw_part
        })
        .collect();

    let mut dw = vec![S::ZERO; d.out_c * d.col_rows()];
    for part in &partials {
        for (o, &p) in dw.iter_mut().zip(part) {
            *o = *o + p;
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pool over `[B,C,H,W]`. Returns (out, argmax flat index per output).
/// Ties pick the first (lowest) input index.
pub fn maxpool2d_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    chans: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<S>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![S::ZERO; batch * chans * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for bc in 0..batch * chans {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = plane[i * stride * w + j * stride];
                let mut best_idx = i * stride * w + j * stride;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = (i * stride + ki) * w + (j * stride + kj);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[bc * oh * ow + i * ow + j] = best;
                arg[bc * oh * ow + i * ow + j] = bc * h * w + best_idx;
            }
        }
    }
    (out, arg, oh, ow)
}

pub fn maxpool2d_backward<S: Scalar>(dy: &[S], arg: &[usize], x_len: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; x_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Global average pool `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool<S: Scalar>(x: &[S], batch: usize, chans: usize, hw: usize) -> Vec<S> {
    let inv = S::from_f64(1.0 / hw as f64);
    (0..batch * chans)
        .map(|bc| {
            let mut acc = S::ZERO;
            for &v in &x[bc * hw..(bc + 1) * hw] {
                acc = acc + v;
            }
            acc * inv
        })
        .collect()
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &[S], batch: usize, chans: usize, hw: usize) -> Vec<S> {
    let inv = S::from_f64(1.0 / hw as f64);
    let mut dx = vec![S::ZERO; batch * chans * hw];
    for bc in 0..batch * chans {
        let g = dy[bc] * inv;
        for v in &mut dx[bc * hw..(bc + 1) * hw] {
            *v = g;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics of `[B,C,H,W]` (biased variance).
pub fn bn_batch_stats<S: Scalar>(x: &[S], batch: usize, chans: usize, hw: usize) -> (Vec<S>, Vec<S>) {
    let n = (batch * hw) as f64;
    let mut mean = vec![S::ZERO; chans];
    let mut var = vec![S::ZERO; chans];
    for c in 0..chans {
        let mut acc = S::ZERO;
        for b in 0..batch {
            let plane = &x[(b * chans + c) * hw..(b * chans + c + 1) * hw];
            for &v in plane {
                acc = acc + v;
            }
        }
        let m = acc * S::from_f64(1.0 / n);
        let mut vacc = S::ZERO;
        for b in 0..batch {
            let plane = &x[(b * chans + c) * hw..(b * chans + c + 1) * hw];
            for &v in plane {
                let d = v - m;
                vacc = vacc + d * d;
            }
        }
        mean[c] = m;
        var[c] = vacc * S::from_f64(1.0 / n);
    }
    (mean, var)
}

/// Normalize with given per-channel stats: y = gamma * (x-mean)/sqrt(var+eps) + beta.
/// Returns (y, xhat) where xhat is the pre-affine normalized value.
pub fn bn_apply<S: Scalar>(
    x: &[S],
    batch: usize,
    chans: usize,
    hw: usize,
    mean: &[S],
    var: &[S],
    gamma: &[S],
    beta: &[S],
    eps: f64,
) -> (Vec<S>, Vec<S>) {
    let mut y = vec![S::ZERO; x.len()];
    let mut xhat = vec![S::ZERO; x.len()];
    for b in 0..batch {
        for c in 0..chans {
            let inv_std = S::ONE / (var[c] + S::from_f64(eps)).sqrt();
            let (m, g, be) = (mean[c], gamma[c], beta[c]);
            let base = (b * chans + c) * hw;
            for i in 0..hw {
                let xh = (x[base + i] - m) * inv_std;
                xhat[base + i] = xh;
                y[base + i] = g * xh + be;
            }
        }
    }
    (y, xhat)
}

/// Backward through train-mode batch norm (batch statistics).
/// Returns (dx, dgamma, dbeta).
pub fn bn_backward_train<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    var: &[S],
    gamma: &[S],
    batch: usize,
    chans: usize,
    hw: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = (batch * hw) as f64;
    let mut dgamma = vec![S::ZERO; chans];
    let mut dbeta = vec![S::ZERO; chans];
    let mut dx = vec![S::ZERO; dy.len()];
    for c in 0..chans {
        let mut sum_dy = S::ZERO;
        let mut sum_dy_xhat = S::ZERO;
        for b in 0..batch {
            let base = (b * chans + c) * hw;
            for i in 0..hw {
                sum_dy = sum_dy + dy[base + i];
                sum_dy_xhat = sum_dy_xhat + dy[base + i] * xhat[base + i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let inv_std = S::ONE / (var[c] + S::from_f64(eps)).sqrt();
        let scale = gamma[c] * inv_std;
        let inv_n = S::from_f64(1.0 / n);
        for b in 0..batch {
            let base = (b * chans + c) * hw;
            for i in 0..hw {
                let term = dy[base + i] - sum_dy * inv_n - xhat[base + i] * sum_dy_xhat * inv_n;
                dx[base + i] = scale * term;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch norm (fixed statistics).
pub fn bn_backward_eval<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    var: &[S],
    gamma: &[S],
    batch: usize,
    chans: usize,
    hw: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dgamma = vec![S::ZERO; chans];
    let mut dbeta = vec![S::ZERO; chans];
    let mut dx = vec![S::ZERO; dy.len()];
    for c in 0..chans {
        let inv_std = S::ONE / (var[c] + S::from_f64(eps)).sqrt();
        let scale = gamma[c] * inv_std;
        for b in 0..batch {
            let base = (b * chans + c) * hw;
            for i in 0..hw {
                dgamma[c] = dgamma[c] + dy[base + i] * xhat[base + i];
                dbeta[c] = dbeta[c] + dy[base + i];
                dx[base + i] = dy[base + i] * scale;
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// axis reductions and normalizations
// ---------------------------------------------------------------------------

/// Decompose a shape around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut mx = x[at(0)];
            for j in 1..len {
                mx = mx.maximum(x[at(j)]);
            }
            let mut denom = S::ZERO;
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                denom = denom + e;
            }
            let inv = S::ONE / denom;
            for j in 0..len {
                out[at(j)] = out[at(j)] * inv;
            }
        }
    }
    out
}

/// Softmax backward: dx = y * (dy - sum(dy*y, axis)).
pub fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![S::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = S::ZERO;
            for j in 0..len {
                dot = dot + dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// L2-normalize along `axis`. Zero vectors map to zero; returns the count of
/// zero vectors encountered so callers can flag them.
pub fn l2_normalize_axis<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> (Vec<S>, usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::ZERO; x.len()];
    let mut zero_count = 0usize;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut sq = S::ZERO;
            for j in 0..len {
                sq = sq + x[at(j)] * x[at(j)];
            }
            if sq == S::ZERO {
                zero_count += 1;
                continue;
            }
            let inv = S::ONE / sq.sqrt();
            for j in 0..len {
                out[at(j)] = x[at(j)] * inv;
            }
        }
    }
    (out, zero_count)
}

/// Backward of L2 normalization: dx = (dy - y * <y, dy>) / ||x||.
pub fn l2_normalize_backward<S: Scalar>(
    x: &[S],
    y: &[S],
    dy: &[S],
    shape: &[usize],
    axis: usize,
) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut sq = S::ZERO;
            for j in 0..len {
                sq = sq + x[at(j)] * x[at(j)];
            }
            if sq == S::ZERO {
                continue; // zero vector: subgradient 0
            }
            let norm = sq.sqrt();
            let mut dot = S::ZERO;
            for j in 0..len {
                dot = dot + y[at(j)] * dy[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = (dy[at(j)] - y[at(j)] * dot) / norm;
            }
        }
    }
    dx
}

/// Sum along `axis` (axis removed from the shape).
pub fn sum_axis<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::ZERO; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + x[o * len * inner + j * inner + i];
            }
        }
    }
    out
}

/// Spread an axis-reduction gradient back over the axis, scaled by `scale`.
pub fn spread_axis<S: Scalar>(dy: &[S], shape: &[usize], axis: usize, scale: S) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![S::ZERO; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                dx[o * len * inner + j * inner + i] = dy[o * inner + i] * scale;
            }
        }
    }
    dx
}

pub fn sigmoid_s<S: Scalar>(x: S) -> S {
    // stable in both tails
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}
