//! Forward/backward numeric routines shared by [`Tensor`] and the autodiff graph.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` for row-major buffers.
///
/// `a` is `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the row-major buffers whose lengths are
    // asserted above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let lead = s.iter().take_while(|&&d| d == 1).count();
    &s[lead.min(s.len().saturating_sub(1))..]
}

/// Strides of `shape` aligned to `out` rank, 0 where broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output position with the flat offsets into each input.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if ad.len() == 1 {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else if numel(&out_shape) == ad.len() && a.shape().ends_with(strip_leading_ones(b.shape())) {
        let mut out = Vec::with_capacity(ad.len());
        for chunk in ad.chunks(bd.len()) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if numel(&out_shape) == bd.len() && b.shape().ends_with(strip_leading_ones(a.shape())) {
        let mut out = Vec::with_capacity(bd.len());
        for chunk in bd.chunks(ad.len()) {
            out.extend(chunk.iter().zip(ad).map(|(&y, &x)| f(x, y)));
        }
        out
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        out
    };
    Tensor::new(out_shape, data)
}

/// Sum a gradient of shape `out` down to the broadcast input shape `target`.
pub(crate) fn reduce_to_shape(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let n = numel(target);
    if n == 1 {
        return vec![grad.iter().sum()];
    }
    let mut acc = vec![0.0; n];
    if out.ends_with(strip_leading_ones(target)) {
        for chunk in grad.chunks(n) {
            for (a, g) in acc.iter_mut().zip(chunk) {
                *a += g;
            }
        }
        return acc;
    }
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &st, &zeros, |o, it, _| acc[it] += grad[o]);
    acc
}

/// Batched matmul with broadcast batch dims. `b` is `[.., k, p]`, or `[.., p, k]` when `trans_b`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, p) = if trans_b {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if k != kb {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
    let mut out_shape = batch.clone();
    out_shape.extend([n, p]);
    let mut out = vec![0.0; numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    let (ma, mb, mo) = (n * k, k * p, n * p);
    let sa_b = broadcast_strides(ba, &batch);
    let sb_b = broadcast_strides(bb, &batch);
    let mut jobs = Vec::with_capacity(numel(&batch));
    for_each_broadcast(&batch, &sa_b, &sb_b, |o, ia, ib| jobs.push((o, ia, ib)));
    for (o, ia, ib) in jobs {
        gemm(
            n,
            k,
            p,
            &ad[ia * ma..(ia + 1) * ma],
            false,
            &bd[ib * mb..(ib + 1) * mb],
            trans_b,
            &mut out[o * mo..(o + 1) * mo],
            false,
        );
    }
    Tensor::new(out_shape, out)
}

/// Gradients of `matmul(a, b, trans_b)` given upstream `grad`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_b: bool,
    grad: &[f64],
    out_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let p = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
    let batch = &out_shape[..out_shape.len() - 2];
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let sa_b = broadcast_strides(ba, batch);
    let sb_b = broadcast_strides(bb, batch);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ma, mb, mo) = (n * k, k * p, n * p);
    let (ad, bd) = (a.data(), b.data());
    let mut jobs = Vec::with_capacity(numel(batch));
    for_each_broadcast(batch, &sa_b, &sb_b, |o, ia, ib| jobs.push((o, ia, ib)));
    for (o, ia, ib) in jobs {
        let g = &grad[o * mo..(o + 1) * mo];
        let bm = &bd[ib * mb..(ib + 1) * mb];
        let am = &ad[ia * ma..(ia + 1) * ma];
        // dA = dC · op(B)ᵀ
        gemm(n, p, k, g, false, bm, !trans_b, &mut ga[ia * ma..(ia + 1) * ma], true);
        if trans_b {
            // B is [p, k]: dB = dCᵀ · A
            gemm(p, n, k, g, true, am, false, &mut gb[ib * mb..(ib + 1) * mb], true);
        } else {
            // dB = Aᵀ · dC
            gemm(k, n, p, am, true, g, false, &mut gb[ib * mb..(ib + 1) * mb], true);
        }
    }
    (ga, gb)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            limit: x.rank(),
        });
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN input to softmax".into()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    if inner == 1 {
        for row in out.chunks_mut(len) {
            softmax_row(row);
        }
    } else {
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[base + j * inner];
                }
                softmax_row(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place softmax of one row; a row of all `-inf` becomes all zeros.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `dx = y ⊙ (dy − Σ y·dy)` along `axis`.
pub(crate) fn softmax_backward(y: &Tensor, grad: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| yd[base + j * inner] * grad[base + j * inner]).sum();
            for j in 0..len {
                let at = base + j * inner;
                gx[at] = yd[at] * (grad[at] - dot);
            }
        }
    }
    gx
}

/// Returns `(y, xhat, rstd)` with `xhat` the pre-affine normalized input.
pub(crate) fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.rows();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, xhat, rstd))
}

pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut gx = vec![0.0; xhat.len()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for (r, &rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let dy = &grad[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            gg[j] += dy[j] * xh[j];
            gb[j] += dy[j];
            let dxh = dy[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            gx[r * d + j] = rs * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
        }
    }
    (gx, gg, gb)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", shape, perm));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = xd[i]);
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
