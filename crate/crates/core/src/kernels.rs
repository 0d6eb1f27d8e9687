//! Slice-level numeric kernels shared by the autodiff tape and the
//! cache-based inference path. All matrices are row-major.

use crate::math;

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[r, :] = b + x[r, :] · w` with `w` of shape `[d_in, d_out]`.
pub fn linear_forward(x: &[f64], d_in: usize, w: &[f64], b: Option<&[f64]>, d_out: usize, out: &mut [f64]) {
    let rows = x.len() / d_in;
    debug_assert_eq!(out.len(), rows * d_out);
    for r in 0..rows {
        let o = &mut out[r * d_out..(r + 1) * d_out];
        match b {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
        let xr = &x[r * d_in..(r + 1) * d_in];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy(o, xi, &w[i * d_out..(i + 1) * d_out]);
            }
        }
    }
}

/// Accumulates gradients of [`linear_forward`].
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    d_in: usize,
    w: &[f64],
    d_out: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let rows = x.len() / d_in;
    if let Some(dx) = dx {
        for r in 0..rows {
            let g = &dout[r * d_out..(r + 1) * d_out];
            let dxr = &mut dx[r * d_in..(r + 1) * d_in];
            for (i, d) in dxr.iter_mut().enumerate() {
                *d += dot(g, &w[i * d_out..(i + 1) * d_out]);
            }
        }
    }
    if let Some(dw) = dw {
        for r in 0..rows {
            let g = &dout[r * d_out..(r + 1) * d_out];
            let xr = &x[r * d_in..(r + 1) * d_in];
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut dw[i * d_out..(i + 1) * d_out], xi, g);
                }
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            axpy(db, 1.0, &dout[r * d_out..(r + 1) * d_out]);
        }
    }
}

/// Layer norm over the trailing axis. Writes per-row mean and reciprocal std.
pub fn layer_norm_forward(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], out: &mut [f64], mean: &mut [f64], rstd: &mut [f64]) {
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let m = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let rs = 1.0 / math::sqrt(var + LN_EPS);
        mean[r] = m;
        rstd[r] = rs;
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (xr[i] - m) * rs * gamma[i] + beta[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dout: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let g = &dout[r * d..(r + 1) * d];
        let (m, rs) = (mean[r], rstd[r]);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for i in 0..d {
            let xh = (xr[i] - m) * rs;
            let dxh = g[i] * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dgamma[i] += g[i] * xh;
            dbeta[i] += g[i];
        }
        let inv_d = 1.0 / d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xh = (xr[i] - m) * rs;
            let dxh = g[i] * gamma[i];
            dxr[i] += rs * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh);
        }
    }
}

/// Shape of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, heads * head_dim]`, keys and values
/// `[batch * k_len, heads * head_dim]`. With `causal = Some(offset)` query
/// `i` sees keys `0..=offset + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub head_dim: usize,
    pub causal: Option<usize>,
}

impl AttnDims {
    #[inline]
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    #[inline]
    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.q_len * self.k_len
    }

    /// Number of visible keys for query `i`.
    #[inline]
    pub fn visible(&self, i: usize) -> usize {
        match self.causal {
            Some(off) => (off + i + 1).min(self.k_len),
            None => self.k_len,
        }
    }
}

/// Softmax attention. `probs` receives the (pre-dropout) attention weights;
/// `keep` is an optional scaled dropout mask of the same length applied to
/// the weights before they mix values.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims, keep: Option<&[f64]>, probs: &mut [f64], out: &mut [f64]) {
    let inner = dims.inner();
    let dh = dims.head_dim;
    let scale = 1.0 / math::sqrt(dh as f64);
    out.fill(0.0);
    probs.fill(0.0);
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for i in 0..dims.q_len {
                let qrow = &q[(b * dims.q_len + i) * inner + h * dh..][..dh];
                let pbase = ((b * dims.heads + h) * dims.q_len + i) * dims.k_len;
                let vis = dims.visible(i);
                let p = &mut probs[pbase..pbase + dims.k_len];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..vis {
                    let krow = &k[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    let s = dot(qrow, krow) * scale;
                    p[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = 0.0;
                for pj in p[..vis].iter_mut() {
                    *pj = math::exp(*pj - mx);
                    z += *pj;
                }
                let inv = 1.0 / z;
                for pj in p[..vis].iter_mut() {
                    *pj *= inv;
                }
                let orow = &mut out[(b * dims.q_len + i) * inner + h * dh..][..dh];
                for j in 0..vis {
                    let w = match keep {
                        Some(m) => p[j] * m[pbase + j],
                        None => p[j],
                    };
                    let vrow = &v[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    axpy(orow, w, vrow);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
    keep: Option<&[f64]>,
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let inner = dims.inner();
    let dh = dims.head_dim;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut dp = alloc::vec![0.0; dims.k_len];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for i in 0..dims.q_len {
                let pbase = ((b * dims.heads + h) * dims.q_len + i) * dims.k_len;
                let vis = dims.visible(i);
                let p = &probs[pbase..pbase + dims.k_len];
                let go = &dout[(b * dims.q_len + i) * inner + h * dh..][..dh];
                let mut sum = 0.0;
                for j in 0..vis {
                    let vrow = &v[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    let m = keep.map_or(1.0, |m| m[pbase + j]);
                    let g = dot(go, vrow) * m;
                    dp[j] = g;
                    sum += g * p[j];
                    let dvrow = &mut dv[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    axpy(dvrow, p[j] * m, go);
                }
                let qrow = &q[(b * dims.q_len + i) * inner + h * dh..][..dh];
                for j in 0..vis {
                    let ds = p[j] * (dp[j] - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &k[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    let dqrow = &mut dq[(b * dims.q_len + i) * inner + h * dh..][..dh];
                    axpy(dqrow, ds, krow);
                    let dkrow = &mut dk[(b * dims.k_len + j) * inner + h * dh..][..dh];
                    axpy(dkrow, ds, qrow);
                }
            }
        }
    }
}

/// Numerically stable in-place log-softmax over a row.
pub fn log_softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| math::exp(x - mx)).sum();
    let lz = mx + math::ln(z);
    for x in row.iter_mut() {
        *x -= lz;
    }
}

/// Softmax restricted to `mask`; masked entries get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool], out: &mut [f64]) {
    let mx = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { math::exp(l - mx) } else { 0.0 };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let b = [1.0, -1.0];
        let mut out = [0.0; 4];
        linear_forward(&x, 3, &w, Some(&b), 2, &mut out);
        assert!((out[0] - (1.0 + 0.1 + 0.6 + 1.5)).abs() < 1e-12);
        assert!((out[1] - (-1.0 + 0.2 + 0.8 + 1.8)).abs() < 1e-12);
        assert!((out[2] - (1.0 - 0.1 + 0.15)).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let dims = AttnDims { batch: 1, heads: 2, q_len: 3, k_len: 3, head_dim: 2, causal: Some(0) };
        let q: alloc::vec::Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: alloc::vec::Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = q.clone();
        let mut probs = alloc::vec![0.0; dims.probs_len()];
        let mut out = alloc::vec![0.0; 12];
        attention_forward(&q, &k, &v, dims, None, &mut probs, &mut out);
        for r in 0..6 {
            let row = &probs[r * 3..r * 3 + 3];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let i = r % 3;
            for (j, &p) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut out = [0.0; 3];
        masked_softmax(&[5.0, 1.0, 1.0], &[false, true, true], &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }
}
