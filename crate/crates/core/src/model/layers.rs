//! Forward and backward passes of the transformer building blocks.
//!
//! All tensors are row-major `(positions, features)` matrices. Biases and
//! layer-norm gains are stored as `1 x n` matrices so that every parameter
//! has the same type.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub(crate) type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

// --- linear -----------------------------------------------------------------

pub(crate) fn linear(p: &[Mat], ids: LinearIds, x: &Mat) -> Mat {
    let mut y = x.dot(&p[ids.w]);
    y += &p[ids.b];
    y
}

pub(crate) fn linear_backward(p: &[Mat], g: &mut [Mat], ids: LinearIds, x: &Mat, dy: &Mat) -> Mat {
    g[ids.w] += &x.t().dot(dy);
    g[ids.b] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&p[ids.w].t())
}

// --- layer norm -------------------------------------------------------------

pub(crate) struct NormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(p: &[Mat], ids: NormIds, x: &Mat) -> (Mat, NormCache) {
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &p[ids.gain] + &p[ids.bias];
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(p: &[Mat], g: &mut [Mat], ids: NormIds, cache: &NormCache, dy: &Mat) -> Mat {
    let xhat = &cache.xhat;
    g[ids.gain] += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    g[ids.bias] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &p[ids.gain];
    let mean_d = dxhat.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    let mean_dx = (&dxhat * xhat).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    (dxhat - &mean_d - xhat * &mean_dx) * &cache.inv_std.view().insert_axis(Axis(1))
}

// --- feed-forward -----------------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct FfCache {
    pre: Mat,
    act: Mat,
}

pub(crate) fn feed_forward(p: &[Mat], ids: FfIds, x: &Mat) -> (Mat, FfCache) {
    let pre = linear(p, ids.up, x);
    let act = pre.mapv(gelu);
    let y = linear(p, ids.down, &act);
    (y, FfCache { pre, act })
}

pub(crate) fn feed_forward_backward(p: &[Mat], g: &mut [Mat], ids: FfIds, x: &Mat, cache: &FfCache, dy: &Mat) -> Mat {
    let dact = linear_backward(p, g, ids.down, &cache.act, dy);
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre).and(&cache.pre).for_each(|d, &z| *d *= gelu_grad(z));
    linear_backward(p, g, ids.up, x, &dpre)
}

// --- attention --------------------------------------------------------------

/// Row-wise softmax of `scores`, in place. With `causal`, entries above the
/// diagonal are masked.
fn softmax_rows(scores: &mut Mat, causal: bool) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row.iter().take(limit).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention over projected q, k, v.
/// Returns the concatenated head outputs and per-head probabilities.
pub(crate) fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let d = q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores, causal);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (ctx, probs)
}

pub(crate) struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

/// Attention with queries from `x_q` and precomputed keys/values.
pub(crate) fn attention(p: &[Mat], ids: AttnIds, heads: usize, x_q: &Mat, k: Mat, v: Mat, causal: bool) -> (Mat, AttnCache) {
    let q = linear(p, ids.q, x_q);
    let (ctx, probs) = attend(&q, &k, &v, heads, causal);
    let out = linear(p, ids.o, &ctx);
    (out, AttnCache { q, k, v, probs, ctx })
}

pub(crate) fn project_kv(p: &[Mat], ids: AttnIds, x_kv: &Mat) -> (Mat, Mat) {
    (linear(p, ids.k, x_kv), linear(p, ids.v, x_kv))
}

/// Backward through attention. Returns the gradient with respect to the
/// query input and the gradients with respect to the projected k and v.
pub(crate) fn attention_backward(
    p: &[Mat],
    g: &mut [Mat],
    ids: AttnIds,
    heads: usize,
    x_q: &Mat,
    cache: &AttnCache,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let d = cache.q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let dctx = linear_backward(p, g, ids.o, &cache.ctx, dout);
    let mut dq = Mat::zeros(cache.q.raw_dim());
    let mut dkm = Mat::zeros(cache.k.raw_dim());
    let mut dvm = Mat::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let probs = &cache.probs[h];
        let dctx_h: ArrayView2<f64> = dctx.slice(cols);
        let dprobs = dctx_h.dot(&cache.v.slice(cols).t());
        dvm.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        let row_dot = (&dprobs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut dscores = (dprobs - &row_dot) * probs;
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dkm.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    let dx_q = linear_backward(p, g, ids.q, x_q, &dq);
    (dx_q, dkm, dvm)
}

/// Backward through the k/v projections; returns the gradient with respect
/// to their shared input.
pub(crate) fn project_kv_backward(p: &[Mat], g: &mut [Mat], ids: AttnIds, x_kv: &Mat, dk: &Mat, dv: &Mat) -> Mat {
    let mut dx = linear_backward(p, g, ids.k, x_kv, dk);
    dx += &linear_backward(p, g, ids.v, x_kv, dv);
    dx
}

/// Sinusoidal position table of `len` rows.
pub(crate) fn positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut s = Mat::from_elem((3, 3), 1.0);
        softmax_rows(&mut s, true);
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(s[[0, 0]], 1.0);
        assert!((s[[2, 0]] - 1.0 / 3.0).abs() < 1e-15);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
