//! Forward and backward passes for the building blocks of the transformer.
//!
//! Sequences of a batch are stored back to back in one matrix (one row per
//! token). Row-wise operations run over the whole matrix at once; attention
//! runs per sequence, addressed by row ranges.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{cast, Attention, FeedForward, LayerNorm, Linear, Scalar};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<F: Scalar>(x: &ArrayView2<F>, l: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates parameter gradients into `g` and returns `dL/dx`.
pub(crate) fn linear_backward<F: Scalar>(x: &ArrayView2<F>, dy: &ArrayView2<F>, l: &Linear<F>, g: &mut Linear<F>) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

pub(crate) struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm<F: Scalar>(x: &Array2<F>, ln: &LayerNorm<F>) -> (Array2<F>, NormCache<F>) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(x.nrows());
    for (row, mut out) in x.rows().into_iter().zip(xhat.rows_mut()) {
        let mean = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / d;
        let var = row.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o = cast((v.to_f64().unwrap() - mean) * inv);
        }
    }
    let mut y = &xhat * &ln.gamma;
    y += &ln.beta;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<F: Scalar>(cache: &NormCache<F>, dy: &Array2<F>, ln: &LayerNorm<F>, g: &mut LayerNorm<F>) -> Array2<F> {
    g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((dxh, xh), mut out), &inv) in dxhat.rows().into_iter().zip(cache.xhat.rows()).zip(dx.rows_mut()).zip(&cache.inv_std) {
        let m1 = dxh.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / d;
        let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap()).sum::<f64>() / d;
        for ((o, a), b) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = cast(inv * (a.to_f64().unwrap() - m1 - b.to_f64().unwrap() * m2));
        }
    }
    dx
}

/// Row-wise softmax in place, normalizing in f64. `-inf` entries become 0.
pub(crate) fn softmax_rows<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).to_f64().unwrap();
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = (v.to_f64().unwrap() - max).exp();
            sum += e;
            *v = cast(e);
        }
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| cast(v.to_f64().unwrap() * inv));
    }
}

pub(crate) struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights, sequence-major then head.
    pub(crate) probs: Vec<Array2<F>>,
    context: Array2<F>,
}

/// Multi-head scaled dot-product attention. Query sequence `i` attends to
/// key sequence `i`; `causal` hides keys after the query position.
pub(crate) fn attention<F: Scalar>(
    p: &Attention<F>,
    xq: &Array2<F>,
    xkv: &Array2<F>,
    qsegs: &[Range<usize>],
    ksegs: &[Range<usize>],
    n_heads: usize,
    causal: bool,
) -> (Array2<F>, AttnCache<F>) {
    let q = linear(&xq.view(), &p.query);
    let k = linear(&xkv.view(), &p.key);
    let v = linear(&xkv.view(), &p.value);
    let d = q.ncols();
    let dh = d / n_heads;
    let scale: F = cast(1.0 / (dh as f64).sqrt());
    let mut context = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(qsegs.len() * n_heads);
    for (qr, kr) in qsegs.iter().zip(ksegs) {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qr.clone(), cols.clone()]);
            let kh = k.slice(s![kr.clone(), cols.clone()]);
            let vh = v.slice(s![kr.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            if causal {
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    row.slice_mut(s![i + 1..]).fill(F::neg_infinity());
                }
            }
            softmax_rows(&mut scores);
            context.slice_mut(s![qr.clone(), cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    let out = linear(&context.view(), &p.output);
    (out, AttnCache { q, k, v, probs, context })
}

/// Returns `(dL/dxq, dL/dxkv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<F: Scalar>(
    p: &Attention<F>,
    g: &mut Attention<F>,
    cache: &AttnCache<F>,
    xq: &Array2<F>,
    xkv: &Array2<F>,
    dy: &Array2<F>,
    qsegs: &[Range<usize>],
    ksegs: &[Range<usize>],
    n_heads: usize,
) -> (Array2<F>, Array2<F>) {
    let dcontext = linear_backward(&cache.context.view(), &dy.view(), &p.output, &mut g.output);
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale: F = cast(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut probs = cache.probs.iter();
    for (qr, kr) in qsegs.iter().zip(ksegs) {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let pm = probs.next().expect("one probability matrix per sequence and head");
            let qh = cache.q.slice(s![qr.clone(), cols.clone()]);
            let kh = cache.k.slice(s![kr.clone(), cols.clone()]);
            let vh = cache.v.slice(s![kr.clone(), cols.clone()]);
            let dout = dcontext.slice(s![qr.clone(), cols.clone()]);
            let dp = dout.dot(&vh.t());
            dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&pm.t().dot(&dout));
            // dS = P * (dP - rowsum(dP * P)), then the 1/sqrt(dh) scale.
            let mut ds = &dp * pm;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(pm.rows()) {
                let dot: f64 = ds_row.iter().map(|v| v.to_f64().unwrap()).sum();
                let dot: F = cast(dot);
                Zip::from(&mut ds_row).and(&p_row).for_each(|x, &pv| *x -= pv * dot);
            }
            ds *= scale;
            dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![kr.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    let dxq = linear_backward(&xq.view(), &dq.view(), &p.query, &mut g.query);
    let mut dxkv = linear_backward(&xkv.view(), &dk.view(), &p.key, &mut g.key);
    dxkv += &linear_backward(&xkv.view(), &dv.view(), &p.value, &mut g.value);
    (dxq, dxkv)
}

pub(crate) struct FfCache<F> {
    pub(crate) hidden: Array2<F>,
}

pub(crate) fn feed_forward<F: Scalar>(p: &FeedForward<F>, x: &Array2<F>) -> (Array2<F>, FfCache<F>) {
    let mut hidden = linear(&x.view(), &p.hidden);
    hidden.mapv_inplace(|v| v.max(F::zero()));
    let out = linear(&hidden.view(), &p.output);
    (out, FfCache { hidden })
}

pub(crate) fn feed_forward_backward<F: Scalar>(
    p: &FeedForward<F>,
    g: &mut FeedForward<F>,
    cache: &FfCache<F>,
    x: &Array2<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let mut dh = linear_backward(&cache.hidden.view(), &dy.view(), &p.output, &mut g.output);
    Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
        if h <= F::zero() {
            *d = F::zero();
        }
    });
    linear_backward(&x.view(), &dh.view(), &p.hidden, &mut g.hidden)
}

/// Inverted dropout mask (`0` or `1/(1-p)`), or `None` when disabled.
pub(crate) fn dropout_mask<F: Scalar, R: Rng + ?Sized>(rng: Option<&mut R>, shape: (usize, usize), p: f64) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep: F = cast(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || if rng.random_bool(p) { F::zero() } else { keep }))
}

pub(crate) fn apply_mask<F: Scalar>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}
