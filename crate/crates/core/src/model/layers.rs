//! Forward and backward passes of the transformer building blocks.
//!
//! Sequences of a batch are stacked row-wise in one matrix so the projections
//! run as single matrix products; attention is evaluated per sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{Attention, FeedForward, LayerNorm};
use crate::rng;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// Row ranges `(start, len)` of the sequences stacked in a matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans(pub Vec<(usize, usize)>);

impl Spans {
    pub fn from_lens(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut start = 0;
        Spans(
            lens.into_iter()
                .map(|len| {
                    let span = (start, len);
                    start += len;
                    span
                })
                .collect(),
        )
    }

    pub fn total(&self) -> usize {
        self.0.last().map_or(0, |&(s, l)| s + l)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn linear(x: &Mat, w: &Mat, b: &Array1<f64>) -> Mat {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, gw: &mut Mat, gb: &mut Array1<f64>) -> Mat {
    general_mat_mul(1.0, &x.t(), dy, 1.0, gw);
    *gb += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Mat, p: &LayerNorm) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let mut y = &xhat * &p.gamma;
    y += &p.beta;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(dy: &Mat, c: &LnCache, p: &LayerNorm, g: &mut LayerNorm) -> Mat {
    g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let mut dx = dy * &p.gamma;
    let d = dx.ncols() as f64;
    for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.inv_std) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|r, &h| *r = is * (*r - mean_d - h * mean_dx));
    }
    dx
}

pub struct AttnCache {
    q_in: Mat,
    /// Key/value input for cross attention; self attention reuses `q_in`.
    kv_in: Option<Mat>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights, indexed `span * heads + head`.
    probs: Vec<Mat>,
    o: Mat,
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

/// Multi-head scaled dot-product attention. `kv_in = None` means self attention.
pub fn attention(
    p: &Attention,
    q_in: &Mat,
    q_spans: &Spans,
    kv_in: Option<&Mat>,
    kv_spans: &Spans,
    heads: usize,
    causal: bool,
) -> (Mat, AttnCache) {
    let kv_src = kv_in.unwrap_or(q_in);
    let q = linear(q_in, &p.wq, &p.bq);
    let k = linear(kv_src, &p.wk, &p.bk);
    let v = linear(kv_src, &p.wv, &p.bv);
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Mat::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(q_spans.len() * heads);
    for (&(qs, ql), &(ks, kl)) in q_spans.0.iter().zip(&kv_spans.0) {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qs..qs + ql, cols.clone()]);
            let kh = k.slice(s![ks..ks + kl, cols.clone()]);
            let vh = v.slice(s![ks..ks + kl, cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            if causal {
                for i in 0..ql {
                    for j in (i + 1)..kl {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            o.slice_mut(s![qs..qs + ql, cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    let out = linear(&o, &p.wo, &p.bo);
    (
        out,
        AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.cloned(),
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

/// Returns the gradient with respect to the query input and, for cross
/// attention, the key/value input. For self attention both contributions are
/// summed into the first element.
pub fn attention_backward(
    p: &Attention,
    c: &AttnCache,
    dout: &Mat,
    q_spans: &Spans,
    kv_spans: &Spans,
    heads: usize,
    g: &mut Attention,
) -> (Mat, Option<Mat>) {
    let d_o = linear_backward(&c.o, &p.wo, dout, &mut g.wo, &mut g.bo);
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(c.q.raw_dim());
    let mut dk = Mat::zeros(c.k.raw_dim());
    let mut dv = Mat::zeros(c.v.raw_dim());
    for (si, (&(qs, ql), &(ks, kl))) in q_spans.0.iter().zip(&kv_spans.0).enumerate() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let prob = &c.probs[si * heads + h];
            let doh = d_o.slice(s![qs..qs + ql, cols.clone()]);
            let qh = c.q.slice(s![qs..qs + ql, cols.clone()]);
            let kh = c.k.slice(s![ks..ks + kl, cols.clone()]);
            let vh = c.v.slice(s![ks..ks + kl, cols.clone()]);
            let mut dvh = dv.slice_mut(s![ks..ks + kl, cols.clone()]);
            general_mat_mul(1.0, &prob.t(), &doh, 1.0, &mut dvh);
            let mut ds = doh.dot(&vh.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(prob.rows()) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|x, &pr| *x = pr * (*x - dot) * scale);
            }
            let mut dqh = dq.slice_mut(s![qs..qs + ql, cols.clone()]);
            general_mat_mul(1.0, &ds, &kh, 1.0, &mut dqh);
            let mut dkh = dk.slice_mut(s![ks..ks + kl, cols]);
            general_mat_mul(1.0, &ds.t(), &qh, 1.0, &mut dkh);
        }
    }
    let kv_src = c.kv_in.as_ref().unwrap_or(&c.q_in);
    let mut dq_in = linear_backward(&c.q_in, &p.wq, &dq, &mut g.wq, &mut g.bq);
    let mut dkv = linear_backward(kv_src, &p.wk, &dk, &mut g.wk, &mut g.bk);
    dkv += &linear_backward(kv_src, &p.wv, &dv, &mut g.wv, &mut g.bv);
    if c.kv_in.is_some() {
        (dq_in, Some(dkv))
    } else {
        dq_in += &dkv;
        (dq_in, None)
    }
}

pub struct FfnCache {
    x: Mat,
    h: Mat,
}

impl FfnCache {
    /// Which hidden units passed the ReLU.
    pub fn active(&self) -> impl Iterator<Item = bool> + '_ {
        self.h.iter().map(|&v| v > 0.0)
    }
}

pub fn feed_forward(p: &FeedForward, x: &Mat) -> (Mat, FfnCache) {
    let mut h = linear(x, &p.w1, &p.b1);
    h.mapv_inplace(|v| v.max(0.0));
    let y = linear(&h, &p.w2, &p.b2);
    (y, FfnCache { x: x.clone(), h })
}

pub fn feed_forward_backward(p: &FeedForward, c: &FfnCache, dy: &Mat, g: &mut FeedForward) -> Mat {
    let mut dh = linear_backward(&c.h, &p.w2, dy, &mut g.w2, &mut g.b2);
    Zip::from(&mut dh).and(&c.h).for_each(|d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    linear_backward(&c.x, &p.w1, &dh, &mut g.w1, &mut g.b1)
}

/// Counter-based inverted dropout. Each call draws from its own site so the
/// masks depend only on the key and the call order.
pub struct Dropout {
    rate: f64,
    key: Option<u64>,
    site: u64,
}

impl Dropout {
    pub fn new(rate: f64, key: Option<u64>) -> Self {
        Dropout { rate, key, site: 0 }
    }

    pub fn disabled() -> Self {
        Dropout::new(0.0, None)
    }

    /// Applies dropout in place and returns the scale mask for backward.
    pub fn apply(&mut self, x: &mut Mat) -> Option<Mat> {
        let key = self.key?;
        if self.rate <= 0.0 {
            return None;
        }
        self.site += 1;
        let site_key = rng::derive_indexed(key, "dropout", self.site);
        let keep = 1.0 / (1.0 - self.rate);
        let cols = x.ncols();
        let mask = Mat::from_shape_fn(x.raw_dim(), |(i, j)| {
            if rng::counter_uniform(site_key, (i * cols + j) as u64) < self.rate {
                0.0
            } else {
                keep
            }
        });
        *x *= &mask;
        Some(mask)
    }
}

pub fn dropout_backward(d: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        *d *= m;
    }
}

pub fn sinusoidal_positions(max_len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((max_len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Scaled embedding lookup plus positions; positions restart in each span.
pub fn embed(ids: &[usize], spans: &Spans, table: &Mat, pe: &Mat) -> Mat {
    let d = table.ncols();
    let scale = (d as f64).sqrt();
    let mut x = Mat::zeros((ids.len(), d));
    for &(start, len) in &spans.0 {
        for pos in 0..len {
            let r = start + pos;
            let mut row = x.row_mut(r);
            row.assign(&table.row(ids[r]));
            row *= scale;
            row += &pe.row(pos);
        }
    }
    x
}

pub fn embed_backward(ids: &[usize], dx: &Mat, g_table: &mut Mat) {
    let scale = (dx.ncols() as f64).sqrt();
    for (r, &id) in ids.iter().enumerate() {
        g_table.row_mut(id).scaled_add(scale, &dx.row(r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn rand_mat(r: &mut rng::Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` against an analytic gradient.
    fn check(f: &mut dyn FnMut(&Mat) -> f64, x: &Mat, analytic: &Mat) {
        let h = 1e-5;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[i, j]];
            xp[[i, j]] = orig + h;
            let fp = f(&xp);
            xp[[i, j]] = orig - h;
            let fm = f(&xp);
            xp[[i, j]] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[[i, j]];
            assert!(
                (num - a).abs() <= 1e-6 + 1e-5 * a.abs().max(num.abs()),
                "at ({i},{j}): analytic {a} numeric {num}"
            );
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut r = rng::rng(1);
        let x = rand_mat(&mut r, 3, 6);
        let p = LayerNorm {
            gamma: Array1::from_shape_fn(6, |_| r.gen_range(0.5..1.5)),
            beta: Array1::from_shape_fn(6, |_| r.gen_range(-0.5..0.5)),
        };
        let w = rand_mat(&mut r, 3, 6);
        let (_, c) = layer_norm(&x, &p);
        let mut g = LayerNorm {
            gamma: Array1::zeros(6),
            beta: Array1::zeros(6),
        };
        let dx = layer_norm_backward(&w, &c, &p, &mut g);
        check(&mut |xx| (&layer_norm(xx, &p).0 * &w).sum(), &x, &dx);
    }

    #[test]
    fn attention_input_gradients() {
        let mut r = rng::rng(2);
        let d = 4;
        let p = Attention {
            wq: rand_mat(&mut r, d, d),
            bq: Array1::from_shape_fn(d, |_| r.gen_range(-0.1..0.1)),
            wk: rand_mat(&mut r, d, d),
            bk: Array1::zeros(d),
            wv: rand_mat(&mut r, d, d),
            bv: Array1::zeros(d),
            wo: rand_mat(&mut r, d, d),
            bo: Array1::zeros(d),
        };
        let zero = || Attention {
            wq: Mat::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Mat::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Mat::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Mat::zeros((d, d)),
            bo: Array1::zeros(d),
        };
        let spans = Spans::from_lens([3, 2]);
        let x = rand_mat(&mut r, 5, d);
        let w = rand_mat(&mut r, 5, d);
        for causal in [false, true] {
            let (_, c) = attention(&p, &x, &spans, None, &spans, 2, causal);
            let (dx, none) = attention_backward(&p, &c, &w, &spans, &spans, 2, &mut zero());
            assert!(none.is_none());
            check(
                &mut |xx| (&attention(&p, xx, &spans, None, &spans, 2, causal).0 * &w).sum(),
                &x,
                &dx,
            );
        }
        let kv_spans = Spans::from_lens([4, 1]);
        let mem = rand_mat(&mut r, 5, d);
        let (_, c) = attention(&p, &x, &spans, Some(&mem), &kv_spans, 2, false);
        let (dx, dmem) = attention_backward(&p, &c, &w, &spans, &kv_spans, 2, &mut zero());
        check(
            &mut |xx| (&attention(&p, xx, &spans, Some(&mem), &kv_spans, 2, false).0 * &w).sum(),
            &x,
            &dx,
        );
        check(
            &mut |mm| (&attention(&p, &x, &spans, Some(mm), &kv_spans, 2, false).0 * &w).sum(),
            &mem,
            &dmem.unwrap(),
        );
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let x = Mat::ones((4, 8));
        let mut a = x.clone();
        let mut b = x.clone();
        let ma = Dropout::new(0.5, Some(9)).apply(&mut a);
        let mb = Dropout::new(0.5, Some(9)).apply(&mut b);
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        let mut c = x.clone();
        assert!(Dropout::disabled().apply(&mut c).is_none());
        assert_eq!(c, x);
    }
}
