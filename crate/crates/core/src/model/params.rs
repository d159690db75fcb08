//! Named parameter tensors.
//!
//! Parameters, gradients and optimizer moments share one structure so they can
//! be walked in lockstep by name.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::rng::Rng;

pub trait ParamGroup {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [usize], &'a [f64]));
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamGroup for Array2<f64> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [usize], &'a [f64])) {
        f(
            prefix.to_string(),
            self.shape(),
            self.as_slice().expect("standard layout"),
        );
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("standard layout"));
    }
}

impl ParamGroup for Array1<f64> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [usize], &'a [f64])) {
        f(
            prefix.to_string(),
            self.shape(),
            self.as_slice().expect("standard layout"),
        );
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("standard layout"));
    }
}

impl<T: ParamGroup> ParamGroup for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [usize], &'a [f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for item in self.iter_mut() {
            item.collect_mut(out);
        }
    }
}

macro_rules! param_group {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl ParamGroup for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a [usize], &'a [f64]),
            ) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
                $( self.$field.collect_mut(out); )*
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}
param_group!(LayerNorm { gamma, beta });

/// Multi-head attention projections; weights are `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}
param_group!(Attention { wq, bq, wk, bk, wv, bv, wo, bo });

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}
param_group!(FeedForward { w1, b1, w2, b2 });

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}
param_group!(EncoderLayer { ln1, self_attn, ln2, ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}
param_group!(DecoderLayer { ln1, self_attn, ln2, cross_attn, ln3, ffn });

/// All trainable tensors. The embedding matrix is shared by the encoder
/// input, the decoder input and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Array2<f64>,
    pub out_bias: Array1<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}
param_group!(Params { embed, out_bias, encoder, enc_norm, decoder, dec_norm });

fn uniform(r: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-bound..bound))
}

fn xavier(r: &mut Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    uniform(r, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }
}

impl Attention {
    fn new(r: &mut Rng, d: usize) -> Self {
        Attention {
            wq: xavier(r, d, d),
            bq: Array1::zeros(d),
            wk: xavier(r, d, d),
            bk: Array1::zeros(d),
            wv: xavier(r, d, d),
            bv: Array1::zeros(d),
            wo: xavier(r, d, d),
            bo: Array1::zeros(d),
        }
    }
}

impl FeedForward {
    fn new(r: &mut Rng, d: usize, hidden: usize) -> Self {
        FeedForward {
            w1: xavier(r, d, hidden),
            b1: Array1::zeros(hidden),
            w2: xavier(r, hidden, d),
            b2: Array1::zeros(d),
        }
    }
}

impl Params {
    pub fn init(
        r: &mut Rng,
        vocab: usize,
        d: usize,
        ffn: usize,
        enc_layers: usize,
        dec_layers: usize,
    ) -> Self {
        let embed = uniform(r, vocab, d, (3.0 / d as f64).sqrt());
        let encoder = (0..enc_layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::new(d),
                self_attn: Attention::new(r, d),
                ln2: LayerNorm::new(d),
                ffn: FeedForward::new(r, d, ffn),
            })
            .collect();
        let decoder = (0..dec_layers)
            .map(|_| DecoderLayer {
                ln1: LayerNorm::new(d),
                self_attn: Attention::new(r, d),
                ln2: LayerNorm::new(d),
                cross_attn: Attention::new(r, d),
                ln3: LayerNorm::new(d),
                ffn: FeedForward::new(r, d, ffn),
            })
            .collect();
        Params {
            embed,
            out_bias: Array1::zeros(vocab),
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x = value);
        }
    }

    /// (name, shape, values) in canonical order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.visit("", &mut |name, shape, data| out.push((name, shape.to_vec(), data)));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.named().into_iter().map(|(_, _, d)| d).collect()
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Sum of squares over every value.
    pub fn sq_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().flat_map(|s| s.iter()).all(|x| x.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mutable_and_named_orders_agree() {
        let mut p = Params::init(&mut rng::rng(3), 10, 8, 16, 1, 2);
        let named: Vec<(String, Vec<usize>, Vec<f64>)> = p
            .named()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.to_vec()))
            .collect();
        let muts = p.slices_mut();
        assert_eq!(named.len(), muts.len());
        for ((_, shape, data), m) in named.iter().zip(muts) {
            assert_eq!(shape.iter().product::<usize>(), m.len());
            assert_eq!(&data[..], &m[..]);
        }
        assert_eq!(named[0].0, "embed");
        assert!(named.iter().any(|n| n.0 == "decoder.1.cross_attn.wq"));
    }
}
