//! Compact encoder-decoder transformer with exact gradients.
//!
//! Pre-norm residual blocks, sinusoidal positions, and one embedding matrix
//! shared by the encoder input, the decoder input and the output projection.
//! The backward pass is hand-derived; `loss_and_grads` returns the gradient of
//! the batch objective with respect to every parameter.

pub mod checkpoint;
pub mod layers;
pub mod params;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::loss::{self, LogitsMatrix, LossBreakdown, LossSpec, TokenMask};
use crate::rng;
use layers::*;
pub use params::{ParamGroup, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Each sentence is translated on its own.
    Sen2Sen,
    /// The previous source sentence and a separator precede the current one.
    Concat,
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sen2sen" => Ok(InputMode::Sen2Sen),
            "concat" => Ok(InputMode::Concat),
            other => Err(Error::Config(format!("unknown model mode '{other}'"))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Sen2Sen => "sen2sen",
            InputMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub mode: InputMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_len: 64,
            mode: InputMode::Sen2Sen,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            )));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_len < 2 {
            return Err(Error::Config("ffn_dim and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Previous sentence, separator, current sentence. The previous sentence is
/// cut from its left edge when the result would exceed `max_len`; the current
/// sentence is never cut.
pub fn concat_input<T: Clone>(prev: &[T], cur: &[T], sep: T, max_len: usize) -> Vec<T> {
    let room = max_len.saturating_sub(cur.len() + 1);
    let keep = prev.len().min(room);
    let mut out = Vec::with_capacity(keep + 1 + cur.len());
    out.extend_from_slice(&prev[prev.len() - keep..]);
    out.push(sep);
    out.extend_from_slice(cur);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    positions: Mat,
}

struct EncCache {
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Mat>,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: Option<Mat>,
}

struct DecCache {
    ln1: LnCache,
    self_attn: AttnCache,
    drop1: Option<Mat>,
    ln2: LnCache,
    cross: AttnCache,
    drop2: Option<Mat>,
    ln3: LnCache,
    ffn: FfnCache,
    drop3: Option<Mat>,
}

/// Everything the backward pass needs from a batched forward pass.
pub struct ForwardCache {
    src_ids: Vec<usize>,
    src_spans: Spans,
    dec_ids: Vec<usize>,
    dec_spans: Spans,
    src_drop: Option<Mat>,
    dec_drop: Option<Mat>,
    enc: Vec<EncCache>,
    enc_norm: LnCache,
    dec: Vec<DecCache>,
    dec_norm: LnCache,
    dec_out: Mat,
}

impl ForwardCache {
    pub fn target_spans(&self) -> &Spans {
        &self.dec_spans
    }

    /// ReLU activity of every feed-forward unit, encoder first.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let enc = self.enc.iter().flat_map(|c| c.ffn.active());
        let dec = self.dec.iter().flat_map(|c| c.ffn.active());
        enc.chain(dec).collect()
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        let model = Model {
            config,
            params,
            positions,
        };
        let expected = Model::init(model.config.clone(), 0)?;
        for ((n1, s1, _), (n2, s2, _)) in model.params.named().iter().zip(expected.params.named())
        {
            if n1 != &n2 || s1 != &s2 {
                return Err(Error::Dimension(format!(
                    "parameter {n1} {s1:?} does not match config ({n2} {s2:?})"
                )));
            }
        }
        Ok(model)
    }

    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::derive(seed, "init"));
        let params = Params::init(
            &mut r,
            config.vocab_size,
            config.d_model,
            config.ffn_dim,
            config.enc_layers,
            config.dec_layers,
        );
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(Model {
            config,
            params,
            positions,
        })
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty(format!("{what} sequence")));
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for each target position: row `t` scores `tgt[t]` given the
    /// source and `tgt[..t]`.
    pub fn forward(&self, src: &[usize], tgt: &[usize], train_mode: bool) -> Result<LogitsMatrix> {
        let key = train_mode.then_some(0);
        let (logits, _) = self.forward_batch(&[src.to_vec()], &[tgt.to_vec()], key)?;
        LogitsMatrix::new(logits)
    }

    /// Batched teacher-forced forward pass. Returns the stacked logits (one
    /// block of rows per pair) and the cache for [`Model::backward`]. Dropout
    /// is active iff `dropout_key` is set.
    pub fn forward_batch(
        &self,
        srcs: &[Vec<usize>],
        tgts: &[Vec<usize>],
        dropout_key: Option<u64>,
    ) -> Result<(Mat, ForwardCache)> {
        if srcs.is_empty() || srcs.len() != tgts.len() {
            return Err(Error::Dimension(format!(
                "{} sources for {} targets",
                srcs.len(),
                tgts.len()
            )));
        }
        for (s, t) in srcs.iter().zip(tgts) {
            self.check_ids(s, "source")?;
            self.check_ids(t, "target")?;
        }
        let p = &self.params;
        let heads = self.config.heads;
        let mut drop = Dropout::new(self.config.dropout, dropout_key);

        let src_ids: Vec<usize> = srcs.iter().flatten().copied().collect();
        let src_spans = Spans::from_lens(srcs.iter().map(Vec::len));
        let dec_ids: Vec<usize> = tgts
            .iter()
            .flat_map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()))
            .collect();
        let dec_spans = Spans::from_lens(tgts.iter().map(Vec::len));

        let mut x = embed(&src_ids, &src_spans, &p.embed, &self.positions);
        let src_drop = drop.apply(&mut x);
        let mut enc = Vec::with_capacity(p.encoder.len());
        for l in &p.encoder {
            let (a, ln1) = layer_norm(&x, &l.ln1);
            let (mut att, attn) = attention(&l.self_attn, &a, &src_spans, None, &src_spans, heads, false);
            let drop1 = drop.apply(&mut att);
            x += &att;
            let (b, ln2) = layer_norm(&x, &l.ln2);
            let (mut f, ffn) = feed_forward(&l.ffn, &b);
            let drop2 = drop.apply(&mut f);
            x += &f;
            enc.push(EncCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }
        let (mem, enc_norm) = layer_norm(&x, &p.enc_norm);

        let mut y = embed(&dec_ids, &dec_spans, &p.embed, &self.positions);
        let dec_drop = drop.apply(&mut y);
        let mut dec = Vec::with_capacity(p.decoder.len());
        for l in &p.decoder {
            let (a, ln1) = layer_norm(&y, &l.ln1);
            let (mut att, self_attn) =
                attention(&l.self_attn, &a, &dec_spans, None, &dec_spans, heads, true);
            let drop1 = drop.apply(&mut att);
            y += &att;
            let (b, ln2) = layer_norm(&y, &l.ln2);
            let (mut cr, cross) =
                attention(&l.cross_attn, &b, &dec_spans, Some(&mem), &src_spans, heads, false);
            let drop2 = drop.apply(&mut cr);
            y += &cr;
            let (c, ln3) = layer_norm(&y, &l.ln3);
            let (mut f, ffn) = feed_forward(&l.ffn, &c);
            let drop3 = drop.apply(&mut f);
            y += &f;
            dec.push(DecCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let (dec_out, dec_norm) = layer_norm(&y, &p.dec_norm);
        let mut logits = dec_out.dot(&p.embed.t());
        logits += &p.out_bias;
        Ok((
            logits,
            ForwardCache {
                src_ids,
                src_spans,
                dec_ids,
                dec_spans,
                src_drop,
                dec_drop,
                enc,
                enc_norm,
                dec,
                dec_norm,
                dec_out,
            },
        ))
    }

    /// Gradient of `sum(dlogits * logits)` with respect to every parameter.
    pub fn backward(&self, c: &ForwardCache, dlogits: &Mat) -> Params {
        let p = &self.params;
        let heads = self.config.heads;
        let mut g = p.zeros_like();

        // output projection shares the embedding
        ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &c.dec_out, 1.0, &mut g.embed);
        g.out_bias += &dlogits.sum_axis(Axis(0));
        let d_out = dlogits.dot(&p.embed);

        let mut dy = layer_norm_backward(&d_out, &c.dec_norm, &p.dec_norm, &mut g.dec_norm);
        let mut dmem = Mat::zeros((c.src_ids.len(), self.config.d_model));
        for ((l, lc), gl) in p.decoder.iter().zip(&c.dec).zip(g.decoder.iter_mut()).rev() {
            let mut df = dy.clone();
            dropout_backward(&mut df, &lc.drop3);
            let dc = feed_forward_backward(&l.ffn, &lc.ffn, &df, &mut gl.ffn);
            dy += &layer_norm_backward(&dc, &lc.ln3, &l.ln3, &mut gl.ln3);

            let mut dcr = dy.clone();
            dropout_backward(&mut dcr, &lc.drop2);
            let (db, dm) = attention_backward(
                &l.cross_attn,
                &lc.cross,
                &dcr,
                &c.dec_spans,
                &c.src_spans,
                heads,
                &mut gl.cross_attn,
            );
            dmem += &dm.expect("cross attention returns a memory gradient");
            dy += &layer_norm_backward(&db, &lc.ln2, &l.ln2, &mut gl.ln2);

            let mut datt = dy.clone();
            dropout_backward(&mut datt, &lc.drop1);
            let (da, _) = attention_backward(
                &l.self_attn,
                &lc.self_attn,
                &datt,
                &c.dec_spans,
                &c.dec_spans,
                heads,
                &mut gl.self_attn,
            );
            dy += &layer_norm_backward(&da, &lc.ln1, &l.ln1, &mut gl.ln1);
        }
        dropout_backward(&mut dy, &c.dec_drop);
        embed_backward(&c.dec_ids, &dy, &mut g.embed);

        let mut dx = layer_norm_backward(&dmem, &c.enc_norm, &p.enc_norm, &mut g.enc_norm);
        for ((l, lc), gl) in p.encoder.iter().zip(&c.enc).zip(g.encoder.iter_mut()).rev() {
            let mut df = dx.clone();
            dropout_backward(&mut df, &lc.drop2);
            let db = feed_forward_backward(&l.ffn, &lc.ffn, &df, &mut gl.ffn);
            dx += &layer_norm_backward(&db, &lc.ln2, &l.ln2, &mut gl.ln2);

            let mut datt = dx.clone();
            dropout_backward(&mut datt, &lc.drop1);
            let (da, _) = attention_backward(
                &l.self_attn,
                &lc.attn,
                &datt,
                &c.src_spans,
                &c.src_spans,
                heads,
                &mut gl.self_attn,
            );
            dx += &layer_norm_backward(&da, &lc.ln1, &l.ln1, &mut gl.ln1);
        }
        dropout_backward(&mut dx, &c.src_drop);
        embed_backward(&c.src_ids, &dx, &mut g.embed);
        g
    }

    /// Batch objective and its exact parameter gradient. Each pair's target
    /// must already end with EOS; `masks[i]` has one flag per target token.
    pub fn loss_and_grads(
        &self,
        batch: &[(Vec<usize>, Vec<usize>)],
        spec: &LossSpec,
        masks: &[TokenMask],
        label_smoothing: f64,
        dropout_key: Option<u64>,
    ) -> Result<(LossBreakdown, Params)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let srcs: Vec<Vec<usize>> = batch.iter().map(|b| b.0.clone()).collect();
        let tgts: Vec<Vec<usize>> = batch.iter().map(|b| b.1.clone()).collect();
        let (logits, cache) = self.forward_batch(&srcs, &tgts, dropout_key)?;
        let mut per_sentence = Vec::with_capacity(batch.len());
        for &(start, len) in &cache.dec_spans.0 {
            per_sentence.push(LogitsMatrix::new(
                logits.slice(s![start..start + len, ..]).to_owned(),
            )?);
        }
        let (breakdown, grads) =
            loss::hybrid_loss_smoothed(&per_sentence, &tgts, masks, spec, label_smoothing)?;
        let mut dlogits = Mat::zeros(logits.raw_dim());
        for (g, &(start, len)) in grads.iter().zip(&cache.dec_spans.0) {
            dlogits.slice_mut(s![start..start + len, ..]).assign(g);
        }
        Ok((breakdown, self.backward(&cache, &dlogits)))
    }

    /// Greedy decoding of one source sentence; EOS is not included.
    pub fn translate_greedy(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .translate_greedy_batch(&[src.to_vec()], max_len)?
            .pop()
            .expect("one output per input"))
    }

    /// Greedy decoding of several sentences in lockstep with cached keys and
    /// values. Ties go to the lowest token id.
    pub fn translate_greedy_batch(
        &self,
        srcs: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        for s in srcs {
            self.check_ids(s, "source")?;
        }
        let max_len = max_len.min(self.config.max_len);
        let p = &self.params;
        let heads = self.config.heads;
        let d = self.config.d_model;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // encoder
        let src_ids: Vec<usize> = srcs.iter().flatten().copied().collect();
        let src_spans = Spans::from_lens(srcs.iter().map(Vec::len));
        let mut x = embed(&src_ids, &src_spans, &p.embed, &self.positions);
        for l in &p.encoder {
            let (a, _) = layer_norm(&x, &l.ln1);
            x += &attention(&l.self_attn, &a, &src_spans, None, &src_spans, heads, false).0;
            let (b, _) = layer_norm(&x, &l.ln2);
            x += &feed_forward(&l.ffn, &b).0;
        }
        let mem = layer_norm(&x, &p.enc_norm).0;
        let cross_kv: Vec<(Mat, Mat)> = p
            .decoder
            .iter()
            .map(|l| {
                (
                    linear(&mem, &l.cross_attn.wk, &l.cross_attn.bk),
                    linear(&mem, &l.cross_attn.wv, &l.cross_attn.bv),
                )
            })
            .collect();

        let n = srcs.len();
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        // self-attention caches per layer per sentence, rows = positions
        let mut self_k: Vec<Vec<Mat>> = vec![vec![Mat::zeros((0, d)); n]; p.decoder.len()];
        let mut self_v = self_k.clone();
        let scale_emb = (d as f64).sqrt();

        for pos in 0..max_len {
            if active.is_empty() {
                break;
            }
            let rows = active.len();
            let mut y = Mat::zeros((rows, d));
            for (r, &i) in active.iter().enumerate() {
                let prev = outputs[i].last().copied().unwrap_or(BOS);
                let mut row = y.row_mut(r);
                row.assign(&p.embed.row(prev));
                row *= scale_emb;
                row += &self.positions.row(pos);
            }
            for (li, l) in p.decoder.iter().enumerate() {
                let (a, _) = layer_norm(&y, &l.ln1);
                let q = linear(&a, &l.self_attn.wq, &l.self_attn.bq);
                let k = linear(&a, &l.self_attn.wk, &l.self_attn.bk);
                let v = linear(&a, &l.self_attn.wv, &l.self_attn.bv);
                let mut o = Mat::zeros((rows, d));
                for (r, &i) in active.iter().enumerate() {
                    self_k[li][i].push_row(k.row(r)).expect("row width");
                    self_v[li][i].push_row(v.row(r)).expect("row width");
                    attend_row(&q, r, &self_k[li][i].view(), &self_v[li][i].view(), heads, scale, &mut o);
                }
                y += &linear(&o, &l.self_attn.wo, &l.self_attn.bo);

                let (b, _) = layer_norm(&y, &l.ln2);
                let q = linear(&b, &l.cross_attn.wq, &l.cross_attn.bq);
                let mut o = Mat::zeros((rows, d));
                let (ck, cv) = &cross_kv[li];
                for (r, &i) in active.iter().enumerate() {
                    let (start, len) = src_spans.0[i];
                    attend_row(
                        &q,
                        r,
                        &ck.slice(s![start..start + len, ..]),
                        &cv.slice(s![start..start + len, ..]),
                        heads,
                        scale,
                        &mut o,
                    );
                }
                y += &linear(&o, &l.cross_attn.wo, &l.cross_attn.bo);

                let (c, _) = layer_norm(&y, &l.ln3);
                y += &feed_forward(&l.ffn, &c).0;
            }
            let out = layer_norm(&y, &p.dec_norm).0;
            let mut logits = out.dot(&p.embed.t());
            logits += &p.out_bias;
            let mut still = Vec::with_capacity(rows);
            for (r, &i) in active.iter().enumerate() {
                let tok = argmax(logits.row(r).as_slice().expect("layout"));
                if tok == EOS {
                    continue;
                }
                outputs[i].push(tok);
                still.push(i);
            }
            active = still;
        }
        Ok(outputs)
    }

    /// Order-sensitive digest of all parameter values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, shape, data) in self.params.named() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Attention for a single query row against cached keys and values.
fn attend_row(
    q: &Mat,
    r: usize,
    k: &ndarray::ArrayView2<f64>,
    v: &ndarray::ArrayView2<f64>,
    heads: usize,
    scale: f64,
    out: &mut Mat,
) {
    let dh = q.ncols() / heads;
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![r, cols.clone()]);
        let mut scores: Array1<f64> = k.slice(s![.., cols.clone()]).dot(&qh);
        scores *= scale;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scores.mapv_inplace(|x| (x - max).exp());
        let sum = scores.sum();
        scores /= sum;
        out.slice_mut(s![r, cols.clone()])
            .assign(&v.slice(s![.., cols]).t().dot(&scores));
    }
}

/// Softmax of each row; used by callers that want probabilities.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
