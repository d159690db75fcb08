//! Training objectives over final-layer logits.
//!
//! Every function returns the loss value together with its exact gradient with
//! respect to the logits, so the model only has to back-propagate from there.
//!
//! The discriminative objectives compare, at each selected target position,
//! the logit of the reference token against the logit of a "negative" token
//! picked from the same row:
//!
//! ```text
//! nll: -log( exp(pos/tau) / (exp(pos/tau) + exp(neg/tau)) )
//! mm:  max(0, mu - pos + neg)
//! ```
//!
//! Both are averaged over the masked positions of a sentence, then over the
//! sentences of a batch, and mixed with the conditional language-model loss as
//! `lambda * generative + (1 - lambda) * discriminative`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Clm,
    HybridNll,
    HybridMm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    AllTokens,
    PronounOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    /// Highest logit in the row, which may be the reference itself.
    MaxAll,
    /// Highest logit among the non-reference entries.
    MaxExcludingReference,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $($kw:literal)|+),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($($kw)|+ => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{}'", stringify!($ty), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $($variant => [$($kw),+][0],)+
                };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(LossKind {
    LossKind::Clm => "clm",
    LossKind::HybridNll => "hybrid-nll" | "nll",
    LossKind::HybridMm => "hybrid-mm" | "mm",
});
keyword_enum!(MaskPolicy {
    MaskPolicy::AllTokens => "all-tokens" | "all",
    MaskPolicy::PronounOnly => "pronoun-only" | "pronoun",
});
keyword_enum!(NegativePolicy {
    NegativePolicy::MaxAll => "max-all",
    NegativePolicy::MaxExcludingReference => "max-excluding-reference" | "max-excl",
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub lambda: f64,
    pub tau: f64,
    pub mu: f64,
    pub mask_policy: MaskPolicy,
    pub negative_policy: NegativePolicy,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Clm,
            lambda: 0.5,
            tau: 0.5,
            mu: 0.3,
            mask_policy: MaskPolicy::AllTokens,
            negative_policy: NegativePolicy::MaxAll,
        }
    }
}

impl LossSpec {
    pub fn clm() -> Self {
        LossSpec::default()
    }

    pub fn hybrid(kind: LossKind, mask_policy: MaskPolicy) -> Self {
        LossSpec {
            kind,
            mask_policy,
            ..LossSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Decomposed value of a batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub generative: f64,
    pub discriminative: f64,
    pub masked_token_count: usize,
    pub sentence_count: usize,
}

/// Unnormalized final-layer activations, one row per target position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix(Array2<f64>);

impl LogitsMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, v) = values.dim();
        if n == 0 {
            return Err(Error::Dimension("logits need at least one row".into()));
        }
        if v < 2 {
            return Err(Error::Dimension(format!(
                "logits need at least two columns, got {v}"
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(LogitsMatrix(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(Error::Dimension("ragged logits rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((n, v), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        LogitsMatrix::new(arr)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Which target positions a discriminative term applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn all(n: usize) -> Self {
        TokenMask(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        TokenMask(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Flags the reference tokens that belong to `pronouns` (compared lowercased).
pub fn pronoun_mask<S: AsRef<str>>(ref_tokens: &[S], pronouns: &BTreeSet<String>) -> TokenMask {
    TokenMask(
        ref_tokens
            .iter()
            .map(|t| pronouns.contains(&t.as_ref().to_lowercase()))
            .collect(),
    )
}

/// Mask for `policy`; the pronoun set is ignored for all-tokens.
pub fn policy_mask<S: AsRef<str>>(
    ref_tokens: &[S],
    pronouns: &BTreeSet<String>,
    policy: MaskPolicy,
) -> TokenMask {
    match policy {
        MaskPolicy::AllTokens => TokenMask::all(ref_tokens.len()),
        MaskPolicy::PronounOnly => pronoun_mask(ref_tokens, pronouns),
    }
}

fn check_refs(logits: &LogitsMatrix, refs: &[usize]) -> Result<()> {
    if refs.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} reference tokens for {} logits rows",
            refs.len(),
            logits.rows()
        )));
    }
    let v = logits.vocab();
    if let Some(&id) = refs.iter().find(|&&r| r >= v) {
        return Err(Error::TokenOutOfRange { id, size: v });
    }
    Ok(())
}

fn check_mask(logits: &LogitsMatrix, mask: &TokenMask) -> Result<()> {
    if mask.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "mask of length {} for {} logits rows",
            mask.len(),
            logits.rows()
        )));
    }
    Ok(())
}

/// Writes softmax(row) into `out` and returns log-sum-exp(row).
fn softmax_into(row: ArrayView1<f64>, out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

/// Mean negative log-likelihood of the references under a softmax over each row.
pub fn clm_loss(logits: &LogitsMatrix, refs: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_refs(logits, refs)?;
    let x = logits.view();
    let (n, v) = x.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::<f64>::zeros((n, v));
    let mut value = 0.0;
    for (t, &r) in refs.iter().enumerate() {
        let mut g = grad.row_mut(t);
        let g = g.as_slice_mut().expect("standard layout");
        let lse = softmax_into(x.row(t), g);
        value -= x[[t, r]] - lse;
        g[r] -= 1.0;
        g.iter_mut().for_each(|e| *e *= inv_n);
    }
    Ok((value * inv_n, grad))
}

/// Label-smoothed cross-entropy: the reference keeps `1 - eps` of the target
/// mass and the remaining `eps` is spread evenly over the other entries.
/// With `eps == 0` this is exactly [`clm_loss`].
pub fn smoothed_clm_loss(
    logits: &LogitsMatrix,
    refs: &[usize],
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing {eps} not in [0, 1)"
        )));
    }
    if eps == 0.0 {
        return clm_loss(logits, refs);
    }
    check_refs(logits, refs)?;
    let x = logits.view();
    let (n, v) = x.dim();
    let inv_n = 1.0 / n as f64;
    let off = eps / (v - 1) as f64;
    let on = 1.0 - eps;
    let mut grad = Array2::<f64>::zeros((n, v));
    let mut value = 0.0;
    for (t, &r) in refs.iter().enumerate() {
        let row = x.row(t);
        let mut g = grad.row_mut(t);
        let g = g.as_slice_mut().expect("standard layout");
        let lse = softmax_into(row, g);
        for (j, (gj, &xj)) in g.iter_mut().zip(row.iter()).enumerate() {
            let q = if j == r { on } else { off };
            value -= q * (xj - lse);
            *gj = (*gj - q) * inv_n;
        }
    }
    Ok((value * inv_n, grad))
}

/// Entropy of the smoothed target distribution: the minimum of
/// [`smoothed_clm_loss`] for a vocabulary of size `v`.
pub fn smoothed_loss_floor(v: usize, eps: f64) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    let off = eps / (v - 1) as f64;
    let on = 1.0 - eps;
    -(on * on.ln()) - (v - 1) as f64 * off * off.ln()
}

/// Index of the negative token in `row`. Ties resolve to the lowest index.
pub fn select_negative(row: &[f64], ref_index: usize, policy: NegativePolicy) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::Empty("logit row".into()));
    }
    if ref_index >= row.len() {
        return Err(Error::TokenOutOfRange {
            id: ref_index,
            size: row.len(),
        });
    }
    let exclude = match policy {
        NegativePolicy::MaxAll => None,
        NegativePolicy::MaxExcludingReference => {
            if row.len() < 2 {
                return Err(Error::InvalidArgument(
                    "cannot exclude the reference from a row of length 1".into(),
                ));
            }
            Some(ref_index)
        }
    };
    let mut best: Option<usize> = None;
    for (j, &x) in row.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        match best {
            Some(b) if row[b] >= x => {}
            _ => best = Some(j),
        }
    }
    Ok(best.expect("row has a candidate"))
}

fn row_negative(x: &ArrayView2<f64>, t: usize, r: usize, policy: NegativePolicy) -> Result<usize> {
    let row = x.row(t);
    match row.as_slice() {
        Some(s) => select_negative(s, r, policy),
        None => select_negative(&row.to_vec(), r, policy),
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pairwise log-likelihood of the reference against the negative token,
/// averaged over masked positions.
pub fn nll_disc_loss(
    logits: &LogitsMatrix,
    refs: &[usize],
    mask: &TokenMask,
    tau: f64,
    policy: NegativePolicy,
) -> Result<(f64, Array2<f64>)> {
    check_refs(logits, refs)?;
    check_mask(logits, mask)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let x = logits.view();
    let mut grad = Array2::<f64>::zeros(x.dim());
    let m = mask.count();
    if m == 0 {
        return Ok((0.0, grad));
    }
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    for (t, &r) in refs.iter().enumerate() {
        if !mask.0[t] {
            continue;
        }
        let neg = row_negative(&x, t, r, policy)?;
        let z = (x[[t, neg]] - x[[t, r]]) / tau;
        value += softplus(z);
        let s = sigmoid(z) / tau * inv_m;
        grad[[t, r]] -= s;
        grad[[t, neg]] += s;
    }
    Ok((value * inv_m, grad))
}

/// Hinge on the gap between the reference and negative logits, averaged over
/// masked positions. The subgradient at the hinge point is zero.
pub fn mm_disc_loss(
    logits: &LogitsMatrix,
    refs: &[usize],
    mask: &TokenMask,
    mu: f64,
    policy: NegativePolicy,
) -> Result<(f64, Array2<f64>)> {
    check_refs(logits, refs)?;
    check_mask(logits, mask)?;
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be non-negative, got {mu}")));
    }
    let x = logits.view();
    let mut grad = Array2::<f64>::zeros(x.dim());
    let m = mask.count();
    if m == 0 {
        return Ok((0.0, grad));
    }
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    for (t, &r) in refs.iter().enumerate() {
        if !mask.0[t] {
            continue;
        }
        let neg = row_negative(&x, t, r, policy)?;
        let h = mu - x[[t, r]] + x[[t, neg]];
        if h > 0.0 {
            value += h;
            grad[[t, r]] -= inv_m;
            grad[[t, neg]] += inv_m;
        }
    }
    Ok((value * inv_m, grad))
}

fn disc_loss(
    logits: &LogitsMatrix,
    refs: &[usize],
    mask: &TokenMask,
    spec: &LossSpec,
) -> Result<(f64, Array2<f64>)> {
    match spec.kind {
        LossKind::HybridNll => nll_disc_loss(logits, refs, mask, spec.tau, spec.negative_policy),
        LossKind::HybridMm => mm_disc_loss(logits, refs, mask, spec.mu, spec.negative_policy),
        LossKind::Clm => unreachable!("clm has no discriminative term"),
    }
}

/// Batch objective over per-sentence logits; see [`hybrid_loss_smoothed`].
pub fn hybrid_loss(
    logits: &[LogitsMatrix],
    refs: &[Vec<usize>],
    masks: &[TokenMask],
    spec: &LossSpec,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    hybrid_loss_smoothed(logits, refs, masks, spec, 0.0)
}

/// Batch objective with a label-smoothed generative term.
///
/// The generative term is the unweighted sentence mean of the per-sentence
/// (smoothed) CLM loss over all tokens. The discriminative term is the mean
/// over the sentences that have at least one masked token. Gradients are
/// returned per sentence, already scaled by the batch reduction.
pub fn hybrid_loss_smoothed(
    logits: &[LogitsMatrix],
    refs: &[Vec<usize>],
    masks: &[TokenMask],
    spec: &LossSpec,
    label_smoothing: f64,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    if logits.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if refs.len() != logits.len() || masks.len() != logits.len() {
        return Err(Error::Dimension(format!(
            "batch lists differ in length: {} logits, {} refs, {} masks",
            logits.len(),
            refs.len(),
            masks.len()
        )));
    }
    spec.validate()?;

    let b = logits.len();
    let gen_weight = if spec.kind == LossKind::Clm { 1.0 } else { spec.lambda };
    let gen_scale = gen_weight * (1.0 / b as f64);

    let mut breakdown = LossBreakdown {
        sentence_count: b,
        ..LossBreakdown::default()
    };
    let mut grads = Vec::with_capacity(b);
    let mut gen_sum = 0.0;
    for ((l, r), m) in logits.iter().zip(refs).zip(masks) {
        check_mask(l, m)?;
        let (v, g) = smoothed_clm_loss(l, r, label_smoothing)?;
        gen_sum += v;
        breakdown.masked_token_count += m.count();
        grads.push(g * gen_scale);
    }
    breakdown.generative = gen_sum / b as f64;

    if spec.kind == LossKind::Clm {
        breakdown.total = breakdown.generative;
        return Ok((breakdown, grads));
    }

    let active: Vec<usize> = (0..b).filter(|&i| masks[i].count() > 0).collect();
    let mut disc_sum = 0.0;
    if !active.is_empty() {
        let disc_scale = (1.0 - spec.lambda) * (1.0 / active.len() as f64);
        for &i in &active {
            let (v, g) = disc_loss(&logits[i], &refs[i], &masks[i], spec)?;
            disc_sum += v;
            grads[i].scaled_add(disc_scale, &g);
        }
        breakdown.discriminative = disc_sum / active.len() as f64;
    }
    breakdown.total =
        spec.lambda * breakdown.generative + (1.0 - spec.lambda) * breakdown.discriminative;
    Ok((breakdown, grads))
}
