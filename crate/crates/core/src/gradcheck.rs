//! Central finite-difference checks of the analytic gradients.
//!
//! Logits use the two-point stencil; parameters use the fourth-order
//! five-point stencil, whose truncation error stays far below the tolerance
//! for small gradient components.
//!
//! Coordinates whose `+h` and `-h` evaluations fall on different sides of a
//! non-differentiable point (a change of the selected negative, a hinge sign
//! flip or a ReLU flip) are skipped and counted; the derivative does not
//! exist there.

use std::fmt;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{
    hybrid_loss_smoothed, select_negative, LogitsMatrix, LossKind, LossSpec, MaskPolicy,
    NegativePolicy, TokenMask,
};
use crate::model::{InputMode, Model, ModelConfig};
use crate::rng;

pub const LOGIT_STEP: f64 = 1e-3;
pub const LOGIT_REL_TOL: f64 = 1e-4;
pub const PARAM_STEP: f64 = 1e-3;
pub const PARAM_REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-6;

/// The nine objective configurations under test.
pub fn loss_configs() -> Vec<LossSpec> {
    let mut v = vec![LossSpec::clm()];
    for kind in [LossKind::HybridNll, LossKind::HybridMm] {
        for mask in [MaskPolicy::AllTokens, MaskPolicy::PronounOnly] {
            for neg in [NegativePolicy::MaxAll, NegativePolicy::MaxExcludingReference] {
                v.push(LossSpec {
                    negative_policy: neg,
                    ..LossSpec::hybrid(kind, mask)
                });
            }
        }
    }
    v
}

pub fn spec_label(s: &LossSpec) -> String {
    if s.kind == LossKind::Clm {
        "clm".into()
    } else {
        format!("{}/{}/{}", s.kind, s.mask_policy, s.negative_policy)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckStats {
    pub label: String,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl CheckStats {
    fn new(label: String) -> Self {
        CheckStats {
            label,
            ..Default::default()
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, rel_tol: f64) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.max_abs_err = self.max_abs_err.max(abs);
        if abs > ABS_TOL {
            self.max_rel_err = self.max_rel_err.max(rel);
            if rel > rel_tol {
                self.failures += 1;
            }
        }
    }

    pub fn merge(&mut self, o: &CheckStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.failures += o.failures;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(o.max_abs_err);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Which side of every kink the loss is on at these logits.
fn kink_signature(
    logits: &[LogitsMatrix],
    refs: &[Vec<usize>],
    masks: &[TokenMask],
    spec: &LossSpec,
) -> Result<Vec<usize>> {
    let mut sig = Vec::new();
    if spec.kind == LossKind::Clm {
        return Ok(sig);
    }
    for ((l, r), m) in logits.iter().zip(refs).zip(masks) {
        let v = l.view();
        for (t, &on) in m.0.iter().enumerate() {
            if !on {
                continue;
            }
            let row: Vec<f64> = v.row(t).to_vec();
            let neg = select_negative(&row, r[t], spec.negative_policy)?;
            sig.push(neg);
            if spec.kind == LossKind::HybridMm {
                let margin = spec.mu - row[r[t]] + row[neg];
                sig.push(usize::from(margin > 0.0));
            }
        }
    }
    Ok(sig)
}

struct LogitCase {
    logits: Vec<Array2<f64>>,
    refs: Vec<Vec<usize>>,
    masks: Vec<TokenMask>,
}

fn random_logit_case(r: &mut rng::Rng, spec: &LossSpec) -> LogitCase {
    let b = r.gen_range(1..=3);
    let v = r.gen_range(2..=8);
    let mut case = LogitCase {
        logits: Vec::new(),
        refs: Vec::new(),
        masks: Vec::new(),
    };
    for _ in 0..b {
        let n = r.gen_range(1..=5);
        case.logits
            .push(Array2::from_shape_fn((n, v), |_| r.gen_range(-3.0..3.0)));
        case.refs.push((0..n).map(|_| r.gen_range(0..v)).collect());
        case.masks.push(match spec.mask_policy {
            MaskPolicy::AllTokens => TokenMask::all(n),
            MaskPolicy::PronounOnly => TokenMask((0..n).map(|_| r.gen_bool(0.5)).collect()),
        });
    }
    case
}

fn eval_logits(case: &LogitCase, spec: &LossSpec, eps: f64) -> Result<(f64, Vec<usize>)> {
    let lm: Vec<LogitsMatrix> = case
        .logits
        .iter()
        .map(|l| LogitsMatrix::new(l.clone()))
        .collect::<Result<_>>()?;
    let (bd, _) = hybrid_loss_smoothed(&lm, &case.refs, &case.masks, spec, eps)?;
    Ok((bd.total, kink_signature(&lm, &case.refs, &case.masks, spec)?))
}

/// Checks every logit gradient of one random batch.
pub fn logit_check(seed: u64, spec: &LossSpec, label_smoothing: f64) -> Result<CheckStats> {
    let mut r = rng::rng(rng::derive_indexed(seed, "logit-check", 0));
    let mut case = random_logit_case(&mut r, spec);
    let lm: Vec<LogitsMatrix> = case
        .logits
        .iter()
        .map(|l| LogitsMatrix::new(l.clone()))
        .collect::<Result<_>>()?;
    let (_, grads) = hybrid_loss_smoothed(&lm, &case.refs, &case.masks, spec, label_smoothing)?;
    let mut stats = CheckStats::new(spec_label(spec));
    for s in 0..case.logits.len() {
        let (n, v) = case.logits[s].dim();
        for i in 0..n {
            for j in 0..v {
                let x = case.logits[s][[i, j]];
                case.logits[s][[i, j]] = x + LOGIT_STEP;
                let (fp, sp) = eval_logits(&case, spec, label_smoothing)?;
                case.logits[s][[i, j]] = x - LOGIT_STEP;
                let (fm, sm) = eval_logits(&case, spec, label_smoothing)?;
                case.logits[s][[i, j]] = x;
                if sp != sm {
                    stats.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * LOGIT_STEP);
                stats.record(grads[s][[i, j]], numeric, LOGIT_REL_TOL);
            }
        }
    }
    Ok(stats)
}

/// Tiny model used by the parameter-level check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        dropout: 0.1,
        max_len: 16,
        mode: InputMode::Sen2Sen,
    }
}

struct ParamCase {
    batch: Vec<(Vec<usize>, Vec<usize>)>,
    masks: Vec<TokenMask>,
}

fn random_param_case(r: &mut rng::Rng, spec: &LossSpec, vocab: usize) -> ParamCase {
    let mut batch = Vec::new();
    let mut masks = Vec::new();
    for s in 0..2 {
        let sl = r.gen_range(2..=5);
        let tl = r.gen_range(2..=5);
        let src = (0..sl).map(|_| r.gen_range(5..vocab)).collect();
        let mut tgt: Vec<usize> = (0..tl - 1).map(|_| r.gen_range(5..vocab)).collect();
        tgt.push(crate::corpus::EOS);
        let mask = match spec.mask_policy {
            MaskPolicy::AllTokens => TokenMask::all(tl),
            MaskPolicy::PronounOnly => {
                let mut m: Vec<bool> = (0..tl).map(|_| r.gen_bool(0.4)).collect();
                if s == 0 {
                    m[0] = true;
                }
                TokenMask(m)
            }
        };
        batch.push((src, tgt));
        masks.push(mask);
    }
    ParamCase { batch, masks }
}

fn eval_params(
    model: &Model,
    case: &ParamCase,
    spec: &LossSpec,
    eps: f64,
    key: Option<u64>,
) -> Result<(f64, Vec<usize>, Vec<bool>)> {
    let srcs: Vec<Vec<usize>> = case.batch.iter().map(|b| b.0.clone()).collect();
    let tgts: Vec<Vec<usize>> = case.batch.iter().map(|b| b.1.clone()).collect();
    let (logits, cache) = model.forward_batch(&srcs, &tgts, key)?;
    let mut per = Vec::new();
    for &(start, len) in &cache.target_spans().0 {
        per.push(LogitsMatrix::new(
            logits.slice(ndarray::s![start..start + len, ..]).to_owned(),
        )?);
    }
    let (bd, _) = hybrid_loss_smoothed(&per, &tgts, &case.masks, spec, eps)?;
    let sig = kink_signature(&per, &tgts, &case.masks, spec)?;
    Ok((bd.total, sig, cache.relu_pattern()))
}

/// Checks `coords` randomly chosen parameter coordinates (all when `None`)
/// of the tiny model, with dropout active under a fixed key.
pub fn param_check(
    seed: u64,
    spec: &LossSpec,
    label_smoothing: f64,
    coords: Option<usize>,
) -> Result<CheckStats> {
    let mut r = rng::rng(rng::derive_indexed(seed, "param-check", 0));
    let mut model = Model::init(tiny_config(), seed)?;
    // move away from the zero/one initial biases and gains
    for s in model.params.slices_mut() {
        for x in s.iter_mut() {
            *x += r.gen_range(-0.1..0.1);
        }
    }
    let case = random_param_case(&mut r, spec, model.config.vocab_size);
    let key = Some(rng::derive(seed, "dropout"));
    let (_, grads) =
        model.loss_and_grads(&case.batch, spec, &case.masks, label_smoothing, key)?;
    let grad_flat: Vec<f64> = grads.slices().concat();
    let total = grad_flat.len();
    let picks: Vec<usize> = match coords {
        None => (0..total).collect(),
        Some(k) => (0..k).map(|_| r.gen_range(0..total)).collect(),
    };
    let mut stats = CheckStats::new(spec_label(spec));
    for &flat in &picks {
        // fourth-order central stencil at offsets -2h, -h, h, 2h
        let mut f = [0.0; 4];
        let mut sigs = Vec::with_capacity(4);
        for (k, m) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
            let (v, sig, relu) =
                perturbed(&mut model, flat, m * PARAM_STEP, &case, spec, label_smoothing, key)?;
            f[k] = v;
            sigs.push((sig, relu));
        }
        if sigs.windows(2).any(|w| w[0] != w[1]) {
            stats.skipped += 1;
            continue;
        }
        let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * PARAM_STEP);
        stats.record(grad_flat[flat], numeric, PARAM_REL_TOL);
    }
    Ok(stats)
}

fn perturbed(
    model: &mut Model,
    flat: usize,
    delta: f64,
    case: &ParamCase,
    spec: &LossSpec,
    eps: f64,
    key: Option<u64>,
) -> Result<(f64, Vec<usize>, Vec<bool>)> {
    let slot = locate(model, flat);
    let old = *slot;
    *slot = old + delta;
    let out = eval_params(model, case, spec, eps, key);
    *locate(model, flat) = old;
    out
}

fn locate(model: &mut Model, mut flat: usize) -> &mut f64 {
    for s in model.params.slices_mut() {
        if flat < s.len() {
            return &mut s[flat];
        }
        flat -= s.len();
    }
    panic!("parameter index out of range")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub logit: Vec<CheckStats>,
    pub param: Vec<CheckStats>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.logit.iter().chain(&self.param).all(CheckStats::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<42} {:>8} {:>7} {:>5} {:>11} {:>11}  status",
            "level", "objective", "checked", "skipped", "fail", "max rel", "max abs"
        )?;
        for (level, rows) in [("logit", &self.logit), ("param", &self.param)] {
            for s in rows {
                writeln!(
                    f,
                    "{:<6} {:<42} {:>8} {:>7} {:>5} {:>11.3e} {:>11.3e}  {}",
                    level,
                    s.label,
                    s.checked,
                    s.skipped,
                    s.failures,
                    s.max_rel_err,
                    s.max_abs_err,
                    if s.passed() { "ok" } else { "FAIL" }
                )?;
            }
        }
        Ok(())
    }
}

/// Both suites over `seeds` consecutive seeds starting at `seed`. The
/// parameter check samples `coords` coordinates per configuration and seed.
pub fn run_suite(seed: u64, seeds: u64, coords: Option<usize>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for spec in loss_configs() {
        let mut lg = CheckStats::new(spec_label(&spec));
        let mut pg = CheckStats::new(spec_label(&spec));
        for s in seed..seed + seeds {
            lg.merge(&logit_check(s, &spec, 0.0)?);
            // half of the parameter checks use the smoothed generative term
            let eps = if s % 2 == 0 { 0.0 } else { 0.1 };
            pg.merge(&param_check(s, &spec, eps, coords)?);
        }
        report.logit.push(lg);
        report.param.push(pg);
    }
    let mut smoothed = CheckStats::new("clm+smoothing".into());
    for s in seed..seed + seeds {
        smoothed.merge(&logit_check(s, &LossSpec::clm(), 0.1)?);
    }
    report.logit.push(smoothed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_gradients_match() {
        for spec in loss_configs() {
            for seed in 0..10 {
                let s = logit_check(seed, &spec, 0.0).unwrap();
                assert!(s.passed(), "{s:?}");
            }
        }
    }

    #[test]
    fn all_parameters_of_tiny_model() {
        for spec in loss_configs() {
            let s = param_check(3, &spec, 0.1, None).unwrap();
            assert!(s.passed(), "{s:?}");
            assert!(s.skipped * 10 < s.checked, "{s:?}");
        }
    }
}
