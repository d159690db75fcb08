//! Optimization: Adam with an inverse square root schedule, token-budget
//! batching, epoch and step runners, the alternating fine-tuning schedule and
//! checkpoint averaging.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Vocab, EOS, SEP_TOKEN};
use crate::error::{Error, Result};
use crate::loss::{policy_mask, LossBreakdown, LossSpec, TokenMask};
use crate::model::checkpoint::{Checkpoint, Moments};
use crate::model::{concat_input, InputMode, Model, ParamGroup, Params};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub base_lr: f64,
    pub warmup_init_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Padded token budget per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            base_lr: 7e-4,
            warmup_init_lr: 1e-7,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            label_smoothing: 0.1,
            clip_norm: 0.0,
            batch_tokens: 512,
            max_steps: 5000,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) || !(self.warmup_init_lr >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_init_lr`, then `base_lr * sqrt(warmup / step)`.
pub fn lr_at(step: u64, h: &TrainHyper) -> f64 {
    if h.warmup_steps == 0 {
        return if step == 0 {
            h.base_lr
        } else {
            h.base_lr / (step as f64).sqrt()
        };
    }
    if step < h.warmup_steps {
        h.warmup_init_lr + (h.base_lr - h.warmup_init_lr) * step as f64 / h.warmup_steps as f64
    } else {
        h.base_lr * (h.warmup_steps as f64 / step as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    /// Updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn moments(&self) -> Moments {
        Moments {
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }
}

/// One bias-corrected Adam update of a flat slice; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

fn same_layout(a: &Params, b: &Params) -> bool {
    let (na, nb) = (a.named(), b.named());
    na.len() == nb.len() && na.iter().zip(&nb).all(|(x, y)| x.1 == y.1)
}

/// Applies one update and returns the learning rate used.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    h: &TrainHyper,
) -> Result<f64> {
    if !same_layout(params, grads) || !same_layout(params, &state.m) {
        return Err(Error::Dimension("gradient layout does not match parameters".into()));
    }
    if let Some((name, _, _)) = grads
        .named()
        .into_iter()
        .find(|(_, _, d)| d.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "gradient of {name} at step {}",
            state.step
        )));
    }
    let mut scale = 1.0;
    if h.clip_norm > 0.0 {
        let norm = grads.sq_norm().sqrt();
        if norm > h.clip_norm {
            scale = h.clip_norm / norm;
        }
    }
    let lr = lr_at(state.step, h);
    let t = state.step + 1;
    let gs = grads.slices();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((p, g), m), v) in params.slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        if scale == 1.0 {
            adam_update(p, g, m, v, lr, h.beta1, h.beta2, h.eps, t);
        } else {
            let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
            adam_update(p, &g, m, v, lr, h.beta1, h.beta2, h.eps, t);
        }
    }
    state.step = t;
    Ok(lr)
}

/// Where the previous-sentence context of a Concat input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The true previous sentence of the document.
    Prev,
    /// A randomly drawn sentence of the same corpus.
    Random,
    /// No context, only the separator.
    None,
}

impl FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prev" => Ok(ContextMode::Prev),
            "random" => Ok(ContextMode::Random),
            "none" => Ok(ContextMode::None),
            other => Err(Error::Config(format!("unknown context mode '{other}'"))),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Prev => "prev",
            ContextMode::Random => "random",
            ContextMode::None => "none",
        })
    }
}

/// Model input token strings for every pair of `corpus`.
pub fn source_inputs(
    corpus: &ParallelCorpus,
    mode: InputMode,
    context: ContextMode,
    max_len: usize,
    seed: u64,
) -> Vec<Vec<String>> {
    let n = corpus.len();
    let mut r = rng::rng(rng::derive(seed, "random-context"));
    (0..n)
        .map(|i| {
            let cur = &corpus.pairs[i].src;
            match mode {
                InputMode::Sen2Sen => cur.clone(),
                InputMode::Concat => {
                    let empty: &[String] = &[];
                    let prev: &[String] = match context {
                        ContextMode::Prev => corpus.previous_source(i).unwrap_or(empty),
                        ContextMode::None => empty,
                        ContextMode::Random => {
                            let j = if n > 1 {
                                let j = r.gen_range(0..n - 1);
                                if j >= i {
                                    j + 1
                                } else {
                                    j
                                }
                            } else {
                                i
                            };
                            &corpus.pairs[j].src
                        }
                    };
                    concat_input(prev, cur, SEP_TOKEN.to_string(), max_len)
                }
            }
        })
        .collect()
}

/// One encoded training pair; `tgt` ends with EOS and `mask` has one flag
/// per target id.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub mask: TokenMask,
}

/// Encodes a corpus for training. `pronouns` is only consulted by the
/// pronoun-only mask policy; EOS is never masked under that policy.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    vocab: &Vocab,
    model: &Model,
    spec: &LossSpec,
    pronouns: &BTreeSet<String>,
    context: ContextMode,
    seed: u64,
) -> Result<Vec<Example>> {
    let max_len = model.config.max_len;
    let inputs = source_inputs(corpus, model.config.mode, context, max_len, seed);
    let mut out = Vec::with_capacity(corpus.len());
    for (i, (src, pair)) in inputs.iter().zip(&corpus.pairs).enumerate() {
        if src.len() > max_len || pair.tgt.len() + 1 > max_len {
            return Err(Error::LengthOverflow {
                len: src.len().max(pair.tgt.len() + 1),
                max: max_len,
            });
        }
        if src.is_empty() {
            return Err(Error::Empty(format!("source sentence {i}")));
        }
        let mut tgt = vocab.encode(&pair.tgt);
        tgt.push(EOS);
        let mut flags = policy_mask(&pair.tgt, pronouns, spec.mask_policy).0;
        flags.push(spec.mask_policy == crate::loss::MaskPolicy::AllTokens);
        out.push(Example {
            src: vocab.encode(src),
            tgt,
            mask: TokenMask(flags),
        });
    }
    Ok(out)
}

/// Groups `order` into consecutive batches whose padded size
/// (`count * longest`) stays within `batch_tokens`.
pub fn make_batches(examples: &[Example], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for &i in order {
        let len = examples[i].src.len().max(examples[i].tgt.len());
        let l = longest.max(len);
        if !cur.is_empty() && (cur.len() + 1) * l > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(len);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Running sums of per-batch breakdowns, weighted by sentence count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub steps: u64,
    pub sentences: usize,
    pub mean: LossBreakdown,
}

impl EpochStats {
    fn add(&mut self, b: &LossBreakdown) {
        let w = b.sentence_count as f64;
        self.steps += 1;
        self.sentences += b.sentence_count;
        self.mean.total += w * b.total;
        self.mean.generative += w * b.generative;
        self.mean.discriminative += w * b.discriminative;
        self.mean.masked_token_count += b.masked_token_count;
        self.mean.sentence_count += b.sentence_count;
    }

    fn finish(mut self) -> Self {
        if self.sentences > 0 {
            let n = self.sentences as f64;
            self.mean.total /= n;
            self.mean.generative /= n;
            self.mean.discriminative /= n;
        }
        self
    }
}

/// Mutable training state shared across epochs.
pub struct Trainer<'a> {
    pub model: Model,
    pub adam: AdamState,
    pub hyper: &'a TrainHyper,
    pub seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, hyper: &'a TrainHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            hyper,
            seed,
        })
    }

    /// One update on the examples at `idx`. `disc` selects which examples
    /// carry their discriminative mask.
    pub fn step(
        &mut self,
        examples: &[Example],
        idx: &[usize],
        spec: &LossSpec,
        disc: &dyn Fn(usize) -> bool,
    ) -> Result<LossBreakdown> {
        let batch: Vec<(Vec<usize>, Vec<usize>)> = idx
            .iter()
            .map(|&i| (examples[i].src.clone(), examples[i].tgt.clone()))
            .collect();
        let masks: Vec<TokenMask> = idx
            .iter()
            .map(|&i| {
                if disc(i) {
                    examples[i].mask.clone()
                } else {
                    TokenMask::none(examples[i].tgt.len())
                }
            })
            .collect();
        let key = rng::derive_indexed(self.seed, "dropout", self.adam.step);
        let (bd, grads) = self.model.loss_and_grads(
            &batch,
            spec,
            &masks,
            self.hyper.label_smoothing,
            (self.model.config.dropout > 0.0).then_some(key),
        )?;
        adam_step(&mut self.model.params, &grads, &mut self.adam, self.hyper)?;
        Ok(bd)
    }

    /// One pass over `examples` in a shuffle derived from `epoch_label`.
    /// Stops early once `limit` total updates have been applied.
    pub fn run_pass(
        &mut self,
        examples: &[Example],
        spec: &LossSpec,
        disc: &dyn Fn(usize) -> bool,
        epoch_label: u64,
        limit: Option<u64>,
        on_step: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<EpochStats> {
        if examples.is_empty() {
            return Err(Error::Empty("training corpus".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive_indexed(self.seed, "shuffle", epoch_label)));
        let mut stats = EpochStats::default();
        for b in make_batches(examples, &order, self.hyper.batch_tokens) {
            if limit.is_some_and(|l| self.adam.step >= l) {
                break;
            }
            let bd = self.step(examples, &b, spec, disc)?;
            stats.add(&bd);
            on_step(self)?;
        }
        Ok(stats.finish())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone(), self.adam.step, self.seed);
        ck.moments = Some(self.adam.moments());
        ck
    }
}

/// One epoch over all examples with every discriminative mask active.
pub fn train_epoch(
    trainer: &mut Trainer,
    examples: &[Example],
    spec: &LossSpec,
    epoch: u64,
) -> Result<EpochStats> {
    trainer.run_pass(examples, spec, &|_| true, epoch, None, &mut |_| Ok(()))
}

/// Retains the newest `keep` checkpoints in memory and, when `dir` is set,
/// on disk under `<dir>/<prefix>-<N>`.
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
    pub keep: usize,
    pub kept: Vec<(PathBuf, Checkpoint)>,
}

impl CheckpointSink {
    pub fn new(dir: Option<PathBuf>, keep: usize) -> Self {
        CheckpointSink {
            dir,
            keep: keep.max(1),
            kept: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, ck: Checkpoint) -> Result<()> {
        let path = self.dir.as_ref().map_or_else(|| PathBuf::from(&name), |d| d.join(&name));
        if self.dir.is_some() {
            ck.save(&path)?;
        }
        self.kept.push((path, ck));
        while self.kept.len() > self.keep {
            let (old, _) = self.kept.remove(0);
            if self.dir.is_some() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(())
    }

    pub fn checkpoints(&self) -> Vec<&Checkpoint> {
        self.kept.iter().map(|(_, c)| c).collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Step-budgeted training with a checkpoint every `every` updates.
pub fn train_steps(
    trainer: &mut Trainer,
    examples: &[Example],
    spec: &LossSpec,
    every: u64,
    sink: &mut CheckpointSink,
) -> Result<TrainLog> {
    let max = trainer.hyper.max_steps;
    let every = every.max(1);
    let mut log = TrainLog::default();
    let mut epoch = 0;
    let mut save = |t: &Trainer| -> Result<()> {
        if t.adam.step % every == 0 || t.adam.step == max {
            sink.push(format!("step-{}", t.adam.step), t.checkpoint())?;
        }
        Ok(())
    };
    while trainer.adam.step < max {
        let stats = trainer.run_pass(examples, spec, &|_| true, epoch, Some(max), &mut save)?;
        log.epochs.push(stats);
        epoch += 1;
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_epochs: usize,
    pub upsample_factor: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            total_epochs: 9,
            upsample_factor: 2,
        }
    }
}

/// Data fed to one fine-tuning epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// The targeted (or random) subset.
    Subset,
    /// The full corpus.
    Full,
    /// Full corpus and subset shuffled together.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub segment: Segment,
    pub passes: usize,
}

impl fmt::Display for EpochPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.segment {
            Segment::Subset => "P",
            Segment::Full => "F",
            Segment::Mixed => "M",
        };
        if self.passes == 1 && self.segment != Segment::Full {
            f.write_str(s)
        } else {
            write!(f, "{s}{}", self.passes)
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.upsample_factor == 0 {
            return Err(Error::Config(
                "total_epochs and upsample_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Subset and upsampled-full epochs alternate, starting with the subset.
    pub fn plan(&self) -> Vec<EpochPlan> {
        (0..self.total_epochs)
            .map(|e| {
                if e % 2 == 0 {
                    EpochPlan {
                        segment: Segment::Subset,
                        passes: 1,
                    }
                } else {
                    EpochPlan {
                        segment: Segment::Full,
                        passes: self.upsample_factor,
                    }
                }
            })
            .collect()
    }
}

/// Runs `plan`, saving one checkpoint per epoch as `epoch-<N>`.
/// Subset examples train with `subset_spec`, full-corpus examples with
/// `full_spec`; in mixed epochs only subset examples keep their masks.
#[allow(clippy::too_many_arguments)]
pub fn run_plan(
    trainer: &mut Trainer,
    full: &[Example],
    subset: &[Example],
    plan: &[EpochPlan],
    subset_spec: &LossSpec,
    full_spec: &LossSpec,
    sink: &mut CheckpointSink,
) -> Result<Vec<EpochStats>> {
    if plan.is_empty() {
        return Err(Error::Config("empty epoch plan".into()));
    }
    let needs = |s: Segment| plan.iter().any(|p| p.segment == s || p.segment == Segment::Mixed);
    if needs(Segment::Subset) && subset.is_empty() {
        return Err(Error::Empty("fine-tuning subset".into()));
    }
    if needs(Segment::Full) && full.is_empty() {
        return Err(Error::Empty("full training corpus".into()));
    }
    let mixed: Vec<Example> = if plan.iter().any(|p| p.segment == Segment::Mixed) {
        full.iter().chain(subset).cloned().collect()
    } else {
        Vec::new()
    };
    let n_full = full.len();
    let mut stats = Vec::new();
    let mut pass_label = 0u64;
    for (e, ep) in plan.iter().enumerate() {
        for _ in 0..ep.passes {
            let s = match ep.segment {
                Segment::Subset => {
                    trainer.run_pass(subset, subset_spec, &|_| true, pass_label, None, &mut |_| Ok(()))?
                }
                Segment::Full => {
                    trainer.run_pass(full, full_spec, &|_| true, pass_label, None, &mut |_| Ok(()))?
                }
                Segment::Mixed => trainer.run_pass(
                    &mixed,
                    subset_spec,
                    &|i| i >= n_full,
                    pass_label,
                    None,
                    &mut |_| Ok(()),
                )?,
            };
            stats.push(s);
            pass_label += 1;
        }
        let mut ck = trainer.checkpoint();
        ck.meta = serde_json::json!({ "epoch": e + 1, "segment": ep.to_string() });
        sink.push(format!("epoch-{}", e + 1), ck)?;
    }
    Ok(stats)
}

/// The alternating fine-tuning schedule: hybrid loss on the subset, CLM on
/// the upsampled full corpus.
pub fn run_schedule(
    trainer: &mut Trainer,
    full: &[Example],
    subset: &[Example],
    schedule: &ScheduleSpec,
    disc_spec: &LossSpec,
    sink: &mut CheckpointSink,
) -> Result<Vec<EpochStats>> {
    schedule.validate()?;
    run_plan(
        trainer,
        full,
        subset,
        &schedule.plan(),
        disc_spec,
        &LossSpec::clm(),
        sink,
    )
}

/// How many trailing checkpoints are averaged.
pub const AVERAGE_LAST: usize = 10;

/// Element-wise mean of the last `min(10, n)` checkpoints.
pub fn average_checkpoints(checkpoints: &[&Checkpoint]) -> Result<Model> {
    let Some(last) = checkpoints.last() else {
        return Err(Error::Empty("checkpoint list".into()));
    };
    let tail = &checkpoints[checkpoints.len().saturating_sub(AVERAGE_LAST)..];
    for c in tail {
        if c.model.config != last.model.config {
            return Err(Error::Config("checkpoints have different model configs".into()));
        }
    }
    let mut avg = last.model.params.zeros_like();
    for c in tail {
        avg.add_scaled(1.0, &c.model.params);
    }
    let k = tail.len() as f64;
    for s in avg.slices_mut() {
        s.iter_mut().for_each(|x| *x /= k);
    }
    Model::new(last.model.config.clone(), avg)
}

/// Checkpoint files in `dir` named `<prefix>-<N>`, sorted by N.
pub fn list_checkpoints(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(n) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('-'))
            .and_then(|r| r.parse::<u64>().ok())
        {
            found.push((n, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Number of values in `params`; used for logs.
pub fn param_count(params: &Params) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, _, d| n += d.len());
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, SentencePair, Side};
    use crate::loss::{LossKind, MaskPolicy};
    use crate::model::ModelConfig;

    #[test]
    fn schedule_learning_rates() {
        let h = TrainHyper::default();
        assert_eq!(lr_at(0, &h), 1e-7);
        assert!((lr_at(400, &h) - 7e-4).abs() < 1e-18);
        assert!((lr_at(1600, &h) - 3.5e-4).abs() < 1e-18);
        assert!(lr_at(200, &h) > lr_at(100, &h));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = [0.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1e-3, 0.9, 0.98, 1e-8, 1);
        assert!((m[0] / 0.1 - 1.0).abs() < 1e-12);
        assert!((v[0] / 0.02 - 1.0).abs() < 1e-12);
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
    }

    fn tiny_model(vocab: usize, mode: InputMode) -> Model {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            dropout: 0.0,
            max_len: 24,
            mode,
        };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let model = tiny_model(10, InputMode::Sen2Sen);
        let mut params = model.params.clone();
        let mut state = AdamState::new(&params);
        state.m.fill(1.0);
        state.v.fill(1.0);
        let zero = params.zeros_like();
        let h = TrainHyper::default();
        // zero moments with zero gradient would be the trivial case; decayed
        // non-zero moments still move params, so check moments and step only
        let before = params.clone();
        adam_step(&mut params, &zero, &mut state, &h).unwrap();
        assert!(state.m.slices().iter().all(|s| s.iter().all(|&x| x == 0.9)));
        assert!(state.v.slices().iter().all(|s| s.iter().all(|&x| x == 0.98)));
        let mut fresh = AdamState::new(&params);
        let mut p2 = before.clone();
        adam_step(&mut p2, &zero, &mut fresh, &h).unwrap();
        assert_eq!(p2, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let model = tiny_model(10, InputMode::Sen2Sen);
        let mut params = model.params.clone();
        let mut state = AdamState::new(&params);
        let mut g = params.zeros_like();
        g.out_bias[3] = f64::NAN;
        let err = adam_step(&mut params, &g, &mut state, &TrainHyper::default()).unwrap_err();
        assert!(err.to_string().contains("out_bias"));
    }

    fn toy() -> ParallelCorpus {
        let pairs = (0..10)
            .map(|i| {
                SentencePair::new(
                    &format!("s{} s{} pro", i % 4, (i + 1) % 5),
                    &format!("t{} t{} he", (i + 1) % 5, i % 4),
                )
            })
            .collect();
        ParallelCorpus::new(pairs, vec![0, 5]).unwrap()
    }

    fn toy_setup(mode: InputMode) -> (Model, Vec<Example>) {
        let c = toy();
        let vocab = build_vocab(&c, Side::Both).unwrap();
        let model = tiny_model(vocab.len(), mode);
        let pron: BTreeSet<String> = ["he".to_string()].into();
        let ex = encode_corpus(&c, &vocab, &model, &LossSpec::clm(), &pron, ContextMode::Prev, 0)
            .unwrap();
        (model, ex)
    }

    #[test]
    fn two_epochs_reduce_clm_loss() {
        let (model, ex) = toy_setup(InputMode::Sen2Sen);
        let h = TrainHyper {
            warmup_steps: 10,
            base_lr: 3e-3,
            batch_tokens: 16,
            label_smoothing: 0.0,
            ..TrainHyper::default()
        };
        let mut t = Trainer::new(model, &h, 1).unwrap();
        let mut prev = f64::INFINITY;
        for e in 0..3 {
            let s = train_epoch(&mut t, &ex, &LossSpec::clm(), e).unwrap();
            assert!(s.mean.total < prev, "epoch {e}: {} !< {prev}", s.mean.total);
            prev = s.mean.total;
        }
        assert!(train_epoch(&mut t, &[], &LossSpec::clm(), 9).is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let (model, ex) = toy_setup(InputMode::Concat);
        let h = TrainHyper {
            batch_tokens: 20,
            ..TrainHyper::default()
        };
        let mut model = model;
        model.config.dropout = 0.2;
        let spec = LossSpec::hybrid(LossKind::HybridMm, MaskPolicy::AllTokens);
        let run = || {
            let mut t = Trainer::new(model.clone(), &h, 5).unwrap();
            let s = train_epoch(&mut t, &ex, &spec, 0).unwrap();
            (s, t.model.checksum())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoding_masks_and_context() {
        let c = toy();
        let vocab = build_vocab(&c, Side::Both).unwrap();
        let model = tiny_model(vocab.len(), InputMode::Concat);
        let pron: BTreeSet<String> = ["he".to_string()].into();
        let spec = LossSpec::hybrid(LossKind::HybridNll, MaskPolicy::PronounOnly);
        let ex = encode_corpus(&c, &vocab, &model, &spec, &pron, ContextMode::Prev, 0).unwrap();
        assert_eq!(ex[0].mask.0, vec![false, false, true, false]);
        assert_eq!(ex[0].tgt.last(), Some(&EOS));
        // document start: separator then the sentence
        assert_eq!(vocab.decode(&ex[5].src)[0], SEP_TOKEN);
        assert_eq!(ex[6].src.len(), 7);
        let rnd = source_inputs(&c, InputMode::Concat, ContextMode::Random, 24, 3);
        assert_eq!(rnd, source_inputs(&c, InputMode::Concat, ContextMode::Random, 24, 3));
        for (i, s) in rnd.iter().enumerate() {
            assert_eq!(s.len(), 7, "sentence {i}");
        }
        let none = source_inputs(&c, InputMode::Concat, ContextMode::None, 24, 3);
        assert!(none.iter().all(|s| s[0] == SEP_TOKEN));
    }

    #[test]
    fn batches_respect_budget() {
        let (_, ex) = toy_setup(InputMode::Sen2Sen);
        let order: Vec<usize> = (0..ex.len()).collect();
        let b = make_batches(&ex, &order, 8);
        assert!(b.iter().all(|b| b.len() * 4 <= 8));
        assert_eq!(b.concat(), order);
        assert!(make_batches(&ex, &order, 1).iter().all(|b| b.len() == 1));
    }

    #[test]
    fn nine_epoch_pattern() {
        let plan = ScheduleSpec::default().plan();
        let s: Vec<String> = plan.iter().map(ToString::to_string).collect();
        assert_eq!(s, ["P", "F2", "P", "F2", "P", "F2", "P", "F2", "P"]);
        let one = ScheduleSpec {
            total_epochs: 1,
            upsample_factor: 2,
        };
        assert_eq!(one.plan().len(), 1);
    }

    #[test]
    fn averaging() {
        let m = tiny_model(10, InputMode::Sen2Sen);
        let mk = |v: f64| {
            let mut mm = m.clone();
            mm.params.fill(v);
            Checkpoint::new(mm, 0, 0)
        };
        let same = [mk(0.5), mk(0.5), mk(0.5)];
        let refs: Vec<&Checkpoint> = same.iter().collect();
        assert_eq!(average_checkpoints(&refs).unwrap().params, same[0].model.params);
        let two = [mk(0.0), mk(2.0)];
        let avg = average_checkpoints(&two.iter().collect::<Vec<_>>()).unwrap();
        assert!(avg.params.slices().iter().all(|s| s.iter().all(|&x| x == 1.0)));
        let twelve: Vec<Checkpoint> = (0..12).map(|i| mk(i as f64)).collect();
        let avg = average_checkpoints(&twelve.iter().collect::<Vec<_>>()).unwrap();
        // mean of 2..=11
        assert!(avg.params.slices().iter().all(|s| s.iter().all(|&x| x == 6.5)));
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn schedule_runs_and_checkpoints_each_epoch() {
        let (model, ex) = toy_setup(InputMode::Sen2Sen);
        let h = TrainHyper {
            batch_tokens: 40,
            ..TrainHyper::default()
        };
        let mut t = Trainer::new(model, &h, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = CheckpointSink::new(Some(dir.path().to_path_buf()), 4);
        let sched = ScheduleSpec {
            total_epochs: 5,
            upsample_factor: 2,
        };
        let spec = LossSpec::hybrid(LossKind::HybridNll, MaskPolicy::AllTokens);
        let stats = run_schedule(&mut t, &ex, &ex[..3], &sched, &spec, &mut sink).unwrap();
        assert_eq!(stats.len(), 3 + 2 * 2);
        let files = list_checkpoints(dir.path(), "epoch").unwrap();
        assert_eq!(files.len(), 4);
        assert!(files[0].ends_with("epoch-2"));
        assert!(run_schedule(&mut t, &ex, &[], &sched, &spec, &mut sink).is_err());
    }

    #[test]
    fn step_training_rotates_checkpoints() {
        let (model, ex) = toy_setup(InputMode::Sen2Sen);
        let h = TrainHyper {
            batch_tokens: 12,
            max_steps: 7,
            ..TrainHyper::default()
        };
        let mut t = Trainer::new(model, &h, 2).unwrap();
        let mut sink = CheckpointSink::new(None, 2);
        train_steps(&mut t, &ex, &LossSpec::clm(), 3, &mut sink).unwrap();
        assert_eq!(t.adam.step, 7);
        let steps: Vec<u64> = sink.checkpoints().iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![6, 7]);
    }
}
