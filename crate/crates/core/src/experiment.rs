//! End-to-end pipeline for the named experiment variants.
//!
//! Every stage writes into its own directory under the output root and
//! records a hash of everything it depends on in `stage.json`. A stage whose
//! hash matches is loaded instead of recomputed, so later variants reuse the
//! baselines and the extracted subset of earlier ones.
//!
//! ```text
//! <out>/data/                          train/test corpora and vocabulary
//! <out>/<model>/baseline/              step checkpoints, averaged model, report
//! <out>/concat/random-context/         Concat trained and tested with random context
//! <out>/<model>/extract/               train translations, alignments, D_prn
//! <out>/<model>/<variant>-<loss>[-<mask>]/  fine-tuned model and report
//! ```
//!
//! Paths inside manifests are relative to the output root, and nothing
//! time-dependent is written, so two runs with the same seed produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{align_corpus, write_alignments};
use crate::config::{hash_file, hash_json, ExperimentConfig};
use crate::corpus::{
    build_vocab, detokenize, generate_synthetic, read_lines, write_atomic, write_lines,
    write_parallel, CorpusFiles, ParallelCorpus, Side, SyntheticConfig, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Smoothing};
use crate::extract::{
    build_targeted_subset, read_subset, sample_random_subset, write_mismatches, write_subset,
    PronounInventory,
};
use crate::loss::{LossKind, LossSpec, MaskPolicy};
use crate::model::checkpoint::Checkpoint;
use crate::model::{InputMode, Model, ModelConfig};
use crate::rng;
use crate::trainer::{
    average_checkpoints, encode_corpus, run_plan, source_inputs, train_steps, CheckpointSink,
    ContextMode, EpochPlan, Segment, Trainer,
};

/// First document index of the held-out test set. Far beyond any training
/// corpus, so the two never share a document.
pub const TEST_FIRST_DOC: u64 = 1 << 32;

/// Sentences decoded per batch.
const DECODE_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BaselineSen2Sen,
    BaselineConcat,
    ConcatRandomContext,
    FtSubsetOnly,
    FtShuffled,
    FtAlt1x,
    FtAlt2x,
    FtRandomSubset,
    IncreasedTraining,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::BaselineSen2Sen,
        Variant::BaselineConcat,
        Variant::ConcatRandomContext,
        Variant::FtSubsetOnly,
        Variant::FtShuffled,
        Variant::FtAlt1x,
        Variant::FtAlt2x,
        Variant::FtRandomSubset,
        Variant::IncreasedTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineSen2Sen => "baseline-sen2sen",
            Variant::BaselineConcat => "baseline-concat",
            Variant::ConcatRandomContext => "concat-random-context",
            Variant::FtSubsetOnly => "ft-subset-only",
            Variant::FtShuffled => "ft-shuffled",
            Variant::FtAlt1x => "ft-alt-1x",
            Variant::FtAlt2x => "ft-alt-2x",
            Variant::FtRandomSubset => "ft-random-subset",
            Variant::IncreasedTraining => "increased-training",
        }
    }

    pub fn is_finetune(self) -> bool {
        !matches!(
            self,
            Variant::BaselineSen2Sen | Variant::BaselineConcat | Variant::ConcatRandomContext
        )
    }

    /// Epoch plan of a fine-tuning variant for `total` epochs.
    pub fn plan(self, total: usize, upsample: usize) -> Vec<EpochPlan> {
        let alternate = |factor: usize| {
            (0..total)
                .map(|e| {
                    if e % 2 == 0 {
                        EpochPlan { segment: Segment::Subset, passes: 1 }
                    } else {
                        EpochPlan { segment: Segment::Full, passes: factor }
                    }
                })
                .collect()
        };
        let uniform = |segment| vec![EpochPlan { segment, passes: 1 }; total];
        match self {
            Variant::FtSubsetOnly => uniform(Segment::Subset),
            Variant::FtShuffled => uniform(Segment::Mixed),
            Variant::FtAlt1x => alternate(1),
            Variant::FtAlt2x | Variant::FtRandomSubset => alternate(upsample),
            Variant::IncreasedTraining => uniform(Segment::Full),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Per-run choices that are not part of the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Baseline architecture that fine-tuning variants start from.
    pub model: InputMode,
    /// Fine-tuning loss; `None` keeps the configured `loss.kind`.
    pub loss: Option<LossKind>,
    /// Mask policy; `None` keeps the configured `loss.mask_policy`.
    pub mask: Option<MaskPolicy>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            model: InputMode::Sen2Sen,
            loss: None,
            mask: None,
        }
    }
}

/// Outcome of one variant.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub dir: PathBuf,
    pub report: EvalReport,
    /// Size of the fine-tuning subset, when there is one.
    pub subset_size: Option<usize>,
}

/// Train and test corpora with the joint vocabulary.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
    pub vocab: Vocab,
}

impl ExperimentConfig {
    /// Generator config of the training corpus.
    pub fn train_corpus_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: rng::derive(self.seed, "corpus"),
            ..self.corpus.clone()
        }
    }

    /// Generator config of the test corpus: same lexicon, disjoint documents.
    pub fn test_corpus_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_docs: self.test_docs,
            first_doc: self.corpus.first_doc + TEST_FIRST_DOC,
            ..self.train_corpus_config()
        }
    }

    pub fn inventory(&self) -> Result<PronounInventory> {
        match &self.inventory {
            Some(p) => PronounInventory::read(p),
            None => Ok(PronounInventory::builtin()),
        }
    }
}

/// Generates the train and test corpora and builds the vocabulary.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    let train = generate_synthetic(&cfg.train_corpus_config())?.corpus;
    let test = generate_synthetic(&cfg.test_corpus_config())?.corpus;
    let vocab = build_vocab(&train, Side::Both)?;
    Ok(Data { train, test, vocab })
}

/// Greedy translations of every sentence of `corpus`, as tokens.
pub fn translate_corpus(
    model: &Model,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    context: ContextMode,
    seed: u64,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    let inputs = source_inputs(corpus, model.config.mode, context, model.config.max_len, seed);
    let ids: Vec<Vec<usize>> = inputs.iter().map(|s| vocab.encode(s)).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(DECODE_BATCH) {
        for hyp in model.translate_greedy_batch(chunk, max_len)? {
            out.push(vocab.decode(&hyp));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct StageStamp {
    stage: String,
    hash: String,
}

/// Runs the pipeline stages of the experiment variants under one root.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    /// Progress messages on stderr.
    pub verbose: bool,
    inventory: PronounInventory,
    data: Option<Data>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let inventory = cfg.inventory()?;
        Ok(Experiment {
            cfg,
            out: out.into(),
            verbose: false,
            inventory,
            data: None,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[experiment] {}", msg.as_ref());
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn data_files(&self) -> [PathBuf; 7] {
        let d = self.data_dir();
        [
            d.join("train.src"),
            d.join("train.tgt"),
            d.join("train.docs"),
            d.join("test.src"),
            d.join("test.tgt"),
            d.join("test.docs"),
            d.join("vocab.txt"),
        ]
    }

    fn model_config(&self, mode: InputMode, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            mode,
            ..self.cfg.model.clone()
        }
    }

    /// Generates the corpora once per process and writes them under `data/`.
    pub fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            let hash = hash_json(&(
                self.cfg.train_corpus_config(),
                self.cfg.test_corpus_config(),
            ));
            let dir = self.data_dir();
            let data = prepare_data(&self.cfg)?;
            if !stage_matches(&dir, &hash) || self.data_files().iter().any(|p| !p.exists()) {
                self.say(format!(
                    "writing corpora: {} train / {} test pairs, vocabulary {}",
                    data.train.len(),
                    data.test.len(),
                    data.vocab.len()
                ));
                reset_dir(&dir)?;
                write_parallel(&data.train, &CorpusFiles::with_prefix(&dir.join("train")))?;
                write_parallel(&data.test, &CorpusFiles::with_prefix(&dir.join("test")))?;
                data.vocab.write(&dir.join("vocab.txt"))?;
                stamp(&dir, "data", &hash)?;
            }
            self.data = Some(data);
        }
        Ok(self.data.as_ref().expect("data prepared"))
    }

    fn data_checksums(&self) -> Result<BTreeMap<String, String>> {
        self.data_files()
            .iter()
            .map(|p| Ok((self.rel(p), hash_file(p)?)))
            .collect()
    }

    /// Runs `variant` and every stage it depends on.
    pub fn run(&mut self, variant: Variant, opts: &RunOptions) -> Result<VariantResult> {
        match variant {
            Variant::BaselineSen2Sen => self.baseline(InputMode::Sen2Sen, ContextMode::Prev),
            Variant::BaselineConcat => self.baseline(InputMode::Concat, ContextMode::Prev),
            Variant::ConcatRandomContext => self.baseline(InputMode::Concat, ContextMode::Random),
            v => self.finetune(v, opts),
        }
    }

    fn baseline_dir(&self, mode: InputMode, context: ContextMode) -> PathBuf {
        match context {
            ContextMode::Prev => self.out.join(mode.to_string()).join("baseline"),
            other => self.out.join(mode.to_string()).join(format!("{other}-context")),
        }
    }

    fn baseline_hash(&self, mode: InputMode, context: ContextMode) -> String {
        let c = &self.cfg;
        hash_json(&json!({
            "stage": "baseline",
            "seed": c.seed,
            "data": [c.train_corpus_config(), c.test_corpus_config()],
            "model": c.model,
            "mode": mode,
            "context": context,
            "train": c.train,
            "ckpt_every": c.ckpt_every,
            "average_last": c.average_last,
            "decode_max_len": c.decode_max_len,
            "inventory": self.inventory,
        }))
    }

    /// Trains a baseline, averages its trailing checkpoints and scores it on
    /// the test set.
    pub fn baseline(&mut self, mode: InputMode, context: ContextMode) -> Result<VariantResult> {
        let variant = match (mode, context) {
            (InputMode::Sen2Sen, ContextMode::Prev) => Variant::BaselineSen2Sen,
            (InputMode::Concat, ContextMode::Prev) => Variant::BaselineConcat,
            (InputMode::Concat, ContextMode::Random) => Variant::ConcatRandomContext,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no baseline for {mode} with {context} context"
                )))
            }
        };
        let dir = self.baseline_dir(mode, context);
        let hash = self.baseline_hash(mode, context);
        if stage_matches(&dir, &hash) {
            self.say(format!("{variant}: cached in {}", dir.display()));
            return Ok(VariantResult {
                variant,
                report: read_report(&dir)?,
                dir,
                subset_size: None,
            });
        }
        reset_dir(&dir)?;
        let seed = rng::derive(self.cfg.seed, &format!("baseline/{mode}/{context}"));
        let data = self.data()?.clone();
        let model = Model::init(self.model_config(mode, &data.vocab), seed)?;
        let spec = LossSpec::clm();
        let examples = encode_corpus(
            &data.train,
            &data.vocab,
            &model,
            &spec,
            &self.inventory.set(),
            context,
            seed,
        )?;
        self.say(format!(
            "{variant}: training {} steps on {} pairs",
            self.cfg.train.max_steps,
            examples.len()
        ));
        let hyper = self.cfg.train.clone();
        let mut trainer = Trainer::new(model, &hyper, seed)?;
        let mut sink = CheckpointSink::new(Some(dir.join("ckpt")), self.cfg.average_last);
        let log = train_steps(&mut trainer, &examples, &spec, self.cfg.ckpt_every, &mut sink)?;
        let averaged = average_checkpoints(&sink.checkpoints())?;
        let mut ck = Checkpoint::new(averaged, trainer.adam.step, seed);
        ck.meta = json!({
            "averaged_steps": sink.checkpoints().iter().map(|c| c.step).collect::<Vec<_>>(),
        });
        ck.save(&dir.join("model.ckpt"))?;
        write_atomic(&dir.join("train_log.json"), &to_json_bytes(&log)?)?;

        let report = self.score(&ck.model, &data, context, seed, &dir)?;
        self.say(format!("{variant}: {}", one_line(&report)));
        let inputs = self.data_checksums()?;
        self.finish_stage(&dir, variant, &hash, seed, inputs, json!({"mode": mode, "context": context}))?;
        Ok(VariantResult {
            variant,
            dir,
            report,
            subset_size: None,
        })
    }

    /// Translates the test set, writes `test.hyp` and the reports.
    fn score(
        &self,
        model: &Model,
        data: &Data,
        context: ContextMode,
        seed: u64,
        dir: &Path,
    ) -> Result<EvalReport> {
        let hyps = translate_corpus(
            model,
            &data.vocab,
            &data.test,
            context,
            rng::derive(seed, "test-context"),
            self.cfg.decode_max_len,
        )?;
        write_lines(&dir.join("test.hyp"), hyps.iter().map(|h| detokenize(h)))?;
        let report = EvalReport::compute(
            &hyps,
            &data.test.targets(),
            &self.inventory.set(),
            Smoothing::None,
        )?;
        write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
        write_atomic(&dir.join("report.txt"), report.to_string().as_bytes())?;
        Ok(report)
    }

    /// Writes the manifest and the stage stamp; the stamp goes last so an
    /// interrupted stage is recomputed.
    fn finish_stage(
        &self,
        dir: &Path,
        variant: impl fmt::Display,
        hash: &str,
        stage_seed: u64,
        inputs: BTreeMap<String, String>,
        extra: serde_json::Value,
    ) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for p in walk_files(dir)? {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "manifest.json" || name == "stage.json" {
                continue;
            }
            outputs.insert(self.rel(&p), hash_file(&p)?);
        }
        let manifest = json!({
            "variant": variant.to_string(),
            "config_hash": hash_json(&self.cfg),
            "stage_hash": hash,
            "seed": self.cfg.seed,
            "stage_seed": stage_seed,
            "options": extra,
            "config": self.cfg,
            "inputs": inputs,
            "outputs": outputs,
        });
        write_atomic(&dir.join("manifest.json"), &to_json_bytes(&manifest)?)?;
        stamp(dir, &variant.to_string(), hash)
    }

    fn extract_dir(&self, mode: InputMode) -> PathBuf {
        self.out.join(mode.to_string()).join("extract")
    }

    fn extract_hash(&self, mode: InputMode) -> String {
        hash_json(&json!({
            "stage": "extract",
            "baseline": self.baseline_hash(mode, ContextMode::Prev),
            "align": self.cfg.align,
            "extract": self.cfg.extract,
        }))
    }

    /// Translates the training corpus with the baseline, aligns the output to
    /// the references and keeps the pairs with a mistranslated pronoun.
    pub fn extract(&mut self, mode: InputMode) -> Result<ParallelCorpus> {
        let base = self.baseline(mode, ContextMode::Prev)?;
        let dir = self.extract_dir(mode);
        let hash = self.extract_hash(mode);
        if stage_matches(&dir, &hash) {
            self.say(format!("extract ({mode}): cached in {}", dir.display()));
            return read_subset(&dir.join("d_prn"));
        }
        reset_dir(&dir)?;
        let data = self.data()?.clone();
        let model = Checkpoint::load(&base.dir.join("model.ckpt"))?.model;
        self.say(format!("extract ({mode}): translating {} training pairs", data.train.len()));
        let seed = rng::derive(self.cfg.seed, &format!("extract/{mode}"));
        let hyps = translate_corpus(
            &model,
            &data.vocab,
            &data.train,
            ContextMode::Prev,
            seed,
            self.cfg.decode_max_len,
        )?;
        write_lines(&dir.join("train.hyp"), hyps.iter().map(|h| detokenize(h)))?;
        let (_, alignments) = align_corpus(&hyps, &data.train.targets(), &self.cfg.align)?;
        write_alignments(&dir.join("train.align"), &alignments)?;
        let (subset, records) = build_targeted_subset(
            &data.train,
            &hyps,
            &alignments,
            &self.inventory,
            &self.cfg.extract,
        )?;
        write_mismatches(&dir.join("mismatches.tsv"), &records)?;
        write_subset(&dir.join("d_prn"), &subset)?;
        let mut by_pronoun: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &records {
            *by_pronoun.entry(r.ref_pronoun.as_str()).or_default() += 1;
        }
        let summary = json!({
            "train_pairs": data.train.len(),
            "mismatches": records.len(),
            "subset_pairs": subset.len(),
            "mismatches_by_pronoun": by_pronoun,
        });
        write_atomic(&dir.join("summary.json"), &to_json_bytes(&summary)?)?;
        self.say(format!(
            "extract ({mode}): {} mismatches in {} pairs",
            records.len(),
            subset.len()
        ));
        let mut inputs = self.data_checksums()?;
        let ck = base.dir.join("model.ckpt");
        inputs.insert(self.rel(&ck), hash_file(&ck)?);
        self.finish_stage(&dir, "extract", &hash, seed, inputs, json!({"mode": mode}))?;
        Ok(subset)
    }

    /// Fine-tuning loss of a run: the configured spec with the run's
    /// overrides applied.
    pub fn finetune_spec(&self, opts: &RunOptions) -> LossSpec {
        let mut spec = self.cfg.loss;
        if let Some(k) = opts.loss {
            spec.kind = k;
        }
        if let Some(m) = opts.mask {
            spec.mask_policy = m;
        }
        spec
    }

    pub fn finetune_dir(&self, variant: Variant, opts: &RunOptions) -> PathBuf {
        let spec = self.finetune_spec(opts);
        let name = match spec.kind {
            LossKind::Clm => format!("{variant}-clm"),
            LossKind::HybridNll => format!("{variant}-nll-{}", mask_label(spec.mask_policy)),
            LossKind::HybridMm => format!("{variant}-mm-{}", mask_label(spec.mask_policy)),
        };
        self.out.join(opts.model.to_string()).join(name)
    }

    /// Fine-tunes the baseline of `opts.model` according to `variant`.
    pub fn finetune(&mut self, variant: Variant, opts: &RunOptions) -> Result<VariantResult> {
        if !variant.is_finetune() {
            return Err(Error::InvalidArgument(format!("{variant} is not a fine-tuning variant")));
        }
        let spec = self.finetune_spec(opts);
        spec.validate()?;
        let mode = opts.model;
        let base = self.baseline(mode, ContextMode::Prev)?;
        let needs_subset = variant != Variant::IncreasedTraining;
        let d_prn = if needs_subset {
            Some(self.extract(mode)?)
        } else {
            None
        };
        let dir = self.finetune_dir(variant, opts);
        let hash = hash_json(&json!({
            "stage": variant,
            "baseline": self.baseline_hash(mode, ContextMode::Prev),
            "extract": needs_subset.then(|| self.extract_hash(mode)),
            "loss": spec,
            "schedule": self.cfg.schedule,
            "train": self.cfg.train,
        }));
        if stage_matches(&dir, &hash) {
            self.say(format!("{variant}: cached in {}", dir.display()));
            let subset_size = match fs::read_to_string(dir.join("subset.json")) {
                Ok(s) => serde_json::from_str::<serde_json::Value>(&s)?["pairs"].as_u64().map(|n| n as usize),
                Err(_) => None,
            };
            return Ok(VariantResult {
                variant,
                report: read_report(&dir)?,
                dir,
                subset_size,
            });
        }
        reset_dir(&dir)?;
        let seed = rng::derive(self.cfg.seed, &format!("finetune/{mode}/{variant}"));
        let data = self.data()?.clone();
        let subset = match (variant, d_prn) {
            (Variant::FtRandomSubset, Some(d)) => {
                let r = sample_random_subset(&data.train, d.len(), rng::derive(seed, "d-rand"));
                write_subset(&dir.join("d_rand"), &r)?;
                Some(r)
            }
            (_, d) => d,
        };
        if let Some(s) = &subset {
            let info = json!({ "pairs": s.len() });
            write_atomic(&dir.join("subset.json"), &to_json_bytes(&info)?)?;
        }

        let base_ck = base.dir.join("model.ckpt");
        let model = Checkpoint::load(&base_ck)?.model;
        let pronouns = self.inventory.set();
        let full_spec = if variant == Variant::IncreasedTraining {
            spec
        } else {
            LossSpec::clm()
        };
        let full = encode_corpus(&data.train, &data.vocab, &model, &spec, &pronouns, ContextMode::Prev, seed)?;
        let sub = match &subset {
            Some(s) => encode_corpus(s, &data.vocab, &model, &spec, &pronouns, ContextMode::Prev, seed)?,
            None => Vec::new(),
        };
        let plan = variant.plan(self.cfg.schedule.total_epochs, self.cfg.schedule.upsample_factor);
        let plan_text: Vec<String> = plan.iter().map(ToString::to_string).collect();
        self.say(format!(
            "{variant}: {} loss, plan [{}], subset {} pairs",
            spec.kind,
            plan_text.join(","),
            sub.len()
        ));
        let hyper = self.cfg.train.clone();
        let mut trainer = Trainer::new(model, &hyper, seed)?;
        let mut sink = CheckpointSink::new(Some(dir.join("ckpt")), plan.len());
        let stats = run_plan(&mut trainer, &full, &sub, &plan, &spec, &full_spec, &mut sink)?;
        let epochs = sink.checkpoints();
        let tail = &epochs[epochs.len().saturating_sub(self.cfg.average_last)..];
        let averaged = average_checkpoints(tail)?;
        let mut final_ck = Checkpoint::new(averaged, trainer.adam.step, seed);
        final_ck.meta = json!({
            "epochs": plan.len(),
            "plan": plan_text,
            "averaged_epochs": tail.iter().map(|c| c.meta["epoch"].clone()).collect::<Vec<_>>(),
        });
        final_ck.save(&dir.join("model.ckpt"))?;
        write_atomic(&dir.join("train_log.json"), &to_json_bytes(&json!({ "passes": stats }))?)?;

        let report = self.score(&final_ck.model, &data, ContextMode::Prev, seed, &dir)?;
        self.say(format!("{variant}: {}", one_line(&report)));
        let mut inputs = self.data_checksums()?;
        inputs.insert(self.rel(&base_ck), hash_file(&base_ck)?);
        if needs_subset {
            for ext in ["src", "tgt", "idx", "ctx"] {
                let p = self.extract_dir(mode).join(format!("d_prn.{ext}"));
                inputs.insert(self.rel(&p), hash_file(&p)?);
            }
        }
        let extra = json!({
            "mode": mode,
            "loss": spec.kind,
            "mask": spec.mask_policy,
            "plan": plan_text,
        });
        self.finish_stage(&dir, variant, &hash, seed, inputs, extra)?;
        Ok(VariantResult {
            variant,
            dir,
            report,
            subset_size: subset.map(|s| s.len()),
        })
    }
}

fn mask_label(m: MaskPolicy) -> &'static str {
    match m {
        MaskPolicy::AllTokens => "all",
        MaskPolicy::PronounOnly => "pronoun",
    }
}

fn one_line(r: &EvalReport) -> String {
    format!(
        "BLEU {:.2}, pronoun P/R/F1 {:.2}/{:.2}/{:.2}",
        r.bleu,
        100.0 * r.macro_precision,
        100.0 * r.macro_recall,
        100.0 * r.macro_f1
    )
}

fn to_json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn read_report(dir: &Path) -> Result<EvalReport> {
    let p = dir.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn stage_matches(dir: &Path, hash: &str) -> bool {
    fs::read_to_string(dir.join("stage.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<StageStamp>(&t).ok())
        .is_some_and(|s| s.hash == hash)
}

fn stamp(dir: &Path, stage: &str, hash: &str) -> Result<()> {
    let s = StageStamp {
        stage: stage.to_string(),
        hash: hash.to_string(),
    };
    write_atomic(&dir.join("stage.json"), &to_json_bytes(&s)?)
}

/// Removes stale outputs of a stage before it is recomputed.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Files under `dir`, recursively, in sorted order.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a file of one tokenized sentence per line.
pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| crate::corpus::tokenize(l))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.corpus.num_docs = 12;
        c.corpus.sents_per_doc = 6;
        c.corpus.content_vocab = 10;
        c.corpus.noun_genders.masc = 3;
        c.corpus.noun_genders.fem = 3;
        c.corpus.noun_genders.neut = 3;
        c.test_docs = 3;
        c.model.d_model = 16;
        c.model.heads = 2;
        c.model.enc_layers = 1;
        c.model.dec_layers = 1;
        c.model.ffn_dim = 32;
        c.train.max_steps = 12;
        c.train.warmup_steps = 4;
        c.train.batch_tokens = 128;
        c.ckpt_every = 4;
        c.average_last = 2;
        c.schedule.total_epochs = 3;
        c
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("ft-alt-3x".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_plans() {
        let s = |v: Variant| {
            v.plan(9, 2)
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        assert_eq!(s(Variant::FtAlt2x), "P,F2,P,F2,P,F2,P,F2,P");
        assert_eq!(s(Variant::FtAlt1x), "P,F1,P,F1,P,F1,P,F1,P");
        assert_eq!(s(Variant::FtSubsetOnly), "P,P,P,P,P,P,P,P,P");
        assert_eq!(s(Variant::FtShuffled), "M,M,M,M,M,M,M,M,M");
        assert_eq!(s(Variant::IncreasedTraining), "F1,F1,F1,F1,F1,F1,F1,F1,F1");
        assert!(Variant::BaselineConcat.plan(9, 2).is_empty());
    }

    #[test]
    fn test_set_is_disjoint_from_train() {
        let cfg = tiny_config();
        let d = prepare_data(&cfg).unwrap();
        assert_eq!(d.test.len(), 3 * 6);
        assert_ne!(d.train.pairs[..6], d.test.pairs[..6]);
    }

    #[test]
    fn pipeline_runs_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Experiment::new(tiny_config(), dir.path()).unwrap();
        let opts = RunOptions {
            model: InputMode::Concat,
            loss: Some(LossKind::HybridMm),
            mask: Some(MaskPolicy::AllTokens),
        };
        let r = e.run(Variant::FtAlt2x, &opts).unwrap();
        assert!(r.dir.ends_with("concat/ft-alt-2x-mm-all"));
        for f in ["model.ckpt", "report.json", "test.hyp", "manifest.json", "ckpt/epoch-3"] {
            assert!(r.dir.join(f).exists(), "{f}");
        }
        assert!(dir.path().join("concat/extract/d_prn.src").exists());
        let manifest = fs::read_to_string(r.dir.join("manifest.json")).unwrap();
        assert!(manifest.contains("\"data/train.src\""));
        assert!(!manifest.contains(&dir.path().to_string_lossy().to_string()));
        let stamp_before = fs::read(r.dir.join("model.ckpt")).unwrap();
        let again = e.run(Variant::FtAlt2x, &opts).unwrap();
        assert_eq!(again.report, r.report);
        assert_eq!(fs::read(r.dir.join("model.ckpt")).unwrap(), stamp_before);
    }
}
