//! `key = value` configuration files.
//!
//! Keys are grouped by section prefix: `corpus.*`, `model.*`, `train.*`,
//! `loss.*`, `schedule.*`, `align.*`, `extract.*`, `experiment.*`.
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::Ibm1Config;
use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::extract::ExtractOptions;
use crate::loss::{LossKind, LossSpec, MaskPolicy};
use crate::model::ModelConfig;
use crate::trainer::{ScheduleSpec, TrainHyper, AVERAGE_LAST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Top-level seed; every other seed, including the corpus seed, is
    /// derived from it.
    pub seed: u64,
    pub corpus: SyntheticConfig,
    /// Documents in the held-out test set.
    pub test_docs: usize,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub loss: LossSpec,
    pub schedule: ScheduleSpec,
    pub align: Ibm1Config,
    pub extract: ExtractOptions,
    /// Baseline checkpoint interval in updates.
    pub ckpt_every: u64,
    /// Trailing checkpoints averaged into the evaluated model.
    pub average_last: usize,
    /// Decoding length limit.
    pub decode_max_len: usize,
    /// Optional pronoun inventory file; the bundled list is used otherwise.
    pub inventory: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            corpus: SyntheticConfig::default(),
            test_docs: 50,
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            loss: LossSpec::hybrid(LossKind::HybridNll, MaskPolicy::AllTokens),
            schedule: ScheduleSpec::default(),
            align: Ibm1Config::default(),
            extract: ExtractOptions::default(),
            ckpt_every: 100,
            average_last: 10,
            decode_max_len: 40,
            inventory: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("bad value '{value}' for {key}: expected true or false")),
    }
}

/// Every recognised key, for documentation and error messages.
pub const KEYS: &[&str] = &[
    "experiment.seed",
    "experiment.test_docs",
    "experiment.ckpt_every",
    "experiment.average_last",
    "experiment.decode_max_len",
    "experiment.inventory",
    "corpus.num_docs",
    "corpus.sents_per_doc",
    "corpus.content_vocab",
    "corpus.nouns_masc",
    "corpus.nouns_fem",
    "corpus.nouns_neut",
    "corpus.cross_sentence_pronoun_ratio",
    "corpus.pronoun_density",
    "corpus.word_order_shuffle",
    "corpus.noun_zipf",
    "model.d_model",
    "model.heads",
    "model.enc_layers",
    "model.dec_layers",
    "model.ffn_dim",
    "model.dropout",
    "model.max_len",
    "train.base_lr",
    "train.warmup_init_lr",
    "train.warmup_steps",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.label_smoothing",
    "train.clip_norm",
    "train.batch_tokens",
    "train.max_steps",
    "loss.kind",
    "loss.lambda",
    "loss.tau",
    "loss.mu",
    "loss.mask_policy",
    "loss.negative_policy",
    "schedule.total_epochs",
    "schedule.upsample_factor",
    "align.iterations",
    "align.null_weight",
    "extract.unaligned_is_mismatch",
];

impl ExperimentConfig {
    /// Sets one key; the error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "experiment.seed" => self.seed = parse(key, v)?,
            "experiment.test_docs" => self.test_docs = parse(key, v)?,
            "experiment.ckpt_every" => self.ckpt_every = parse(key, v)?,
            "experiment.average_last" => self.average_last = parse(key, v)?,
            "experiment.decode_max_len" => self.decode_max_len = parse(key, v)?,
            "experiment.inventory" => self.inventory = Some(PathBuf::from(v)),
            "corpus.num_docs" => self.corpus.num_docs = parse(key, v)?,
            "corpus.sents_per_doc" => self.corpus.sents_per_doc = parse(key, v)?,
            "corpus.content_vocab" => self.corpus.content_vocab = parse(key, v)?,
            "corpus.nouns_masc" => self.corpus.noun_genders.masc = parse(key, v)?,
            "corpus.nouns_fem" => self.corpus.noun_genders.fem = parse(key, v)?,
            "corpus.nouns_neut" => self.corpus.noun_genders.neut = parse(key, v)?,
            "corpus.cross_sentence_pronoun_ratio" => {
                self.corpus.cross_sentence_pronoun_ratio = parse(key, v)?
            }
            "corpus.pronoun_density" => self.corpus.pronoun_density = parse(key, v)?,
            "corpus.word_order_shuffle" => self.corpus.word_order_shuffle = parse(key, v)?,
            "corpus.noun_zipf" => self.corpus.noun_zipf = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "train.base_lr" => self.train.base_lr = parse(key, v)?,
            "train.warmup_init_lr" => self.train.warmup_init_lr = parse(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.label_smoothing" => self.train.label_smoothing = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.batch_tokens" => self.train.batch_tokens = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse(key, v)?,
            "loss.kind" => self.loss.kind = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.mu" => self.loss.mu = parse(key, v)?,
            "loss.mask_policy" => self.loss.mask_policy = parse(key, v)?,
            "loss.negative_policy" => self.loss.negative_policy = parse(key, v)?,
            "schedule.total_epochs" => self.schedule.total_epochs = parse(key, v)?,
            "schedule.upsample_factor" => self.schedule.upsample_factor = parse(key, v)?,
            "align.iterations" => self.align.iterations = parse(key, v)?,
            "align.null_weight" => self.align.null_weight = parse(key, v)?,
            "extract.unaligned_is_mismatch" => {
                self.extract.unaligned_is_mismatch = parse_bool(key, v)?
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got '{line}'")))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section. The model vocabulary size is filled in from
    /// the data, so it is not checked here.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let model = ModelConfig {
            vocab_size: self.model.vocab_size.max(6),
            ..self.model.clone()
        };
        model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.test_docs == 0 {
            return Err(Error::Config("test_docs must be positive".into()));
        }
        if self.ckpt_every == 0 {
            return Err(Error::Config("ckpt_every must be positive".into()));
        }
        if !(1..=AVERAGE_LAST).contains(&self.average_last) {
            return Err(Error::Config(format!(
                "average_last must be in 1..={AVERAGE_LAST}, got {}",
                self.average_last
            )));
        }
        if self.decode_max_len == 0 {
            return Err(Error::Config("decode_max_len must be positive".into()));
        }
        if self.align.iterations == 0 {
            return Err(Error::Config("align.iterations must be positive".into()));
        }
        Ok(())
    }

    /// Renders the config as a `key = value` file that parses back to it.
    pub fn to_text(&self) -> String {
        let mut probe = ExperimentConfig::default();
        let mut out = String::new();
        let json = serde_json::to_value(self).expect("config serializes");
        for key in KEYS {
            let value = lookup(&json, key);
            if let Some(v) = value {
                if probe.set(key, &v).is_ok() {
                    out.push_str(&format!("{key} = {v}\n"));
                }
            }
        }
        out
    }
}

fn lookup(json: &serde_json::Value, key: &str) -> Option<String> {
    let (section, field) = key.split_once('.')?;
    let v = match section {
        "experiment" => json.get(field)?,
        "corpus" => match field {
            "nouns_masc" => json.get("corpus")?.get("noun_genders")?.get("masc")?,
            "nouns_fem" => json.get("corpus")?.get("noun_genders")?.get("fem")?,
            "nouns_neut" => json.get("corpus")?.get("noun_genders")?.get("neut")?,
            _ => json.get("corpus")?.get(field)?,
        },
        other => json.get(other)?.get(field)?,
    };
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

/// Hex SHA-256 of a serializable value's JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
