use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hybridmt::align::{align_corpus, read_alignments, write_alignments, Ibm1Config};
use hybridmt::config::ExperimentConfig;
use hybridmt::corpus::{
    build_vocab, detokenize, generate_synthetic, read_parallel, write_atomic, write_gold,
    write_lines, write_parallel, CorpusFiles, ParallelCorpus, Side, Vocab,
};
use hybridmt::eval::{EvalReport, Smoothing};
use hybridmt::experiment::{read_tokenized, translate_corpus, Experiment, RunOptions, Variant};
use hybridmt::extract::{
    build_targeted_subset, read_subset, write_mismatches, write_subset, ExtractOptions,
    PronounInventory,
};
use hybridmt::gradcheck;
use hybridmt::loss::{LossKind, LossSpec, MaskPolicy};
use hybridmt::model::checkpoint::Checkpoint;
use hybridmt::model::{InputMode, Model, ModelConfig};
use hybridmt::rng;
use hybridmt::trainer::{
    average_checkpoints, encode_corpus, run_schedule, train_steps, CheckpointSink, ContextMode,
    Trainer,
};
use hybridmt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hybridmt",
    version,
    about = "Pronoun-targeted fine-tuning of small transformer translation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set train.max_steps=200`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, p)?;
        }
        for (i, o) in self.overrides.iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got '{o}'"))
            })?;
            cfg.set(k.trim(), v).map_err(|msg| Error::Parse {
                path: PathBuf::from("--set"),
                line: i + 1,
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpora and their vocabulary.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (train.*, test.*, vocab.txt, gold files)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline model from scratch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training corpus prefix (PREFIX.src, PREFIX.tgt, optional PREFIX.docs)
        #[arg(long)]
        train: PathBuf,
        /// Vocabulary file; built from the training corpus when omitted
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "sen2sen")]
        mode: InputMode,
        /// Context of Concat inputs during training
        #[arg(long, default_value = "prev")]
        context: ContextMode,
        /// Output directory (ckpt/step-N, model.ckpt, vocab.txt, train_log.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a corpus with greedy decoding.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus prefix; a subset written by extract-prn also works
        #[arg(long)]
        input: PathBuf,
        /// Previous-sentence context for Concat models
        #[arg(long, default_value = "prev")]
        context: ContextMode,
        /// Seed for random context
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        /// Output file, one detokenized hypothesis per line
        #[arg(long)]
        out: PathBuf,
    },
    /// Align hypotheses to references with IBM Model 1 (Pharaoh output).
    Align {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = Ibm1Config::default().iterations)]
        iterations: usize,
        #[arg(long, default_value_t = Ibm1Config::default().null_weight)]
        null_weight: f64,
        /// Optional translation-table dump (TSV)
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the pronoun-targeted subset from aligned translations.
    ExtractPrn {
        /// Corpus prefix the hypotheses were translated from
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        /// Pronoun inventory; the bundled list is used when omitted
        #[arg(long)]
        inventory: Option<PathBuf>,
        /// Ignore reference pronouns that have no aligned hypothesis token
        #[arg(long)]
        skip_unaligned: bool,
        /// Output prefix (PREFIX.src/.tgt/.idx/.ctx and PREFIX.mismatches.tsv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model with the alternating subset/full schedule.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Full training corpus prefix
        #[arg(long)]
        train: PathBuf,
        /// Subset prefix written by extract-prn
        #[arg(long)]
        subset: PathBuf,
        #[arg(long, default_value = "nll")]
        loss: LossKind,
        #[arg(long, default_value = "all")]
        mask: MaskPolicy,
        /// Output directory (ckpt/epoch-N, model.ckpt, train_log.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses: BLEU and pronoun precision/recall/F1.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        smoothing: Smoothing,
        /// Also write the JSON report here
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Parameter coordinates sampled per check
        #[arg(long, default_value_t = 30)]
        coords: usize,
    },
    /// Run a named experiment variant and every stage it depends on.
    Experiment {
        variant: Variant,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root shared by all variants
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Baseline architecture fine-tuning starts from
        #[arg(long, default_value = "sen2sen")]
        model: InputMode,
        /// Fine-tuning loss (clm, nll or mm); default from `loss.kind`
        #[arg(long)]
        loss: Option<LossKind>,
        /// Mask policy (all or pronoun); default from `loss.mask_policy`
        #[arg(long)]
        mask: Option<MaskPolicy>,
        /// Print the effective config and exit
        #[arg(long)]
        dump_config: bool,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("input file not found: {}", p.display())))
    }
}

fn require_corpus(prefix: &Path) -> Result<CorpusFiles> {
    let files = CorpusFiles::with_prefix(prefix);
    require_file(&files.src)?;
    require_file(&files.tgt)?;
    Ok(files)
}

/// Reads a full corpus, or a detached subset when a `.ctx` file is present.
fn read_corpus(prefix: &Path) -> Result<ParallelCorpus> {
    let files = require_corpus(prefix)?;
    if hybridmt::corpus::suffixed(prefix, "ctx").exists() {
        read_subset(prefix)
    } else {
        read_parallel(&files)
    }
}

fn load_inventory(p: &Option<PathBuf>) -> Result<PronounInventory> {
    match p {
        Some(p) => {
            require_file(p)?;
            PronounInventory::read(p)
        }
        None => Ok(PronounInventory::builtin()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    write_atomic(path, &b)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenCorpus { cfg, out } => {
            let cfg = cfg.load()?;
            for (name, sc) in [
                ("train", cfg.train_corpus_config()),
                ("test", cfg.test_corpus_config()),
            ] {
                let g = generate_synthetic(&sc)?;
                write_parallel(&g.corpus, &CorpusFiles::with_prefix(&out.join(name)))?;
                write_gold(&g.gold, &out.join(format!("{name}.gold")))?;
                if name == "train" {
                    build_vocab(&g.corpus, Side::Both)?.write(&out.join("vocab.txt"))?;
                }
                println!("{name}: {} pairs, {} pronouns", g.corpus.len(), g.gold.len());
            }
        }
        Command::Train {
            cfg,
            train,
            vocab,
            mode,
            context,
            out,
        } => {
            let cfg = cfg.load()?;
            let files = require_corpus(&train)?;
            if let Some(v) = &vocab {
                require_file(v)?;
            }
            let corpus = read_parallel(&files)?;
            let vocab = match vocab {
                Some(v) => Vocab::read(&v)?,
                None => build_vocab(&corpus, Side::Both)?,
            };
            vocab.write(&out.join("vocab.txt"))?;
            let seed = rng::derive(cfg.seed, &format!("baseline/{mode}/{context}"));
            let mc = ModelConfig {
                vocab_size: vocab.len(),
                mode,
                ..cfg.model.clone()
            };
            let model = Model::init(mc, seed)?;
            let spec = LossSpec::clm();
            let inv = cfg.inventory()?;
            let examples = encode_corpus(&corpus, &vocab, &model, &spec, &inv.set(), context, seed)?;
            let mut trainer = Trainer::new(model, &cfg.train, seed)?;
            let mut sink = CheckpointSink::new(Some(out.join("ckpt")), cfg.average_last);
            let log = train_steps(&mut trainer, &examples, &spec, cfg.ckpt_every, &mut sink)?;
            let avg = average_checkpoints(&sink.checkpoints())?;
            Checkpoint::new(avg, trainer.adam.step, seed).save(&out.join("model.ckpt"))?;
            write_json(&out.join("train_log.json"), &log)?;
            let last = log.epochs.last().map(|e| e.mean.total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, last-epoch loss {last:.4}; wrote {}",
                trainer.adam.step,
                out.join("model.ckpt").display()
            );
        }
        Command::Translate {
            model,
            vocab,
            input,
            context,
            seed,
            max_len,
            out,
        } => {
            require_file(&model)?;
            require_file(&vocab)?;
            let corpus = read_corpus(&input)?;
            let m = Checkpoint::load(&model)?.model;
            let v = Vocab::read(&vocab)?;
            if v.len() != m.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary has {} entries but the model expects {}",
                    v.len(),
                    m.config.vocab_size
                )));
            }
            let hyps = translate_corpus(&m, &v, &corpus, context, seed, max_len)?;
            write_lines(&out, hyps.iter().map(|h| detokenize(h)))?;
            println!("translated {} sentences", hyps.len());
        }
        Command::Align {
            hyp,
            reference,
            iterations,
            null_weight,
            table,
            out,
        } => {
            require_file(&hyp)?;
            require_file(&reference)?;
            let cfg = Ibm1Config {
                iterations,
                null_weight,
            };
            if iterations == 0 || !(null_weight >= 0.0 && null_weight.is_finite()) {
                return Err(Error::Config(
                    "iterations must be positive and null_weight non-negative".into(),
                ));
            }
            let (t, al) = align_corpus(&read_tokenized(&hyp)?, &read_tokenized(&reference)?, &cfg)?;
            write_alignments(&out, &al)?;
            if let Some(p) = table {
                t.write_tsv(&p)?;
            }
            println!("aligned {} sentence pairs", al.len());
        }
        Command::ExtractPrn {
            corpus,
            hyp,
            alignments,
            inventory,
            skip_unaligned,
            out,
        } => {
            require_file(&hyp)?;
            require_file(&alignments)?;
            let c = read_corpus(&corpus)?;
            let inv = load_inventory(&inventory)?;
            let opts = ExtractOptions {
                unaligned_is_mismatch: !skip_unaligned,
            };
            let hyps = read_tokenized(&hyp)?;
            let al = read_alignments(&alignments)?;
            let (subset, records) = build_targeted_subset(&c, &hyps, &al, &inv, &opts)?;
            write_subset(&out, &subset)?;
            write_mismatches(&hybridmt::corpus::suffixed(&out, "mismatches.tsv"), &records)?;
            println!(
                "{} pronoun mismatches in {} of {} sentences",
                records.len(),
                subset.len(),
                c.len()
            );
        }
        Command::Finetune {
            cfg,
            model,
            vocab,
            train,
            subset,
            loss,
            mask,
            out,
        } => {
            let cfg = cfg.load()?;
            require_file(&model)?;
            require_file(&vocab)?;
            let full = read_corpus(&train)?;
            let sub = read_corpus(&subset)?;
            if loss == LossKind::Clm {
                return Err(Error::Config("finetune expects --loss mm or nll".into()));
            }
            let spec = LossSpec {
                kind: loss,
                mask_policy: mask,
                ..cfg.loss
            };
            spec.validate()?;
            let m = Checkpoint::load(&model)?.model;
            let v = Vocab::read(&vocab)?;
            let inv = cfg.inventory()?;
            let seed = rng::derive(cfg.seed, &format!("finetune/{}/ft-alt-2x", m.config.mode));
            let fe = encode_corpus(&full, &v, &m, &spec, &inv.set(), ContextMode::Prev, seed)?;
            let se = encode_corpus(&sub, &v, &m, &spec, &inv.set(), ContextMode::Prev, seed)?;
            let mut trainer = Trainer::new(m, &cfg.train, seed)?;
            let mut sink = CheckpointSink::new(Some(out.join("ckpt")), cfg.schedule.total_epochs);
            let stats = run_schedule(&mut trainer, &fe, &se, &cfg.schedule, &spec, &mut sink)?;
            let last = &sink.kept.last().expect("one checkpoint per epoch").1;
            Checkpoint::new(last.model.clone(), last.step, seed).save(&out.join("model.ckpt"))?;
            write_json(&out.join("train_log.json"), &json!({ "passes": stats }))?;
            println!(
                "fine-tuned for {} epochs ({} updates); wrote {}",
                cfg.schedule.total_epochs,
                trainer.adam.step,
                out.join("model.ckpt").display()
            );
        }
        Command::Evaluate {
            hyp,
            reference,
            inventory,
            smoothing,
            json,
        } => {
            require_file(&hyp)?;
            require_file(&reference)?;
            let inv = load_inventory(&inventory)?;
            let report = EvalReport::compute(
                &read_tokenized(&hyp)?,
                &read_tokenized(&reference)?,
                &inv.set(),
                smoothing,
            )?;
            print!("{report}");
            println!("{}", serde_json::to_string(&report)?);
            if let Some(p) = json {
                write_atomic(&p, report.to_json().as_bytes())?;
            }
        }
        Command::Gradcheck {
            seed,
            seeds,
            coords,
        } => {
            if seeds == 0 || coords == 0 {
                return Err(Error::Config("seeds and coords must be positive".into()));
            }
            let report = gradcheck::run_suite(seed, seeds, Some(coords))?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Experiment {
            variant,
            cfg,
            out,
            model,
            loss,
            mask,
            dump_config,
            quiet,
        } => {
            let cfg = cfg.load()?;
            if dump_config {
                print!("{}", cfg.to_text());
                return Ok(ExitCode::SUCCESS);
            }
            let mut e = Experiment::new(cfg, &out)?;
            e.verbose = !quiet;
            let opts = RunOptions { model, loss, mask };
            let r = e.run(variant, &opts)?;
            print!("{}", r.report);
            println!("outputs: {}", r.dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
