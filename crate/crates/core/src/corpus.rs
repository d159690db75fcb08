//! Parallel corpora, vocabularies, and the synthetic pronoun translation task.
//!
//! The synthetic language pair is a dictionary translation with one twist: the
//! source has a single ambiguous pronoun (`pro`) whose target rendering is
//! `he`, `she` or `it` depending on the gender of its antecedent, the most
//! recent preceding noun. The antecedent sits either in the same sentence or in
//! the previous one, so a sentence-level model can only guess on the latter.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];
pub const SEP_TOKEN: &str = "<sep>";

/// Ambiguous source pronoun.
pub const SRC_PRONOUN: &str = "pro";
/// Unambiguous plural source pronoun, always rendered as `they`.
pub const SRC_PLURAL: &str = "pl";
const SRC_DET: &str = "d";
const TGT_DET: &str = "the";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn new(src: &str, tgt: &str) -> Self {
        SentencePair {
            src: tokenize(src),
            tgt: tokenize(tgt),
        }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Document-ordered sentence pairs.
///
/// A full corpus derives each sentence's previous context from the document
/// boundaries. Subsets detach sentences from their documents, so they carry
/// the previous source sentence explicitly along with the original index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    /// Sorted 0-based indices where documents start; always contains 0 when
    /// the corpus is non-empty.
    pub doc_starts: Vec<usize>,
    pub detached_context: Option<Vec<Option<Vec<String>>>>,
    pub origin: Option<Vec<usize>>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, doc_starts: Vec<usize>) -> Result<Self> {
        let c = ParallelCorpus {
            pairs,
            doc_starts,
            detached_context: None,
            origin: None,
        };
        c.validate()?;
        Ok(c)
    }

    /// A single-document corpus.
    pub fn single_document(pairs: Vec<SentencePair>) -> Self {
        let doc_starts = if pairs.is_empty() { vec![] } else { vec![0] };
        ParallelCorpus {
            pairs,
            doc_starts,
            detached_context: None,
            origin: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pairs.len();
        if n > 0 && self.doc_starts.first() != Some(&0) {
            return Err(Error::InvalidArgument(
                "document boundaries must start at 0".into(),
            ));
        }
        for w in self.doc_starts.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(
                    "document boundaries must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.doc_starts.last() {
            if last >= n {
                return Err(Error::InvalidArgument(format!(
                    "document boundary {last} beyond corpus of {n} pairs"
                )));
            }
        }
        if let Some(ctx) = &self.detached_context {
            if ctx.len() != n {
                return Err(Error::Dimension("detached context length".into()));
            }
        }
        if let Some(o) = &self.origin {
            if o.len() != n {
                return Err(Error::Dimension("origin index length".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_doc_start(&self, i: usize) -> bool {
        self.doc_starts.binary_search(&i).is_ok()
    }

    /// Source sentence preceding pair `i` in its document, if any.
    pub fn previous_source(&self, i: usize) -> Option<&[String]> {
        if let Some(ctx) = &self.detached_context {
            return ctx[i].as_deref();
        }
        if i == 0 || self.is_doc_start(i) {
            None
        } else {
            Some(&self.pairs[i - 1].src)
        }
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.tgt.clone()).collect()
    }

    /// Pairs at `indices` (ascending) as a detached subset.
    pub fn subset(&self, indices: &[usize]) -> ParallelCorpus {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let ctx = indices
            .iter()
            .map(|&i| self.previous_source(i).map(<[String]>::to_vec))
            .collect();
        let origin = indices
            .iter()
            .map(|&i| self.origin.as_ref().map_or(i, |o| o[i]))
            .collect();
        ParallelCorpus {
            pairs,
            doc_starts: if indices.is_empty() { vec![] } else { vec![0] },
            detached_context: Some(ctx),
            origin: Some(origin),
        }
    }

    /// Concatenation of two corpora; the result is detached.
    pub fn concat(&self, other: &ParallelCorpus) -> ParallelCorpus {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        let ctx = (0..self.len())
            .map(|i| self.previous_source(i).map(<[String]>::to_vec))
            .chain((0..other.len()).map(|i| other.previous_source(i).map(<[String]>::to_vec)))
            .collect();
        let origin = (0..self.len())
            .map(|i| self.origin.as_ref().map_or(i, |o| o[i]))
            .chain((0..other.len()).map(|i| other.origin.as_ref().map_or(i, |o| o[i])))
            .collect();
        ParallelCorpus {
            doc_starts: if pairs.is_empty() { vec![] } else { vec![0] },
            pairs,
            detached_context: Some(ctx),
            origin: Some(origin),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Masc,
    Fem,
    Neut,
}

impl Gender {
    pub fn pronoun(self) -> &'static str {
        match self {
            Gender::Masc => "he",
            Gender::Fem => "she",
            Gender::Neut => "it",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NounGenders {
    pub masc: usize,
    pub fem: usize,
    pub neut: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_docs: usize,
    pub sents_per_doc: usize,
    /// Source content words (verbs and adjuncts) with a 1:1 target dictionary.
    pub content_vocab: usize,
    pub noun_genders: NounGenders,
    pub cross_sentence_pronoun_ratio: f64,
    /// Probability that a sentence contains the ambiguous pronoun.
    pub pronoun_density: f64,
    /// Probability that a source sentence moves its verb to the end.
    pub word_order_shuffle: f64,
    /// Zipf exponent of noun frequencies (0 = uniform).
    pub noun_zipf: f64,
    pub seed: u64,
    /// Index of the first generated document; disjoint ranges give disjoint
    /// corpora over the same lexicon.
    pub first_doc: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_docs: 500,
            sents_per_doc: 40,
            content_vocab: 120,
            noun_genders: NounGenders {
                masc: 200,
                fem: 200,
                neut: 200,
            },
            cross_sentence_pronoun_ratio: 0.5,
            pronoun_density: 0.6,
            word_order_shuffle: 0.3,
            noun_zipf: 1.2,
            seed: 1,
            first_doc: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.noun_genders;
        if self.content_vocab < 2 {
            return Err(Error::Config("content_vocab must be at least 2".into()));
        }
        if g.masc + g.fem + g.neut == 0 {
            return Err(Error::Config("at least one noun is required".into()));
        }
        if self.num_docs == 0 || self.sents_per_doc == 0 {
            return Err(Error::Config("num_docs and sents_per_doc must be positive".into()));
        }
        for (name, v) in [
            ("cross_sentence_pronoun_ratio", self.cross_sentence_pronoun_ratio),
            ("pronoun_density", self.pronoun_density),
            ("word_order_shuffle", self.word_order_shuffle),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if !(self.noun_zipf >= 0.0) {
            return Err(Error::Config("noun_zipf must be non-negative".into()));
        }
        Ok(())
    }
}

/// Word inventory of the synthetic language pair, fixed by the seed.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub verbs: Vec<(String, String)>,
    pub adjuncts: Vec<(String, String)>,
    /// (source, target, gender), in frequency-rank order.
    pub nouns: Vec<(String, String, Gender)>,
    noun_cdf: Vec<f64>,
}

impl Lexicon {
    pub fn new(cfg: &SyntheticConfig) -> Self {
        let n_verbs = (cfg.content_vocab / 4).max(1);
        let content: Vec<(String, String)> = (0..cfg.content_vocab)
            .map(|k| (format!("q{k}"), format!("w{k}")))
            .collect();
        let (verbs, adjuncts) = content.split_at(n_verbs);

        let g = &cfg.noun_genders;
        let mut genders: Vec<Gender> = std::iter::repeat(Gender::Masc)
            .take(g.masc)
            .chain(std::iter::repeat(Gender::Fem).take(g.fem))
            .chain(std::iter::repeat(Gender::Neut).take(g.neut))
            .collect();
        genders.shuffle(&mut rng::rng(rng::derive(cfg.seed, "lexicon")));
        let nouns: Vec<(String, String, Gender)> = genders
            .into_iter()
            .enumerate()
            .map(|(k, g)| (format!("n{k}"), format!("o{k}"), g))
            .collect();

        let weights: Vec<f64> = (0..nouns.len())
            .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.noun_zipf))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let noun_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Lexicon {
            verbs: verbs.to_vec(),
            adjuncts: adjuncts.to_vec(),
            nouns,
            noun_cdf,
        }
    }

    fn sample_noun(&self, r: &mut rng::Rng) -> usize {
        let u: f64 = r.gen();
        self.noun_cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.nouns.len() - 1)
    }

    /// Gender of a source noun token.
    pub fn source_gender(&self, token: &str) -> Option<Gender> {
        self.nouns.iter().find(|n| n.0 == token).map(|n| n.2)
    }

    /// Source-to-target dictionary for every non-pronoun word.
    pub fn dictionary(&self) -> HashMap<String, String> {
        let mut d: HashMap<String, String> = self
            .verbs
            .iter()
            .chain(&self.adjuncts)
            .cloned()
            .collect();
        d.extend(self.nouns.iter().map(|n| (n.0.clone(), n.1.clone())));
        d.insert(SRC_DET.into(), TGT_DET.into());
        d.insert(SRC_PLURAL.into(), "they".into());
        d
    }
}

/// One ambiguous-pronoun occurrence in generated output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounGold {
    pub line: usize,
    /// Target token index of the pronoun.
    pub position: usize,
    pub pronoun: String,
    pub antecedent_line: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: ParallelCorpus,
    pub gold: Vec<PronounGold>,
}

enum Slot {
    Noun(usize),
    Pronoun,
    Plural,
}

struct Sentence {
    src: Vec<String>,
    tgt: Vec<String>,
    /// (target position, antecedent is in the previous sentence)
    pronoun: Option<(usize, bool)>,
    gender: Option<Gender>,
    last_noun: Option<usize>,
}

fn realize(
    lex: &Lexicon,
    r: &mut rng::Rng,
    subject: Slot,
    object: Option<Slot>,
    antecedent: Option<usize>,
    shuffle: f64,
) -> Sentence {
    let mut src_np: Vec<Vec<String>> = Vec::new();
    let mut tgt_np: Vec<Vec<String>> = Vec::new();
    let mut pronoun_slot = None;
    let mut last_noun = None;
    for (slot_index, slot) in std::iter::once(subject).chain(object).enumerate() {
        match slot {
            Slot::Noun(k) => {
                src_np.push(vec![SRC_DET.into(), lex.nouns[k].0.clone()]);
                tgt_np.push(vec![TGT_DET.into(), lex.nouns[k].1.clone()]);
                last_noun = Some(k);
            }
            Slot::Pronoun => {
                let g = lex.nouns[antecedent.expect("pronoun needs an antecedent")].2;
                src_np.push(vec![SRC_PRONOUN.into()]);
                tgt_np.push(vec![g.pronoun().into()]);
                pronoun_slot = Some(slot_index);
            }
            Slot::Plural => {
                src_np.push(vec![SRC_PLURAL.into()]);
                tgt_np.push(vec!["they".into()]);
            }
        }
    }
    let verb = &lex.verbs[r.gen_range(0..lex.verbs.len())];
    let n_adj = r.gen_range(0..=2);
    let adjuncts: Vec<&(String, String)> = (0..n_adj)
        .map(|_| &lex.adjuncts[r.gen_range(0..lex.adjuncts.len())])
        .collect();
    let verb_final = r.gen_bool(shuffle);

    // target: SUBJ VERB [OBJ] ADJ*
    let mut tgt = tgt_np[0].clone();
    tgt.push(verb.1.clone());
    let mut pronoun_pos = match pronoun_slot {
        Some(0) => Some(0),
        _ => None,
    };
    if let Some(obj) = tgt_np.get(1) {
        if pronoun_slot == Some(1) {
            pronoun_pos = Some(tgt.len());
        }
        tgt.extend(obj.iter().cloned());
    }
    tgt.extend(adjuncts.iter().map(|a| a.1.clone()));

    // source: SUBJ VERB [OBJ] ADJ*, or SUBJ [OBJ] ADJ* VERB
    let mut src = src_np[0].clone();
    if !verb_final {
        src.push(verb.0.clone());
    }
    if let Some(obj) = src_np.get(1) {
        src.extend(obj.iter().cloned());
    }
    src.extend(adjuncts.iter().map(|a| a.0.clone()));
    if verb_final {
        src.push(verb.0.clone());
    }

    Sentence {
        src,
        tgt,
        pronoun: pronoun_pos.map(|p| (p, false)),
        gender: antecedent.filter(|_| pronoun_slot.is_some()).map(|a| lex.nouns[a].2),
        last_noun,
    }
}

fn generate_document(
    cfg: &SyntheticConfig,
    lex: &Lexicon,
    doc_index: u64,
) -> Vec<Sentence> {
    let mut r = rng::rng(rng::derive_indexed(cfg.seed, "doc", doc_index));
    let s = cfg.sents_per_doc;
    // Document-initial sentences cannot host a cross-sentence pronoun; the
    // remaining sentences compensate so the corpus-level ratio matches.
    let p_cross = if s > 1 {
        (cfg.cross_sentence_pronoun_ratio * s as f64 / (s - 1) as f64).min(1.0)
    } else {
        0.0
    };
    let mut out: Vec<Sentence> = Vec::with_capacity(s);
    let mut prev_last_noun: Option<usize> = None;
    for i in 0..s {
        let has_pronoun = r.gen_bool(cfg.pronoun_density);
        let sentence = if has_pronoun {
            let cross = i > 0 && prev_last_noun.is_some() && r.gen_bool(p_cross);
            if cross {
                let ante = prev_last_noun.expect("checked");
                let obj = Slot::Noun(lex.sample_noun(&mut r));
                let mut sent =
                    realize(lex, &mut r, Slot::Pronoun, Some(obj), Some(ante), cfg.word_order_shuffle);
                sent.pronoun = sent.pronoun.map(|(p, _)| (p, true));
                sent
            } else {
                let subj = lex.sample_noun(&mut r);
                realize(
                    lex,
                    &mut r,
                    Slot::Noun(subj),
                    Some(Slot::Pronoun),
                    Some(subj),
                    cfg.word_order_shuffle,
                )
            }
        } else {
            let subject = if r.gen_bool(0.15) {
                Slot::Plural
            } else {
                Slot::Noun(lex.sample_noun(&mut r))
            };
            // every sentence ends up with a noun so the next one can refer back
            let object = if matches!(subject, Slot::Plural) || r.gen_bool(0.7) {
                Some(Slot::Noun(lex.sample_noun(&mut r)))
            } else {
                None
            };
            realize(lex, &mut r, subject, object, None, cfg.word_order_shuffle)
        };
        prev_last_noun = sentence.last_noun;
        out.push(sentence);
    }
    out
}

/// Generates a corpus and its gold pronoun annotations. Deterministic in the
/// config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    let mut pairs = Vec::with_capacity(cfg.num_docs * cfg.sents_per_doc);
    let mut doc_starts = Vec::with_capacity(cfg.num_docs);
    let mut gold = Vec::new();
    for d in 0..cfg.num_docs {
        doc_starts.push(pairs.len());
        for sent in generate_document(cfg, &lex, cfg.first_doc + d as u64) {
            let line = pairs.len();
            if let Some((position, cross)) = sent.pronoun {
                gold.push(PronounGold {
                    line,
                    position,
                    pronoun: sent.gender.expect("pronoun has gender").pronoun().into(),
                    antecedent_line: if cross { line - 1 } else { line },
                });
            }
            pairs.push(SentencePair {
                src: sent.src,
                tgt: sent.tgt,
            });
        }
    }
    Ok(SyntheticCorpus {
        corpus: ParallelCorpus::new(pairs, doc_starts)?,
        gold,
    })
}

/// Which side(s) of a corpus a vocabulary covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
    Both,
}

/// Token/id bijection with reserved ids 0-4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidArgument(
                "vocabulary must begin with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_lines(path, self.tokens.iter().skip(RESERVED.len()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(read_lines(path)?.into_iter().filter(|l| !l.is_empty()));
        Vocab::from_tokens(tokens)
    }
}

/// Builds a vocabulary ordered by descending frequency, then lexicographically.
pub fn build_vocab(corpus: &ParallelCorpus, side: Side) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &corpus.pairs {
        let sides: [&[String]; 2] = match side {
            Side::Source => [&p.src, &[]],
            Side::Target => [&p.tgt, &[]],
            Side::Both => [&p.src, &p.tgt],
        };
        for t in sides.into_iter().flatten() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l.as_ref());
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Paths of the files that make up a corpus stored under `prefix`.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub docs: PathBuf,
}

impl CorpusFiles {
    pub fn with_prefix(prefix: &Path) -> Self {
        CorpusFiles {
            src: suffixed(prefix, "src"),
            tgt: suffixed(prefix, "tgt"),
            docs: suffixed(prefix, "docs"),
        }
    }
}

/// `prefix` with `.ext` appended (not replacing any existing extension).
pub fn suffixed(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn read_parallel(files: &CorpusFiles) -> Result<ParallelCorpus> {
    let src = read_lines(&files.src)?;
    let tgt = read_lines(&files.tgt)?;
    if src.len() != tgt.len() {
        return Err(Error::Dimension(format!(
            "{} has {} lines but {} has {} lines",
            files.src.display(),
            src.len(),
            files.tgt.display(),
            tgt.len()
        )));
    }
    let pairs: Vec<SentencePair> = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| SentencePair::new(s, t))
        .collect();
    if !files.docs.exists() {
        return Ok(ParallelCorpus::single_document(pairs));
    }
    let mut doc_starts = Vec::new();
    for (i, line) in read_lines(&files.docs)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx: usize = line.parse().map_err(|_| Error::Parse {
            path: files.docs.clone(),
            line: i + 1,
            msg: format!("malformed boundary index '{line}'"),
        })?;
        doc_starts.push(idx);
    }
    ParallelCorpus::new(pairs, doc_starts).map_err(|e| Error::Parse {
        path: files.docs.clone(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_parallel(corpus: &ParallelCorpus, files: &CorpusFiles) -> Result<()> {
    write_lines(&files.src, corpus.pairs.iter().map(|p| detokenize(&p.src)))?;
    write_lines(&files.tgt, corpus.pairs.iter().map(|p| detokenize(&p.tgt)))?;
    write_lines(&files.docs, corpus.doc_starts.iter().map(usize::to_string))
}

pub fn write_gold(gold: &[PronounGold], path: &Path) -> Result<()> {
    write_lines(
        path,
        gold.iter().map(|g| {
            format!(
                "{}\t{}\t{}\t{}",
                g.line, g.position, g.pronoun, g.antecedent_line
            )
        }),
    )
}

pub fn read_gold(path: &Path) -> Result<Vec<PronounGold>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer field"));
        out.push(PronounGold {
            line: num(f[0])?,
            position: num(f[1])?,
            pronoun: f[2].to_string(),
            antecedent_line: num(f[3])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_docs: 20,
            sents_per_doc: 10,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.gold, b.gold);
        let c = generate_synthetic(&SyntheticConfig {
            seed: 2,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SyntheticConfig {
            content_vocab: 0,
            ..small_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            pronoun_density: 1.5,
            ..small_cfg()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    /// Resolves `pro` from the most recent preceding noun, looking back into
    /// the previous sentence only when `with_context`.
    fn oracle_resolve(
        lex: &Lexicon,
        corpus: &ParallelCorpus,
        line: usize,
        with_context: bool,
    ) -> Option<&'static str> {
        let src = &corpus.pairs[line].src;
        let p = src.iter().position(|t| t == SRC_PRONOUN)?;
        let own = src[..p].iter().rev().find_map(|t| lex.source_gender(t));
        let g = own.or_else(|| {
            if !with_context {
                return None;
            }
            corpus
                .previous_source(line)?
                .iter()
                .rev()
                .find_map(|t| lex.source_gender(t))
        })?;
        Some(g.pronoun())
    }

    #[test]
    fn intra_sentential_only_is_resolvable_sentence_by_sentence() {
        let cfg = SyntheticConfig {
            cross_sentence_pronoun_ratio: 0.0,
            ..small_cfg()
        };
        let syn = generate_synthetic(&cfg).unwrap();
        let lex = Lexicon::new(&cfg);
        assert!(!syn.gold.is_empty());
        for g in &syn.gold {
            assert_eq!(g.antecedent_line, g.line);
            assert_eq!(
                oracle_resolve(&lex, &syn.corpus, g.line, false),
                Some(g.pronoun.as_str())
            );
        }
    }

    #[test]
    fn gold_is_recoverable_from_antecedent_chain() {
        let cfg = small_cfg();
        let syn = generate_synthetic(&cfg).unwrap();
        let lex = Lexicon::new(&cfg);
        for g in &syn.gold {
            assert_eq!(syn.corpus.pairs[g.line].tgt[g.position], g.pronoun);
            assert_eq!(
                oracle_resolve(&lex, &syn.corpus, g.line, true),
                Some(g.pronoun.as_str())
            );
            if g.antecedent_line != g.line {
                assert!(!syn.corpus.is_doc_start(g.line));
            }
        }
    }

    #[test]
    fn cross_sentence_ratio_close_to_config() {
        let syn = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(syn.corpus.len(), 20_000);
        let cross = syn
            .gold
            .iter()
            .filter(|g| g.antecedent_line != g.line)
            .count();
        let ratio = cross as f64 / syn.gold.len() as f64;
        assert!((ratio - 0.5).abs() <= 0.05, "ratio {ratio}");
    }

    #[test]
    fn dictionary_is_consistent() {
        let cfg = small_cfg();
        let syn = generate_synthetic(&cfg).unwrap();
        let dict = Lexicon::new(&cfg).dictionary();
        for p in &syn.corpus.pairs {
            let mut expected: Vec<&str> = p
                .src
                .iter()
                .filter(|t| t.as_str() != SRC_PRONOUN)
                .map(|t| dict[t].as_str())
                .collect();
            let mut got: Vec<&str> = p
                .tgt
                .iter()
                .map(String::as_str)
                .filter(|t| !["he", "she", "it"].contains(t))
                .collect();
            expected.sort_unstable();
            got.sort_unstable();
            assert_eq!(expected, got);
        }
    }

    #[test]
    fn previous_context_respects_boundaries() {
        let syn = generate_synthetic(&small_cfg()).unwrap();
        let c = &syn.corpus;
        for i in 0..c.len() {
            if c.is_doc_start(i) {
                assert!(c.previous_source(i).is_none());
            } else {
                assert_eq!(c.previous_source(i), Some(&c.pairs[i - 1].src[..]));
            }
        }
        let sub = c.subset(&[0, 11, 12]);
        assert_eq!(sub.previous_source(0), None);
        assert_eq!(sub.previous_source(1), Some(&c.pairs[10].src[..]));
        assert_eq!(sub.origin, Some(vec![0, 11, 12]));
    }

    #[test]
    fn vocab_ordering_and_roundtrip() {
        let corpus = ParallelCorpus::single_document(vec![
            SentencePair::new("a a b", "x"),
            SentencePair::new("a", "y"),
        ]);
        let v = build_vocab(&corpus, Side::Source).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("zzz"), UNK);
        let ids = v.encode(&["a", "b"]);
        assert_eq!(v.decode(&ids), vec!["a", "b"]);
        assert_eq!(build_vocab(&corpus, Side::Both).unwrap().len(), 5 + 4);
        assert!(build_vocab(&ParallelCorpus::default(), Side::Source).is_err());
    }

    #[test]
    fn parallel_io_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let syn = generate_synthetic(&small_cfg()).unwrap();
        let files = CorpusFiles::with_prefix(&dir.path().join("train"));
        write_parallel(&syn.corpus, &files).unwrap();
        assert_eq!(read_parallel(&files).unwrap(), syn.corpus);

        let gold_path = dir.path().join("train.prn");
        write_gold(&syn.gold, &gold_path).unwrap();
        assert_eq!(read_gold(&gold_path).unwrap(), syn.gold);

        fs::remove_file(&files.docs).unwrap();
        let single = read_parallel(&files).unwrap();
        assert_eq!(single.doc_starts, vec![0]);

        write_lines(&files.tgt, ["only one line"]).unwrap();
        let err = read_parallel(&files).unwrap_err().to_string();
        assert!(err.contains("200") && err.contains(" 1 lines"), "{err}");

        write_lines(&files.tgt, syn.corpus.pairs.iter().map(|p| detokenize(&p.tgt))).unwrap();
        write_lines(&files.docs, ["0", "x"]).unwrap();
        assert!(matches!(read_parallel(&files), Err(Error::Parse { line: 2, .. })));
    }
}
