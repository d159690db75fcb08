//! Pronoun mismatch detection and fine-tuning subset construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::align::Alignment;
use crate::corpus::{
    detokenize, read_lines, suffixed, tokenize, write_lines, CorpusFiles, ParallelCorpus,
    SentencePair,
};
use crate::error::{Error, Result};
use crate::rng;

/// Target pronouns and their acceptable alternative renderings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounInventory {
    pub pronouns: Vec<String>,
    pub equivalence: BTreeMap<String, BTreeSet<String>>,
}

/// Inventory shipped with the crate.
pub const DEFAULT_INVENTORY: &str = include_str!("../data/pronouns.txt");

impl PronounInventory {
    /// Parses `pronoun: alt1, alt2` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut inv = PronounInventory::default();
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
            let (head, alts) = match line.split_once(':') {
                Some((h, a)) => (h.trim(), Some(a)),
                None => (line, None),
            };
            if head.is_empty() || head.contains(char::is_whitespace) {
                return Err(err(format!("malformed pronoun entry '{line}'")));
            }
            let p = head.to_lowercase();
            if inv.pronouns.contains(&p) {
                return Err(err(format!("duplicate pronoun '{p}'")));
            }
            inv.pronouns.push(p.clone());
            let alts: BTreeSet<String> = alts
                .into_iter()
                .flat_map(|a| a.split(','))
                .map(|a| a.trim().to_lowercase())
                .filter(|a| !a.is_empty())
                .collect();
            if !alts.is_empty() {
                inv.equivalence.insert(p, alts);
            }
        }
        if inv.pronouns.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                msg: "inventory lists no pronouns".into(),
            });
        }
        Ok(inv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_INVENTORY, Path::new("<builtin>")).expect("bundled inventory parses")
    }

    pub fn set(&self) -> BTreeSet<String> {
        self.pronouns.iter().cloned().collect()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.pronouns.iter().any(|p| p == &token.to_lowercase())
    }

    /// Whether `token` renders `pronoun` acceptably.
    pub fn accepts(&self, pronoun: &str, token: &str) -> bool {
        let t = token.to_lowercase();
        let p = pronoun.to_lowercase();
        t == p || self.equivalence.get(&p).is_some_and(|alts| alts.contains(&t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchRecord {
    pub sentence_index: usize,
    pub ref_position: usize,
    pub ref_pronoun: String,
    pub aligned_hyp_tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOptions {
    /// A reference pronoun with no linked hypothesis token is a mismatch.
    pub unaligned_is_mismatch: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            unaligned_is_mismatch: true,
        }
    }
}

/// Reference pronouns whose aligned hypothesis tokens contain no acceptable
/// rendering.
pub fn find_pronoun_mismatches(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    alignments: &[Alignment],
    inventory: &PronounInventory,
    opts: &ExtractOptions,
) -> Result<Vec<MismatchRecord>> {
    if hyps.len() != refs.len() || hyps.len() != alignments.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses, {} references, {} alignments",
            hyps.len(),
            refs.len(),
            alignments.len()
        )));
    }
    let mut out = Vec::new();
    for (s, ((h, r), a)) in hyps.iter().zip(refs).zip(alignments).enumerate() {
        if let Some(&(j, i)) = a.links.iter().find(|&&(j, i)| j >= h.len() || i >= r.len()) {
            return Err(Error::InvalidArgument(format!(
                "sentence {s}: link {j}-{i} outside {}x{} tokens",
                h.len(),
                r.len()
            )));
        }
        for (pos, tok) in r.iter().enumerate() {
            if !inventory.contains(tok) {
                continue;
            }
            let pronoun = tok.to_lowercase();
            let linked: Vec<String> = a.hyp_for_ref(pos).map(|j| h[j].clone()).collect();
            let ok = linked.iter().any(|t| inventory.accepts(&pronoun, t));
            if !ok && (!linked.is_empty() || opts.unaligned_is_mismatch) {
                out.push(MismatchRecord {
                    sentence_index: s,
                    ref_position: pos,
                    ref_pronoun: pronoun,
                    aligned_hyp_tokens: linked,
                });
            }
        }
    }
    Ok(out)
}

/// Pairs of `corpus` with at least one pronoun mismatch, in corpus order.
pub fn build_targeted_subset(
    corpus: &ParallelCorpus,
    hyps: &[Vec<String>],
    alignments: &[Alignment],
    inventory: &PronounInventory,
    opts: &ExtractOptions,
) -> Result<(ParallelCorpus, Vec<MismatchRecord>)> {
    let refs = corpus.targets();
    let records = find_pronoun_mismatches(hyps, &refs, alignments, inventory, opts)?;
    let idx: BTreeSet<usize> = records.iter().map(|r| r.sentence_index).collect();
    let idx: Vec<usize> = idx.into_iter().collect();
    Ok((corpus.subset(&idx), records))
}

/// Uniform sample without replacement of `min(size, |corpus|)` pairs, kept
/// in corpus order.
pub fn sample_random_subset(corpus: &ParallelCorpus, size: usize, seed: u64) -> ParallelCorpus {
    let n = corpus.len();
    let k = size.min(n);
    let mut r = rng::rng(rng::derive(seed, "random-subset"));
    let mut idx = index::sample(&mut r, n, k).into_vec();
    idx.sort_unstable();
    corpus.subset(&idx)
}

/// Writes `.src`, `.tgt`, `.idx` (original line numbers) and `.ctx`
/// (previous source sentence, empty when none) for a subset.
pub fn write_subset(prefix: &Path, subset: &ParallelCorpus) -> Result<()> {
    let files = CorpusFiles::with_prefix(prefix);
    write_lines(&files.src, subset.pairs.iter().map(|p| detokenize(&p.src)))?;
    write_lines(&files.tgt, subset.pairs.iter().map(|p| detokenize(&p.tgt)))?;
    let origin: Vec<String> = (0..subset.len())
        .map(|i| subset.origin.as_ref().map_or(i, |o| o[i]).to_string())
        .collect();
    write_lines(&suffixed(prefix, "idx"), origin)?;
    write_lines(
        &suffixed(prefix, "ctx"),
        (0..subset.len()).map(|i| subset.previous_source(i).map(detokenize).unwrap_or_default()),
    )
}

/// Reads a subset written by [`write_subset`].
pub fn read_subset(prefix: &Path) -> Result<ParallelCorpus> {
    let files = CorpusFiles::with_prefix(prefix);
    let src = read_lines(&files.src)?;
    let tgt = read_lines(&files.tgt)?;
    let idx_path = suffixed(prefix, "idx");
    let ctx_path = suffixed(prefix, "ctx");
    let idx = read_lines(&idx_path)?;
    let ctx = read_lines(&ctx_path)?;
    for (name, len) in [("target", tgt.len()), ("index", idx.len()), ("context", ctx.len())] {
        if len != src.len() {
            return Err(Error::InvalidArgument(format!(
                "subset {} has {} source lines but {len} {name} lines",
                prefix.display(),
                src.len()
            )));
        }
    }
    let origin = idx
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| Error::Parse {
                path: idx_path.clone(),
                line: i + 1,
                msg: format!("bad index '{l}'"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<SentencePair> = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| SentencePair::new(s, t))
        .collect();
    let context = ctx
        .iter()
        .map(|l| {
            let t = tokenize(l);
            (!t.is_empty()).then_some(t)
        })
        .collect();
    let c = ParallelCorpus {
        doc_starts: if pairs.is_empty() { vec![] } else { vec![0] },
        pairs,
        detached_context: Some(context),
        origin: Some(origin),
    };
    c.validate()?;
    Ok(c)
}

/// TSV report: sentence_index, ref_position, ref_pronoun, aligned tokens.
pub fn write_mismatches(path: &Path, records: &[MismatchRecord]) -> Result<()> {
    let header = "sentence_index\tref_position\tref_pronoun\taligned_tokens".to_string();
    write_lines(
        path,
        std::iter::once(header).chain(records.iter().map(|r| {
            format!(
                "{}\t{}\t{}\t{}",
                r.sentence_index,
                r.ref_position,
                r.ref_pronoun,
                r.aligned_hyp_tokens.join(" ")
            )
        })),
    )
}
