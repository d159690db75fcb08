//! IBM Model 1 lexical alignment of hypotheses to references.
//!
//! Each hypothesis token is generated by one reference token or by a virtual
//! NULL token. Tokens are lowercased before interning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, write_lines};
use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "<null>";
/// Probability assigned to unseen (hyp, ref) pairs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ibm1Config {
    pub iterations: usize,
    /// Prior weight of NULL relative to one reference word.
    pub null_weight: f64,
}

impl Default for Ibm1Config {
    fn default() -> Self {
        Ibm1Config {
            iterations: 5,
            null_weight: 0.5,
        }
    }
}

#[derive(Debug, Default, Clone)]
struct Interner {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, w: &str) -> u32 {
        let w = w.to_lowercase();
        if let Some(&i) = self.index.get(&w) {
            return i;
        }
        let i = self.words.len() as u32;
        self.index.insert(w.clone(), i);
        self.words.push(w);
        i
    }

    fn get(&self, w: &str) -> Option<u32> {
        self.index.get(&w.to_lowercase()).copied()
    }
}

/// `t(hyp | ref)` for every co-occurring pair. Row 0 is NULL.
#[derive(Debug, Clone)]
pub struct TranslationTable {
    refs: Interner,
    hyps: Interner,
    rows: Vec<BTreeMap<u32, f64>>,
    pub null_weight: f64,
}

impl TranslationTable {
    /// `t(hyp | ref)`, floored for unknown words and unseen pairs.
    pub fn prob(&self, hyp: &str, reference: &str) -> f64 {
        let (Some(h), Some(r)) = (self.hyps.get(hyp), self.refs.get(reference)) else {
            return PROB_FLOOR;
        };
        self.p(h, r)
    }

    pub fn null_prob(&self, hyp: &str) -> f64 {
        self.hyps.get(hyp).map_or(PROB_FLOOR, |h| self.p(h, 0))
    }

    fn p(&self, h: u32, r: u32) -> f64 {
        self.rows[r as usize].get(&h).copied().unwrap_or(PROB_FLOOR)
    }

    /// Reference words with their (hyp word, probability) rows; NULL first.
    pub fn rows(&self) -> impl Iterator<Item = (&str, Vec<(&str, f64)>)> {
        self.rows.iter().enumerate().map(|(r, row)| {
            (
                self.refs.words[r].as_str(),
                row.iter()
                    .map(|(&h, &p)| (self.hyps.words[h as usize].as_str(), p))
                    .collect(),
            )
        })
    }

    /// Largest deviation of a row sum from 1. Rows of reference words that
    /// never co-occur with a hypothesis word are empty and skipped.
    pub fn max_row_error(&self) -> f64 {
        self.rows
            .iter()
            .filter(|row| !row.is_empty())
            .map(|row| (row.values().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// TSV dump: `ref<TAB>hyp<TAB>prob`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut lines = Vec::new();
        for (r, row) in self.rows() {
            for (h, p) in row {
                lines.push(format!("{r}\t{h}\t{p:e}"));
            }
        }
        write_lines(path, lines)
    }

    fn sentence_ids(&self, hyp: &[String], reference: &[String]) -> (Vec<Option<u32>>, Vec<Option<u32>>) {
        (
            hyp.iter().map(|w| self.hyps.get(w)).collect(),
            reference.iter().map(|w| self.refs.get(w)).collect(),
        )
    }
}

struct Encoded {
    hyp: Vec<u32>,
    /// Reference ids with NULL (0) first.
    refs: Vec<u32>,
}

fn encode(bitext: &[(Vec<String>, Vec<String>)]) -> (Interner, Interner, Vec<Encoded>) {
    let mut refs = Interner::default();
    refs.intern(NULL_TOKEN);
    let mut hyps = Interner::default();
    let enc = bitext
        .iter()
        .map(|(h, r)| Encoded {
            hyp: h.iter().map(|w| hyps.intern(w)).collect(),
            refs: std::iter::once(0).chain(r.iter().map(|w| refs.intern(w))).collect(),
        })
        .collect();
    (refs, hyps, enc)
}

fn prior(null_weight: f64, ref_len: usize) -> (f64, f64) {
    let z = ref_len as f64 + null_weight;
    (null_weight / z, 1.0 / z)
}

fn corpus_log_likelihood(rows: &[BTreeMap<u32, f64>], enc: &[Encoded], null_weight: f64) -> f64 {
    let p = |h: u32, r: u32| rows[r as usize].get(&h).copied().unwrap_or(PROB_FLOOR);
    let mut ll = 0.0;
    for s in enc {
        let (pn, pw) = prior(null_weight, s.refs.len() - 1);
        for &h in &s.hyp {
            let mut tot = pn * p(h, 0);
            for &r in &s.refs[1..] {
                tot += pw * p(h, r);
            }
            ll += tot.ln();
        }
    }
    ll
}

/// Trains the table and returns the bitext log-likelihood after
/// initialization and after every iteration.
pub fn ibm1_train_traced(
    bitext: &[(Vec<String>, Vec<String>)],
    cfg: &Ibm1Config,
) -> Result<(TranslationTable, Vec<f64>)> {
    if bitext.is_empty() {
        return Err(Error::Empty("bitext".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if !(cfg.null_weight > 0.0 && cfg.null_weight.is_finite()) {
        return Err(Error::Config("null_weight must be positive".into()));
    }
    let (refs, hyps, enc) = encode(bitext);

    // uniform over co-occurring hyp words
    let mut rows: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); refs.words.len()];
    for s in &enc {
        for &r in &s.refs {
            for &h in &s.hyp {
                rows[r as usize].insert(h, 1.0);
            }
        }
    }
    for row in &mut rows {
        let n = row.len() as f64;
        row.values_mut().for_each(|v| *v = 1.0 / n);
    }

    let mut trace = vec![corpus_log_likelihood(&rows, &enc, cfg.null_weight)];
    for _ in 0..cfg.iterations {
        let mut counts: Vec<BTreeMap<u32, f64>> = rows
            .iter()
            .map(|row| row.keys().map(|&h| (h, 0.0)).collect())
            .collect();
        for s in &enc {
            let (pn, pw) = prior(cfg.null_weight, s.refs.len() - 1);
            for &h in &s.hyp {
                let w = |i: usize, r: u32| if i == 0 { pn } else { pw } * rows[r as usize][&h];
                let denom: f64 = s.refs.iter().enumerate().map(|(i, &r)| w(i, r)).sum();
                for (i, &r) in s.refs.iter().enumerate() {
                    *counts[r as usize].get_mut(&h).expect("co-occurring pair") += w(i, r) / denom;
                }
            }
        }
        for row in &mut counts {
            let total: f64 = row.values().sum();
            if total > 0.0 {
                row.values_mut().for_each(|v| *v /= total);
            }
        }
        rows = counts;
        trace.push(corpus_log_likelihood(&rows, &enc, cfg.null_weight));
    }
    Ok((
        TranslationTable {
            refs,
            hyps,
            rows,
            null_weight: cfg.null_weight,
        },
        trace,
    ))
}

pub fn ibm1_train(
    bitext: &[(Vec<String>, Vec<String>)],
    cfg: &Ibm1Config,
) -> Result<TranslationTable> {
    Ok(ibm1_train_traced(bitext, cfg)?.0)
}

/// Links `(hyp_index, ref_index)` for one sentence pair, sorted by hyp index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    pub links: Vec<(usize, usize)>,
}

impl Alignment {
    /// Hypothesis indices linked to reference position `r`.
    pub fn hyp_for_ref(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.links.iter().filter(move |l| l.1 == r).map(|l| l.0)
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.links.iter().map(|(h, r)| format!("{h}-{r}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Best reference parent of every hypothesis token; ties go to the lowest
/// reference index and tokens whose best parent is NULL stay unlinked.
pub fn viterbi_align(table: &TranslationTable, hyp: &[String], reference: &[String]) -> Alignment {
    if hyp.is_empty() || reference.is_empty() {
        return Alignment::default();
    }
    let (hids, rids) = table.sentence_ids(hyp, reference);
    let mut links = Vec::new();
    for (j, h) in hids.iter().enumerate() {
        let score = |r: Option<u32>| match (h, r) {
            (Some(h), Some(r)) => table.p(*h, r),
            _ => PROB_FLOOR,
        };
        let mut best = 0;
        let mut best_p = score(rids[0]);
        for (i, &r) in rids.iter().enumerate().skip(1) {
            let p = score(r);
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        let null = h.map_or(PROB_FLOOR, |h| table.p(h, 0)) * table.null_weight;
        if best_p >= null {
            links.push((j, best));
        }
    }
    Alignment { links }
}

/// Parses one Pharaoh line (`h-r` pairs separated by spaces).
pub fn parse_pharaoh(line: &str) -> std::result::Result<Alignment, String> {
    let mut links = Vec::new();
    for tok in line.split_whitespace() {
        let (h, r) = tok
            .split_once('-')
            .ok_or_else(|| format!("malformed link '{tok}'"))?;
        let h = h.parse().map_err(|_| format!("malformed link '{tok}'"))?;
        let r = r.parse().map_err(|_| format!("malformed link '{tok}'"))?;
        links.push((h, r));
    }
    links.sort_unstable();
    Ok(Alignment { links })
}

pub fn write_alignments(path: &Path, alignments: &[Alignment]) -> Result<()> {
    write_lines(path, alignments.iter().map(ToString::to_string))
}

pub fn read_alignments(path: &Path) -> Result<Vec<Alignment>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse_pharaoh(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Trains on (hyp, ref) pairs and aligns every pair.
pub fn align_corpus(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    cfg: &Ibm1Config,
) -> Result<(TranslationTable, Vec<Alignment>)> {
    if hyps.len() != refs.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let bitext: Vec<(Vec<String>, Vec<String>)> =
        hyps.iter().cloned().zip(refs.iter().cloned()).collect();
    let table = ibm1_train(&bitext, cfg)?;
    let al = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| viterbi_align(&table, h, r))
        .collect();
    Ok((table, al))
}
