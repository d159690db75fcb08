//! Corpus BLEU and clipped pronoun precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero n-gram match counts become 0.01.
    Floor,
}

impl FromStr for Smoothing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Smoothing::None),
            "floor" => Ok(Smoothing::Floor),
            other => Err(Error::Config(format!("unknown smoothing '{other}'"))),
        }
    }
}

const FLOOR_COUNT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In [0, 100].
    pub score: f64,
    pub ngram_precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn lower(s: &[Vec<String>]) -> Vec<Vec<String>> {
    s.iter()
        .map(|t| t.iter().map(|w| w.to_lowercase()).collect())
        .collect()
}

/// Corpus-level BLEU with clipped n-gram precision and brevity penalty.
pub fn corpus_bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be positive".into()));
    }
    let (hyps, refs) = (lower(hyps), lower(refs));
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(&refs) {
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| {
            if t == 0 {
                0.0
            } else if m == 0 && smoothing == Smoothing::Floor {
                FLOOR_COUNT / t as f64
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * bp * mean_log.exp()
    };
    Ok(BleuReport {
        score,
        ngram_precisions: precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub tp: usize,
    pub sys_total: usize,
    pub ref_total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TypeScore {
    fn from_counts(tp: usize, sys_total: usize, ref_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, sys_total);
        let recall = ratio(tp, ref_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        TypeScore {
            tp,
            sys_total,
            ref_total,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-type scores and their unweighted means; every value is in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounReport {
    pub per_type: BTreeMap<String, TypeScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl PronounReport {
    /// Types that enter the macro average.
    pub fn included(&self) -> impl Iterator<Item = (&String, &TypeScore)> {
        self.per_type
            .iter()
            .filter(|(_, s)| s.sys_total > 0 || s.ref_total > 0)
    }
}

/// Clipped per-sentence pronoun counts, macro-averaged over pronoun types.
/// Comparison is case-insensitive exact match.
pub fn pronoun_prf(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    pronouns: &BTreeSet<String>,
) -> Result<PronounReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let pronouns: BTreeSet<String> = pronouns.iter().map(|p| p.to_lowercase()).collect();
    let mut counts: BTreeMap<&str, (usize, usize, usize)> =
        pronouns.iter().map(|p| (p.as_str(), (0, 0, 0))).collect();
    for (h, r) in hyps.iter().zip(refs) {
        let mut hc: HashMap<String, usize> = HashMap::new();
        let mut rc: HashMap<String, usize> = HashMap::new();
        for w in h {
            *hc.entry(w.to_lowercase()).or_insert(0) += 1;
        }
        for w in r {
            *rc.entry(w.to_lowercase()).or_insert(0) += 1;
        }
        for (p, c) in counts.iter_mut() {
            let a = hc.get(*p).copied().unwrap_or(0);
            let b = rc.get(*p).copied().unwrap_or(0);
            c.0 += a.min(b);
            c.1 += a;
            c.2 += b;
        }
    }
    let per_type: BTreeMap<String, TypeScore> = counts
        .into_iter()
        .map(|(p, (tp, s, r))| (p.to_string(), TypeScore::from_counts(tp, s, r)))
        .collect();
    let mut report = PronounReport {
        per_type,
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
    };
    let inc: Vec<&TypeScore> = report.included().map(|(_, s)| s).collect();
    if !inc.is_empty() {
        let k = inc.len() as f64;
        let (p, r, f) = inc.iter().fold((0.0, 0.0, 0.0), |a, s| {
            (a.0 + s.precision, a.1 + s.recall, a.2 + s.f1)
        });
        report.macro_precision = p / k;
        report.macro_recall = r / k;
        report.macro_f1 = f / k;
    }
    Ok(report)
}

/// BLEU and pronoun scores of one system output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub bp: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_type: BTreeMap<String, TypeScore>,
}

impl EvalReport {
    pub fn new(bleu: &BleuReport, prn: &PronounReport) -> Self {
        let p = |i: usize| bleu.ngram_precisions.get(i).copied().unwrap_or(0.0);
        EvalReport {
            bleu: bleu.score,
            bp: bleu.brevity_penalty,
            p1: p(0),
            p2: p(1),
            p3: p(2),
            p4: p(3),
            hyp_len: bleu.hyp_len,
            ref_len: bleu.ref_len,
            macro_precision: prn.macro_precision,
            macro_recall: prn.macro_recall,
            macro_f1: prn.macro_f1,
            per_type: prn.per_type.clone(),
        }
    }

    /// Scores `hyps` against `refs` with 4-gram BLEU.
    pub fn compute(
        hyps: &[Vec<String>],
        refs: &[Vec<String>],
        pronouns: &BTreeSet<String>,
        smoothing: Smoothing,
    ) -> Result<Self> {
        let b = corpus_bleu(hyps, refs, 4, smoothing)?;
        let p = pronoun_prf(hyps, refs, pronouns)?;
        Ok(EvalReport::new(&b, &p))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "BLEU {:.2} (BP {:.4}, p1-p4 {:.2}/{:.2}/{:.2}/{:.2}, hyp {} ref {})",
            self.bleu,
            self.bp,
            100.0 * self.p1,
            100.0 * self.p2,
            100.0 * self.p3,
            100.0 * self.p4,
            self.hyp_len,
            self.ref_len
        )?;
        writeln!(
            f,
            "pronouns  P {:.2}  R {:.2}  F1 {:.2}",
            100.0 * self.macro_precision,
            100.0 * self.macro_recall,
            100.0 * self.macro_f1
        )?;
        for (p, s) in &self.per_type {
            writeln!(
                f,
                "  {p:<8} tp {:>6} sys {:>6} ref {:>6}  P {:6.2} R {:6.2} F1 {:6.2}",
                s.tp,
                s.sys_total,
                s.ref_total,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn sents(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| tokenize(s)).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_fixtures() {
        let h = sents(&["the cat sat on mat"]);
        let r = sents(&["the cat sat on the mat"]);
        let b = corpus_bleu(&h, &r, 4, Smoothing::None).unwrap();
        assert_eq!(b.ngram_precisions, vec![1.0, 0.75, 2.0 / 3.0, 0.5]);
        assert!((b.brevity_penalty - (-0.2f64).exp()).abs() < 1e-15);
        assert!((b.score - 57.89).abs() < 0.01, "{}", b.score);

        let id = sents(&["a b c d e", "x y z w"]);
        assert!((corpus_bleu(&id, &id, 4, Smoothing::None).unwrap().score - 100.0).abs() < 1e-9);

        let b = corpus_bleu(&sents(&["the the the the"]), &sents(&["the cat"]), 4, Smoothing::None)
            .unwrap();
        assert_eq!(b.ngram_precisions[0], 0.25);
        assert_eq!(b.score, 0.0);
        let s = corpus_bleu(&sents(&["the the the the"]), &sents(&["the cat"]), 4, Smoothing::Floor)
            .unwrap();
        assert!(s.score > 0.0);
    }

    #[test]
    fn bleu_errors_and_permutation() {
        assert!(corpus_bleu(&sents(&["a"]), &[], 4, Smoothing::None).is_err());
        assert!(corpus_bleu(&[], &[], 4, Smoothing::None).is_err());
        let h = sents(&["a b c d", "e f g h i", "a c b d"]);
        let r = sents(&["a b c d", "e f g i h", "a b c d e"]);
        let s1 = corpus_bleu(&h, &r, 4, Smoothing::None).unwrap().score;
        let hp = vec![h[2].clone(), h[0].clone(), h[1].clone()];
        let rp = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        assert_eq!(s1, corpus_bleu(&hp, &rp, 4, Smoothing::None).unwrap().score);
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.push(tokenize("p q r s t"));
        r2.push(tokenize("p q r s t"));
        assert!(corpus_bleu(&h2, &r2, 4, Smoothing::None).unwrap().score >= s1);
    }

    #[test]
    fn pronoun_fixture() {
        let refs = sents(&["he saw it", "she said he left"]);
        let hyps = sents(&["he saw him", "she said she left"]);
        let r = pronoun_prf(&hyps, &refs, &set(&["he", "she", "it", "him"])).unwrap();
        assert!((r.per_type["he"].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_type["she"].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_type["it"].f1, 0.0);
        assert_eq!(r.per_type["him"].precision, 0.0);
        assert_eq!(r.macro_f1, 1.0 / 3.0);
    }

    #[test]
    fn pronoun_identity_and_exclusion() {
        let s = sents(&["He left", "it rains"]);
        let r = pronoun_prf(&s, &s, &set(&["he", "it", "she"])).unwrap();
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.included().count(), 2);
        assert!(pronoun_prf(&s, &s[..1], &set(&["he"])).is_err());
    }
}
