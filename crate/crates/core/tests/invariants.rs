//! Property tests for data-structure invariants across modules.

use std::collections::{BTreeSet, HashMap};

use proptest::collection::vec;
use proptest::prelude::*;

use hybridmt::align::{ibm1_train, viterbi_align, Ibm1Config};
use hybridmt::corpus::{build_vocab, ParallelCorpus, SentencePair, Side, RESERVED};
use hybridmt::eval::{corpus_bleu, pronoun_prf, Smoothing};
use hybridmt::loss::{hybrid_loss, LogitsMatrix, LossKind, LossSpec, MaskPolicy, TokenMask};
use hybridmt::model::checkpoint::Checkpoint;
use hybridmt::model::{Model, ModelConfig};
use hybridmt::trainer::{ScheduleSpec, Segment};

fn words(pool: &'static [&'static str], max_len: usize) -> impl Strategy<Value = Vec<String>> {
    vec(prop::sample::select(pool), 0..=max_len).prop_map(|v| v.into_iter().map(String::from).collect())
}

const POOL: &[&str] = &["he", "She", "it", "they", "the", "a", "dog", "saw", "ran", "him"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hybrid_total_is_the_weighted_sum(
        sentences in vec(vec((vec(-4.0f64..4.0, 5), 0usize..5, any::<bool>()), 1..5), 1..4),
        lambda in 0.0f64..=1.0,
        mm in any::<bool>(),
    ) {
        let mut logits = Vec::new();
        let mut refs = Vec::new();
        let mut masks = Vec::new();
        for s in &sentences {
            logits.push(LogitsMatrix::from_rows(&s.iter().map(|t| t.0.clone()).collect::<Vec<_>>()).unwrap());
            refs.push(s.iter().map(|t| t.1).collect::<Vec<_>>());
            masks.push(TokenMask(s.iter().map(|t| t.2).collect()));
        }
        let kind = if mm { LossKind::HybridMm } else { LossKind::HybridNll };
        let spec = LossSpec { lambda, ..LossSpec::hybrid(kind, MaskPolicy::AllTokens) };
        let (b, _) = hybrid_loss(&logits, &refs, &masks, &spec).unwrap();
        prop_assert!((b.total - (lambda * b.generative + (1.0 - lambda) * b.discriminative)).abs() < 1e-12);
        let (c, _) = hybrid_loss(&logits, &refs, &masks, &LossSpec::clm()).unwrap();
        prop_assert_eq!(c.total, c.generative);
        prop_assert_eq!(c.generative, b.generative);
    }

    #[test]
    fn odd_schedules_start_and_end_on_the_subset(half in 0usize..8, upsample in 1usize..5) {
        let spec = ScheduleSpec { total_epochs: 2 * half + 1, upsample_factor: upsample };
        let plan = spec.plan();
        prop_assert_eq!(plan.len(), 2 * half + 1);
        prop_assert_eq!(plan[0].segment, Segment::Subset);
        prop_assert_eq!(plan[plan.len() - 1].segment, Segment::Subset);
        for (i, e) in plan.iter().enumerate() {
            let want = if i % 2 == 0 { (Segment::Subset, 1) } else { (Segment::Full, upsample) };
            prop_assert_eq!((e.segment, e.passes), want);
        }
    }

    #[test]
    fn viterbi_links_are_valid(
        bitext in vec((words(POOL, 6), words(POOL, 6)), 1..8),
        pick in any::<prop::sample::Index>(),
    ) {
        let table = ibm1_train(&bitext, &Ibm1Config::default()).unwrap();
        prop_assert!(table.max_row_error() < 1e-9);
        let (hyp, reference) = &bitext[pick.index(bitext.len())];
        let links = viterbi_align(&table, hyp, reference).links;
        let mut seen = BTreeSet::new();
        for &(h, r) in &links {
            prop_assert!(h < hyp.len() && r < reference.len());
            prop_assert!(seen.insert(h), "hyp index {} linked twice", h);
        }
    }

    #[test]
    fn pronoun_report_is_consistent(
        pairs in vec((words(POOL, 8), words(POOL, 8)), 1..10),
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let set: BTreeSet<String> = ["he", "she", "it", "they", "him"].iter().map(|s| s.to_string()).collect();
        let r = pronoun_prf(&hyps, &refs, &set).unwrap();
        let included: Vec<_> = r.included().map(|(_, s)| s.clone()).collect();
        for s in r.per_type.values() {
            prop_assert!(s.tp <= s.sys_total.min(s.ref_total));
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if !included.is_empty() {
            let k = included.len() as f64;
            let mean = |f: fn(&hybridmt::eval::TypeScore) -> f64| included.iter().map(f).sum::<f64>() / k;
            prop_assert!((r.macro_precision - mean(|s| s.precision)).abs() < 1e-12);
            prop_assert!((r.macro_recall - mean(|s| s.recall)).abs() < 1e-12);
            prop_assert!((r.macro_f1 - mean(|s| s.f1)).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_matches_its_closed_form(
        pairs in vec((words(POOL, 9), words(POOL, 9)), 1..6),
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = corpus_bleu(&hyps, &refs, 4, Smoothing::None).unwrap();
        prop_assert!((0.0..=100.0).contains(&b.score));
        if b.ngram_precisions.iter().all(|&p| p > 0.0) {
            let mean_log = b.ngram_precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
            prop_assert!((b.score - b.brevity_penalty * mean_log.exp() * 100.0).abs() < 1e-9);
        } else {
            prop_assert_eq!(b.score, 0.0);
        }
    }

    #[test]
    fn vocabulary_is_a_frequency_ordered_bijection(
        pairs in vec((words(POOL, 6), words(POOL, 6)), 1..10),
    ) {
        let corpus = ParallelCorpus::new(
            pairs.iter().map(|(s, t)| SentencePair { src: s.clone(), tgt: t.clone() }).collect(),
            vec![0],
        ).unwrap();
        let v = build_vocab(&corpus, Side::Both).unwrap();
        prop_assert_eq!(&v.tokens()[..RESERVED.len()], &RESERVED.map(String::from)[..]);
        for i in 0..v.len() {
            prop_assert_eq!(v.id(v.token(i)), i);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (s, t) in &pairs {
            for w in s.iter().chain(t) {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let rest = &v.tokens()[RESERVED.len()..];
        prop_assert_eq!(rest.len(), counts.len());
        for w in rest.windows(2) {
            let (a, b) = (counts[w[0].as_str()], counts[w[1].as_str()]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>(), step in any::<u64>()) {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::new(model.clone(), step, seed).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.seed, seed);
        prop_assert!(back.model == model);
        let (src, tgt) = ([5, 6, 7], [8, 9, 2]);
        let a = model.forward(&src, &tgt, false).unwrap();
        let b = back.model.forward(&src, &tgt, false).unwrap();
        prop_assert!(a.view() == b.view());
    }
}
