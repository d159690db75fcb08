use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybridmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set", "corpus.num_docs=10",
    "--set", "corpus.sents_per_doc=6",
    "--set", "corpus.content_vocab=10",
    "--set", "corpus.nouns_masc=3",
    "--set", "corpus.nouns_fem=3",
    "--set", "corpus.nouns_neut=3",
    "--set", "experiment.test_docs=2",
    "--set", "model.d_model=16",
    "--set", "model.enc_layers=1",
    "--set", "model.dec_layers=1",
    "--set", "model.ffn_dim=32",
    "--set", "train.max_steps=10",
    "--set", "train.warmup_steps=4",
    "--set", "train.batch_tokens=128",
    "--set", "experiment.ckpt_every=5",
    "--set", "schedule.total_epochs=3",
];

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend_from_slice(TINY);
    args
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn evaluate_identity_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ref.txt");
    fs::write(&f, "he saw the dog\nit was red and she left\n").unwrap();
    let json = dir.path().join("r.json");
    let o = hybridmt(&["evaluate", "--hyp", p(&f), "--reference", p(&f), "--json", p(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("BLEU 100.00"), "{out}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["bleu"], 100.0);
    assert_eq!(r["macro_f1"], 1.0);
    // the structured line on stdout parses too
    let last = out.lines().last().unwrap();
    let r2: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(r2["macro_f1"], 1.0);
}

#[test]
fn gradcheck_passes_and_prints_table() {
    let o = hybridmt(&["gradcheck", "--seed", "7", "--seeds", "1", "--coords", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("max rel"), "{out}");
    assert!(out.contains("hybrid-mm/pronoun-only/max-all"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.max_steps = 10\nmodel.colour = blue\n").unwrap();
    let o = hybridmt(&["gen-corpus", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("model.colour") && err.contains(":2:"), "{err}");

    let o = hybridmt(&["gen-corpus", "--set", "loss.tau=-1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let missing = dir.path().join("nope.txt");
    let o = hybridmt(&["evaluate", "--hyp", p(&missing), "--reference", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.txt"));

    let o = hybridmt(&["experiment", "ft-alt-9x"]);
    assert_eq!(o.status.code(), Some(1));
    let o = hybridmt(&["translate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, "a\n").unwrap();
    let src = dir.path().join("c.src");
    let tgt = dir.path().join("c.tgt");
    fs::write(&src, "a\n").unwrap();
    fs::write(&tgt, "a\n").unwrap();
    let o = hybridmt(&[
        "translate", "--model", p(&ck), "--vocab", p(&vocab),
        "--input", p(&dir.path().join("c")), "--out", p(&dir.path().join("h")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridmt(&["experiment", "baseline-sen2sen", "--dump-config", "--set", "loss.mu=0.4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("loss.mu = 0.4"), "{text}");
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, &text).unwrap();
    let o2 = hybridmt(&["experiment", "baseline-sen2sen", "--dump-config", "--config", p(&cfg)]);
    assert_eq!(stdout(&o2), text);
}

#[test]
fn stepwise_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = hybridmt(&with_tiny(vec!["gen-corpus", "--out", p(&data)]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.src", "train.tgt", "train.docs", "test.src", "train.gold", "vocab.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let base = d.join("base");
    let o = hybridmt(&with_tiny(vec![
        "train", "--train", p(&data.join("train")), "--vocab", p(&data.join("vocab.txt")),
        "--mode", "concat", "--out", p(&base),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(base.join("ckpt/step-10").exists());
    assert!(base.join("ckpt/step-5").exists());

    let hyp = d.join("train.hyp");
    let args = |ctx: &'static str, out: &Path| -> Vec<String> {
        vec![
            "translate".into(), "--model".into(), p(&base.join("model.ckpt")).into(),
            "--vocab".into(), p(&data.join("vocab.txt")).into(),
            "--input".into(), p(&data.join("train")).into(),
            "--context".into(), ctx.into(), "--out".into(), p(out).into(),
        ]
    };
    let run = |a: Vec<String>| {
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        hybridmt(&refs)
    };
    let o = run(args("prev", &hyp));
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(&hyp).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 60);
    let o = run(args("prev", &hyp));
    assert!(o.status.success());
    assert_eq!(fs::read(&hyp).unwrap(), first, "translation is deterministic");
    let o = run(args("random", &d.join("random.hyp")));
    assert!(o.status.success(), "{}", stderr(&o));

    let al = d.join("train.align");
    let o = hybridmt(&[
        "align", "--hyp", p(&hyp), "--reference", p(&data.join("train.tgt")), "--out", p(&al),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let sub = d.join("d_prn");
    let o = hybridmt(&[
        "extract-prn", "--corpus", p(&data.join("train")), "--hyp", p(&hyp),
        "--alignments", p(&al), "--out", p(&sub),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("d_prn.mismatches.tsv").exists());
    let n_sub = fs::read_to_string(d.join("d_prn.src")).unwrap().lines().count();
    // a ten-step model gets most pronouns wrong
    assert!(n_sub > 0);

    let ft = d.join("ft");
    let o = hybridmt(&with_tiny(vec![
        "finetune", "--model", p(&base.join("model.ckpt")), "--vocab", p(&data.join("vocab.txt")),
        "--train", p(&data.join("train")), "--subset", p(&sub),
        "--loss", "mm", "--mask", "pronoun", "--out", p(&ft),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    for e in 1..=3 {
        assert!(ft.join(format!("ckpt/epoch-{e}")).exists());
    }

    let o = hybridmt(&["evaluate", "--hyp", p(&hyp), "--reference", p(&data.join("train.tgt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("BLEU"));
}

#[test]
fn experiment_command_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = hybridmt(&with_tiny(vec![
        "experiment", "ft-subset-only", "--out", p(&out), "--loss", "nll", "--quiet",
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join("sen2sen/ft-subset-only-nll-all/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["variant"], "ft-subset-only");
    assert!(m["inputs"]["sen2sen/baseline/model.ckpt"].is_string());
    assert!(m["inputs"]["sen2sen/extract/d_prn.src"].is_string());
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}
