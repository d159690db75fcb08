use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use hybridmt::model::checkpoint::Checkpoint;
use hybridmt::model::{Model, ModelConfig};
use hybridmt_ffi::*;

fn last_error() -> String {
    let p = hmt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn loss(
    spec: &HmtLossSpec,
    logits: &[f64],
    rows: &[usize],
    vocab: usize,
    refs: &[usize],
    mask: Option<&[u8]>,
    grad: Option<&mut [f64]>,
) -> (HmtStatus, HmtLossBreakdown) {
    let mut out = HmtLossBreakdown::default();
    let s = unsafe {
        hmt_loss(
            spec,
            logits.as_ptr(),
            rows.as_ptr(),
            rows.len(),
            vocab,
            refs.as_ptr(),
            mask.map_or(ptr::null(), |m| m.as_ptr()),
            0.0,
            &mut out,
            grad.map_or(ptr::null_mut(), |g| g.as_mut_ptr()),
        )
    };
    (s, out)
}

#[test]
fn closed_form_values_through_the_c_interface() {
    let mut spec = hmt_loss_spec_default(HmtLossKind::HybridNll);
    spec.lambda = 0.0;
    spec.negative_policy = HmtNegativePolicy::MaxExcludingReference;
    let (s, bd) = loss(&spec, &[0.0, 0.0], &[1], 2, &[0], None, None);
    assert_eq!(s, HmtStatus::Ok);
    assert!((bd.total - 2f64.ln()).abs() < 1e-12);

    let (_, bd) = loss(&spec, &[1.0, 0.0], &[1], 2, &[0], None, None);
    assert!((bd.total - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);

    let mut mm = hmt_loss_spec_default(HmtLossKind::HybridMm);
    mm.lambda = 0.0;
    mm.negative_policy = HmtNegativePolicy::MaxExcludingReference;
    let (_, bd) = loss(&mm, &[0.0, 0.5], &[1], 2, &[0], None, None);
    assert!((bd.total - 0.8).abs() < 1e-12);
}

#[test]
fn gradient_layout_matches_finite_differences() {
    let spec = hmt_loss_spec_default(HmtLossKind::HybridNll);
    let logits = [0.3, -0.2, 0.9, 0.1, 0.4, -0.7, 0.2, 0.5, -0.1];
    let rows = [2, 1];
    let refs = [0, 2, 1];
    let mask = [1u8, 0, 1];
    let mut grad = [0.0; 9];
    let (s, bd) = loss(&spec, &logits, &rows, 3, &refs, Some(&mask), Some(&mut grad));
    assert_eq!(s, HmtStatus::Ok);
    assert_eq!(bd.sentence_count, 2);
    assert_eq!(bd.masked_token_count, 2);
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut p = logits;
        p[i] += h;
        let mut m = logits;
        m[i] -= h;
        let fp = loss(&spec, &p, &rows, 3, &refs, Some(&mask), None).1.total;
        let fm = loss(&spec, &m, &rows, 3, &refs, Some(&mask), None).1.total;
        let num = (fp - fm) / (2.0 * h);
        assert!((num - grad[i]).abs() < 1e-6, "{i}: {num} vs {}", grad[i]);
    }
}

#[test]
fn errors_set_status_and_message() {
    let spec = hmt_loss_spec_default(HmtLossKind::Clm);
    let (s, _) = loss(&spec, &[0.0, 0.0], &[1], 2, &[5], None, None);
    assert_eq!(s, HmtStatus::InvalidArgument);
    assert!(last_error().contains('5'));

    let mut out = HmtLossBreakdown::default();
    let s = unsafe {
        hmt_loss(ptr::null(), ptr::null(), ptr::null(), 0, 2, ptr::null(), ptr::null(), 0.0, &mut out, ptr::null_mut())
    };
    assert_eq!(s, HmtStatus::NullPointer);

    let mut bad = hmt_loss_spec_default(HmtLossKind::HybridNll);
    bad.tau = 0.0;
    let (s, _) = loss(&bad, &[0.0, 0.0], &[1], 2, &[0], None, None);
    assert_eq!(s, HmtStatus::InvalidArgument);
    assert!(last_error().contains("tau"));

    let mut handle = ptr::null_mut();
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let s = unsafe { hmt_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(s, HmtStatus::Io);
    assert!(handle.is_null());
}

fn saved_model(dir: &Path) -> (Model, CString) {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        ..ModelConfig::default()
    };
    let m = Model::init(cfg, 3).unwrap();
    let p = dir.join("m.ckpt");
    Checkpoint::new(m.clone(), 0, 3).save(&p).unwrap();
    (m, CString::new(p.to_str().unwrap()).unwrap())
}

#[test]
fn model_handle_translates_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hmt_model_load(path.as_ptr(), &mut h) }, HmtStatus::Ok);
    assert_eq!(unsafe { hmt_model_vocab_size(h) }, 12);

    let src = [5usize, 6, 7];
    let expected = model.translate_greedy(&src, 6).unwrap();
    let mut buf = [0usize; 8];
    let mut len = 0usize;
    let s = unsafe { hmt_model_translate(h, src.as_ptr(), 3, 6, buf.as_mut_ptr(), 8, &mut len) };
    assert_eq!(s, HmtStatus::Ok);
    assert_eq!(&buf[..len], &expected[..]);
    if !expected.is_empty() {
        let s = unsafe { hmt_model_translate(h, src.as_ptr(), 3, 6, buf.as_mut_ptr(), 0, &mut len) };
        assert_eq!(s, HmtStatus::BufferTooSmall);
        assert_eq!(len, expected.len());
    }

    let tgt = [8usize, 9, 2];
    let mut logits = vec![0.0; 3 * 12];
    let s = unsafe { hmt_model_logits(h, src.as_ptr(), 3, tgt.as_ptr(), 3, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(s, HmtStatus::Ok);
    let direct = model.forward(&src, &tgt, false).unwrap();
    assert_eq!(logits, direct.view().iter().copied().collect::<Vec<_>>());

    let bad = [99usize];
    let s = unsafe { hmt_model_translate(h, bad.as_ptr(), 1, 6, buf.as_mut_ptr(), 8, &mut len) };
    assert_eq!(s, HmtStatus::InvalidArgument);
    unsafe { hmt_model_free(h) };
    unsafe { hmt_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_on_text_buffers() {
    let text = CString::new("he saw the dog\nit was red and she left").unwrap();
    let mut bleu = 0.0;
    assert_eq!(unsafe { hmt_corpus_bleu(text.as_ptr(), text.as_ptr(), &mut bleu) }, HmtStatus::Ok);
    assert!((bleu - 100.0).abs() < 1e-9);
    let mut f1 = 0.0;
    let s = unsafe { hmt_pronoun_prf(text.as_ptr(), text.as_ptr(), ptr::null_mut(), ptr::null_mut(), &mut f1) };
    assert_eq!(s, HmtStatus::Ok);
    assert_eq!(f1, 1.0);
    let short = CString::new("a").unwrap();
    let s = unsafe { hmt_corpus_bleu(short.as_ptr(), text.as_ptr(), &mut bleu) };
    assert_eq!(s, HmtStatus::Dimension);
}

#[test]
fn generated_header_declares_the_interface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hybridmt.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "hmt_loss(",
        "hmt_model_load(",
        "hmt_model_free(",
        "hmt_model_translate(",
        "hmt_corpus_bleu(",
        "hmt_last_error(",
        "typedef struct HmtModel HmtModel;",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // compile-check the header when a C compiler is around
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
