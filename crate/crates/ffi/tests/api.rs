use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use graphmt::checkpoint;
use graphmt::decoder::DecoderConfig;
use graphmt::encoder::EncoderConfig;
use graphmt::model::{Model, ModelConfig};
use graphmt::Vocabulary;
use graphmt_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = graphmt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    src: CString,
    tgt: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let src = Vocabulary::build(["two", "boys", "play", "ball"], 1);
    let tgt = Vocabulary::build(["zwei", "jungen", "spielen"], 1);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            d_ff: 8,
            n_heads: 2,
            n_layers: 1,
            visual_feat_dim: 3,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            d_model: 8,
            d_ff: 8,
            n_heads: 2,
            n_layers: 1,
            ..DecoderConfig::default()
        },
        src_vocab: src.len(),
        tgt_vocab: tgt.len(),
    };
    let model = Model::new(cfg, 4).unwrap();
    let ck = dir.path().join("m.ckpt");
    checkpoint::save(&ck, &model, None).unwrap();
    src.save(&dir.path().join("src.vocab")).unwrap();
    tgt.save(&dir.path().join("tgt.vocab")).unwrap();
    Fixture {
        ckpt: cstr(&ck),
        src: cstr(&dir.path().join("src.vocab")),
        tgt: cstr(&dir.path().join("tgt.vocab")),
        _dir: dir,
    }
}

const LINE: &str = r#"{"src":["two","boys","play","ball"],"objects":[{"span":[0,2],"feat":[0.1,0.2,0.3]},{"span":[3,4],"feat":[1,0,1]}]}"#;

#[test]
fn abi_version() {
    assert_eq!(graphmt_abi_version(), GRAPHMT_ABI_VERSION);
}

#[test]
fn load_build_translate_free() {
    let f = fixture();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(graphmt_model_load(f.ckpt.as_ptr(), f.src.as_ptr(), f.tgt.as_ptr(), &mut m), GraphmtStatus::Ok);
        assert!(!m.is_null());
        let mut n = 0u64;
        assert_eq!(graphmt_model_num_params(m, &mut n), GraphmtStatus::Ok);
        assert!(n > 0);

        let line = CString::new(LINE).unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(graphmt_graph_from_json(m, line.as_ptr(), false, &mut g), GraphmtStatus::Ok);
        let (mut t, mut v, mut e) = (0, 0, 0);
        assert_eq!(graphmt_graph_counts(g, &mut t, &mut v, &mut e), GraphmtStatus::Ok);
        assert_eq!((t, v, e), (4, 2, 3));
        let mut edges = vec![];
        for i in 0..e {
            let (mut a, mut b) = (0, 0);
            assert_eq!(graphmt_graph_edge(g, i, &mut a, &mut b), GraphmtStatus::Ok);
            edges.push((a, b));
        }
        assert_eq!(edges, vec![(0, 0), (1, 0), (3, 1)]);
        let (mut a, mut b) = (0, 0);
        assert_eq!(graphmt_graph_edge(g, 3, &mut a, &mut b), GraphmtStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));

        let mut greedy = ptr::null_mut();
        assert_eq!(graphmt_translate(m, g, 1, 5, &mut greedy), GraphmtStatus::Ok);
        let mut beam1 = ptr::null_mut();
        assert_eq!(graphmt_translate(m, g, 0, 5, &mut beam1), GraphmtStatus::Ok);
        assert_eq!(CStr::from_ptr(greedy), CStr::from_ptr(beam1));
        assert!(CStr::from_ptr(greedy).to_str().unwrap().split_whitespace().count() <= 5);
        graphmt_string_free(greedy);
        graphmt_string_free(beam1);

        let mut full = ptr::null_mut();
        assert_eq!(graphmt_graph_from_json(m, line.as_ptr(), true, &mut full), GraphmtStatus::Ok);
        assert_eq!(graphmt_graph_counts(full, ptr::null_mut(), ptr::null_mut(), &mut e), GraphmtStatus::Ok);
        assert_eq!(e, 8);

        graphmt_graph_free(full);
        graphmt_graph_free(g);
        graphmt_model_free(m);
    }
}

#[test]
fn errors_are_reported() {
    let f = fixture();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(
            graphmt_model_load(ptr::null(), f.src.as_ptr(), f.tgt.as_ptr(), &mut m),
            GraphmtStatus::NullArgument
        );
        assert!(last_error().contains("checkpoint_path"));

        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(
            graphmt_model_load(missing.as_ptr(), f.src.as_ptr(), f.tgt.as_ptr(), &mut m),
            GraphmtStatus::Io
        );
        assert!(last_error().contains("/nonexistent/x.ckpt"));

        // Swapped vocabularies have the wrong sizes.
        assert_eq!(
            graphmt_model_load(f.ckpt.as_ptr(), f.tgt.as_ptr(), f.src.as_ptr(), &mut m),
            GraphmtStatus::CheckpointMismatch
        );
        assert!(m.is_null());

        assert_eq!(graphmt_model_load(f.ckpt.as_ptr(), f.src.as_ptr(), f.tgt.as_ptr(), &mut m), GraphmtStatus::Ok);
        assert!(graphmt_last_error().is_null());
        let bad = CString::new(r#"{"src":["two"],"objects":[{"span":[0,1],"feat":[1]}]}"#).unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(graphmt_graph_from_json(m, bad.as_ptr(), false, &mut g), GraphmtStatus::Data);
        assert!(last_error().contains("feature length"));
        let junk = CString::new("not json").unwrap();
        assert_eq!(graphmt_graph_from_json(m, junk.as_ptr(), false, &mut g), GraphmtStatus::Data);
        assert!(g.is_null());
        graphmt_model_free(m);

        graphmt_model_free(ptr::null_mut());
        graphmt_graph_free(ptr::null_mut());
        graphmt_string_free(ptr::null_mut());
    }
}

#[test]
fn bleu_over_files() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    let r = dir.path().join("r.txt");
    std::fs::write(&h, "a b c d e\nf g h i\n").unwrap();
    std::fs::write(&r, "a b c d e\nf g h i\n").unwrap();
    let mut score = 0.0;
    unsafe {
        assert_eq!(graphmt_bleu_files(cstr(&h).as_ptr(), cstr(&r).as_ptr(), &mut score), GraphmtStatus::Ok);
        assert_eq!(score, 100.0);
        std::fs::write(&r, "a b c d e\n").unwrap();
        assert_eq!(graphmt_bleu_files(cstr(&h).as_ptr(), cstr(&r).as_ptr(), &mut score), GraphmtStatus::Data);
    }
}
