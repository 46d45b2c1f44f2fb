//! The exported functions, called through the Rust bindings and from C.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use apesed::dataset::make_split;
use apesed::features::{write_apef, FeatureKind, FrameMatrix};
use apesed::nn::{Arch, Mat, ModelConfig};
use apesed::pipeline::build_corpus;
use apesed::synth::{synth, SynthConfig};
use apesed::train::{train, TrainConfig};
use apesed_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    wav: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path().join("c"), &SynthConfig::new(2, 10, 2)).unwrap();
    let corpus = build_corpus(&s.manifest, &s.annotations).unwrap();
    let split = make_split(&corpus, 0).unwrap();
    let config = ModelConfig {
        hidden_size: 8,
        ..ModelConfig::new(Arch::ArLstm, FeatureKind::Spectrogram.dim(), 3)
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &split, &config, &cfg).unwrap();
    out.save(dir.path().join("run")).unwrap();
    let wav = dir.path().join("c/wav/clip000.wav");
    assert!(wav.exists());
    Fixture {
        ckpt: dir.path().join("run/model.ckpt"),
        wav,
        _dir: dir,
    }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = apesed_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_lifecycle_and_posteriors() {
    let f = fixture();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(apesed_model_load(c(&f.ckpt).as_ptr(), &mut model), ApesedStatus::Ok);
        assert_eq!(apesed_model_num_classes(model), 3);
        let dim = apesed_model_input_dim(model);
        assert_eq!(dim, 201);
        let x = vec![0.1f32; 4 * dim];
        let mut p = vec![0f32; 12];
        assert_eq!(apesed_model_posteriors(model, x.as_ptr(), 4, dim, p.as_mut_ptr(), 12), ApesedStatus::Ok);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(
            apesed_model_posteriors(model, x.as_ptr(), 4, dim, p.as_mut_ptr(), 11),
            ApesedStatus::BufferTooSmall
        );
        assert_eq!(
            apesed_model_posteriors(model, x.as_ptr(), 2, dim * 2, p.as_mut_ptr(), 12),
            ApesedStatus::DimMismatch
        );
        assert!(last_error().contains("201"));

        let mut segs = ptr::null_mut();
        assert_eq!(apesed_detect_wav(model, c(&f.wav).as_ptr(), 0.0, &mut segs), ApesedStatus::Ok);
        let n = apesed_segments_len(segs);
        assert_eq!(
            apesed_segments_get(segs, n, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            ApesedStatus::InvalidArgument
        );
        assert!(apesed_segments_label_name(segs, n).is_null());
        apesed_segments_free(segs);
        apesed_model_free(model);
    }
}

#[test]
fn load_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        let missing = c(&dir.path().join("none.ckpt"));
        assert_eq!(apesed_model_load(missing.as_ptr(), &mut model), ApesedStatus::Io);
        assert!(last_error().contains("none.ckpt"));
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(apesed_model_load(c(&junk).as_ptr(), &mut model), ApesedStatus::Format);
        assert_eq!(apesed_model_load(ptr::null(), &mut model), ApesedStatus::NullPointer);
        assert!(model.is_null());
    }
}

#[test]
fn feature_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.apef");
    let values: Vec<f32> = (0..15).map(|i| i as f32 * 0.5).collect();
    let m = FrameMatrix {
        clip_id: "x".into(),
        kind: FeatureKind::External,
        values: Mat::from_vec(3, 5, values.clone()),
    };
    write_apef(&path, &m).unwrap();
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(apesed_features_read(c(&path).as_ptr(), &mut f), ApesedStatus::Ok);
        assert_eq!((apesed_features_num_frames(f), apesed_features_dim(f)), (3, 5));
        assert_eq!(std::slice::from_raw_parts(apesed_features_data(f), 15), values.as_slice());
        apesed_features_free(f);
    }
}

#[test]
fn aucpr_through_the_boundary() {
    let scores = [0.9, 0.8, 0.3, 0.1];
    let pos = [1u8, 0, 1, 0];
    let mut v = 0.0;
    let s = unsafe { apesed_aucpr(scores.as_ptr(), pos.as_ptr(), 4, &mut v) };
    assert_eq!(s, ApesedStatus::Ok);
    assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let s = unsafe { apesed_aucpr(ptr::null(), ptr::null(), 0, &mut v) };
    assert_eq!(s, ApesedStatus::NoPositives);
}

#[test]
fn c_program_links_against_static_library() {
    let f = fixture();
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libapesed_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = f._dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success());
    let out = Command::new(&exe).arg(&f.ckpt).arg(&f.wav).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}
