use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deapsam::Error;
use deapsam_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(deap_last_error()) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

const TINY: &str = "model.volume=16\nmodel.embed_dim=8\nencoder.layers=3\nencoder.heads=2\nencoder.adapter_dim=4\nencoder.taps=1,2,3\nprompter.layer=3\nprompter.reduced_tokens=8\ndecoder.channels=2\n";

fn tiny_config() -> *mut DeapConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { deap_config_parse(c(TINY).as_ptr(), &mut cfg) }, DEAP_OK);
    cfg
}

fn config_text(cfg: *const DeapConfig) -> String {
    let mut need = 0;
    assert_eq!(unsafe { deap_config_text(cfg, ptr::null_mut(), 0, &mut need) }, DEAP_ERR_BUFFER);
    let mut buf = vec![0u8; need];
    assert_eq!(unsafe { deap_config_text(cfg, buf.as_mut_ptr().cast(), need, &mut need) }, DEAP_OK);
    CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap().to_owned()
}

#[test]
fn status_codes_match_library_errors() {
    let pairs = [
        (Error::InvalidArgument(String::new()), DEAP_ERR_INVALID_ARGUMENT),
        (Error::Config(String::new()), DEAP_ERR_CONFIG),
        (Error::Header(String::new()), DEAP_ERR_HEADER),
        (Error::NonDeterministic, DEAP_ERR_NON_DETERMINISTIC),
        (Error::UnknownParameter(String::new()), DEAP_ERR_UNKNOWN_PARAMETER),
        (Error::MissingParameter(String::new()), DEAP_ERR_MISSING_PARAMETER),
        (Error::NonFiniteGradient(String::new()), DEAP_ERR_NON_FINITE_GRADIENT),
        (Error::NonFiniteVoxel { index: 0 }, DEAP_ERR_NON_FINITE_VOXEL),
        (Error::PayloadMismatch { expected: 0, found: 0 }, DEAP_ERR_PAYLOAD),
        (Error::BadMagic { expected: "", found: String::new() }, DEAP_ERR_BAD_MAGIC),
        (Error::Diverged { step: 0, reason: String::new() }, DEAP_ERR_DIVERGED),
        (Error::NonScalarLoss { shape: vec![] }, DEAP_ERR_NON_SCALAR_LOSS),
        (Error::NonFinite { op: String::new() }, DEAP_ERR_NON_FINITE),
        (Error::io("x", std::io::Error::other("x")), DEAP_ERR_IO),
    ];
    for (e, code) in pairs {
        assert_eq!(e.code(), code, "{e}");
    }
    let version = unsafe { CStr::from_ptr(deap_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_set_and_text() {
    let cfg = tiny_config();
    assert_eq!(unsafe { deap_config_set(cfg, c("train.epochs").as_ptr(), c("7").as_ptr()) }, DEAP_OK);
    assert_eq!(last_error(), "");
    let text = config_text(cfg);
    assert!(text.contains("train.epochs=7\n") && text.contains("model.volume=16,16,16\n"));

    assert_eq!(
        unsafe { deap_config_set(cfg, c("train.nope").as_ptr(), c("1").as_ptr()) },
        DEAP_ERR_CONFIG
    );
    assert!(last_error().contains("train.nope"));
    // A value that parses but fails validation leaves the config as it was.
    assert_eq!(unsafe { deap_config_set(cfg, c("train.epochs").as_ptr(), c("0").as_ptr()) }, DEAP_ERR_CONFIG);
    assert_eq!(config_text(cfg), text);

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { deap_config_parse(c("model.embed_dim=x").as_ptr(), &mut bad) }, DEAP_ERR_CONFIG);
    assert!(bad.is_null());
    unsafe { deap_config_free(cfg) };
}

#[test]
fn null_and_utf8_misuse_reported() {
    assert_eq!(unsafe { deap_config_new(ptr::null_mut()) }, DEAP_ERR_NULL);
    assert!(last_error().contains("out"));
    let mut cfg = ptr::null_mut();
    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { deap_config_parse(invalid.as_ptr().cast(), &mut cfg) }, DEAP_ERR_UTF8);
    let mut d = 0.0;
    let mut s = 0.0;
    assert_eq!(unsafe { deap_metrics(ptr::null(), ptr::null(), 1.0, &mut d, &mut s) }, DEAP_ERR_NULL);
    unsafe {
        deap_config_free(ptr::null_mut());
        deap_model_free(ptr::null_mut());
    }
}

#[test]
fn phantom_metrics_and_masks() {
    let (mut v, mut m) = (ptr::null_mut(), ptr::null_mut());
    let dims = [16usize; 3];
    assert_eq!(unsafe { deap_phantom(3, dims.as_ptr(), 1, 0.02, &mut v, &mut m) }, DEAP_OK);
    let (mut got, mut ch) = ([0usize; 3], 0);
    assert_eq!(unsafe { deap_volume_dims(v, got.as_mut_ptr(), &mut ch) }, DEAP_OK);
    assert_eq!((got, ch), (dims, 1));

    let (mut d, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { deap_metrics(m, m, 1.0, &mut d, &mut s) }, DEAP_OK);
    assert_eq!((d, s), (1.0, 1.0));

    let mut len = 0;
    assert_eq!(unsafe { deap_mask_data(m, ptr::null_mut(), 0, &mut len) }, DEAP_ERR_BUFFER);
    let mut bits = vec![0u8; len];
    assert_eq!(unsafe { deap_mask_data(m, bits.as_mut_ptr(), len, &mut len) }, DEAP_OK);
    assert!(bits.contains(&1));

    // Empty prediction against a nonempty truth.
    let mut empty = ptr::null_mut();
    let zeros = vec![0u8; len];
    assert_eq!(unsafe { deap_mask_new(dims.as_ptr(), zeros.as_ptr(), len, &mut empty) }, DEAP_OK);
    assert_eq!(unsafe { deap_metrics(empty, m, 1.0, &mut d, &mut s) }, DEAP_OK);
    assert_eq!((d, s), (0.0, 0.0));

    let mut wrong = ptr::null_mut();
    assert_eq!(unsafe { deap_mask_new(dims.as_ptr(), zeros.as_ptr(), len - 1, &mut wrong) }, DEAP_ERR_SHAPE);
    unsafe {
        deap_mask_free(empty);
        deap_mask_free(m);
        deap_volume_free(v);
    }
}

#[test]
fn model_predict_save_load() {
    let cfg = tiny_config();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { deap_model_new(cfg, &mut model) }, DEAP_OK);
    let (mut v, mut m) = (ptr::null_mut(), ptr::null_mut());
    let dims = [16usize; 3];
    assert_eq!(unsafe { deap_phantom(1, dims.as_ptr(), 1, 0.02, &mut v, &mut m) }, DEAP_OK);

    let mut n = 0;
    assert_eq!(unsafe { deap_model_predict(model, v, ptr::null_mut(), 0, &mut n) }, DEAP_ERR_BUFFER);
    assert_eq!(n, 16 * 16 * 16);
    let mut probs = vec![0f32; n];
    assert_eq!(unsafe { deap_model_predict(model, v, probs.as_mut_ptr(), n, &mut n) }, DEAP_OK);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.ckpt").to_str().unwrap());
    assert_eq!(unsafe { deap_model_save(model, path.as_ptr()) }, DEAP_OK);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { deap_model_load(path.as_ptr(), &mut back) }, DEAP_OK);
    let mut again = vec![0f32; n];
    assert_eq!(unsafe { deap_model_predict(back, v, again.as_mut_ptr(), n, &mut n) }, DEAP_OK);
    assert_eq!(
        probs.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        again.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
    );

    let mut pm = ptr::null_mut();
    assert_eq!(unsafe { deap_mask_from_probabilities(dims.as_ptr(), probs.as_ptr(), n, &mut pm) }, DEAP_OK);
    let (mut d, mut s) = (-1.0, -1.0);
    assert_eq!(unsafe { deap_metrics(pm, m, 1.0, &mut d, &mut s) }, DEAP_OK);
    assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&s));

    let missing = c(dir.path().join("none.ckpt").to_str().unwrap());
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { deap_model_load(missing.as_ptr(), &mut none) }, DEAP_ERR_IO);
    unsafe {
        deap_mask_free(pm);
        deap_model_free(back);
        deap_model_free(model);
        deap_mask_free(m);
        deap_volume_free(v);
        deap_config_free(cfg);
    }
}

#[test]
fn sharing_reduction_through_c_interface() {
    let feature = [32usize, 32, 32, 256];
    for mac in [1, 2] {
        let mut r = 0.0;
        assert_eq!(unsafe { deap_sharing_reduction(feature.as_ptr(), 64, mac, &mut r) }, DEAP_OK);
        assert!((r - 512.0 / 1920.0).abs() < 1e-12);
    }
    let mut r = 0.0;
    assert_eq!(
        unsafe { deap_sharing_reduction(feature.as_ptr(), 64, 3, &mut r) },
        DEAP_ERR_INVALID_ARGUMENT
    );
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_is_current_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/deapsam.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["deap_last_error", "deap_model_predict", "deap_sharing_reduction", "typedef struct DeapModel DeapModel"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let lib = target_dir().join("libdeapsam_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("skipping C link check: cc or {} unavailable", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "deapsam.h"
int main(void) {
    size_t feature[4] = {32, 32, 32, 256};
    double r = 0.0;
    if (deap_sharing_reduction(feature, 64, 2, &r) != DEAP_OK) return 1;
    DeapConfig *cfg = NULL;
    if (deap_config_parse("model.nope=1", &cfg) != DEAP_ERR_CONFIG) return 2;
    if (deap_last_error()[0] == '\0') return 3;
    if (deap_config_new(&cfg) != DEAP_OK) return 4;
    deap_config_free(cfg);
    printf("%.4f\n", r);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile/link failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.2667");
}
