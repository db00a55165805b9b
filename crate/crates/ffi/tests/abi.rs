use std::ffi::{CStr, CString};
use std::ptr;

use ssmlab_ffi::*;

fn last_error() -> String {
    let p = ssmlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(seed: u64) -> *mut SsmlabModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ssmlab_model_new(SsmlabArch::VssmHier, seed, &mut m) }, SsmlabStatus::Ok);
    assert!(!m.is_null());
    m
}

fn shape(m: *const SsmlabModel) -> (usize, usize) {
    let (mut h, mut w, mut c, mut k) = (0, 0, 0, 0);
    assert_eq!(unsafe { ssmlab_model_shape(m, &mut h, &mut w, &mut c, &mut k) }, SsmlabStatus::Ok);
    (h * w * c, k)
}

fn gray(len: usize) -> Vec<f32> {
    (0..len).map(|i| (i % 17) as f32 / 16.0).collect()
}

#[test]
fn save_load_round_trip_preserves_logits() {
    let m = new_model(3);
    let (len, k) = shape(m);
    assert_eq!((len, k), (32 * 32 * 3, 10));
    let x = gray(len);
    let mut a = vec![0.0f32; k];
    assert_eq!(unsafe { ssmlab_model_logits(m, x.as_ptr(), len, a.as_mut_ptr(), k) }, SsmlabStatus::Ok);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ssmr").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ssmlab_model_save(m, path.as_ptr()) }, SsmlabStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ssmlab_model_load(path.as_ptr(), &mut back) }, SsmlabStatus::Ok);
    let mut b = vec![0.0f32; k];
    assert_eq!(unsafe { ssmlab_model_logits(back, x.as_ptr(), len, b.as_mut_ptr(), k) }, SsmlabStatus::Ok);
    assert_eq!(a, b);

    let mut class = usize::MAX;
    assert_eq!(unsafe { ssmlab_model_predict(back, x.as_ptr(), len, &mut class) }, SsmlabStatus::Ok);
    let best = (0..k).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap();
    assert_eq!(class, best);
    unsafe {
        ssmlab_model_free(m);
        ssmlab_model_free(back);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let missing = CString::new("/nonexistent/m.ssmr").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ssmlab_model_load(missing.as_ptr(), &mut out) }, SsmlabStatus::Io);
    assert!(last_error().contains("/nonexistent/m.ssmr"));
    assert!(out.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ssmr");
    std::fs::write(&junk, b"NOPE\x01\x00").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ssmlab_model_load(junk.as_ptr(), &mut out) }, SsmlabStatus::Format);
    assert!(last_error().contains("bad magic"));

    assert_eq!(unsafe { ssmlab_model_load(ptr::null(), &mut out) }, SsmlabStatus::NullPointer);
    assert_eq!(last_error(), "path is null");

    let m = new_model(1);
    let (len, k) = shape(m);
    let x = gray(len);
    let mut logits = vec![0.0f32; k];
    let status = unsafe { ssmlab_model_logits(m, x.as_ptr(), len - 1, logits.as_mut_ptr(), k) };
    assert_eq!(status, SsmlabStatus::InvalidArgument);
    assert!(last_error().contains("model expects"));
    let mut bad = x.clone();
    bad[0] = 2.0;
    let status = unsafe { ssmlab_model_logits(m, bad.as_ptr(), len, logits.as_mut_ptr(), k) };
    assert_eq!(status, SsmlabStatus::InvalidArgument);
    assert_eq!(unsafe { ssmlab_model_logits(ptr::null(), x.as_ptr(), len, logits.as_mut_ptr(), k) }, SsmlabStatus::NullPointer);
    unsafe { ssmlab_model_free(m) };
    unsafe { ssmlab_model_free(ptr::null_mut()) };
}

#[test]
fn attacks_respect_their_budgets() {
    let m = new_model(2);
    let (len, _) = shape(m);
    let x = gray(len);
    let mut adv = vec![0.0f32; len];
    let mut success = false;

    let mut p = ssmlab_attack_defaults(SsmlabAttack::Pgd);
    p.epsilon = 8.0 / 255.0;
    p.step_size = 2.0 / 255.0;
    let status = unsafe { ssmlab_attack(m, &p, x.as_ptr(), len, 0, adv.as_mut_ptr(), &mut success) };
    assert_eq!(status, SsmlabStatus::Ok);
    for (a, b) in adv.iter().zip(&x) {
        assert!((a - b).abs() <= p.epsilon + 1e-6);
        assert!((0.0..=1.0).contains(a));
    }

    let mut pf = ssmlab_attack_defaults(SsmlabAttack::PatchFool);
    assert_eq!(pf.iterations, 250);
    pf.iterations = 3;
    let status = unsafe { ssmlab_attack(m, &pf, x.as_ptr(), len, 0, adv.as_mut_ptr(), &mut success) };
    assert_eq!(status, SsmlabStatus::Ok);
    let changed = adv.iter().zip(&x).filter(|(a, b)| a != b).count();
    assert!(changed <= 4 * 4 * 3, "{changed} pixels changed outside one 4x4 patch");

    let status = unsafe { ssmlab_attack(m, &p, x.as_ptr(), len, 10, adv.as_mut_ptr(), &mut success) };
    assert_eq!(status, SsmlabStatus::InvalidArgument);
    unsafe { ssmlab_model_free(m) };
}

#[test]
fn version_and_header_agree_with_exports() {
    let v = unsafe { CStr::from_ptr(ssmlab_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ssmlab.h")).unwrap();
    for name in [
        "ssmlab_version",
        "ssmlab_last_error",
        "ssmlab_model_load",
        "ssmlab_model_new",
        "ssmlab_model_save",
        "ssmlab_model_free",
        "ssmlab_model_shape",
        "ssmlab_model_logits",
        "ssmlab_model_predict",
        "ssmlab_attack_defaults",
        "ssmlab_attack",
        "ssmlab_run_spec",
        "SSMLAB_STATUS_FORMAT",
        "typedef struct SsmlabModel SsmlabModel;",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    use std::path::PathBuf;
    use std::process::Command;

    let Some(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // the test binary lives in <target>/<profile>/deps
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libssmlab_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).arg(dir.path().join("m.ssmr")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which_cc() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|cc| std::process::Command::new(cc).arg("--version").output().is_ok())
}
