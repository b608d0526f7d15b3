use std::ffi::{CStr, CString};
use std::ptr;

use statesynth::nn::{random_nn, save_weights};
use statesynth_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ss_last_error()) }.to_string_lossy().into_owned()
}

fn weights_file(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("w.json");
    std::fs::write(&p, save_weights(&random_nn(3, 4, 4, 2, 5))).unwrap();
    p
}

#[test]
fn model_round_trip() {
    let json = CString::new(save_weights(&random_nn(2, 3, 4, 1, 9))).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ss_model_from_weights_json(json.as_ptr(), &mut m) }, SsStatus::Ok);
    let (mut l, mut s, mut p, mut h) = (0, 0, 0, 0);
    assert_eq!(unsafe { ss_model_dims(m, &mut l, &mut s, &mut p, &mut h) }, SsStatus::Ok);
    assert_eq!((l, s, p, h), (2, 4, 1, 3));

    // the reference path agrees with direct evaluation of the same network
    let nn = random_nn(2, 3, 4, 1, 9);
    let u = [0.4, -0.7];
    let mut y = [0.0];
    assert_eq!(unsafe { ss_simulate_reference(m, u.as_ptr(), 2, y.as_mut_ptr(), 1) }, SsStatus::Ok);
    let mut x: Vec<f64> = (0..4).map(|i| (nn.input_weights.get(0, i) * u[0] + nn.input_weights.get(1, i) * u[1] + nn.biases[0][i]).tanh()).collect();
    for (k, w) in nn.hidden_weights.iter().enumerate() {
        x = (0..4).map(|i| ((0..4).map(|j| w.get(i, j) * x[j]).sum::<f64>() + nn.biases[k + 1][i]).tanh()).collect();
    }
    let want: f64 = (0..4).map(|i| nn.output_weights.get(0, i) * x[i]).sum();
    assert!((y[0] - want).abs() < 1e-12);

    let mut yf = [0.0];
    assert_eq!(unsafe { ss_simulate_fixed(m, 16, 12, u.as_ptr(), 2, yf.as_mut_ptr(), 1) }, SsStatus::Ok);
    assert_eq!(yf[0] * 4096.0, (yf[0] * 4096.0).round());
    unsafe { ss_model_free(m) };
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let bad = CString::new("{\"version\": 1,").unwrap();
    assert_eq!(unsafe { ss_model_from_weights_json(bad.as_ptr(), &mut m) }, SsStatus::Validation);
    assert!(last_error().contains("line 1"), "{}", last_error());
    assert!(m.is_null());

    assert_eq!(unsafe { ss_model_from_weights_json(ptr::null(), &mut m) }, SsStatus::InvalidArgument);
    assert_eq!(unsafe { ss_model_random_nn(0, 1, 1, 1, 0, &mut m) }, SsStatus::InvalidArgument);
    let missing = CString::new("/nonexistent/w.json").unwrap();
    assert_eq!(unsafe { ss_model_load(missing.as_ptr(), &mut m) }, SsStatus::Io);

    assert_eq!(unsafe { ss_model_random_nn(3, 2, 4, 2, 1, &mut m) }, SsStatus::Ok);
    let mut y = [0.0; 2];
    let u = [0.0; 3];
    assert_eq!(unsafe { ss_simulate_fixed(m, 8, 9, u.as_ptr(), 3, y.as_mut_ptr(), 2) }, SsStatus::Validation);
    assert_eq!(unsafe { ss_simulate_fixed(m, 16, 12, u.as_ptr(), 3, y.as_mut_ptr(), 1) }, SsStatus::InvalidArgument);
    unsafe { ss_model_free(m) };
    unsafe { ss_model_free(ptr::null_mut()) };
}

#[test]
fn last_error_is_per_thread() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ss_model_random_nn(0, 1, 1, 1, 0, &mut m) }, SsStatus::InvalidArgument);
    let here = last_error();
    std::thread::spawn(|| assert_eq!(last_error(), "")).join().unwrap();
    assert_eq!(last_error(), here);
}

#[test]
fn compile_and_write() {
    let dir = tempfile::tempdir().unwrap();
    weights_file(dir.path());
    let cfg = CString::new(r#"{"model": "w.json", "gate_samples": 50, "passes": ["retime"]}"#).unwrap();
    let base = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { ss_compile(cfg.as_ptr(), base.as_ptr(), &mut p) }, SsStatus::Ok, "{}", last_error());
    let n = unsafe { ss_project_file_count(p) };
    assert_eq!(n, 10);
    let names: Vec<String> =
        (0..n).map(|i| unsafe { CStr::from_ptr(ss_project_file_name(p, i)) }.to_string_lossy().into_owned()).collect();
    assert_eq!(names[0], "top.v");
    assert!(unsafe { ss_project_file_name(p, n) }.is_null());
    let top = unsafe { CStr::from_ptr(ss_project_file_text(p, 0)) }.to_string_lossy();
    assert!(top.contains("module "));
    let (mut lat, mut ratio) = (0, 0);
    assert_eq!(unsafe { ss_project_summary(p, &mut lat, &mut ratio, ptr::null_mut()) }, SsStatus::Ok);
    // 1 + 4 * (ceil(4 / 4) + 2) + 1
    assert_eq!((lat, ratio), (14, 14));
    let out = CString::new(dir.path().join("rtl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ss_project_write(p, out.as_ptr()) }, SsStatus::Ok);
    assert_eq!(std::fs::read_to_string(dir.path().join("rtl/top.v")).unwrap(), top);
    unsafe { ss_project_free(p) };

    let slow = CString::new(r#"{"model": "w.json", "schedule": {"clock_ratio": 5}}"#).unwrap();
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { ss_compile(slow.as_ptr(), base.as_ptr(), &mut q) }, SsStatus::Infeasible);
    assert!(last_error().contains("clock_ratio 5"), "{}", last_error());
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().join("debug");
    let lib = target.join("libstatesynth_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let w = weights_file(dir.path());
    let exe = dir.path().join("smoke");
    let o = std::process::Command::new("cc")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = std::process::Command::new(&exe).arg(&w).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.starts_with("files 10 latency 14 ratio 14 first top.v"), "{out}");
}
