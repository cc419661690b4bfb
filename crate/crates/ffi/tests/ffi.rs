use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use drnet::classifier::{build_classifier, ClassifierConfig};
use drnet::pipeline::save_classifier;
use drnet_ffi::*;
use image::{Rgb, RgbImage};
use tempfile::TempDir;

fn last_error() -> String {
    let p = drnet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> CString {
    let config = ClassifierConfig { stem_channels: 4, widths: vec![4, 8], fc: vec![8], input_size: 16 };
    let (model, params) = build_classifier(config, 3).unwrap();
    let path = dir.join("model.drnet");
    save_classifier(&model, &params, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn classifier_round_trip_matches_core() {
    let dir = TempDir::new().unwrap();
    let path = tiny_checkpoint(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { drnet_classifier_load(path.as_ptr(), &mut handle) }, DrnetStatus::Ok);
    assert!(drnet_last_error().is_null());
    assert_eq!(unsafe { drnet_classifier_input_size(handle) }, 16);

    let pixels: Vec<f32> = (0..256).map(|i| (i as f32 / 128.0) - 1.0).collect();
    let mut probs = [0f32; DRNET_NUM_CLASSES];
    let mut class = u32::MAX;
    let status = unsafe { drnet_classifier_predict(handle, pixels.as_ptr(), 16, probs.as_mut_ptr(), &mut class) };
    assert_eq!(status, DrnetStatus::Ok);
    assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);

    let (model, params) = drnet::pipeline::load_classifier(Path::new(path.to_str().unwrap())).unwrap();
    let t = drnet::tensor::Tensor::new([1, 1, 16, 16], pixels.clone()).unwrap();
    let expected = model.predict(&params, &t).unwrap();
    assert_eq!(&probs[..], expected.data());
    assert_eq!(class as usize, drnet::classifier::predict_class(expected.data()).unwrap().index());

    let status = unsafe { drnet_classifier_predict(handle, pixels.as_ptr(), 8, probs.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, DrnetStatus::InvalidArgument);
    assert!(last_error().contains("expects 16"));
    unsafe { drnet_classifier_free(handle) };
    unsafe { drnet_classifier_free(ptr::null_mut()) };
}

#[test]
fn load_errors_are_reported() {
    let missing = CString::new("/nonexistent/model.drnet").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { drnet_classifier_load(missing.as_ptr(), &mut handle) }, DrnetStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/model.drnet"));
    assert_eq!(unsafe { drnet_classifier_load(ptr::null(), &mut handle) }, DrnetStatus::NullPointer);
    assert_eq!(unsafe { drnet_classifier_load(missing.as_ptr(), ptr::null_mut()) }, DrnetStatus::NullPointer);

    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.drnet");
    std::fs::write(&junk, b"DRNET1\x09").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { drnet_classifier_load(junk.as_ptr(), &mut handle) }, DrnetStatus::Data);
}

#[test]
fn report_of_a_known_matrix() {
    let mut counts = [0u64; 25];
    counts[0] = 8;
    counts[1] = 2;
    counts[6] = 5;
    counts[12] = 3;
    counts[18] = 1;
    counts[21] = 1;
    counts[24] = 4;
    let mut r = DrnetReport::default();
    assert_eq!(unsafe { drnet_classification_report(counts.as_ptr(), &mut r) }, DrnetStatus::Ok);
    assert_eq!(r.total, 24);
    assert_eq!(r.accuracy, 21.0 / 24.0);
    assert_eq!(r.classes[0].recall, 0.8);
    assert_eq!(r.classes[0].precision, 1.0);
    assert_eq!(r.classes[1].precision, 5.0 / 8.0);
    assert_eq!(r.classes[4].support, 5);

    let zeros = [0u64; 25];
    assert_eq!(unsafe { drnet_classification_report(zeros.as_ptr(), &mut r) }, DrnetStatus::Data);
    assert_eq!(unsafe { drnet_classification_report(ptr::null(), &mut r) }, DrnetStatus::NullPointer);
}

#[test]
fn preprocess_file_fills_the_buffer() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("eye.png");
    RgbImage::from_fn(60, 50, |x, y| {
        let d = ((x as f64 - 30.0).powi(2) + (y as f64 - 25.0).powi(2)).sqrt();
        if d < 22.0 {
            Rgb([180, 90, 40])
        } else {
            Rgb([0, 0, 0])
        }
    })
    .save(&path)
    .unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    let mut out = vec![f32::NAN; 32 * 32];
    assert_eq!(unsafe { drnet_preprocess_file(path.as_ptr(), 32, out.as_mut_ptr(), out.len()) }, DrnetStatus::Ok);
    assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(out[0], -1.0);
    assert_eq!(
        unsafe { drnet_preprocess_file(path.as_ptr(), 32, out.as_mut_ptr(), 100) },
        DrnetStatus::InvalidArgument
    );
}

#[test]
fn lr_schedule_steps() {
    assert_eq!(drnet_lr_schedule(0.001, 9), 0.001);
    assert_eq!(drnet_lr_schedule(0.001, 10), 0.0001);
    assert_eq!(drnet_lr_schedule(0.001, 25), 1e-5);
    let v = unsafe { CStr::from_ptr(drnet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// The generated header must compile as C and link against the static library.
#[test]
fn header_compiles_and_links_from_c() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "drnet.h"
#include <stdio.h>
int main(void) {
    uint64_t counts[25] = {0};
    for (int i = 0; i < 5; i++) counts[i * 5 + i] = 3;
    DrnetReport r;
    if (drnet_classification_report(counts, &r) != DRNET_STATUS_OK) return 1;
    if (r.total != 15 || r.accuracy != 1.0) return 2;
    DrnetClassifier *h = NULL;
    if (drnet_classifier_load("/nonexistent", &h) != DRNET_STATUS_IO || h != NULL) return 3;
    if (drnet_last_error() == NULL) return 4;
    printf("%s %g\n", drnet_version(), drnet_lr_schedule(0.001, 10));
    return 0;
}
"#,
    )
    .unwrap();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = lib_dir.join("libdrnet_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc runs");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("{} 0.0001\n", env!("CARGO_PKG_VERSION")));
}
