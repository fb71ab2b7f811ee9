use std::ffi::{CStr, CString};
use std::ptr;

use gasvsf::checks::micro_config;
use gasvsf::detector::{build_model, save_model, Variant};
use gasvsf_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gasvsf_last_error()) }.to_string_lossy().into_owned()
}

fn small_clip() -> *mut GasvsfClip {
    let cfg = CString::new("generator.width = 32\ngenerator.height = 32\ngenerator.frames = 2\n").unwrap();
    let mut clip = ptr::null_mut();
    assert_eq!(unsafe { gasvsf_clip_generate(3, 0, cfg.as_ptr(), &mut clip) }, GasvsfStatus::Ok);
    clip
}

#[test]
fn bias_and_iou() {
    let mut v = f64::NAN;
    assert_eq!(unsafe { gasvsf_bias_data(0, 0, 8, &mut v) }, GasvsfStatus::Ok);
    assert_eq!(v, gasvsf::vsf::bias_data(0, 0, 8).unwrap());
    assert_eq!(unsafe { gasvsf_bias_fea(63, 64, &mut v) }, GasvsfStatus::Ok);
    assert_eq!(v, gasvsf::vsf::bias_fea(63, 64).unwrap());
    let (a, b) = ([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 3.0, 2.0]);
    assert_eq!(unsafe { gasvsf_iou(a.as_ptr(), b.as_ptr(), &mut v) }, GasvsfStatus::Ok);
    assert_eq!(v, 1.0 / 3.0);
    assert_eq!(unsafe { gasvsf_iou(a.as_ptr(), a.as_ptr(), ptr::null_mut()) }, GasvsfStatus::NullPointer);
    assert!(last_error().contains("null"));
    let flat = [1.0, 1.0, 1.0, 2.0];
    assert_eq!(unsafe { gasvsf_iou(a.as_ptr(), flat.as_ptr(), &mut v) }, GasvsfStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn zero_shift_is_identity() {
    let (c, h, w, t) = (2, 3, 4, 2);
    let x: Vec<f64> = (0..c * h * w * t).map(|i| i as f64 * 0.5).collect();
    let mut y = vec![0.0; x.len()];
    let st = unsafe { gasvsf_vsf_shift(x.as_ptr(), c, h, w, t, ptr::null(), 0, 7, y.as_mut_ptr()) };
    assert_eq!(st, GasvsfStatus::Ok, "{}", last_error());
    assert_eq!(x, y);
    let st = unsafe { gasvsf_vsf_shift(x.as_ptr(), c, h, w, t, ptr::null(), 9, 7, y.as_mut_ptr()) };
    assert_eq!(st, GasvsfStatus::InvalidArgument);
}

#[test]
fn clip_accessors() {
    let clip = small_clip();
    let (mut w, mut h, mut n) = (0, 0, 0);
    assert_eq!(unsafe { gasvsf_clip_dims(clip, &mut w, &mut h, &mut n) }, GasvsfStatus::Ok);
    assert_eq!((w, h, n), (32, 32, 2));
    let mut buf = vec![0u8; w * h];
    assert_eq!(unsafe { gasvsf_clip_frame(clip, 1, buf.as_mut_ptr(), buf.len()) }, GasvsfStatus::Ok);
    assert!(buf.iter().any(|&p| p != 0));
    assert_eq!(unsafe { gasvsf_clip_frame(clip, 1, buf.as_mut_ptr(), 10) }, GasvsfStatus::BufferTooSmall);
    assert_eq!(unsafe { gasvsf_clip_frame(clip, 2, buf.as_mut_ptr(), buf.len()) }, GasvsfStatus::InvalidArgument);
    let mut bbox = [0.0; 4];
    let mut present = -1;
    assert_eq!(unsafe { gasvsf_clip_box(clip, 0, bbox.as_mut_ptr(), &mut present) }, GasvsfStatus::Ok);
    assert!(present == 0 || bbox[2] > bbox[0]);
    unsafe { gasvsf_clip_free(clip) };
    unsafe { gasvsf_clip_free(ptr::null_mut()) };
    assert_eq!(unsafe { gasvsf_clip_dims(ptr::null(), &mut w, &mut h, &mut n) }, GasvsfStatus::NullPointer);
}

#[test]
fn bad_config_and_paths() {
    let mut clip = ptr::null_mut();
    let cfg = CString::new("generator.frames = zero").unwrap();
    assert_eq!(unsafe { gasvsf_clip_generate(0, 0, cfg.as_ptr(), &mut clip) }, GasvsfStatus::Config);
    assert!(clip.is_null());
    let dir = CString::new("/nonexistent/clip").unwrap();
    let st = unsafe { gasvsf_clip_read(dir.as_ptr(), &mut clip) };
    assert!(matches!(st, GasvsfStatus::Io | GasvsfStatus::Format), "{st:?}");
    let mut model = ptr::null_mut();
    assert_ne!(unsafe { gasvsf_model_load(dir.as_ptr(), &mut model) }, GasvsfStatus::Ok);
}

#[test]
fn model_detects_through_the_abi() {
    let tmp = tempfile::tempdir().unwrap();
    let model = build_model(&micro_config(Variant::VsfFull), 1).unwrap();
    save_model(tmp.path(), &model).unwrap();
    let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gasvsf_model_load(dir.as_ptr(), &mut m) }, GasvsfStatus::Ok, "{}", last_error());
    let clip = small_clip();
    let mut count = 0;
    let st = unsafe { gasvsf_model_detect(m, clip, ptr::null_mut(), 0, &mut count) };
    assert!(st == GasvsfStatus::Ok || st == GasvsfStatus::BufferTooSmall);
    let mut dets = vec![GasvsfDetection::default(); count];
    assert_eq!(unsafe { gasvsf_model_detect(m, clip, dets.as_mut_ptr(), dets.len(), &mut count) }, GasvsfStatus::Ok);
    for d in &dets {
        assert!(d.frame < 2 && d.x2 > d.x1 && d.y2 > d.y1 && (0.0..=1.0).contains(&d.score));
    }
    unsafe {
        gasvsf_clip_free(clip);
        gasvsf_model_free(m);
    }
}
