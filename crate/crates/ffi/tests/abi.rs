use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use cycledepth::pipeline::{predict_disparity, save_bundle, save_oracle, Which};
use cycledepth::{compute_metrics, NetworkBundle, NetworkConfig, Shape, Tensor};
use cycledepth_ffi::*;

const H: usize = 16;
const W: usize = 32;

fn tiny_bundle() -> NetworkBundle<f32> {
    let cfg = NetworkConfig {
        base_channels: 2,
        ..NetworkConfig::default()
    };
    NetworkBundle::new(cfg, H, W).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = cd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image() -> Vec<f32> {
    (0..3 * H * W).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

#[test]
fn infer_matches_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let bundle = tiny_bundle();
    save_bundle(&bundle, &[], &path).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(cpath(&path).as_ptr(), &mut model) }, CdStatus::Ok);
    assert!(cd_last_error().is_null());
    let (mut h, mut w) = (0, 0);
    assert_eq!(unsafe { cd_model_dims(model, &mut h, &mut w) }, CdStatus::Ok);
    assert_eq!((h, w), (H, W));

    let img = image();
    let tensor = Tensor::from_vec(Shape::new(1, 3, H, W), img.clone()).unwrap();
    for (code, which) in [(CD_WHICH_STUDENT, Which::Student), (CD_WHICH_TEACHER, Which::Teacher)] {
        let mut out = vec![0.0f32; H * W];
        let s = unsafe { cd_model_infer(model, img.as_ptr(), H, W, code, out.as_mut_ptr()) };
        assert_eq!(s, CdStatus::Ok);
        let want = predict_disparity(&bundle, &tensor, which).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(want.data()));
    }
    unsafe { cd_model_free(model) };
}

#[test]
fn infer_rejects_wrong_size_and_unknown_which() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_bundle(&tiny_bundle(), &[], &path).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(cpath(&path).as_ptr(), &mut model) }, CdStatus::Ok);
    let img = image();
    let mut out = vec![0.0f32; H * W];
    let s = unsafe { cd_model_infer(model, img.as_ptr(), W, H, CD_WHICH_STUDENT, out.as_mut_ptr()) };
    assert_eq!(s, CdStatus::ShapeMismatch);
    assert!(last_error().contains("model expects"));
    let s = unsafe { cd_model_infer(model, img.as_ptr(), H, W, 7, out.as_mut_ptr()) };
    assert_eq!(s, CdStatus::InvalidArgument);
    unsafe { cd_model_free(model) };
}

#[test]
fn load_failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();

    let missing = dir.path().join("nope.ckpt");
    assert_eq!(unsafe { cd_model_load(cpath(&missing).as_ptr(), &mut model) }, CdStatus::Io);
    assert!(last_error().contains("nope.ckpt"));
    assert!(model.is_null());

    let oracle = dir.path().join("oracle.ckpt");
    save_oracle(&oracle).unwrap();
    assert_eq!(unsafe { cd_model_load(cpath(&oracle).as_ptr(), &mut model) }, CdStatus::Checkpoint);

    assert_eq!(unsafe { cd_model_load(ptr::null(), &mut model) }, CdStatus::NullPointer);
    assert_eq!(last_error(), "path is NULL");
    unsafe { cd_model_free(ptr::null_mut()) };
}

#[test]
fn depth_conversion_and_metrics() {
    let disp = [2.0f32, 4.0, 0.0];
    let mut depth = [0.0f64; 3];
    let s = unsafe { cd_disparity_to_depth(disp.as_ptr(), 3, 10.0, 0.5, 0.0, depth.as_mut_ptr()) };
    assert_eq!(s, CdStatus::Ok);
    assert_eq!(depth, [2.5, 1.25, 5.0 / cycledepth::pipeline::MIN_DISPARITY]);

    let s = unsafe { cd_disparity_to_depth(disp.as_ptr(), 3, -1.0, 0.5, 0.0, depth.as_mut_ptr()) };
    assert_eq!(s, CdStatus::InvalidArgument);

    let pred = [2.0, 3.0, 4.0, 1.0];
    let gt = [1.0, 3.0, 5.0, 0.0];
    let mut r = CdEvalReport::default();
    assert_eq!(unsafe { cd_compute_metrics(pred.as_ptr(), gt.as_ptr(), 4, 80.0, &mut r) }, CdStatus::Ok);
    let want = compute_metrics(&pred, &gt, 80.0).unwrap();
    assert_eq!(r.abs_rel, want.abs_rel);
    assert_eq!(r.rmse_log, want.rmse_log);
    assert_eq!(r.a3, want.a3);
    assert_eq!(r.pixels, 3);

    let s = unsafe { cd_compute_metrics(pred.as_ptr(), gt.as_ptr(), 4, 80.0, ptr::null_mut()) };
    assert_eq!(s, CdStatus::NullPointer);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
