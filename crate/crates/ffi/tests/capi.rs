use std::ffi::{CStr, CString};
use std::ptr;

use proxyform_ffi::*;

fn last_error() -> String {
    let p = pf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut PfConfig {
    let json = CString::new(r#"{"grid_counts": [4, 4, 3], "channels": 16, "layers": 1}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pf_config_from_json(json.as_ptr(), &mut cfg) }, PfStatus::Ok);
    cfg
}

fn cloud_xyz(cloud: *const PfCloud) -> Vec<f64> {
    let n = unsafe { pf_cloud_len(cloud) };
    let mut buf = vec![0.0; 3 * n];
    assert_eq!(unsafe { pf_cloud_copy_xyz(cloud, buf.as_mut_ptr(), buf.len()) }, PfStatus::Ok);
    buf
}

#[test]
fn enhance_round_trip_is_identity_at_init() {
    let cfg = small_config();
    let mut kept = 0;
    assert_eq!(unsafe { pf_config_kept_clusters(cfg, &mut kept) }, PfStatus::Ok);
    assert_eq!(kept, 19);

    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { pf_scene_generate(400, 5, &mut scene) }, PfStatus::Ok);
    let mut out = ptr::null_mut();
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { pf_enhance(cfg, scene, &mut out, &mut report) }, PfStatus::Ok);
    assert_eq!(cloud_xyz(out), cloud_xyz(scene));

    let mut report_kept = 0;
    assert_eq!(unsafe { pf_report_kept_clusters(report, &mut report_kept) }, PfStatus::Ok);
    assert_eq!(report_kept, 19);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { pf_report_to_json(report, &mut json) }, PfStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"kept_clusters\": 19"));
    unsafe {
        pf_string_free(json);
        pf_report_free(report);
        pf_cloud_free(out);
        pf_cloud_free(scene);
        pf_config_free(cfg);
    }
}

#[test]
fn report_is_optional() {
    let cfg = small_config();
    let xyz = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.2, 0.9];
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { pf_cloud_new(xyz.as_ptr(), 3, &mut cloud) }, PfStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pf_enhance(cfg, cloud, &mut out, ptr::null_mut()) }, PfStatus::Ok);
    assert_eq!(cloud_xyz(out), xyz);
    unsafe {
        pf_cloud_free(out);
        pf_cloud_free(cloud);
        pf_config_free(cfg);
    }
}

#[test]
fn config_json_round_trip_and_seed() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pf_config_default(1, &mut cfg) }, PfStatus::Ok);
    assert_eq!(unsafe { pf_config_set_seed(cfg, 42) }, PfStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { pf_config_to_json(cfg, &mut json) }, PfStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_owned();
    assert!(text.to_str().unwrap().contains("\"seed\": 42"));
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pf_config_from_json(text.as_ptr(), &mut back) }, PfStatus::Ok);
    let mut kept = 0;
    assert_eq!(unsafe { pf_config_kept_clusters(back, &mut kept) }, PfStatus::Ok);
    assert_eq!(kept, 691);
    unsafe {
        pf_string_free(json);
        pf_config_free(back);
        pf_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new(r#"{"channels": 64}"#).unwrap();
    assert_eq!(unsafe { pf_config_from_json(bad.as_ptr(), &mut cfg) }, PfStatus::InvalidConfig);
    assert!(cfg.is_null());
    assert!(last_error().contains("fourth power"));

    let malformed = CString::new("{\"seed\": }").unwrap();
    assert_eq!(unsafe { pf_config_from_json(malformed.as_ptr(), &mut cfg) }, PfStatus::Parse);
    assert!(last_error().contains("line 1"));

    assert_eq!(unsafe { pf_config_from_json(ptr::null(), &mut cfg) }, PfStatus::NullPointer);
    assert_eq!(unsafe { pf_config_kept_clusters(ptr::null(), &mut 0) }, PfStatus::NullPointer);
    assert_eq!(unsafe { pf_cloud_new(ptr::null(), 2, &mut ptr::null_mut()) }, PfStatus::NullPointer);

    let missing = CString::new("/nonexistent/dir/cloud.ply").unwrap();
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { pf_cloud_read(missing.as_ptr(), PfFormat::Auto, &mut cloud) }, PfStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/cloud.ply"));
    let unknown = CString::new("cloud.xyz").unwrap();
    assert_eq!(unsafe { pf_cloud_read(unknown.as_ptr(), PfFormat::Auto, &mut cloud) }, PfStatus::InvalidArgument);
}

#[test]
fn short_buffer_is_rejected() {
    let xyz = [1.0, 2.0, 3.0];
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { pf_cloud_new(xyz.as_ptr(), 1, &mut cloud) }, PfStatus::Ok);
    let mut buf = [0.0; 2];
    assert_eq!(unsafe { pf_cloud_copy_xyz(cloud, buf.as_mut_ptr(), 2) }, PfStatus::InvalidArgument);
    unsafe { pf_cloud_free(cloud) };
}

#[test]
fn free_accepts_null() {
    unsafe {
        pf_cloud_free(ptr::null_mut());
        pf_config_free(ptr::null_mut());
        pf_report_free(ptr::null_mut());
        pf_string_free(ptr::null_mut());
    }
    assert_eq!(unsafe { pf_cloud_len(ptr::null()) }, 0);
}

#[test]
fn cloud_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = [0.1, -2.5, 3.25, 1e-7, 0.0, 123456.789];
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { pf_cloud_new(xyz.as_ptr(), 2, &mut cloud) }, PfStatus::Ok);
    for name in ["c.ply", "c.csv"] {
        let path = CString::new(dir.path().join(name).to_str().unwrap()).unwrap();
        assert_eq!(unsafe { pf_cloud_write(cloud, path.as_ptr(), PfFormat::Auto) }, PfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(unsafe { pf_cloud_read(path.as_ptr(), PfFormat::Auto, &mut back) }, PfStatus::Ok);
        assert_eq!(cloud_xyz(back), xyz);
        unsafe { pf_cloud_free(back) };
    }
    unsafe { pf_cloud_free(cloud) };
}

#[test]
fn flops_match_the_accountant() {
    let mut s = PfFlops::default();
    let mut p = PfFlops::default();
    assert_eq!(unsafe { pf_flops(691, 32, 256, 4, 1, PfVariant::SelfAttention, &mut s) }, PfStatus::Ok);
    assert_eq!(unsafe { pf_flops(691, 32, 256, 4, 1, PfVariant::Proxy, &mut p) }, PfStatus::Ok);
    assert_eq!(s.attention_core, 4 * 691 * 691 * 256);
    assert_eq!(p.attention_core, 8 * 691 * 32 * 256);
    assert_eq!(s.total, s.projections + s.attention_core + s.ffn + s.bias);
    assert!(p.params > s.params);
}

#[test]
fn gradcheck_passes() {
    let mut worst = f64::NAN;
    let mut passed = 0;
    assert_eq!(unsafe { pf_gradcheck(2, 9, &mut worst, &mut passed) }, PfStatus::Ok);
    assert_eq!(passed, 1);
    assert!(worst <= 1e-5);
    assert_eq!(unsafe { pf_gradcheck(0, 9, &mut worst, ptr::null_mut()) }, PfStatus::InvalidArgument);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(pf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
