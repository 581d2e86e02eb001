//! Exercises the C ABI exactly as a foreign caller would: through raw
//! pointers and status codes.

use std::ffi::{CStr, CString};

use skipdepth::data::checkpoint::save_checkpoint;
use skipdepth::model::{DepthModel, ModelConfig};
use skipdepth::scalar::Precision;

use skipdepth_ffi::{
    sd_last_error_message, sd_metrics, sd_model_depth_range, sd_model_free, sd_model_infer,
    sd_model_load, sd_version, SdMetricReport, SdStatus,
};

fn tiny_checkpoint(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("skipdepth-ffi-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = ModelConfig {
        backbone_channels: vec![2, 3, 4, 5],
        decoder_channels: vec![4, 8, 8, 12],
        heads: vec![2, 2, 2, 2],
        pqi_channels: 6,
        bcp_hidden: 8,
        n_bins: 8,
        ..ModelConfig::default()
    };
    let model = DepthModel::<f32>::init(cfg, 5).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&path, &model, Precision::F32).unwrap();
    path
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sd_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_valid_c_string() {
    let v = unsafe { CStr::from_ptr(sd_version()) }.to_str().unwrap();
    assert!(!v.is_empty());
}

#[test]
fn load_infer_metrics_round_trip() {
    let ckpt = tiny_checkpoint("roundtrip");
    let c_path = CString::new(ckpt.to_str().unwrap()).unwrap();

    let mut handle: *mut skipdepth_ffi::SdModel = std::ptr::null_mut();
    let status = unsafe { sd_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, SdStatus::SdOk, "{}", last_error());
    assert!(!handle.is_null());

    let (mut d_min, mut d_max) = (0.0f64, 0.0f64);
    let status = unsafe { sd_model_depth_range(handle, &mut d_min, &mut d_max) };
    assert_eq!(status, SdStatus::SdOk);
    assert!(d_min > 0.0 && d_min < d_max);

    let (h, w) = (192usize, 192usize);
    let mut rgb = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let v = (y as f32 / h as f32 + x as f32 / w as f32) / 2.0;
            rgb[(y * w + x) * 3] = v;
            rgb[(y * w + x) * 3 + 1] = 1.0 - v;
            rgb[(y * w + x) * 3 + 2] = 0.5;
        }
    }
    let mut depth = vec![0.0f32; h * w];
    let status = unsafe { sd_model_infer(handle, rgb.as_ptr(), h, w, 0, depth.as_mut_ptr()) };
    assert_eq!(status, SdStatus::SdOk, "{}", last_error());
    assert!(depth.iter().all(|d| (*d as f64) > d_min && (*d as f64) < d_max));

    // flip averaging stays in range too
    let status = unsafe { sd_model_infer(handle, rgb.as_ptr(), h, w, 1, depth.as_mut_ptr()) };
    assert_eq!(status, SdStatus::SdOk);

    // metrics of the prediction against itself are perfect
    let mut report = SdMetricReport {
        abs_rel: -1.0,
        sq_rel: -1.0,
        rmse: -1.0,
        log10: -1.0,
        silog: -1.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        n_valid: 0,
    };
    let status = unsafe {
        sd_metrics(
            depth.as_ptr(),
            depth.as_ptr(),
            std::ptr::null(),
            h,
            w,
            d_min,
            d_max,
            &mut report,
        )
    };
    assert_eq!(status, SdStatus::SdOk, "{}", last_error());
    assert_eq!(report.abs_rel, 0.0);
    assert_eq!(report.delta1, 1.0);
    assert_eq!(report.n_valid as usize, h * w);

    unsafe { sd_model_free(handle) };
    std::fs::remove_dir_all(ckpt.parent().unwrap()).ok();
}

#[test]
fn error_paths_set_status_and_message() {
    // null arguments
    let status = unsafe { sd_model_load(std::ptr::null(), std::ptr::null_mut()) };
    assert_eq!(status, SdStatus::SdNullArgument);

    // missing checkpoint file
    let missing = CString::new("/nonexistent/skipdepth.ckpt").unwrap();
    let mut handle: *mut skipdepth_ffi::SdModel = std::ptr::null_mut();
    let status = unsafe { sd_model_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, SdStatus::SdIoError);
    assert!(last_error().contains("skipdepth.ckpt"), "{}", last_error());
    assert!(handle.is_null());

    // image below the minimum inferable size
    let ckpt = tiny_checkpoint("toosmall");
    let c_path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let status = unsafe { sd_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, SdStatus::SdOk);
    let rgb = vec![0.5f32; 64 * 64 * 3];
    let mut depth = vec![0.0f32; 64 * 64];
    let status = unsafe { sd_model_infer(handle, rgb.as_ptr(), 64, 64, 0, depth.as_mut_ptr()) };
    assert_eq!(status, SdStatus::SdContractError);
    assert!(last_error().contains("minimum"), "{}", last_error());

    // freeing null is a no-op
    unsafe { sd_model_free(std::ptr::null_mut()) };
    unsafe { sd_model_free(handle) };
    std::fs::remove_dir_all(ckpt.parent().unwrap()).ok();
}
