//! C ABI over `proxyform`.
//!
//! Conventions:
//! - every fallible call returns a [`PfStatus`]; results come back through
//!   out-pointers that are written only on success;
//! - objects are opaque handles released with their `*_free` function;
//!   freeing `NULL` is a no-op;
//! - strings returned to the caller are released with [`pf_string_free`];
//! - after a failure, [`pf_last_error`] describes it on the calling thread;
//! - panics never cross the boundary and surface as `PF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use proxyform::geom::{PointCloud, Vec3};
use proxyform::pipeline::{
    enhance, export_cloud, gen_scene, import_cloud, load_config, parse_config, synth_proxies, CloudFormat,
    PipelineConfig, RunReport, SceneSpec,
};
use proxyform::proxy::{flops_count, AttentionVariant, FlopsConfig};
use proxyform::verify::{gradient_suite, GRAD_TOLERANCE};
use proxyform::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Parse = 5,
    Shape = 6,
    Runtime = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfVariant {
    SelfAttention = 0,
    Cross = 1,
    Proxy = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfFormat {
    /// Chosen from the file extension.
    Auto = 0,
    Ply = 1,
    Csv = 2,
}

/// Analytic cost of an attention stack.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PfFlops {
    pub projections: u64,
    pub attention_core: u64,
    pub ffn: u64,
    pub bias: u64,
    pub total: u64,
    pub params: u64,
}

/// Pipeline configuration.
pub struct PfConfig(PipelineConfig);

/// Point cloud.
pub struct PfCloud(PointCloud);

/// Report of one enhancement run.
pub struct PfReport(RunReport);

struct Failure {
    status: PfStatus,
    message: String,
}

impl Failure {
    fn new(status: PfStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Failure::new(PfStatus::NullPointer, format!("{what} is NULL"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::InvalidArgument(_)
            | Error::InvalidBounds(_)
            | Error::EmptyInput(_)
            | Error::DegenerateTransform(_)
            | Error::CorruptedClusterSet(_) => PfStatus::InvalidArgument,
            Error::InvalidConfig(_) => PfStatus::InvalidConfig,
            Error::Io { .. } => PfStatus::Io,
            Error::Parse { .. } => PfStatus::Parse,
            Error::Shape { .. } => PfStatus::Shape,
            _ => PfStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', "?")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            PfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(PfStatus::Runtime, "string contains NUL"))
}

fn cloud_format(path: &str, format: PfFormat) -> Result<CloudFormat, Failure> {
    match format {
        PfFormat::Ply => Ok(CloudFormat::Ply),
        PfFormat::Csv => Ok(CloudFormat::Csv),
        PfFormat::Auto => CloudFormat::from_path(&PathBuf::from(path)).ok_or_else(|| {
            Failure::new(PfStatus::InvalidArgument, format!("cannot tell the format of {path}"))
        }),
    }
}

/// Message of the last failure on this thread, or `NULL` if none. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be `NULL` or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration (`fast != 0` selects the quick preset).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_config_default(fast: i32, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        let cfg = if fast != 0 { PipelineConfig::fast() } else { PipelineConfig::default() };
        write_out(out, Box::into_raw(Box::new(PfConfig(cfg))), "out")
    })
}

/// Parses a JSON configuration; missing fields take their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_config_from_json(json: *const c_char, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        let cfg = parse_config(c_str(json, "json")?, "<string>".as_ref())?;
        write_out(out, Box::into_raw(Box::new(PfConfig(cfg))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_config_load(path: *const c_char, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        let cfg = load_config(c_str(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(PfConfig(cfg))), "out")
    })
}

/// Canonical JSON; release with [`pf_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_config_to_json(cfg: *const PfConfig, out: *mut *mut c_char) -> PfStatus {
    guard(|| {
        let json = deref(cfg, "cfg")?.0.to_json();
        write_out(out, into_c_string(json)?, "out")
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_config_set_seed(cfg: *mut PfConfig, seed: u64) -> PfStatus {
    guard(|| {
        deref_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// `0` uses all cores.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_config_set_threads(cfg: *mut PfConfig, threads: usize) -> PfStatus {
    guard(|| {
        deref_mut(cfg, "cfg")?.0.threads = threads;
        Ok(())
    })
}

/// Clusters that survive the drop.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_config_kept_clusters(cfg: *const PfConfig, out: *mut usize) -> PfStatus {
    guard(|| write_out(out, deref(cfg, "cfg")?.0.kept_clusters(), "out"))
}

/// # Safety
/// `cfg` must be `NULL` or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_config_free(cfg: *mut PfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Cloud from `n` interleaved `x, y, z` triples.
///
/// # Safety
/// `xyz` must point to `3 * n` doubles (may be `NULL` when `n == 0`); `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_new(xyz: *const f64, n: usize, out: *mut *mut PfCloud) -> PfStatus {
    guard(|| {
        let points = if n == 0 {
            Vec::new()
        } else {
            if xyz.is_null() {
                return Err(Failure::null("xyz"));
            }
            let len = n
                .checked_mul(3)
                .ok_or_else(|| Failure::new(PfStatus::InvalidArgument, "point count overflows"))?;
            std::slice::from_raw_parts(xyz, len)
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect()
        };
        write_out(out, Box::into_raw(Box::new(PfCloud(PointCloud::new(points)))), "out")
    })
}

/// Synthetic scene of `n_points` points.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_scene_generate(n_points: usize, seed: u64, out: *mut *mut PfCloud) -> PfStatus {
    guard(|| {
        let scene = gen_scene(&SceneSpec::with_total(n_points), seed)?;
        write_out(out, Box::into_raw(Box::new(PfCloud(scene.cloud))), "out")
    })
}

/// Number of points; `0` for `NULL`.
///
/// # Safety
/// `cloud` must be `NULL` or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_len(cloud: *const PfCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the coordinates into `buf` as interleaved triples. `buf_len` is the
/// capacity in doubles and must be at least `3 * pf_cloud_len(cloud)`.
///
/// # Safety
/// `cloud` must be a live handle and `buf` must hold `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_copy_xyz(cloud: *const PfCloud, buf: *mut f64, buf_len: usize) -> PfStatus {
    guard(|| {
        let cloud = &deref(cloud, "cloud")?.0;
        let need = cloud.len() * 3;
        if buf_len < need {
            return Err(Failure::new(
                PfStatus::InvalidArgument,
                format!("buffer holds {buf_len} doubles, {need} needed"),
            ));
        }
        if need == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(Failure::null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (d, p) in dst.chunks_exact_mut(3).zip(&cloud.points) {
            d.copy_from_slice(&[p.x, p.y, p.z]);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_read(path: *const c_char, format: PfFormat, out: *mut *mut PfCloud) -> PfStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let cloud = import_cloud(path, cloud_format(path, format)?)?;
        write_out(out, Box::into_raw(Box::new(PfCloud(cloud))), "out")
    })
}

/// # Safety
/// `cloud` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_write(cloud: *const PfCloud, path: *const c_char, format: PfFormat) -> PfStatus {
    guard(|| {
        let cloud = &deref(cloud, "cloud")?.0;
        let path = c_str(path, "path")?;
        export_cloud(cloud, path, cloud_format(path, format)?)?;
        Ok(())
    })
}

/// # Safety
/// `cloud` must be `NULL` or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_cloud_free(cloud: *mut PfCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Runs the pipeline with parameters and proxy tokens derived from the
/// config seed. `out_report` may be `NULL`.
///
/// # Safety
/// `cfg` and `cloud` must be live handles, `out_cloud` a valid pointer, and
/// `out_report` `NULL` or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_enhance(
    cfg: *const PfConfig,
    cloud: *const PfCloud,
    out_cloud: *mut *mut PfCloud,
    out_report: *mut *mut PfReport,
) -> PfStatus {
    guard(|| {
        let cfg = &deref(cfg, "cfg")?.0;
        let cloud = &deref(cloud, "cloud")?.0;
        if out_cloud.is_null() {
            return Err(Failure::null("out_cloud"));
        }
        let proxies = synth_proxies(cfg.seed, cfg.n_text_proxies, cfg.n_views, cfg.tokens_per_view, cfg.channels)?;
        let (enhanced, report) = enhance(cfg, cloud, &proxies)?;
        out_cloud.write(Box::into_raw(Box::new(PfCloud(enhanced))));
        if !out_report.is_null() {
            out_report.write(Box::into_raw(Box::new(PfReport(report))));
        }
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_report_kept_clusters(report: *const PfReport, out: *mut usize) -> PfStatus {
    guard(|| write_out(out, deref(report, "report")?.0.kept_clusters, "out"))
}

/// Pretty JSON; release with [`pf_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_report_to_json(report: *const PfReport, out: *mut *mut c_char) -> PfStatus {
    guard(|| {
        let json = deref(report, "report")?.0.to_json();
        write_out(out, into_c_string(json)?, "out")
    })
}

/// # Safety
/// `report` must be `NULL` or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_report_free(report: *mut PfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// FLOPs and parameters of a `layers`-block stack, with an output projection.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_flops(
    n_seq: u64,
    n_proxy: u64,
    channels: u64,
    ffn_mult: u64,
    layers: u64,
    variant: PfVariant,
    out: *mut PfFlops,
) -> PfStatus {
    guard(|| {
        let variant = match variant {
            PfVariant::SelfAttention => AttentionVariant::SelfAttention,
            PfVariant::Cross => AttentionVariant::Cross,
            PfVariant::Proxy => AttentionVariant::Proxy,
        };
        let r = flops_count(&FlopsConfig {
            n_seq,
            n_proxy,
            channels,
            ffn_mult,
            layers,
            variant,
            out_projection: true,
        });
        let f = r.flops;
        write_out(
            out,
            PfFlops {
                projections: f.projections,
                attention_core: f.attention_core,
                ffn: f.ffn,
                bias: f.bias,
                total: f.total,
                params: r.params.total,
            },
            "out",
        )
    })
}

/// Worst relative gradient error over `instances` random instances of every
/// check. `out_passed` (may be `NULL`) receives 1 when within tolerance.
///
/// # Safety
/// `out_max_error` must be a valid pointer; `out_passed` `NULL` or valid.
#[no_mangle]
pub unsafe extern "C" fn pf_gradcheck(
    instances: usize,
    seed: u64,
    out_max_error: *mut f64,
    out_passed: *mut i32,
) -> PfStatus {
    guard(|| {
        if instances == 0 {
            return Err(Failure::new(PfStatus::InvalidArgument, "instances must be positive"));
        }
        let worst = gradient_suite(instances, seed)?
            .iter()
            .map(|r| r.max_error)
            .fold(0.0, f64::max);
        write_out(out_max_error, worst, "out_max_error")?;
        if !out_passed.is_null() {
            out_passed.write(i32::from(worst <= GRAD_TOLERANCE));
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, PfStatus::Panic);
        let msg = unsafe { CStr::from_ptr(pf_last_error()) }.to_str().unwrap().to_owned();
        assert_eq!(msg, "panic: boom");
    }

    #[test]
    fn stage_errors_map_by_root_cause() {
        let e = Error::Stage {
            stage: "cluster",
            source: Box::new(Error::InvalidConfig("x".into())),
        };
        let f = Failure::from(e);
        assert_eq!(f.status, PfStatus::InvalidConfig);
        assert!(f.message.contains("cluster"));
    }

    #[test]
    fn nul_bytes_in_messages_are_replaced() {
        set_last_error("a\0b");
        let msg = unsafe { CStr::from_ptr(pf_last_error()) }.to_str().unwrap().to_owned();
        assert_eq!(msg, "a?b");
    }
}
