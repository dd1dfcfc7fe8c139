//! C ABI over `xmd-core`.
//!
//! Every fallible function returns an [`XmdStatus`]; on failure the message
//! is kept per thread and can be read with [`xmd_last_error`]. Objects cross
//! the boundary as opaque handles that the caller releases with the matching
//! `_free` function. Handles are not thread-safe: use each one from a single
//! thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use xmd_core::config::ExperimentConfig;
use xmd_core::models::{ModelConfig, Network3D, SharedClassifier, VoxelInput};
use xmd_core::scenegen::{generate_scene, PairedSample, SceneSpec};
use xmd_core::tensor::Tensor;
use xmd_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Index = 4,
    Data = 5,
    Contract = 6,
    Config = 7,
    MissingArtifact = 8,
    Numeric = 9,
    Io = 10,
    Panic = 11,
}

impl From<&Error> for XmdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) => XmdStatus::InvalidArgument,
            Error::Shape(_) => XmdStatus::Shape,
            Error::Index(_) => XmdStatus::Index,
            Error::Data(_) | Error::Json(_) => XmdStatus::Data,
            Error::Contract(_) => XmdStatus::Contract,
            Error::Config(_) => XmdStatus::Config,
            Error::MissingArtifact { .. } => XmdStatus::MissingArtifact,
            Error::Numeric(_) => XmdStatus::Numeric,
            Error::Io { .. } => XmdStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (XmdStatus, String)>) -> XmdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XmdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            XmdStatus::Panic
        }
    }
}

fn lift(e: Error) -> (XmdStatus, String) {
    (XmdStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (XmdStatus, String) {
    (XmdStatus::NullPointer, format!("{what} is null"))
}

/// Generated paired camera/LiDAR sample.
pub struct XmdScene {
    sample: PairedSample,
}

/// A 3D segmentation network with its architecture settings.
pub struct XmdNetwork {
    net: Network3D<f32>,
    model: ModelConfig,
}

/// Library version; a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xmd_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(xmd_core::VERSION).expect("version has no NUL"))
        .as_ptr()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length plus one,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn xmd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Generates one scene with the default specification.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_generate(seed: u64, out: *mut *mut XmdScene) -> XmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sample = generate_scene(&SceneSpec::default(), seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(XmdScene { sample }));
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a live handle from [`xmd_scene_generate`].
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_num_points(scene: *const XmdScene) -> usize {
    scene.as_ref().map_or(0, |s| s.sample.num_points())
}

/// # Safety
/// `scene` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_image_size(scene: *const XmdScene, height: *mut usize, width: *mut usize) -> XmdStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        *height = s.sample.height();
        *width = s.sample.width();
        Ok(())
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), (XmdStatus, String)> {
    if dst.is_null() {
        return Err(null("buffer"));
    }
    if len != src.len() {
        return Err((XmdStatus::Shape, format!("buffer holds {len} values, need {}", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Copies the `n x 4` cloud (`x, y, z, intensity`) into `buf`; `len` must
/// equal `4 n`.
///
/// # Safety
/// `scene` must be a live handle and `buf` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_copy_cloud(scene: *const XmdScene, buf: *mut f32, len: usize) -> XmdStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        copy_out(s.sample.cloud.data(), buf, len)
    })
}

/// Copies the `3 x h x w` image into `buf`.
///
/// # Safety
/// `scene` must be a live handle and `buf` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_copy_image(scene: *const XmdScene, buf: *mut f32, len: usize) -> XmdStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        copy_out(s.sample.image.data(), buf, len)
    })
}

/// Copies the coarse per-point labels into `buf`; `len` must equal `n`.
///
/// # Safety
/// `scene` must be a live handle and `buf` point to `len` writable ints.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_copy_point_labels(scene: *const XmdScene, buf: *mut i32, len: usize) -> XmdStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        copy_out(s.sample.point_labels(false), buf, len)
    })
}

/// # Safety
/// `scene` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn xmd_scene_free(scene: *mut XmdScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// An untrained network with default sizes, seeded.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn xmd_network_random(seed: u64, out: *mut *mut XmdNetwork) -> XmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = ModelConfig::default();
        let d = SharedClassifier::new(model.c_img, model.hidden, model.c_cls, seed, "d");
        let net = Network3D::new(&model, seed, true, d).map_err(lift)?;
        *out = Box::into_raw(Box::new(XmdNetwork { net, model }));
        Ok(())
    })
}

/// Loads the distilled 3D network of a run directory written by
/// `xmd train --mode fskd`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated UTF-8 path; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xmd_network_load(run_dir: *const c_char, out: *mut *mut XmdNetwork) -> XmdStatus {
    guard(|| {
        if run_dir.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let dir = CStr::from_ptr(run_dir)
            .to_str()
            .map_err(|_| (XmdStatus::InvalidArgument, "run_dir is not UTF-8".to_string()))?;
        let dir = Path::new(dir);
        let cfg_path = dir.join("fskd").join("config.toml");
        if !cfg_path.exists() {
            return Err(lift(Error::MissingArtifact {
                path: cfg_path,
                hint: "train the fskd mode into this run directory first".into(),
            }));
        }
        let mut cfg = ExperimentConfig::from_file(&cfg_path, &[]).map_err(lift)?;
        cfg.out_dir = dir.to_path_buf();
        let teacher = xmd_core::cli::load_network_2d(&cfg).map_err(lift)?;
        let net = xmd_core::cli::load_network_fskd(&cfg, &teacher).map_err(lift)?;
        *out = Box::into_raw(Box::new(XmdNetwork { net, model: cfg.model }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xmd_network_num_classes(net: *const XmdNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.net.d.classes())
}

/// Per-point class ids for an `n_points x 4` cloud.
///
/// # Safety
/// `net` must be a live handle, `cloud` point to `4 n_points` floats and
/// `labels` to `n_points` writable ints.
#[no_mangle]
pub unsafe extern "C" fn xmd_network_predict(
    net: *const XmdNetwork,
    cloud: *const f32,
    n_points: usize,
    labels: *mut i32,
) -> XmdStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        if cloud.is_null() || labels.is_null() {
            return Err(null("buffer"));
        }
        let data = std::slice::from_raw_parts(cloud, 4 * n_points).to_vec();
        let t = Tensor::new(vec![n_points, 4], data).map_err(lift)?;
        let input = VoxelInput::from_cloud(&t, n.model.voxel_size, n.model.z_scale).map_err(lift)?;
        let pred = n.net.predict(&input).map_err(lift)?;
        let out: Vec<i32> = pred.into_iter().map(|p| p as i32).collect();
        copy_out(&out, labels, n_points)
    })
}

/// # Safety
/// `net` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn xmd_network_free(net: *mut XmdNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Mean IoU over classes present in either array.
///
/// # Safety
/// `preds` and `labels` must point to `n` ints; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xmd_miou(
    preds: *const i32,
    labels: *const i32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> XmdStatus {
    guard(|| {
        if preds.is_null() || labels.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let p = std::slice::from_raw_parts(preds, n);
        let l = std::slice::from_raw_parts(labels, n);
        let to_ids = |v: &[i32]| -> Result<Vec<usize>, (XmdStatus, String)> {
            v.iter()
                .map(|&x| usize::try_from(x).map_err(|_| (XmdStatus::Data, format!("negative class id {x}"))))
                .collect()
        };
        let r = xmd_core::eval::miou(&to_ids(p)?, &to_ids(l)?, classes).map_err(lift)?;
        *out = r.miou;
        Ok(())
    })
}
