//! C ABI for the reconstruction pipeline: opaque handles, integer status
//! codes, and a thread-local last-error message. The generated header lands
//! in `include/pcpr.h`.
//!
//! Ownership rules: every `*_read`/`*_train`-style constructor hands the
//! caller an owned handle that must be released with the matching `*_free`;
//! output buffers are caller-allocated and sized via the `_count` accessors.

use pcpr::cli::TrainPriorSettings;
use pcpr::error::Error;
use pcpr::geometry::{inflated_bbox, partition_regions, PointCloud};
use pcpr::io;
use pcpr::mesher::{eval_sdf_grid, marching_cubes, TriangleMesh};
use pcpr::metrics::MetricConfig;
use pcpr::prior::{train_local_prior, PriorCheckpoint};
use pcpr::specialize::{specialize, GlobalSdf, SpecializeConfig};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible entry point.
/// cbindgen:prefix-with-name
/// cbindgen:rename-all=ScreamingSnakeCase
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcprStatus {
    Ok = 0,
    UsageError = 1,
    DataError = 2,
    NumericalError = 3,
    NullArgument = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_of(err: &Error) -> PcprStatus {
    match err.exit_code() {
        1 => PcprStatus::UsageError,
        3 => PcprStatus::NumericalError,
        _ => PcprStatus::DataError,
    }
}

fn run<T, F>(out: *mut *mut T, f: F) -> PcprStatus
where
    F: FnOnce() -> Result<T, Error>,
{
    if out.is_null() {
        set_error("output pointer is null");
        return PcprStatus::NullArgument;
    }
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => {
            unsafe { *out = Box::into_raw(Box::new(v)) };
            PcprStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PcprStatus::Panic
        }
    }
}

fn run_unit<F>(f: F) -> PcprStatus
where
    F: FnOnce() -> Result<(), Error>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcprStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PcprStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::Config("null string argument".into()));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::Config("string argument is not valid UTF-8".into()))
}

fn settings_from_json<T: serde::de::DeserializeOwned + Default>(
    json: *const c_char,
) -> Result<T, Error> {
    if json.is_null() {
        return Ok(T::default());
    }
    let text = unsafe { cstr(json)? };
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid settings JSON: {e}")))
}

/// Last error message for this thread; valid until the next failing call.
#[no_mangle]
pub extern "C" fn pcpr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version string (static storage).
#[no_mangle]
pub extern "C" fn pcpr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ----- point clouds --------------------------------------------------------------

pub struct PcprCloud(PointCloud);

/// Read an ASCII XYZ or PLY point cloud from disk.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn pcpr_cloud_read(
    path: *const c_char,
    out: *mut *mut PcprCloud,
) -> PcprStatus {
    run(out, || {
        let p = cstr(path)?;
        Ok(PcprCloud(io::read_pointcloud(Path::new(p))?))
    })
}

/// Build a cloud from `count` dim-packed coordinates.
///
/// # Safety
/// `coords` must point to `count * dim` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn pcpr_cloud_from_points(
    coords: *const f64,
    count: usize,
    dim: usize,
    out: *mut *mut PcprCloud,
) -> PcprStatus {
    run(out, || {
        if coords.is_null() {
            return Err(Error::Config("null coordinate buffer".into()));
        }
        let data = std::slice::from_raw_parts(coords, count * dim).to_vec();
        Ok(PcprCloud(PointCloud::new(dim, data)?))
    })
}

/// # Safety
/// `cloud` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pcpr_cloud_len(cloud: *const PcprCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).0.len()
}

/// # Safety
/// `cloud` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pcpr_cloud_dim(cloud: *const PcprCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).0.dim()
}

/// # Safety
/// Handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcpr_cloud_free(cloud: *mut PcprCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

// ----- prior ----------------------------------------------------------------------

pub struct PcprPrior(PriorCheckpoint);

/// Train the local prior on one cloud. `settings_json` follows the
/// `TrainPriorSettings` schema (grid, train.*); null means defaults. The
/// architecture's dimension is taken from the cloud.
///
/// # Safety
/// `cloud` must be a live handle; `settings_json` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pcpr_prior_train(
    cloud: *const PcprCloud,
    settings_json: *const c_char,
    out: *mut *mut PcprPrior,
) -> PcprStatus {
    if cloud.is_null() {
        set_error("null cloud handle");
        return PcprStatus::NullArgument;
    }
    let cloud_ref = &(*cloud).0;
    run(out, || {
        let mut settings: TrainPriorSettings = settings_from_json(settings_json)?;
        settings.train.arch.dim = cloud_ref.dim();
        let regions = partition_regions(cloud_ref, settings.grid)?;
        let ck = train_local_prior(&regions, &settings.train)?;
        Ok(PcprPrior(ck))
    })
}

/// # Safety
/// `prior` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pcpr_prior_save(
    prior: *const PcprPrior,
    path: *const c_char,
) -> PcprStatus {
    if prior.is_null() {
        set_error("null prior handle");
        return PcprStatus::NullArgument;
    }
    let prior_ref = &(*prior).0;
    run_unit(|| io::save_prior_checkpoint(prior_ref, Path::new(cstr(path)?)))
}

/// # Safety
/// `path` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pcpr_prior_load(
    path: *const c_char,
    out: *mut *mut PcprPrior,
) -> PcprStatus {
    run(out, || {
        Ok(PcprPrior(io::load_prior_checkpoint(Path::new(cstr(path)?))?))
    })
}

/// # Safety
/// Handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcpr_prior_free(prior: *mut PcprPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

// ----- specialization ---------------------------------------------------------------

pub struct PcprSdf(GlobalSdf);

/// Specialize a prior to one cloud. `config_json` follows the
/// `SpecializeConfig` schema; null means defaults. `prior` may be null only
/// for mode "no_prior" with an architecture given in the config.
///
/// # Safety
/// Handles must be live; strings NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn pcpr_specialize(
    cloud: *const PcprCloud,
    prior: *const PcprPrior,
    config_json: *const c_char,
    out: *mut *mut PcprSdf,
) -> PcprStatus {
    if cloud.is_null() {
        set_error("null cloud handle");
        return PcprStatus::NullArgument;
    }
    let cloud_ref = &(*cloud).0;
    let prior_ref = prior.as_ref().map(|p| &p.0);
    run(out, || {
        let cfg: SpecializeConfig = settings_from_json(config_json)?;
        Ok(PcprSdf(specialize(cloud_ref, prior_ref, None, &cfg)?))
    })
}

/// Evaluate signed distances at `count` dim-packed query positions.
///
/// # Safety
/// `queries` must hold `count * dim` doubles and `out_values` room for
/// `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn pcpr_sdf_eval(
    sdf: *const PcprSdf,
    queries: *const f64,
    count: usize,
    out_values: *mut f64,
) -> PcprStatus {
    if sdf.is_null() || queries.is_null() || out_values.is_null() {
        set_error("null argument");
        return PcprStatus::NullArgument;
    }
    let sdf_ref = &(*sdf).0;
    let q = std::slice::from_raw_parts(queries, count * sdf_ref.dim());
    let out = std::slice::from_raw_parts_mut(out_values, count);
    run_unit(|| {
        let values = sdf_ref.eval_batch(q)?;
        out.copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `sdf` live handle, `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pcpr_sdf_save(sdf: *const PcprSdf, path: *const c_char) -> PcprStatus {
    if sdf.is_null() {
        set_error("null sdf handle");
        return PcprStatus::NullArgument;
    }
    let sdf_ref = &(*sdf).0;
    run_unit(|| io::save_global_sdf(sdf_ref, Path::new(cstr(path)?)))
}

/// # Safety
/// `path` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pcpr_sdf_load(path: *const c_char, out: *mut *mut PcprSdf) -> PcprStatus {
    run(out, || Ok(PcprSdf(io::load_global_sdf(Path::new(cstr(path)?))?)))
}

/// # Safety
/// Handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcpr_sdf_free(sdf: *mut PcprSdf) {
    if !sdf.is_null() {
        drop(Box::from_raw(sdf));
    }
}

// ----- meshing ---------------------------------------------------------------------

pub struct PcprMesh(TriangleMesh);

/// Evaluate the SDF on a lattice over the cloud's inflated bounding box and
/// run marching cubes at the zero level set.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pcpr_reconstruct_mesh(
    sdf: *const PcprSdf,
    cloud: *const PcprCloud,
    resolution: usize,
    bounds_inflate: f64,
    out: *mut *mut PcprMesh,
) -> PcprStatus {
    if sdf.is_null() || cloud.is_null() {
        set_error("null argument");
        return PcprStatus::NullArgument;
    }
    let sdf_ref = &(*sdf).0;
    let cloud_ref = &(*cloud).0;
    run(out, || {
        let (lo, hi) = inflated_bbox(cloud_ref, bounds_inflate);
        let grid = eval_sdf_grid(sdf_ref, &lo, &hi, &[resolution; 3])?;
        Ok(PcprMesh(marching_cubes(&grid, 0.0)?))
    })
}

/// # Safety
/// `mesh` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_vertex_count(mesh: *const PcprMesh) -> usize {
    if mesh.is_null() {
        return 0;
    }
    (*mesh).0.vertices.len()
}

/// # Safety
/// `mesh` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_triangle_count(mesh: *const PcprMesh) -> usize {
    if mesh.is_null() {
        return 0;
    }
    (*mesh).0.triangles.len()
}

/// Copy xyz-packed vertices into a caller buffer of 3 x vertex_count doubles.
///
/// # Safety
/// `out_xyz` must have room for `3 * pcpr_mesh_vertex_count` doubles.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_copy_vertices(
    mesh: *const PcprMesh,
    out_xyz: *mut f64,
) -> PcprStatus {
    if mesh.is_null() || out_xyz.is_null() {
        set_error("null argument");
        return PcprStatus::NullArgument;
    }
    let m = &(*mesh).0;
    let out = std::slice::from_raw_parts_mut(out_xyz, m.vertices.len() * 3);
    for (i, v) in m.vertices.iter().enumerate() {
        out[i * 3..i * 3 + 3].copy_from_slice(v);
    }
    PcprStatus::Ok
}

/// Copy index triples into a caller buffer of 3 x triangle_count u32.
///
/// # Safety
/// `out_indices` must have room for `3 * pcpr_mesh_triangle_count` entries.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_copy_triangles(
    mesh: *const PcprMesh,
    out_indices: *mut u32,
) -> PcprStatus {
    if mesh.is_null() || out_indices.is_null() {
        set_error("null argument");
        return PcprStatus::NullArgument;
    }
    let m = &(*mesh).0;
    let out = std::slice::from_raw_parts_mut(out_indices, m.triangles.len() * 3);
    for (i, t) in m.triangles.iter().enumerate() {
        out[i * 3..i * 3 + 3].copy_from_slice(t);
    }
    PcprStatus::Ok
}

/// Write the mesh as OBJ or ASCII PLY depending on the file extension.
///
/// # Safety
/// `mesh` live handle, `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_write(mesh: *const PcprMesh, path: *const c_char) -> PcprStatus {
    if mesh.is_null() {
        set_error("null mesh handle");
        return PcprStatus::NullArgument;
    }
    let m = &(*mesh).0;
    run_unit(|| {
        let p = Path::new(cstr(path)?);
        io::write_mesh(m, p, io::MeshFormat::from_extension(p))
    })
}

/// # Safety
/// Handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcpr_mesh_free(mesh: *mut PcprMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

// ----- evaluation ------------------------------------------------------------------

/// Compare two geometry files (mesh or point set) and return the metric
/// report as a JSON string; free it with `pcpr_string_free`.
/// `settings_json` follows the `MetricConfig` schema; null means defaults.
///
/// # Safety
/// Paths must be NUL-terminated; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn pcpr_evaluate_files(
    recon: *const c_char,
    truth: *const c_char,
    settings_json: *const c_char,
    out_json: *mut *mut c_char,
) -> PcprStatus {
    if out_json.is_null() {
        set_error("output pointer is null");
        return PcprStatus::NullArgument;
    }
    match catch_unwind(|| -> Result<CString, Error> {
        let metric: MetricConfig = settings_from_json(settings_json)?;
        let settings = pcpr::cli::EvaluateSettings { metric };
        let dir = std::env::temp_dir().join(format!("pcpr_eval_{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let out = dir.join("metrics.txt");
        let (_, report) = pcpr::cli::cmd_evaluate(
            Path::new(cstr(recon)?),
            Path::new(cstr(truth)?),
            &out,
            &settings,
        )?;
        let json = serde_json::to_string(&report)?;
        Ok(CString::new(json).expect("JSON has no NUL"))
    }) {
        Ok(Ok(s)) => {
            *out_json = s.into_raw();
            PcprStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PcprStatus::Panic
        }
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must originate from this library and not be freed twice; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn pcpr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
