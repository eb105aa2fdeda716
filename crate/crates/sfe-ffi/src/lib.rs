//! C ABI over the envelope toolkit's online surface: load a database,
//! query the metric and constraints, apply the two protection laws.
//!
//! Conventions: handles are opaque pointers created and destroyed by
//! this library; every fallible call returns an `sfe_status` and writes
//! its results through out-pointers, which are left untouched on
//! failure; no call panics across the boundary. State vectors are
//! always the seven envelope coordinates in the fixed order
//! p, q, r (rad/s), alpha, beta (rad), vg (ft/s), h (ft).

#![allow(non_camel_case_types)]

use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sfe_core::dynamics::EnvelopeCoords;
use sfe_core::envelope::{EnvelopeDatabase, EnvelopeError};
use sfe_core::fep::{binarize_threshold, prob_protect, scb_protect, ProbFepConfig};

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sfe_status {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path or string argument was not valid UTF-8.
    BadString = 2,
    /// The file could not be read.
    Io = 3,
    /// The bytes are not a valid envelope database.
    BadDatabase = 4,
    /// The database carries no constraint payload.
    NoConstraints = 5,
    /// A numeric argument was out of range (non-finite state, zero
    /// length, index past the end).
    BadValue = 6,
    /// A caller-provided buffer is too small; nothing was written.
    SmallBuffer = 7,
    /// Unexpected internal failure.
    Internal = 8,
}

/// Opaque envelope-database handle.
pub struct sfe_db {
    inner: EnvelopeDatabase,
    dim_names: Vec<CString>,
}

fn load_status(e: &EnvelopeError) -> sfe_status {
    match e {
        EnvelopeError::NoConstraints => sfe_status::NoConstraints,
        _ => sfe_status::BadDatabase,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Static human-readable message for a status code.
#[no_mangle]
pub extern "C" fn sfe_status_message(status: sfe_status) -> *const c_char {
    let msg: &'static str = match status {
        sfe_status::Ok => "ok\0",
        sfe_status::NullArgument => "required pointer argument is null\0",
        sfe_status::BadString => "string argument is not valid UTF-8\0",
        sfe_status::Io => "file could not be read\0",
        sfe_status::BadDatabase => "not a valid envelope database\0",
        sfe_status::NoConstraints => "database carries no constraint payload\0",
        sfe_status::BadValue => "numeric argument out of range\0",
        sfe_status::SmallBuffer => "caller buffer too small\0",
        sfe_status::Internal => "internal error\0",
    };
    msg.as_ptr() as *const c_char
}

/// Threshold membership value for a binarization parameter, exp(-k0^2/2).
#[no_mangle]
pub extern "C" fn sfe_binarize_threshold(k0: f64) -> f64 {
    binarize_threshold(k0)
}

fn db_from_bytes(bytes: &[u8], out: *mut *mut sfe_db) -> sfe_status {
    match EnvelopeDatabase::from_bytes(bytes) {
        Ok(inner) => {
            let dim_names = inner
                .grid
                .dims()
                .iter()
                .map(|d| CString::new(d.name.as_str()).expect("dim names have no NUL"))
                .collect();
            let handle = Box::new(sfe_db { inner, dim_names });
            unsafe { *out = Box::into_raw(handle) };
            sfe_status::Ok
        }
        Err(e) => load_status(&e),
    }
}

/// Load an envelope database from a file.
///
/// On success writes a handle to `out`; release it with
/// [`sfe_db_close`].
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to a valid
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_open(path: *const c_char, out: *mut *mut sfe_db) -> sfe_status {
    if path.is_null() || out.is_null() {
        return sfe_status::NullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return sfe_status::BadString,
    };
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(_) => return sfe_status::Io,
    };
    catch_unwind(AssertUnwindSafe(|| db_from_bytes(&bytes, out)))
        .unwrap_or(sfe_status::Internal)
}

/// Parse an envelope database from an in-memory image.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` to a valid
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut sfe_db,
) -> sfe_status {
    if bytes.is_null() || out.is_null() {
        return sfe_status::NullArgument;
    }
    let bytes = std::slice::from_raw_parts(bytes, len);
    catch_unwind(AssertUnwindSafe(|| db_from_bytes(bytes, out)))
        .unwrap_or(sfe_status::Internal)
}

/// Release a database handle. A null handle is a no-op.
///
/// # Safety
/// `db` must be a handle from this library that has not been closed.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_close(db: *mut sfe_db) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// Number of grid dimensions in the database (at most 7).
///
/// # Safety
/// `db` must be a live handle and `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_dim_count(db: *const sfe_db, out: *mut usize) -> sfe_status {
    if db.is_null() || out.is_null() {
        return sfe_status::NullArgument;
    }
    *out = (*db).inner.grid.d();
    sfe_status::Ok
}

/// Name of grid dimension `index` as a string borrowed from the handle;
/// valid until the handle is closed.
///
/// # Safety
/// `db` must be a live handle and `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_dim_name(
    db: *const sfe_db,
    index: usize,
    out: *mut *const c_char,
) -> sfe_status {
    if db.is_null() || out.is_null() {
        return sfe_status::NullArgument;
    }
    let names = &(*db).dim_names;
    match names.get(index) {
        Some(name) => {
            *out = name.as_ptr();
            sfe_status::Ok
        }
        None => sfe_status::BadValue,
    }
}

unsafe fn coords_from(state: *const f64) -> Option<EnvelopeCoords> {
    let arr: &[f64; 7] = &*(state as *const [f64; 7]);
    if arr.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(EnvelopeCoords::from_array(arr))
}

/// Evaluate the envelope metric at a state.
///
/// `state` is the fixed 7-vector described at the top of this header.
/// Writes the metric to `m_env`, its gradient along each grid dimension
/// to `j_env[0..dim_count]`, and 1 to `clamped` if the state was pulled
/// onto the grid boundary (0 otherwise). `j_env` and `clamped` may be
/// null when the caller does not want them.
///
/// # Safety
/// `db` must be a live handle, `state` must point to 7 doubles, and
/// `j_env`, when given, must have room for `sfe_db_dim_count` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_query_metric(
    db: *const sfe_db,
    state: *const f64,
    m_env: *mut f64,
    j_env: *mut f64,
    clamped: *mut c_int,
) -> sfe_status {
    if db.is_null() || state.is_null() || m_env.is_null() {
        return sfe_status::NullArgument;
    }
    let coords = match coords_from(state) {
        Some(c) => c,
        None => return sfe_status::BadValue,
    };
    let result = catch_unwind(AssertUnwindSafe(|| (*db).inner.query_metric(&coords)));
    match result {
        Ok(Ok(q)) => {
            *m_env = q.m_env;
            if !j_env.is_null() {
                std::ptr::copy_nonoverlapping(q.j_env.as_ptr(), j_env, q.j_env.len());
            }
            if !clamped.is_null() {
                *clamped = q.clamped as c_int;
            }
            sfe_status::Ok
        }
        Ok(Err(e)) => load_status(&e),
        Err(_) => sfe_status::Internal,
    }
}

/// Query the admissible intervals at the grid node nearest a state.
///
/// On entry `count` holds the capacity of the `dims`, `lo`, and `hi`
/// buffers; on success it holds the number of protected dimensions
/// written. Each written `dims[k]` is an index into the grid dimension
/// list (see [`sfe_db_dim_name`]), with `lo[k]`/`hi[k]` the interval.
/// Fails with `SmallBuffer` (writing the needed capacity to `count`)
/// when the buffers are short. `clamped` may be null.
///
/// # Safety
/// `db` must be a live handle, `state` must point to 7 doubles, and
/// `dims`, `lo`, `hi` must have the capacity announced in `count`.
#[no_mangle]
pub unsafe extern "C" fn sfe_db_query_constraints(
    db: *const sfe_db,
    state: *const f64,
    dims: *mut usize,
    lo: *mut f64,
    hi: *mut f64,
    count: *mut usize,
    clamped: *mut c_int,
) -> sfe_status {
    if db.is_null() || state.is_null() || dims.is_null() || lo.is_null() || hi.is_null()
        || count.is_null()
    {
        return sfe_status::NullArgument;
    }
    let coords = match coords_from(state) {
        Some(c) => c,
        None => return sfe_status::BadValue,
    };
    let result = catch_unwind(AssertUnwindSafe(|| (*db).inner.query_constraints(&coords)));
    match result {
        Ok(Ok(q)) => {
            if q.dims.len() > *count {
                *count = q.dims.len();
                return sfe_status::SmallBuffer;
            }
            std::ptr::copy_nonoverlapping(q.dims.as_ptr(), dims, q.dims.len());
            std::ptr::copy_nonoverlapping(q.lo.as_ptr(), lo, q.lo.len());
            std::ptr::copy_nonoverlapping(q.hi.as_ptr(), hi, q.hi.len());
            *count = q.dims.len();
            if !clamped.is_null() {
                *clamped = q.clamped as c_int;
            }
            sfe_status::Ok
        }
        Ok(Err(e)) => load_status(&e),
        Err(_) => sfe_status::Internal,
    }
}

/// State-constraint protection: clamp each reference into
/// [x_min, x_max]. Any of the input and output pointers may alias.
///
/// # Safety
/// All four arrays must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfe_scb_protect(
    x_ref: *const f64,
    x_min: *const f64,
    x_max: *const f64,
    n: usize,
    x_fep: *mut f64,
) -> sfe_status {
    if x_ref.is_null() || x_min.is_null() || x_max.is_null() || x_fep.is_null() {
        return sfe_status::NullArgument;
    }
    if n == 0 {
        return sfe_status::BadValue;
    }
    let r = std::slice::from_raw_parts(x_ref, n);
    let lo = std::slice::from_raw_parts(x_min, n);
    let hi = std::slice::from_raw_parts(x_max, n);
    let out = scb_protect(r, lo, hi);
    std::ptr::copy_nonoverlapping(out.as_ptr(), x_fep, n);
    sfe_status::Ok
}

/// Probabilistic protection: gradient compensation of the reference,
/// active when `m_env <= m0`. `k_fep` is the per-channel gain and
/// `j_env` the metric gradient along the protected channels.
///
/// # Safety
/// `x_ref`, `k_fep`, `j_env`, and `x_fep` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfe_prob_protect(
    x_ref: *const f64,
    n: usize,
    m_env: f64,
    m0: f64,
    k_fep: *const f64,
    j_env: *const f64,
    x_fep: *mut f64,
) -> sfe_status {
    if x_ref.is_null() || k_fep.is_null() || j_env.is_null() || x_fep.is_null() {
        return sfe_status::NullArgument;
    }
    if n == 0 || !m_env.is_finite() || !m0.is_finite() {
        return sfe_status::BadValue;
    }
    let r = std::slice::from_raw_parts(x_ref, n);
    let j = std::slice::from_raw_parts(j_env, n);
    let config = ProbFepConfig { m0, k_fep: std::slice::from_raw_parts(k_fep, n).to_vec() };
    let out = prob_protect(r, m_env, j, &config);
    std::ptr::copy_nonoverlapping(out.as_ptr(), x_fep, n);
    sfe_status::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfe_core::density::KdeModel;
    use sfe_core::envelope::{build_prob_field, GridDim, GridSpec};
    use std::ptr;

    fn test_db_bytes() -> Vec<u8> {
        let grid = GridSpec::new(vec![
            GridDim { name: "alpha".into(), min: -0.4, max: 0.4, step: 0.05 },
            GridDim { name: "q".into(), min: -0.6, max: 0.6, step: 0.1 },
        ])
        .unwrap();
        let samples = |spread: f64| -> Vec<f64> {
            let mut v = Vec::new();
            for i in 0..60 {
                let t = (i as f64 / 59.0) * 2.0 - 1.0;
                v.push(0.25 * spread * t);
                v.push(0.4 * spread * (1.0 - t * t) - 0.1);
            }
            v
        };
        let fwd = KdeModel::fit(samples(1.0), 2).unwrap();
        let bwd = KdeModel::fit(samples(1.3), 2).unwrap();
        let mf = sfe_core::density::build_membership_field(&fwd, &bwd, &grid).unwrap();
        let db = build_prob_field(&mf, 1e-6)
            .unwrap()
            .with_constraints(sfe_core::envelope::build_constraint_field(&mf, 1.0, &[0, 1]).unwrap());
        db.to_bytes()
    }

    fn open(bytes: &[u8]) -> *mut sfe_db {
        let mut handle: *mut sfe_db = ptr::null_mut();
        let st = unsafe { sfe_db_from_bytes(bytes.as_ptr(), bytes.len(), &mut handle) };
        assert_eq!(st, sfe_status::Ok);
        assert!(!handle.is_null());
        handle
    }

    #[test]
    fn roundtrip_metric_matches_core() {
        let bytes = test_db_bytes();
        let db = open(&bytes);
        let core = EnvelopeDatabase::from_bytes(&bytes).unwrap();
        let state = [0.0, -0.1, 0.0, 0.1, 0.0, 800.0, 20000.0];
        let mut m = f64::NAN;
        let mut j = [f64::NAN; 7];
        let mut clamped = -1;
        let st = unsafe {
            sfe_db_query_metric(db, state.as_ptr(), &mut m, j.as_mut_ptr(), &mut clamped)
        };
        assert_eq!(st, sfe_status::Ok);
        let q = core
            .query_metric(&EnvelopeCoords::from_array(&state))
            .unwrap();
        assert_eq!(m, q.m_env);
        assert_eq!(&j[..2], q.j_env.as_slice());
        assert_eq!(clamped, 0);
        unsafe { sfe_db_close(db) };
    }

    #[test]
    fn dim_names_come_back_in_grid_order() {
        let bytes = test_db_bytes();
        let db = open(&bytes);
        let mut n = 0usize;
        assert_eq!(unsafe { sfe_db_dim_count(db, &mut n) }, sfe_status::Ok);
        assert_eq!(n, 2);
        let mut name: *const c_char = ptr::null();
        assert_eq!(unsafe { sfe_db_dim_name(db, 0, &mut name) }, sfe_status::Ok);
        assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), "alpha");
        assert_eq!(unsafe { sfe_db_dim_name(db, 1, &mut name) }, sfe_status::Ok);
        assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), "q");
        assert_eq!(
            unsafe { sfe_db_dim_name(db, 2, &mut name) },
            sfe_status::BadValue
        );
        unsafe { sfe_db_close(db) };
    }

    #[test]
    fn constraints_report_capacity_then_fit() {
        let bytes = test_db_bytes();
        let db = open(&bytes);
        let state = [0.0, 0.0, 0.0, 0.0, 0.0, 800.0, 20000.0];
        let mut dims = [0usize; 1];
        let mut lo = [0.0; 1];
        let mut hi = [0.0; 1];
        let mut count = 1usize;
        let st = unsafe {
            sfe_db_query_constraints(
                db,
                state.as_ptr(),
                dims.as_mut_ptr(),
                lo.as_mut_ptr(),
                hi.as_mut_ptr(),
                &mut count,
                ptr::null_mut(),
            )
        };
        assert_eq!(st, sfe_status::SmallBuffer);
        assert_eq!(count, 2);

        let mut dims = [0usize; 7];
        let mut lo = [0.0; 7];
        let mut hi = [0.0; 7];
        let mut count = 7usize;
        let st = unsafe {
            sfe_db_query_constraints(
                db,
                state.as_ptr(),
                dims.as_mut_ptr(),
                lo.as_mut_ptr(),
                hi.as_mut_ptr(),
                &mut count,
                ptr::null_mut(),
            )
        };
        assert_eq!(st, sfe_status::Ok);
        assert_eq!(count, 2);
        assert_eq!(dims[..2], [0, 1]);
        assert!(lo[0] <= hi[0] && lo[0] >= -0.4 && hi[0] <= 0.4);
        assert!(lo[1] <= hi[1] && lo[1] >= -0.6 && hi[1] <= 0.6);
        unsafe { sfe_db_close(db) };
    }

    #[test]
    fn null_and_garbage_inputs_are_rejected() {
        let mut handle: *mut sfe_db = ptr::null_mut();
        assert_eq!(
            unsafe { sfe_db_from_bytes(ptr::null(), 4, &mut handle) },
            sfe_status::NullArgument
        );
        let garbage = b"not a database";
        assert_eq!(
            unsafe { sfe_db_from_bytes(garbage.as_ptr(), garbage.len(), &mut handle) },
            sfe_status::BadDatabase
        );
        assert!(handle.is_null());

        let bytes = test_db_bytes();
        let db = open(&bytes);
        let bad_state = [f64::NAN, 0.0, 0.0, 0.0, 0.0, 800.0, 20000.0];
        let mut m = 0.0;
        assert_eq!(
            unsafe {
                sfe_db_query_metric(db, bad_state.as_ptr(), &mut m, ptr::null_mut(), ptr::null_mut())
            },
            sfe_status::BadValue
        );
        unsafe { sfe_db_close(db) };
        unsafe { sfe_db_close(ptr::null_mut()) };
    }

    #[test]
    fn protection_laws_match_core_functions() {
        let x_ref = [0.5, -0.3, 0.9];
        let x_min = [-0.2, -0.2, -0.2];
        let x_max = [0.2, 0.2, 0.2];
        let mut out = [0.0; 3];
        let st = unsafe {
            sfe_scb_protect(x_ref.as_ptr(), x_min.as_ptr(), x_max.as_ptr(), 3, out.as_mut_ptr())
        };
        assert_eq!(st, sfe_status::Ok);
        assert_eq!(out, [0.2, -0.2, 0.2]);

        let j = [0.5, -1.0, 0.0];
        let k = [0.8, 0.8, 0.8];
        let mut fep = [0.0; 3];
        let st = unsafe {
            sfe_prob_protect(x_ref.as_ptr(), 3, -1.0, 0.0, k.as_ptr(), j.as_ptr(), fep.as_mut_ptr())
        };
        assert_eq!(st, sfe_status::Ok);
        let expect = prob_protect(
            &x_ref,
            -1.0,
            &j,
            &ProbFepConfig { m0: 0.0, k_fep: k.to_vec() },
        );
        assert_eq!(&fep[..], expect.as_slice());

        assert_eq!(
            unsafe { sfe_scb_protect(ptr::null(), x_min.as_ptr(), x_max.as_ptr(), 3, out.as_mut_ptr()) },
            sfe_status::NullArgument
        );
        assert_eq!(
            unsafe {
                sfe_scb_protect(x_ref.as_ptr(), x_min.as_ptr(), x_max.as_ptr(), 0, out.as_mut_ptr())
            },
            sfe_status::BadValue
        );
    }

    #[test]
    fn version_and_messages_are_c_strings() {
        let v = unsafe { CStr::from_ptr(sfe_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        let m = unsafe { CStr::from_ptr(sfe_status_message(sfe_status::SmallBuffer)) };
        assert!(m.to_str().unwrap().contains("buffer"));
    }
}
