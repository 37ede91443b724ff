//! C ABI over `condguard`.
//!
//! Every function returns a [`CgStatus`]. Outputs go through caller-provided
//! pointers and are only written on `CG_OK`. Matrices and networks are opaque
//! handles owned by the caller once returned, and released with the matching
//! `*_free`. Matrix entries cross the boundary row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use condguard::defense::{self, DefenseConfig};
use condguard::densela::{self, CondNorm};
use condguard::diffgraph::{Checkpoint, Network};
use condguard::qplayer::{self, QpProblem};
use condguard::{harness, Error, Matrix};

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    CG_OK = 0,
    CG_NULL_POINTER = 1,
    CG_INVALID_INPUT = 2,
    /// The matrix or linear system is numerically singular.
    CG_SINGULAR = 3,
    CG_NOT_CONVERGED = 4,
    /// An output buffer is shorter than the result.
    CG_BUFFER_TOO_SMALL = 5,
    CG_IO = 6,
    CG_PARSE = 7,
    /// The forward pass produced a non-finite value.
    CG_NON_FINITE = 8,
    CG_PANIC = 99,
}

/// Opaque dense matrix.
pub struct CgMatrix(Matrix);

/// Opaque trained network.
pub struct CgNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CgStatus {
    match e {
        Error::InvalidInput(_) | Error::ZeroMatrix | Error::DegenerateRhs => {
            CgStatus::CG_INVALID_INPUT
        }
        Error::SingularSystem { .. }
        | Error::SingularInput { .. }
        | Error::AlreadySingular
        | Error::DegenerateSpectrum { .. } => CgStatus::CG_SINGULAR,
        Error::NonFiniteForward => CgStatus::CG_NON_FINITE,
        Error::NotConverged { .. } => CgStatus::CG_NOT_CONVERGED,
        Error::Io { .. } => CgStatus::CG_IO,
        Error::Parse { .. } => CgStatus::CG_PARSE,
    }
}

struct Fail(CgStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        Fail(status_of(&e))
    }
}

fn fail(status: CgStatus, msg: &str) -> Fail {
    set_error(msg.to_string());
    Fail(status)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CgStatus::CG_OK
        }
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("internal panic".to_string());
            CgStatus::CG_PANIC
        }
    }
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| fail(CgStatus::CG_NULL_POINTER, "null handle"))
}

unsafe fn input<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CgStatus::CG_NULL_POINTER, "null input buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if need > len {
        return Err(fail(
            CgStatus::CG_BUFFER_TOO_SMALL,
            &format!("output buffer holds {len}, need {need}"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(CgStatus::CG_NULL_POINTER, "null output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| fail(CgStatus::CG_NULL_POINTER, "null output pointer"))
}

fn boxed(m: Matrix) -> *mut CgMatrix {
    Box::into_raw(Box::new(CgMatrix(m)))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn cg_status_str(status: CgStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CgStatus::CG_OK => c"ok",
        CgStatus::CG_NULL_POINTER => c"null pointer",
        CgStatus::CG_INVALID_INPUT => c"invalid input",
        CgStatus::CG_SINGULAR => c"singular matrix",
        CgStatus::CG_NOT_CONVERGED => c"not converged",
        CgStatus::CG_BUFFER_TOO_SMALL => c"buffer too small",
        CgStatus::CG_IO => c"i/o error",
        CgStatus::CG_PARSE => c"parse error",
        CgStatus::CG_NON_FINITE => c"non-finite output",
        CgStatus::CG_PANIC => c"internal panic",
    };
    s.as_ptr()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len`. Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes, or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn cg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `data` must hold `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut CgMatrix,
) -> CgStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(CgStatus::CG_INVALID_INPUT, "matrix size overflows"))?;
        let entries = input(data, len)?.to_vec();
        *out = boxed(Matrix::new(rows, cols, entries)?);
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cg_matrix_free(m: *mut CgMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows`/`cols` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_matrix_shape(
    m: *const CgMatrix,
    rows: *mut usize,
    cols: *mut usize,
) -> CgStatus {
    guard(|| {
        let m = &handle(m)?.0;
        *out_ptr(rows)? = m.rows();
        *out_ptr(cols)? = m.cols();
        Ok(())
    })
}

/// Copies the entries row-major into `out`.
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_matrix_read(m: *const CgMatrix, out: *mut f64, len: usize) -> CgStatus {
    guard(|| {
        let m = &handle(m)?.0;
        output(out, len, m.as_slice().len())?.copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// Thin SVD. `sigma` receives `min(rows, cols)` values in non-increasing
/// order. `u` and `vt` may be null when the vectors are not wanted.
///
/// # Safety
/// Pointers as documented; `sigma` valid for `sigma_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cg_svd(
    m: *const CgMatrix,
    sigma: *mut f64,
    sigma_len: usize,
    u: *mut *mut CgMatrix,
    vt: *mut *mut CgMatrix,
) -> CgStatus {
    guard(|| {
        let f = densela::svd(&handle(m)?.0)?;
        output(sigma, sigma_len, f.sigma.len())?.copy_from_slice(&f.sigma);
        if let Some(u) = u.as_mut() {
            *u = boxed(f.u);
        }
        if let Some(vt) = vt.as_mut() {
            *vt = boxed(f.vt);
        }
        Ok(())
    })
}

/// 2-norm condition number. Infinity for a numerically singular matrix.
///
/// # Safety
/// `m` live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_kappa2(m: *const CgMatrix, out: *mut f64) -> CgStatus {
    guard(|| {
        let v = densela::condition_number(&handle(m)?.0, CondNorm::Two)?;
        *out_ptr(out)? = v.kappa;
        Ok(())
    })
}

/// Raises every singular value below `sigma_max / bound` to that floor.
///
/// # Safety
/// `m` live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_clamp_condition(
    m: *const CgMatrix,
    bound: f64,
    out: *mut *mut CgMatrix,
) -> CgStatus {
    guard(|| {
        let a = &handle(m)?.0;
        let out = out_ptr(out)?;
        let (clamped, _) = defense::clamp_condition(a, &DefenseConfig::with_bound(bound)?)?;
        *out = boxed(clamped);
        Ok(())
    })
}

/// Solves `A x = b` for square `A`. Returns `CG_SINGULAR` instead of a
/// non-finite answer.
///
/// # Safety
/// `b` valid for `b_len` doubles, `x` for `x_len`.
#[no_mangle]
pub unsafe extern "C" fn cg_solve(
    a: *const CgMatrix,
    b: *const f64,
    b_len: usize,
    x: *mut f64,
    x_len: usize,
) -> CgStatus {
    guard(|| {
        let a = &handle(a)?.0;
        let rhs = Matrix::column_vector(input(b, b_len)?);
        let sol = densela::solve_linear(a, &rhs)?;
        output(x, x_len, sol.rows())?.copy_from_slice(sol.as_slice());
        Ok(())
    })
}

/// `min ½zᵀQz + qᵀz  s.t.  Az = b`. Writes the primal `z` (length `n`) and the
/// equality duals `nu` (length `m`, may be null).
///
/// # Safety
/// Handles live; buffers valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cg_solve_eq_qp(
    q_mat: *const CgMatrix,
    q_vec: *const f64,
    a: *const CgMatrix,
    b: *const f64,
    z: *mut f64,
    z_len: usize,
    nu: *mut f64,
    nu_len: usize,
) -> CgStatus {
    guard(|| {
        let q_mat = handle(q_mat)?.0.clone();
        let a = handle(a)?.0.clone();
        let q_vec = input(q_vec, q_mat.rows())?.to_vec();
        let b = input(b, a.rows())?.to_vec();
        let sol = qplayer::solve_eq_qp(&QpProblem::new(q_mat, q_vec, a, b)?);
        if !sol.is_solved() {
            return Err(fail(CgStatus::CG_SINGULAR, "singular KKT system"));
        }
        let z_out = output(z, z_len, sol.z.len())?;
        let nu_out = if nu.is_null() {
            None
        } else {
            Some(output(nu, nu_len, sol.nu.len())?)
        };
        z_out.copy_from_slice(&sol.z);
        if let Some(nu_out) = nu_out {
            nu_out.copy_from_slice(&sol.nu);
        }
        Ok(())
    })
}

/// Loads a `model.json` written by `condguard train`.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_network_load(
    path: *const c_char,
    out: *mut *mut CgNetwork,
) -> CgStatus {
    guard(|| {
        let out = out_ptr(out)?;
        if path.is_null() {
            return Err(fail(CgStatus::CG_NULL_POINTER, "null path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CgStatus::CG_INVALID_INPUT, "path is not UTF-8"))?;
        let ckpt: Checkpoint = harness::read_json(Path::new(path))?;
        *out = Box::into_raw(Box::new(CgNetwork(Network::try_from(ckpt)?)));
        Ok(())
    })
}

/// # Safety
/// `n` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cg_network_free(n: *mut CgNetwork) {
    if !n.is_null() {
        drop(Box::from_raw(n));
    }
}

/// Input and output (class count) widths.
///
/// # Safety
/// `n` live; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cg_network_dims(
    n: *const CgNetwork,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> CgStatus {
    guard(|| {
        let arch = &handle(n)?.0.arch;
        *out_ptr(input_dim)? = arch.input_dim;
        *out_ptr(output_dim)? = arch.n;
        Ok(())
    })
}

/// Class probabilities for input `u`. Returns `CG_NON_FINITE` when the
/// optimization layer fails; `probs` is then left untouched.
///
/// # Safety
/// `u` valid for `u_len` doubles, `probs` for `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn cg_network_forward(
    n: *const CgNetwork,
    u: *const f64,
    u_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CgStatus {
    guard(|| {
        let net = &handle(n)?.0;
        let fwd = net.forward(input(u, u_len)?)?;
        if fwd.nonfinite {
            return Err(fail(CgStatus::CG_NON_FINITE, "optimization layer failed"));
        }
        output(probs, probs_len, fwd.probs.len())?.copy_from_slice(&fwd.probs);
        Ok(())
    })
}

/// κ₂ of the constraint matrix the network builds for `u`, before any defense.
///
/// # Safety
/// `u` valid for `u_len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_network_kappa(
    n: *const CgNetwork,
    u: *const f64,
    u_len: usize,
    out: *mut f64,
) -> CgStatus {
    guard(|| {
        let fwd = handle(n)?.0.forward(input(u, u_len)?)?;
        *out_ptr(out)? = densela::kappa2(&fwd.a);
        Ok(())
    })
}
