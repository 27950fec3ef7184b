//! C ABI over the vll core.
//!
//! Every fallible call returns a [`VllStatus`]; on failure the message is kept
//! per thread and can be copied out with [`vll_last_error_message`]. Objects are
//! passed as opaque handles and must be released with the matching `_free`.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use vll::kernels::{GramKernel, Provenance};
use vll::nn::{AlphaMode, MlpState};
use vll::theory::SpectralModel;
use vll::VllError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VllStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VllAlphaMode {
    WeightRescale = 0,
    OutputRescale = 1,
}

/// Opaque network handle.
pub struct VllMlp(MlpState);

/// Opaque Gram-matrix handle.
pub struct VllGram(GramKernel);

/// Opaque covariate-model handle.
pub struct VllModel(SpectralModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &VllError) -> VllStatus {
    match e {
        VllError::Io(_) => VllStatus::Io,
        e if e.is_numerical() => VllStatus::Numerical,
        _ => VllStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), VllStatus>) -> VllStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VllStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            VllStatus::Panic
        }
    }
}

fn fail(e: VllError) -> VllStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> VllStatus {
    set_error(format!("null pointer: {what}"));
    VllStatus::NullPointer
}

unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, VllStatus> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(ptr, rows * cols);
    Ok(DMatrix::from_row_slice(rows, cols, s))
}

unsafe fn vector(ptr: *const f64, n: usize, what: &str) -> Result<DVector<f64>, VllStatus> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(DVector::from_column_slice(std::slice::from_raw_parts(ptr, n)))
}

unsafe fn write_matrix(m: &DMatrix<f64>, out: *mut f64) {
    let (r, c) = m.shape();
    let o = std::slice::from_raw_parts_mut(out, r * c);
    for i in 0..r {
        for j in 0..c {
            o[i * c + j] = m[(i, j)];
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vll_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn vll_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Create a network with standard-normal weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vll_mlp_new(
    d: usize,
    depth: usize,
    width: usize,
    alpha: f64,
    mode: VllAlphaMode,
    seed: u64,
    out: *mut *mut VllMlp,
) -> VllStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            VllAlphaMode::WeightRescale => AlphaMode::WeightRescale,
            VllAlphaMode::OutputRescale => AlphaMode::OutputRescale,
        };
        let s = vll::nn::init_mlp(d, depth, width, alpha, mode, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(VllMlp(s)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from `vll_mlp_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vll_mlp_free(h: *mut VllMlp) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Parameter count of the network.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vll_mlp_param_count(h: *const VllMlp) -> usize {
    h.as_ref().map_or(0, |m| m.0.param_count())
}

/// Centered outputs on `n` inputs of dimension `d` (row-major); writes `n` values.
///
/// # Safety
/// Buffers must hold `n*d` and `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vll_mlp_centered_output(h: *const VllMlp, x: *const f64, n: usize, d: usize, out: *mut f64) -> VllStatus {
    guard(|| {
        let m = h.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = matrix(x, n, d, "x")?;
        let f = m.0.centered_output(&x).map_err(fail)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(f.as_slice());
        Ok(())
    })
}

/// Empirical tangent kernel between `x1` (n×d) and `x2` (m×d).
///
/// # Safety
/// Buffers must hold `n*d` and `m*d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vll_entk(
    h: *const VllMlp,
    x1: *const f64,
    n: usize,
    x2: *const f64,
    m: usize,
    d: usize,
    out: *mut *mut VllGram,
) -> VllStatus {
    guard(|| {
        let net = h.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = (matrix(x1, n, d, "x1")?, matrix(x2, m, d, "x2")?);
        let k = vll::kernels::entk(&net.0, &a, &b).map_err(fail)?;
        *out = Box::into_raw(Box::new(VllGram(k)));
        Ok(())
    })
}

/// Wrap a square row-major matrix as a Gram handle.
///
/// # Safety
/// `k` must hold `n*n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vll_gram_from_matrix(k: *const f64, n: usize, out: *mut *mut VllGram) -> VllStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = GramKernel::new(matrix(k, n, n, "k")?, Provenance::Averaged).map_err(fail)?;
        *out = Box::into_raw(Box::new(VllGram(g)));
        Ok(())
    })
}

/// Rows and columns of a Gram handle.
///
/// # Safety
/// `h` must be a live handle; `rows`/`cols` valid or null.
#[no_mangle]
pub unsafe extern "C" fn vll_gram_shape(h: *const VllGram, rows: *mut usize, cols: *mut usize) -> VllStatus {
    guard(|| {
        let g = h.as_ref().ok_or_else(|| null("handle"))?;
        if let Some(r) = rows.as_mut() {
            *r = g.0.matrix.nrows();
        }
        if let Some(c) = cols.as_mut() {
            *c = g.0.matrix.ncols();
        }
        Ok(())
    })
}

/// Copy the Gram entries (row-major) into `out`, which must hold rows*cols doubles.
///
/// # Safety
/// `h` must be live and `out` large enough.
#[no_mangle]
pub unsafe extern "C" fn vll_gram_copy(h: *const VllGram, out: *mut f64) -> VllStatus {
    guard(|| {
        let g = h.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        write_matrix(&g.0.matrix, out);
        Ok(())
    })
}

/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vll_gram_free(h: *mut VllGram) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Kernel-target alignment yᵀKy / (Tr K · |y|²).
///
/// # Safety
/// `y` must hold as many doubles as the Gram has rows.
#[no_mangle]
pub unsafe extern "C" fn vll_alignment(h: *const VllGram, y: *const f64, n: usize, out: *mut f64) -> VllStatus {
    guard(|| {
        let g = h.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let y = vector(y, n, "y")?;
        *out = vll::kernels::alignment(&g.0, y.as_slice()).map_err(fail)?;
        Ok(())
    })
}

/// Infinite-width ReLU NTK and NNGP between `x1` (n×d) and `x2` (m×d).
/// Either output may be null.
///
/// # Safety
/// Non-null outputs must hold `n*m` doubles.
#[no_mangle]
pub unsafe extern "C" fn vll_ntk_infinite_relu(
    x1: *const f64,
    n: usize,
    x2: *const f64,
    m: usize,
    d: usize,
    depth: usize,
    sigma: f64,
    ntk_out: *mut f64,
    nngp_out: *mut f64,
) -> VllStatus {
    guard(|| {
        let (a, b) = (matrix(x1, n, d, "x1")?, matrix(x2, m, d, "x2")?);
        let (k, s) = vll::kernels::ntk_infinite_relu(&a, &b, depth, sigma).map_err(fail)?;
        if !ntk_out.is_null() {
            write_matrix(&k, ntk_out);
        }
        if !nngp_out.is_null() {
            write_matrix(&s, nngp_out);
        }
        Ok(())
    })
}

/// Kernel ridge regression: fit on `k_train` (p×p) and predict with `k_cross`
/// (t×p). `ridge = 0` gives the minimum-norm interpolant.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn vll_kernel_regression(
    k_train: *const f64,
    y: *const f64,
    p: usize,
    k_cross: *const f64,
    t: usize,
    ridge: f64,
    out: *mut f64,
) -> VllStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let k = matrix(k_train, p, p, "k_train")?;
        let kc = matrix(k_cross, t, p, "k_cross")?;
        let y = vector(y, p, "y")?;
        let duals = vll::regression::solve_duals(&k, &y, ridge).map_err(fail)?;
        let f = kc * duals;
        std::slice::from_raw_parts_mut(out, t).copy_from_slice(f.as_slice());
        Ok(())
    })
}

/// Covariate model with Σ_M eigenvalues `k^-exponent`, identity map, no noise
/// and all target coefficients 1.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vll_model_power_law(m: usize, exponent: f64, out: *mut *mut VllModel) -> VllStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = SpectralModel::power_law(m, exponent, vec![1.0; m]).map_err(fail)?;
        *out = Box::into_raw(Box::new(VllModel(model)));
        Ok(())
    })
}

/// Covariate model from explicit spectra and a structured or Gaussian map.
/// `map_kind`: 0 identity, 1 projection onto the top `keep_top` modes, 2 Gaussian
/// with entries of scale `sigma_a` and `n_h = eta·M` rows.
///
/// # Safety
/// `eigs` and `wstar` hold `m` doubles; `noise` holds `n_noise` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn vll_model_new(
    eigs: *const f64,
    wstar: *const f64,
    m: usize,
    noise: *const f64,
    n_noise: usize,
    map_kind: c_int,
    keep_top: usize,
    sigma_a: f64,
    eta: f64,
    out: *mut *mut VllModel,
) -> VllStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let e = vector(eigs, m, "eigs")?.as_slice().to_vec();
        let w = vector(wstar, m, "wstar")?.as_slice().to_vec();
        let n = vector(noise, n_noise, "noise")?.as_slice().to_vec();
        let a = match map_kind {
            0 => vll::theory::ASpec::Identity,
            1 => vll::theory::ASpec::Projection { keep_top },
            2 => vll::theory::ASpec::Gaussian { sigma_a, eta },
            k => {
                set_error(format!("unknown map kind {k}"));
                return Err(VllStatus::InvalidArgument);
            }
        };
        let model = SpectralModel::new(e, w, n, a).map_err(fail)?;
        *out = Box::into_raw(Box::new(VllModel(model)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vll_model_free(h: *mut VllModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Learning-curve theory at load P/M = `alpha_load`. Structured maps use the
/// fixed-map solver, Gaussian maps the quenched one. `gamma` may be null.
///
/// # Safety
/// `h` must be live; `eg` valid.
#[no_mangle]
pub unsafe extern "C" fn vll_theory_error(h: *const VllModel, alpha_load: f64, ridge: f64, eg: *mut f64, gamma: *mut f64) -> VllStatus {
    guard(|| {
        let model = h.as_ref().ok_or_else(|| null("handle"))?;
        if eg.is_null() {
            return Err(null("eg"));
        }
        let s = if model.0.is_structured() {
            vll::theory::solve_fixed_a(&model.0, alpha_load, ridge)
        } else {
            vll::theory::solve_quenched_gaussian_a(&model.0, alpha_load, ridge)
        }
        .map_err(fail)?;
        *eg = s.eg;
        if let Some(g) = gamma.as_mut() {
            *g = s.gamma;
        }
        Ok(())
    })
}

/// Sample size where eg_ensembled/eg_single crosses 1/2. `found` is set to 0 when
/// the ratio never reaches 1/2 (then `p_half` is left untouched).
///
/// # Safety
/// Each array holds `n` doubles; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn vll_p_half(
    p: *const f64,
    eg_single: *const f64,
    eg_ensembled: *const f64,
    n: usize,
    p_half: *mut f64,
    found: *mut c_int,
) -> VllStatus {
    guard(|| {
        if p_half.is_null() || found.is_null() {
            return Err(null("output"));
        }
        let (ps, s, e) = (vector(p, n, "p")?, vector(eg_single, n, "eg_single")?, vector(eg_ensembled, n, "eg_ensembled")?);
        match vll::ensemble::p_half(ps.as_slice(), s.as_slice(), e.as_slice()).map_err(fail)? {
            Some(h) => {
                *p_half = h.p_half;
                *found = 1;
            }
            None => *found = 0,
        }
        Ok(())
    })
}
