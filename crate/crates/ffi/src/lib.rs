//! C ABI over `asym_lab`.
//!
//! Every fallible function returns an [`AsymStatus`]. On failure the message
//! is kept per thread and can be read with [`asym_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Matrices are dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use asym_lab::augment::{Image, Recipe};
use asym_lab::encoder::{encode, encode_inference, Checkpoint, EncoderDims, EncoderParams};
use asym_lab::numerics::{RngStream, Tensor};
use asym_lab::objective::{info_nce_full, LossConfig, MemoryBank};
use asym_lab::theory::{tr_r_variance_check, uniform_alpha, McOptions, NoiseModel};
use asym_lab::variance::{cross_image_variance, intra_image_variance, FrozenEncoder, VarianceOptions};
use asym_lab::LabError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsymStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    NonFinite = 5,
    Degenerate = 6,
    Integrity = 7,
    Model = 8,
    Diverged = 9,
    Io = 10,
    Panic = 11,
}

impl From<&LabError> for AsymStatus {
    fn from(e: &LabError) -> Self {
        match e {
            LabError::Shape { .. } => AsymStatus::Shape,
            LabError::Degenerate(_) => AsymStatus::Degenerate,
            LabError::Config(_) => AsymStatus::InvalidArgument,
            LabError::Parse { .. } => AsymStatus::Parse,
            LabError::NonFinite(_) => AsymStatus::NonFinite,
            LabError::Integrity(_) => AsymStatus::Integrity,
            LabError::Model(_) => AsymStatus::Model,
            LabError::Divergence { .. } => AsymStatus::Diverged,
            LabError::Io(_) => AsymStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Lab(LabError),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Lab(e)
    }
}

type FfiResult = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> AsymStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsymStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AsymStatus::NullPointer
        }
        Ok(Err(Failure::Lab(e))) => {
            set_error(e.to_string());
            AsymStatus::from(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsymStatus::Panic
        }
    }
}

fn arg(msg: impl Into<String>) -> Failure {
    Failure::Lab(LabError::Config(msg.into()))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| arg(format!("{what} is not valid UTF-8")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Failure> {
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asym_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn asym_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Source-branch encoder parameters.
pub struct AsymEncoder {
    params: EncoderParams,
}

/// Creates a randomly initialized encoder.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn asym_encoder_new(
    input: usize,
    backbone: usize,
    proj_hidden: usize,
    out_dim: usize,
    seed: u64,
    out: *mut *mut AsymEncoder,
) -> AsymStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let dims = EncoderDims {
            input,
            backbone,
            proj_hidden,
            out: out_dim,
        };
        let params = EncoderParams::init(dims, &mut RngStream::new(seed))?;
        *slot = Box::into_raw(Box::new(AsymEncoder { params }));
        Ok(())
    })
}

/// Loads the source encoder of a checkpoint written by `asym-lab train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`asym_encoder_new`].
#[no_mangle]
pub unsafe extern "C" fn asym_encoder_load(path: *const c_char, out: *mut *mut AsymEncoder) -> AsymStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let path = c_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(AsymEncoder { params: ckpt.source }));
        Ok(())
    })
}

/// Releases an encoder. NULL is ignored.
///
/// # Safety
/// `enc` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asym_encoder_free(enc: *mut AsymEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Writes the input width and output dimension of an encoder.
///
/// # Safety
/// All pointers must be valid; `enc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn asym_encoder_dims(
    enc: *const AsymEncoder,
    input: *mut usize,
    out_dim: *mut usize,
) -> AsymStatus {
    guard(|| {
        let e = enc.as_ref().ok_or(Failure::Null("enc"))?;
        *out_ref(input, "input")? = e.params.dims.input;
        *out_ref(out_dim, "out_dim")? = e.params.dims.out;
        Ok(())
    })
}

/// Encodes `rows` input rows into unit-norm encodings `out` (`rows × out_dim`).
///
/// `bn_groups > 0` uses batch statistics over that many groups; `bn_groups == 0`
/// uses the running BN buffers, which accepts any batch size.
///
/// # Safety
/// `batch` must hold `rows × input` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn asym_encoder_encode(
    enc: *const AsymEncoder,
    batch: *const f64,
    rows: usize,
    bn_groups: usize,
    out: *mut f64,
    out_len: usize,
) -> AsymStatus {
    guard(|| {
        let e = enc.as_ref().ok_or(Failure::Null("enc"))?;
        let dims = e.params.dims;
        let x = matrix(input(batch, rows * dims.input, "batch")?, rows, dims.input)?;
        if out_len != rows * dims.out {
            return Err(arg(format!("out_len {out_len} != rows * out_dim = {}", rows * dims.out)));
        }
        let z = if bn_groups == 0 {
            encode_inference(&e.params, &x)?
        } else {
            encode(&e.params, &x, bn_groups, None)?.0
        };
        output(out, out_len, "out")?.copy_from_slice(z.data());
        Ok(())
    })
}

/// FIFO memory bank of unit-norm rows.
pub struct AsymBank {
    bank: MemoryBank,
}

/// Creates an empty bank.
///
/// # Safety
/// `out` must be valid for one handle pointer write.
#[no_mangle]
pub unsafe extern "C" fn asym_bank_new(capacity: usize, dim: usize, out: *mut *mut AsymBank) -> AsymStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let bank = MemoryBank::new(capacity, dim)?;
        *slot = Box::into_raw(Box::new(AsymBank { bank }));
        Ok(())
    })
}

/// Releases a bank. NULL is ignored.
///
/// # Safety
/// `bank` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asym_bank_free(bank: *mut AsymBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Appends `rows` unit-norm rows, evicting the oldest entries when full.
///
/// # Safety
/// `data` must hold `rows × dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn asym_bank_enqueue(bank: *mut AsymBank, data: *const f64, rows: usize) -> AsymStatus {
    guard(|| {
        let b = bank.as_mut().ok_or(Failure::Null("bank"))?;
        let dim = b.bank.dim();
        let x = matrix(input(data, rows * dim, "data")?, rows, dim)?;
        b.bank.enqueue(&x)?;
        Ok(())
    })
}

/// Number of filled slots.
///
/// # Safety
/// `bank` must be a live handle and `fill` writable.
#[no_mangle]
pub unsafe extern "C" fn asym_bank_fill(bank: *const AsymBank, fill: *mut usize) -> AsymStatus {
    guard(|| {
        let b = bank.as_ref().ok_or(Failure::Null("bank"))?;
        *out_ref(fill, "fill")? = b.bank.fill();
        Ok(())
    })
}

/// InfoNCE of unit-norm `z` against positives `z_pos` (both `n × dim`) with
/// the bank as negatives. `grad` (`n × dim`) may be NULL.
///
/// # Safety
/// Array pointers must cover `n × dim` doubles; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asym_info_nce(
    z: *const f64,
    z_pos: *const f64,
    n: usize,
    bank: *const AsymBank,
    temperature: f64,
    epsilon: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> AsymStatus {
    guard(|| {
        let b = bank.as_ref().ok_or(Failure::Null("bank"))?;
        let dim = b.bank.dim();
        let z = matrix(input(z, n * dim, "z")?, n, dim)?;
        let zp = matrix(input(z_pos, n * dim, "z_pos")?, n, dim)?;
        let cfg = LossConfig::new(temperature, epsilon)?;
        let r = info_nce_full(&z, &zp, &b.bank, &cfg)?;
        *out_ref(loss, "loss")? = r.loss;
        if !grad.is_null() {
            output(grad, n * dim, "grad")?.copy_from_slice(r.grad_z.data());
        }
        Ok(())
    })
}

/// Mean per-dimension population variance of `n × d` encodings.
///
/// # Safety
/// `z` must hold `n × d` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn asym_cross_image_variance(z: *const f64, n: usize, d: usize, out: *mut f64) -> AsymStatus {
    guard(|| {
        let z = matrix(input(z, n * d, "z")?, n, d)?;
        *out_ref(out, "out")? = cross_image_variance(&z)?;
        Ok(())
    })
}

/// Mean intra-image variance of an encoder under a recipe preset
/// (`baseline`, `weaker`, `stronger`, `multicrop`, `scalemix`, `noise`,
/// `identity`). Images are `n_images × 3 × size × size` in `[0, 1]`, and
/// `size` must match the encoder input.
///
/// # Safety
/// `images` must hold `n_images × 3 × size²` doubles, `recipe` must be a
/// NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn asym_intra_image_variance(
    enc: *const AsymEncoder,
    images: *const f64,
    n_images: usize,
    size: usize,
    recipe: *const c_char,
    r: usize,
    bn_groups: usize,
    seed: u64,
    out: *mut f64,
) -> AsymStatus {
    guard(|| {
        let e = enc.as_ref().ok_or(Failure::Null("enc"))?;
        let per = 3 * size * size;
        let data = input(images, n_images * per, "images")?;
        let imgs = data
            .chunks_exact(per.max(1))
            .map(|px| Image::new(3, size, size, px.to_vec()))
            .collect::<asym_lab::Result<Vec<_>>>()?;
        let recipe = Recipe::preset(c_str(recipe, "recipe")?)?.with_out_size(size);
        let mut fe = FrozenEncoder::new(&e.params, "ffi")?;
        if bn_groups > 0 {
            fe.bn_groups = bn_groups;
        }
        let opts = VarianceOptions {
            r,
            ..VarianceOptions::default()
        };
        let rep = intra_image_variance(&fe, &imgs, &recipe, &RngStream::new(seed), &opts)?;
        *out_ref(out, "out")? = rep.v;
        Ok(())
    })
}

/// Outcome of [`asym_theory_scalar_check`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AsymTheoryResult {
    pub empirical: f64,
    pub predicted: f64,
    pub predicted_full: f64,
    pub ci_half_width: f64,
    pub passed: bool,
    pub passed_full: bool,
}

/// Monte-Carlo `V[tr R]` on the one-dimensional fixture (N = 1, K = 4,
/// uniform α) with the target covariance scaled by `sigma_target_scale`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn asym_theory_scalar_check(
    trials: u64,
    sigma_target_scale: f64,
    seed: u64,
    out: *mut AsymTheoryResult,
) -> AsymStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let model = NoiseModel::scalar_fixture().scale_target_cov(sigma_target_scale)?;
        let r = tr_r_variance_check(
            &model,
            &uniform_alpha(1, 4),
            &McOptions::new(trials),
            &RngStream::new(seed).substream("theory-check"),
        )?;
        let alt = r.alternative.as_ref().expect("variance check carries the full form");
        *slot = AsymTheoryResult {
            empirical: r.empirical[0],
            predicted: r.predicted[0],
            predicted_full: alt.predicted[0],
            ci_half_width: r.ci_half_width[0],
            passed: r.passed,
            passed_full: alt.passed,
        };
        Ok(())
    })
}
