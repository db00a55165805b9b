//! C ABI over `ssmlab`.
//!
//! Models are opaque handles created by [`ssmlab_model_load`] or
//! [`ssmlab_model_new`] and released with [`ssmlab_model_free`]. Every
//! fallible call returns an [`SsmlabStatus`]; on failure the message is
//! available from [`ssmlab_last_error`] on the same thread until the next
//! failing call. Images are `h * w * c` floats in `[0, 1]`, row-major with
//! channels last.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ssmlab::attacks::{attack, AttackConfig, Victim};
use ssmlab::checkpoint::{load_checkpoint, save_checkpoint};
use ssmlab::experiments::{self, ExperimentSpec};
use ssmlab::model::{Arch, Model, ModelConfig};
use ssmlab::report::Format;
use ssmlab::{Error, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Attack selector for [`ssmlab_attack`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmlabAttack {
    Fgsm = 0,
    Pgd = 1,
    PatchFool = 2,
}

/// Architecture selector for [`ssmlab_model_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmlabArch {
    VssmHier = 0,
    VssmFlatBidir = 1,
    AttnWindow = 2,
}

/// Opaque model handle.
pub struct SsmlabModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SsmlabStatus {
    match err {
        Error::Io { .. } => SsmlabStatus::Io,
        Error::IdxMagic { .. }
        | Error::IdxTruncated { .. }
        | Error::IdxTrailing { .. }
        | Error::IdxHeader(_)
        | Error::IdxCountMismatch { .. }
        | Error::LabelRange { .. }
        | Error::CheckpointMagic(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTruncated(_)
        | Error::DuplicateTensor(_)
        | Error::CheckpointContent(_)
        | Error::Report(_)
        | Error::Parse { .. } => SsmlabStatus::Format,
        Error::Experiment { source, .. } => status_of(source),
        e if e.is_validation() => SsmlabStatus::InvalidArgument,
        _ => SsmlabStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsmlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsmlabStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            SsmlabStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            SsmlabStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SsmlabStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const SsmlabModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|h| &h.model).ok_or(Failure::Null("model"))
}

unsafe fn image_arg(m: &Model, pixels: *const f32, len: usize) -> Result<Tensor, Failure> {
    if pixels.is_null() {
        return Err(Failure::Null("pixels"));
    }
    let shape = m.image_shape();
    let expected = shape.iter().product::<usize>();
    if len != expected {
        return Err(Failure::Invalid(format!(
            "image has {len} values, model expects {expected} ({shape:?})"
        )));
    }
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssmlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ssmlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_load(path: *const c_char, out: *mut *mut SsmlabModel) -> SsmlabStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let model = load_checkpoint(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SsmlabModel { model }));
        Ok(())
    })
}

/// Builds a freshly initialized model at the default desk configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_new(arch: SsmlabArch, seed: u64, out: *mut *mut SsmlabModel) -> SsmlabStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let arch = match arch {
            SsmlabArch::VssmHier => Arch::VssmHier,
            SsmlabArch::VssmFlatBidir => Arch::VssmFlatBidir,
            SsmlabArch::AttnWindow => Arch::AttnWindow,
        };
        let model = Model::build(ModelConfig {
            seed,
            ..ModelConfig::with_arch(arch)
        })?;
        *out = Box::into_raw(Box::new(SsmlabModel { model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_save(model: *const SsmlabModel, path: *const c_char) -> SsmlabStatus {
    guard(|| {
        let m = model_arg(model)?;
        save_checkpoint(m, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_free(model: *mut SsmlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image height, width, channels and class count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_shape(
    model: *const SsmlabModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    n_classes: *mut usize,
) -> SsmlabStatus {
    guard(|| {
        let m = model_arg(model)?;
        let [h, w, c] = m.image_shape();
        for (p, v, what) in [
            (height, h, "height"),
            (width, w, "width"),
            (channels, c, "channels"),
            (n_classes, m.config().n_classes, "n_classes"),
        ] {
            *p.as_mut().ok_or(Failure::Null(what))? = v;
        }
        Ok(())
    })
}

/// Class logits for one image.
///
/// # Safety
/// `pixels` must hold `len` floats and `logits` room for `n_logits`.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_logits(
    model: *const SsmlabModel,
    pixels: *const f32,
    len: usize,
    logits: *mut f32,
    n_logits: usize,
) -> SsmlabStatus {
    guard(|| {
        let m = model_arg(model)?;
        let x = image_arg(m, pixels, len)?;
        let out = out_slice(logits, n_logits, "logits")?;
        if n_logits != m.config().n_classes {
            return Err(Failure::Invalid(format!(
                "logits buffer holds {n_logits}, model has {} classes",
                m.config().n_classes
            )));
        }
        out.copy_from_slice(&m.logits(&x)?);
        Ok(())
    })
}

/// Predicted class for one image.
///
/// # Safety
/// `pixels` must hold `len` floats and `class_out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_predict(
    model: *const SsmlabModel,
    pixels: *const f32,
    len: usize,
    class_out: *mut usize,
) -> SsmlabStatus {
    guard(|| {
        let m = model_arg(model)?;
        let x = image_arg(m, pixels, len)?;
        let out = class_out.as_mut().ok_or(Failure::Null("class_out"))?;
        *out = Victim::predict(m, &x)?;
        Ok(())
    })
}

/// Attack parameters. `epsilon` and `step_size` are in pixel units; for
/// Patch-Fool `step_size` is the initial learning rate and `epsilon` is
/// ignored.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SsmlabAttackParams {
    pub kind: SsmlabAttack,
    pub epsilon: f32,
    pub step_size: f32,
    pub iterations: usize,
    pub n_patches: usize,
    pub seed: u64,
}

/// Paper defaults for `kind`.
#[no_mangle]
pub extern "C" fn ssmlab_attack_defaults(kind: SsmlabAttack) -> SsmlabAttackParams {
    let c = match kind {
        SsmlabAttack::Fgsm => AttackConfig::fgsm(AttackConfig::pgd_default().epsilon),
        SsmlabAttack::Pgd => AttackConfig::pgd_default(),
        SsmlabAttack::PatchFool => AttackConfig::patch_fool(1),
    };
    SsmlabAttackParams {
        kind,
        epsilon: c.epsilon,
        step_size: c.step_size,
        iterations: c.iterations,
        n_patches: c.n_patches,
        seed: c.seed,
    }
}

/// Attacks one image, writing the adversarial image to `adv` (same length
/// as `pixels`) and whether the prediction flipped to `success`.
///
/// # Safety
/// `params` must be valid, `pixels` and `adv` must hold `len` floats and
/// `success` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_attack(
    model: *const SsmlabModel,
    params: *const SsmlabAttackParams,
    pixels: *const f32,
    len: usize,
    label: usize,
    adv: *mut f32,
    success: *mut bool,
) -> SsmlabStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = params.as_ref().ok_or(Failure::Null("params"))?;
        let x = image_arg(m, pixels, len)?;
        let out = out_slice(adv, len, "adv")?;
        let flag = success.as_mut().ok_or(Failure::Null("success"))?;
        if label >= m.config().n_classes {
            return Err(Failure::Invalid(format!("label {label} out of range")));
        }
        let mut cfg = match p.kind {
            SsmlabAttack::Fgsm => AttackConfig::fgsm(p.epsilon),
            SsmlabAttack::Pgd => AttackConfig::pgd(p.epsilon, p.step_size, p.iterations),
            SsmlabAttack::PatchFool => {
                let mut c = AttackConfig::patch_fool(p.n_patches);
                c.step_size = p.step_size;
                c.iterations = p.iterations;
                c
            }
        };
        cfg.seed = p.seed;
        let res = attack(m, &x, label, &cfg)?;
        out.copy_from_slice(res.x_adv.data());
        *flag = res.success;
        Ok(())
    })
}

/// Runs an experiment spec file and writes its report; `json` selects JSON
/// over CSV.
///
/// # Safety
/// Both paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_run_spec(spec: *const c_char, out: *const c_char, json: bool) -> SsmlabStatus {
    guard(|| {
        let spec = ExperimentSpec::load(path_arg(spec, "spec")?)?;
        let out = path_arg(out, "out")?;
        let outcome = experiments::run(&spec)?;
        outcome
            .report
            .emit(if json { Format::Json } else { Format::Csv }, out)?;
        Ok(())
    })
}
