//! C interface: opaque handles, status codes and a per-thread error message.
//!
//! Every function returns an [`SvddipStatus`]. Output buffers are supplied by
//! the caller together with their length in elements; images are row-major
//! `n_px * n_px` and sinograms `num_angles * num_detectors`, both `double`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use svddip::ct::{CtOperator, ParallelGeometry, RampFilter, Sinogram};
use svddip::error::Error;
use svddip::losses::psnr;
use svddip::model::{load_checkpoint, save_checkpoint, LayerSelection, Trainability, UNet, UNetConfig};
use svddip::svd::TruncationPolicy;
use svddip::tensor::Tensor;
use svddip::training::{run_dip, DipRunConfig, Variant};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvddipStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericalFailure = 2,
    Format = 3,
    Io = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvddipVariant {
    Dip = 0,
    Edip = 1,
    SvdDip = 2,
}

/// A CT forward operator.
pub struct SvddipOperator {
    inner: Arc<CtOperator>,
}

/// A U-Net with its parameters.
pub struct SvddipNetwork {
    inner: UNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Buffer { needed: usize, given: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SvddipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvddipStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e {
                Error::InvalidArgument(_) => SvddipStatus::InvalidArgument,
                Error::NumericalFailure(_) | Error::Diverged { .. } => SvddipStatus::NumericalFailure,
                Error::Format { .. } => SvddipStatus::Format,
                Error::Io { .. } => SvddipStatus::Io,
            }
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            SvddipStatus::NullPointer
        }
        Ok(Err(Failure::Buffer { needed, given })) => {
            set_error(format!("output buffer holds {given} elements, {needed} needed"));
            SvddipStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            SvddipStatus::Panic
        }
    }
}

unsafe fn input<'a>(data: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if data.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn output<'a>(data: *mut f64, len: usize, needed: usize) -> Result<&'a mut [f64], Failure> {
    if data.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    if len < needed {
        return Err(Failure::Buffer { needed, given: len });
    }
    Ok(std::slice::from_raw_parts_mut(data, needed))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::invalid("path is not valid UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn svddip_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parallel-beam operator with uniformly spaced angles over [0, pi).
#[no_mangle]
pub unsafe extern "C" fn svddip_operator_parallel(
    num_angles: usize,
    num_detectors: usize,
    n_px: usize,
    out: *mut *mut SvddipOperator,
) -> SvddipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let geom = ParallelGeometry::uniform(num_angles, num_detectors, n_px)?;
        let op = CtOperator::parallel(geom)?;
        *out = Box::into_raw(Box::new(SvddipOperator { inner: Arc::new(op) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn svddip_operator_free(op: *mut SvddipOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Image side and sinogram dimensions of an operator.
#[no_mangle]
pub unsafe extern "C" fn svddip_operator_shape(
    op: *const SvddipOperator,
    n_px: *mut usize,
    num_angles: *mut usize,
    num_detectors: *mut usize,
) -> SvddipStatus {
    guard(|| {
        let op = deref(op, "operator")?;
        if n_px.is_null() || num_angles.is_null() || num_detectors.is_null() {
            return Err(Failure::Null("shape output"));
        }
        let [a, d] = op.inner.sinogram_shape();
        *n_px = op.inner.n_px();
        *num_angles = a;
        *num_detectors = d;
        Ok(())
    })
}

/// Sinogram of an image.
#[no_mangle]
pub unsafe extern "C" fn svddip_operator_forward(
    op: *const SvddipOperator,
    image: *const f64,
    image_len: usize,
    sinogram: *mut f64,
    sinogram_len: usize,
) -> SvddipStatus {
    guard(|| {
        let op = deref(op, "operator")?;
        let n = op.inner.n_px();
        if image_len != n * n {
            return Err(Error::invalid(format!("image has {image_len} elements, expected {}", n * n)).into());
        }
        let x = Tensor::new([n, n], input(image, image_len, "image")?.to_vec())?;
        let y = op.inner.forward(&x)?;
        output(sinogram, sinogram_len, y.len())?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Filtered back-projection with the Ram-Lak filter.
#[no_mangle]
pub unsafe extern "C" fn svddip_operator_fbp(
    op: *const SvddipOperator,
    sinogram: *const f64,
    sinogram_len: usize,
    image: *mut f64,
    image_len: usize,
) -> SvddipStatus {
    guard(|| {
        let op = deref(op, "operator")?;
        let [a, d] = op.inner.sinogram_shape();
        if sinogram_len != a * d {
            return Err(Error::invalid(format!("sinogram has {sinogram_len} elements, expected {}", a * d)).into());
        }
        let y = Tensor::new([a, d], input(sinogram, sinogram_len, "sinogram")?.to_vec())?;
        let x = op.inner.reconstruct(&y, RampFilter::RamLak)?;
        output(image, image_len, x.len())?.copy_from_slice(x.data());
        Ok(())
    })
}

/// Freshly initialized desk-scale U-Net.
#[no_mangle]
pub unsafe extern "C" fn svddip_network_desk(seed: u64, out: *mut *mut SvddipNetwork) -> SvddipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = UNet::<f32>::build(&UNetConfig::desk(), seed)?;
        *out = Box::into_raw(Box::new(SvddipNetwork { inner: net }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
#[no_mangle]
pub unsafe extern "C" fn svddip_network_load(dir: *const c_char, out: *mut *mut SvddipNetwork) -> SvddipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = load_checkpoint::<f32>(path(dir)?)?;
        *out = Box::into_raw(Box::new(SvddipNetwork { inner: net }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn svddip_network_save(net: *const SvddipNetwork, dir: *const c_char) -> SvddipStatus {
    guard(|| {
        let net = deref(net, "network")?;
        save_checkpoint(&net.inner, path(dir)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn svddip_network_free(net: *mut SvddipNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Factorizes every down/up-block conv, keeping `rank_fraction` of each rank
/// (1 keeps all). Only singular values stay trainable.
#[no_mangle]
pub unsafe extern "C" fn svddip_network_factorize(net: *mut SvddipNetwork, rank_fraction: f64) -> SvddipStatus {
    guard(|| {
        let net = net.as_mut().ok_or(Failure::Null("network"))?;
        let policy = if rank_fraction == 1.0 {
            TruncationPolicy::None
        } else {
            TruncationPolicy::RankFraction(rank_fraction)
        };
        let addrs = LayerSelection::AllBlocks.resolve(&net.inner);
        net.inner.replace_with_svd(&addrs, policy)?;
        net.inner.set_trainability(Trainability::SINGULAR_VALUES_ONLY);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn svddip_network_trainable_count(net: *const SvddipNetwork, out: *mut usize) -> SvddipStatus {
    guard(|| {
        let net = deref(net, "network")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = net.inner.trainable_count();
        Ok(())
    })
}

/// Network output for an `n * n` input image.
#[no_mangle]
pub unsafe extern "C" fn svddip_network_predict(
    net: *const SvddipNetwork,
    image: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> SvddipStatus {
    guard(|| {
        let net = deref(net, "network")?;
        let x = Tensor::new([1, n, n], input(image, n * n, "image")?.to_vec())?;
        let y = net.inner.predict(&x.cast::<f32>())?;
        let dst = output(out, out_len, n * n)?;
        for (d, &v) in dst.iter_mut().zip(y.data()) {
            *d = f64::from(v);
        }
        Ok(())
    })
}

/// Options of [`svddip_reconstruct`]; fill with [`svddip_reconstruct_defaults`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SvddipReconstructOptions {
    pub variant: SvddipVariant,
    pub iterations: usize,
    /// Non-positive selects the variant default.
    pub learning_rate: f64,
    pub gamma: f64,
    pub seed: u64,
}

#[no_mangle]
pub extern "C" fn svddip_reconstruct_defaults(variant: SvddipVariant) -> SvddipReconstructOptions {
    let cfg = DipRunConfig::new(to_variant(variant));
    SvddipReconstructOptions {
        variant,
        iterations: cfg.iterations,
        learning_rate: cfg.lr,
        gamma: cfg.gamma,
        seed: cfg.seed,
    }
}

fn to_variant(v: SvddipVariant) -> Variant {
    match v {
        SvddipVariant::Dip => Variant::Dip,
        SvddipVariant::Edip => Variant::Edip,
        SvddipVariant::SvdDip => Variant::SvdDip,
    }
}

/// Runs DIP, EDIP or SVD-DIP on a sinogram and writes the last iterate.
///
/// `net` is the pretrained starting point (ignored for DIP, which uses a fresh
/// desk-scale network). `ground_truth` may be null; otherwise the PSNR of the
/// last iterate is stored in `final_psnr` (which may also be null).
#[no_mangle]
pub unsafe extern "C" fn svddip_reconstruct(
    op: *const SvddipOperator,
    net: *const SvddipNetwork,
    options: *const SvddipReconstructOptions,
    sinogram: *const f64,
    sinogram_len: usize,
    ground_truth: *const f64,
    image: *mut f64,
    image_len: usize,
    final_psnr: *mut f64,
) -> SvddipStatus {
    guard(|| {
        let op = deref(op, "operator")?;
        let opts = deref(options, "options")?;
        let variant = to_variant(opts.variant);
        let n = op.inner.n_px();
        let [a, d] = op.inner.sinogram_shape();
        if sinogram_len != a * d {
            return Err(Error::invalid(format!("sinogram has {sinogram_len} elements, expected {}", a * d)).into());
        }
        let y = Sinogram::clean(Tensor::new([a, d], input(sinogram, sinogram_len, "sinogram")?.to_vec())?);
        let gt = if ground_truth.is_null() {
            None
        } else {
            Some(Tensor::new([n, n], input(ground_truth, n * n, "ground truth")?.to_vec())?)
        };
        let start = net.as_ref().map(|h| &h.inner);
        let model = start.map_or_else(UNetConfig::desk, |s| s.config().clone());
        let mut cfg = DipRunConfig::new(variant);
        cfg.iterations = opts.iterations;
        if opts.learning_rate > 0.0 {
            cfg.lr = opts.learning_rate;
        }
        cfg.gamma = opts.gamma;
        cfg.seed = opts.seed;
        let start = if variant == Variant::Dip { None } else { start };
        let run = run_dip(&cfg, &model, &y, op.inner.clone(), gt.as_ref(), start)?;
        output(image, image_len, n * n)?.copy_from_slice(run.reconstruction.data());
        if let (Some(gt), false) = (&gt, final_psnr.is_null()) {
            *final_psnr = psnr(&run.reconstruction, gt, None)?;
        }
        Ok(())
    })
}
