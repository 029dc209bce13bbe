#![allow(clippy::missing_safety_doc)]
//! C ABI for protoseg.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_read`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a `ProtosegStatus`; on failure the message is available from
//! `protoseg_last_error` on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use protoseg::phantom::{episode_from_volumes, SupportSelection};
use protoseg::{
    BuiltinExtractorSpec, ClassId, EpisodeConfig, Error, LabelMask, SegmentationResult, VolumeImage,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtosegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidShape = 3,
    InvalidConfig = 4,
    Format = 5,
    Io = 6,
    EmptyClass = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for ProtosegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidShape(_) | Error::KernelTooLarge { .. } | Error::NonFinite(_) => ProtosegStatus::InvalidShape,
            Error::InvalidConfig(_) | Error::Usage(_) | Error::PhantomSpec(_) => ProtosegStatus::InvalidConfig,
            Error::Format { .. } => ProtosegStatus::Format,
            Error::Io { .. } => ProtosegStatus::Io,
            Error::EmptyClass(_) | Error::ClassNotInEpisode(_) => ProtosegStatus::EmptyClass,
            Error::BankConstruction(_) => ProtosegStatus::Internal,
        }
    }
}

/// A 3D intensity volume, `[S, H, W]`.
pub struct ProtosegVolume(VolumeImage);

/// A 3D label mask, `[S, H, W]`, one class id per voxel.
pub struct ProtosegMask(LabelMask);

/// Segmentation settings. Starts at the library defaults.
pub struct ProtosegConfig {
    episode: EpisodeConfig,
    extractor: BuiltinExtractorSpec,
    selection: SupportSelection,
}

/// Output of `protoseg_segment`.
pub struct ProtosegResult {
    result: SegmentationResult,
    mask: ProtosegMask,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

struct Failure(ProtosegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ProtosegStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ProtosegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ProtosegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ProtosegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ProtosegStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn voxel_count(s: usize, h: usize, w: usize) -> Result<usize, Failure> {
    s.checked_mul(h).and_then(|n| n.checked_mul(w)).ok_or_else(|| invalid("dims overflow"))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn protoseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn protoseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `s*h*w` floats (slice-major, row-major) into a new volume.
#[no_mangle]
pub unsafe extern "C" fn protoseg_volume_new(
    data: *const f32,
    s: usize,
    h: usize,
    w: usize,
    out: *mut *mut ProtosegVolume,
) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = voxel_count(s, h, w)?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let volume = VolumeImage::from_flat([s, h, w], values)?;
        *out = Box::into_raw(Box::new(ProtosegVolume(volume)));
        Ok(())
    })
}

/// Reads a VOLRAW file.
#[no_mangle]
pub unsafe extern "C" fn protoseg_volume_read(path: *const c_char, out: *mut *mut ProtosegVolume) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let volume = protoseg::io::read_volume(PathBuf::from(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(ProtosegVolume(volume)));
        Ok(())
    })
}

/// Writes `dims` as `[S, H, W]`.
#[no_mangle]
pub unsafe extern "C" fn protoseg_volume_dims(volume: *const ProtosegVolume, dims: *mut usize) -> ProtosegStatus {
    guard(|| {
        let volume = borrow(volume, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&volume.0.dims());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn protoseg_volume_free(volume: *mut ProtosegVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Copies `s*h*w` class ids into a new mask.
#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_new(
    data: *const u8,
    s: usize,
    h: usize,
    w: usize,
    out: *mut *mut ProtosegMask,
) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = voxel_count(s, h, w)?;
        let mask = LabelMask::from_flat([s, h, w], std::slice::from_raw_parts(data, n).to_vec())?;
        *out = Box::into_raw(Box::new(ProtosegMask(mask)));
        Ok(())
    })
}

/// Reads a MASKRAW file.
#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_read(path: *const c_char, out: *mut *mut ProtosegMask) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mask = protoseg::io::read_mask(PathBuf::from(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(ProtosegMask(mask)));
        Ok(())
    })
}

/// Writes `dims` as `[S, H, W]`.
#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_dims(mask: *const ProtosegMask, dims: *mut usize) -> ProtosegStatus {
    guard(|| {
        let mask = borrow(mask, "mask")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&mask.0.dims());
        Ok(())
    })
}

/// Copies the class ids into `buf`, which must hold exactly `S*H*W` bytes.
#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_copy(mask: *const ProtosegMask, buf: *mut u8, len: usize) -> ProtosegStatus {
    guard(|| {
        let mask = borrow(mask, "mask")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let flat = mask.0.flat();
        if flat.len() != len {
            return Err(invalid(format!("buffer holds {len} bytes, mask has {} voxels", flat.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&flat);
        Ok(())
    })
}

/// Writes a MASKRAW file.
#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_write(mask: *const ProtosegMask, path: *const c_char) -> ProtosegStatus {
    guard(|| {
        let mask = borrow(mask, "mask")?;
        protoseg::io::write_mask(PathBuf::from(c_str(path, "path")?), &mask.0)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn protoseg_mask_free(mask: *mut ProtosegMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// New configuration with the default settings. Never NULL.
#[no_mangle]
pub extern "C" fn protoseg_config_new() -> *mut ProtosegConfig {
    Box::into_raw(Box::new(ProtosegConfig {
        episode: EpisodeConfig::default(),
        extractor: protoseg::phantom::default_extractor(),
        selection: SupportSelection::default(),
    }))
}

/// Sets one option by name, using the command-line spelling of the value:
/// `gamma`, `window` (slices or ALL), `iterations`, `strategy`, `alpha`,
/// `fusion`, `pairing`, `shots`, `extractor`, `selection`
/// (EVENLY_SPACED or CENTER_BLOCK) and `class_gamma` (CLASS=GAMMA).
#[no_mangle]
pub unsafe extern "C" fn protoseg_config_set(
    config: *mut ProtosegConfig,
    key: *const c_char,
    value: *const c_char,
) -> ProtosegStatus {
    guard(|| {
        let config = out_ptr(config, "config")?;
        let key = c_str(key, "key")?;
        let value = c_str(value, "value")?;
        let number = |v: &str| v.trim().parse::<f64>().map_err(|_| invalid(format!("{key}: {v:?} is not a number")));
        let count = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("{key}: {v:?} is not a count")));
        let mut next = config.episode.clone();
        match key {
            "gamma" => next.gamma = number(value)?,
            "alpha" => next.alpha = number(value)?,
            "iterations" => next.iterations = count(value)?,
            "shots" => next.shots = count(value)?,
            "window" => next.window = value.parse()?,
            "strategy" => next.strategy = value.parse()?,
            "fusion" => next.fusion = value.parse()?,
            "pairing" => next.pairing = value.parse()?,
            "class_gamma" => {
                let (c, g) = value.split_once('=').ok_or_else(|| invalid(format!("class_gamma: expected CLASS=GAMMA, got {value:?}")))?;
                let c: u8 = c.trim().parse().map_err(|_| invalid(format!("class_gamma: bad class in {value:?}")))?;
                next.class_gamma.insert(ClassId(c), number(g)?);
            }
            "extractor" => {
                config.extractor = value.parse()?;
                return Ok(());
            }
            "selection" => {
                config.selection = match value.to_ascii_uppercase().as_str() {
                    "EVENLY_SPACED" => SupportSelection::EvenlySpaced,
                    "CENTER_BLOCK" => SupportSelection::CenterBlock,
                    _ => return Err(invalid(format!("unknown selection {value:?}"))),
                };
                return Ok(());
            }
            _ => return Err(invalid(format!("unknown option {key:?}"))),
        }
        next.validate()?;
        config.episode = next;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn protoseg_config_free(config: *mut ProtosegConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Segments `query` using `shots` slices of the annotated support volume.
/// A NULL `config` uses the defaults.
#[no_mangle]
pub unsafe extern "C" fn protoseg_segment(
    config: *const ProtosegConfig,
    support: *const ProtosegVolume,
    support_mask: *const ProtosegMask,
    query: *const ProtosegVolume,
    out: *mut *mut ProtosegResult,
) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let support = borrow(support, "support")?;
        let support_mask = borrow(support_mask, "support_mask")?;
        let query = borrow(query, "query")?;
        let defaults;
        let config = match config.as_ref() {
            Some(c) => c,
            None => {
                defaults = Box::from_raw(protoseg_config_new());
                &*defaults
            }
        };
        let episode = episode_from_volumes(
            &support.0,
            &support_mask.0,
            query.0.clone(),
            config.episode.shots,
            config.selection,
        )?;
        let result = protoseg::run_episode(&episode, &config.extractor, &config.episode)?;
        let mask = ProtosegMask(result.masks.clone());
        *out = Box::into_raw(Box::new(ProtosegResult { result, mask }));
        Ok(())
    })
}

/// The predicted mask, owned by `result`. NULL if `result` is NULL.
#[no_mangle]
pub unsafe extern "C" fn protoseg_result_mask(result: *const ProtosegResult) -> *const ProtosegMask {
    match result.as_ref() {
        Some(r) => &r.mask,
        None => std::ptr::null(),
    }
}

/// Number of pseudo-label rounds that ran.
#[no_mangle]
pub unsafe extern "C" fn protoseg_result_rounds(result: *const ProtosegResult) -> usize {
    result.as_ref().map_or(0, |r| r.result.rounds.len())
}

#[no_mangle]
pub unsafe extern "C" fn protoseg_result_free(result: *mut ProtosegResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// 3D Dice of `class` between a prediction and the ground truth.
#[no_mangle]
pub unsafe extern "C" fn protoseg_dice(
    pred: *const ProtosegMask,
    truth: *const ProtosegMask,
    class: u8,
    out: *mut f64,
) -> ProtosegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pred = borrow(pred, "pred")?;
        let truth = borrow(truth, "truth")?;
        *out = protoseg::eval::class_dice(&pred.0, &truth.0, ClassId(class))?;
        Ok(())
    })
}
