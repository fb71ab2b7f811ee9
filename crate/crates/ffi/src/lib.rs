//! C ABI over `gasvsf`: clip generation and loading, trained-model
//! inference, the shift bias schedules, the voxel shift itself and IoU.
//!
//! Every function returns a [`GasvsfStatus`]; on failure the message is
//! available from [`gasvsf_last_error`] on the same thread. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use gasvsf::bbox::BBox;
use gasvsf::config::RunConfig;
use gasvsf::detector::{infer_clip, load_model, Model};
use gasvsf::radiometry::{generate_clip, read_clip, ClipSample};
use gasvsf::tensor::{Tape, Tensor};
use gasvsf::vsf::{bias_data, bias_fea, bias_table, Schedule};
use gasvsf::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GasvsfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    NonFinite = 7,
    Check = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Generated or loaded clip.
pub struct GasvsfClip(ClipSample);

/// Trained detector.
pub struct GasvsfModel(Model);

/// One detection in native clip pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GasvsfDetection {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GasvsfStatus {
    match e {
        Error::Shape(_) => GasvsfStatus::Shape,
        Error::InvalidArgument(_) => GasvsfStatus::InvalidArgument,
        Error::NonFinite(_) => GasvsfStatus::NonFinite,
        Error::Io { .. } => GasvsfStatus::Io,
        Error::Format { .. } => GasvsfStatus::Format,
        Error::Config(_) => GasvsfStatus::Config,
        Error::Check(_) => GasvsfStatus::Check,
    }
}

struct Fail(GasvsfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GasvsfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GasvsfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GasvsfStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {m}"));
            GasvsfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GasvsfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gasvsf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Data-level temporal bias of channel `i` at frame `t` of `frames`.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_bias_data(i: usize, t: usize, frames: usize, out: *mut f64) -> GasvsfStatus {
    guard(|| {
        *out_ref(out, "out")? = bias_data(i, t, frames)?;
        Ok(())
    })
}

/// Feature-level temporal bias of channel `i` of `channels`.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_bias_fea(i: usize, channels: usize, out: *mut f64) -> GasvsfStatus {
    guard(|| {
        *out_ref(out, "out")? = bias_fea(i, channels)?;
        Ok(())
    })
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to four doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_iou(a: *const f64, b: *const f64, out: *mut f64) -> GasvsfStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("box"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, 4), std::slice::from_raw_parts(b, 4));
        let a = BBox::new(a[0], a[1], a[2], a[3])?;
        let b = BBox::new(b[0], b[1], b[2], b[3])?;
        *out_ref(out, "out")? = gasvsf::eval::iou(&a, &b)?;
        Ok(())
    })
}

/// Voxel shift of one `[C, H, W, T]` volume. `offsets` is null or a
/// `[3, H, W, T]` field of `(dx, dy, dt)`; `schedule` adds a temporal bias
/// (0 none, 1 data-level, 2 feature-level); bits 0, 1, 2 of `mask` enable
/// the x, y, t components. `out` receives `C·H·W·T` values.
///
/// # Safety
/// `x` and `out` must hold `C·H·W·T` doubles and `offsets`, when not null,
/// `3·H·W·T`.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_vsf_shift(
    x: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    frames: usize,
    offsets: *const f64,
    schedule: u32,
    mask: u32,
    out: *mut f64,
) -> GasvsfStatus {
    guard(|| {
        if x.is_null() || out.is_null() {
            return Err(null("volume"));
        }
        let n = channels * height * width * frames;
        let vox = height * width * frames;
        if n == 0 {
            return Err(Fail(GasvsfStatus::Shape, "empty volume".into()));
        }
        let schedule = match schedule {
            0 => Schedule::None,
            1 => Schedule::Data,
            2 => Schedule::Feature,
            s => return Err(Fail(GasvsfStatus::InvalidArgument, format!("schedule {s}"))),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[1, channels, height, width, frames], std::slice::from_raw_parts(x, n).to_vec())?);
        let ov = if offsets.is_null() {
            None
        } else {
            let o = std::slice::from_raw_parts(offsets, 3 * vox).to_vec();
            Some(tape.constant(Tensor::new(&[1, 3, height, width, frames], o)?))
        };
        let bias = Arc::new(bias_table(schedule, channels, frames)?);
        let m = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        let y = tape.shift(xv, ov, bias, m)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(tape.value(y).data());
        Ok(())
    })
}

/// Generates clip `index` of `seed`. `config` is null (defaults) or
/// `key = value` text with dotted keys such as `generator.frames = 4`.
///
/// # Safety
/// `config` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_generate(seed: u64, index: u64, config: *const c_char, out: *mut *mut GasvsfClip) -> GasvsfStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let mut cfg = RunConfig::default();
        if !config.is_null() {
            let text = CStr::from_ptr(config)
                .to_str()
                .map_err(|_| Fail(GasvsfStatus::InvalidArgument, "config is not UTF-8".into()))?;
            cfg.apply_text(text)?;
        }
        cfg.generator.validate()?;
        let clip = generate_clip(seed, index, &cfg.generator)?;
        *slot = Box::into_raw(Box::new(GasvsfClip(clip)));
        Ok(())
    })
}

/// Reads a clip directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_read(dir: *const c_char, out: *mut *mut GasvsfClip) -> GasvsfStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let clip = read_clip(&path_arg(dir, "dir")?)?;
        *slot = Box::into_raw(Box::new(GasvsfClip(clip)));
        Ok(())
    })
}

/// Releases a clip; null is ignored.
///
/// # Safety
/// `clip` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_free(clip: *mut GasvsfClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Frame size and count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_dims(clip: *const GasvsfClip, width: *mut usize, height: *mut usize, frames: *mut usize) -> GasvsfStatus {
    guard(|| {
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        *out_ref(width, "width")? = c.meta.width;
        *out_ref(height, "height")? = c.meta.height;
        *out_ref(frames, "frames")? = c.frames.len();
        Ok(())
    })
}

/// Copies frame `frame` (row-major gray values) into `buf` of `len` bytes.
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_frame(clip: *const GasvsfClip, frame: usize, buf: *mut u8, len: usize) -> GasvsfStatus {
    guard(|| {
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        let f = c
            .frames
            .get(frame)
            .ok_or_else(|| Fail(GasvsfStatus::InvalidArgument, format!("frame {frame} of {}", c.frames.len())))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < f.pixels().len() {
            return Err(Fail(GasvsfStatus::BufferTooSmall, format!("{len} bytes for {} pixels", f.pixels().len())));
        }
        std::slice::from_raw_parts_mut(buf, f.pixels().len()).copy_from_slice(f.pixels());
        Ok(())
    })
}

/// Annotated box of `frame` as `[x1, y1, x2, y2]`; `present` is set to 0
/// when the frame has no visible gas.
///
/// # Safety
/// `bbox` must hold four doubles and `present` be valid.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_clip_box(clip: *const GasvsfClip, frame: usize, bbox: *mut f64, present: *mut i32) -> GasvsfStatus {
    guard(|| {
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        let b = c
            .boxes
            .get(frame)
            .ok_or_else(|| Fail(GasvsfStatus::InvalidArgument, format!("frame {frame} of {}", c.boxes.len())))?;
        let present = out_ref(present, "present")?;
        *present = b.is_some() as i32;
        if let Some(b) = b {
            if bbox.is_null() {
                return Err(null("bbox"));
            }
            std::slice::from_raw_parts_mut(bbox, 4).copy_from_slice(&[b.x1, b.y1, b.x2, b.y2]);
        }
        Ok(())
    })
}

/// Loads a model directory written by training.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_model_load(dir: *const c_char, out: *mut *mut GasvsfModel) -> GasvsfStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let m = load_model(&path_arg(dir, "dir")?)?;
        *slot = Box::into_raw(Box::new(GasvsfModel(m)));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gasvsf_model_free(model: *mut GasvsfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the detector over a clip. `count` receives the number of
/// detections; when it exceeds `capacity` nothing is copied and
/// `BufferTooSmall` is returned, so a call with zero capacity sizes the
/// buffer.
///
/// # Safety
/// `out` must hold `capacity` detections (may be null when zero).
#[no_mangle]
pub unsafe extern "C" fn gasvsf_model_detect(
    model: *const GasvsfModel,
    clip: *const GasvsfClip,
    out: *mut GasvsfDetection,
    capacity: usize,
    count: *mut usize,
) -> GasvsfStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        let count = out_ref(count, "count")?;
        let dets = infer_clip(m, c)?;
        *count = dets.len();
        if dets.len() > capacity {
            return Err(Fail(GasvsfStatus::BufferTooSmall, format!("{} detections for capacity {capacity}", dets.len())));
        }
        if !dets.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            let slots = std::slice::from_raw_parts_mut(out, dets.len());
            for (s, d) in slots.iter_mut().zip(&dets) {
                *s = GasvsfDetection { frame: d.frame, x1: d.bbox.x1, y1: d.bbox.y1, x2: d.bbox.x2, y2: d.bbox.y2, score: d.score };
            }
        }
        Ok(())
    })
}
