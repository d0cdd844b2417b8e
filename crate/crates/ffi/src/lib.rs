//! C ABI over the label codec, dot maps, metrics, phantoms, augmentation and
//! segmenter inference.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a [`CxrStatus`];
//! on failure [`cxr_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cxrgen::dataset::{make_phantom, PhantomConfig};
use cxrgen::nn::segmenter::{predict_sliding, Segmenter};
use cxrgen::nn::NetworkCheckpoint;
use cxrgen::{augment, dots, label, metrics, ClassCode, Error, GrayImage, LabelMap, Palette};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CxrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Codec = 3,
    Shape = 4,
    Ingestion = 5,
    Config = 6,
    State = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque label map.
pub struct CxrLabelMap(LabelMap);

/// Opaque grayscale image with intensities in `[0, 1]`.
pub struct CxrImage(GrayImage);

/// Opaque segmentation network.
pub struct CxrSegmenter(Segmenter);

/// Per-class overlap scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CxrScore {
    pub jaccard: f64,
    pub dice: f64,
    /// Non-zero when the class is absent from both maps.
    pub empty: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CxrStatus {
    match e {
        Error::Codec(_) => CxrStatus::Codec,
        Error::Shape(_) => CxrStatus::Shape,
        Error::Ingestion(_) => CxrStatus::Ingestion,
        Error::Config(_) => CxrStatus::Config,
        Error::State(_) => CxrStatus::State,
        Error::Io { .. } => CxrStatus::Io,
        Error::Stage { source, .. } => status_of(source),
        _ => CxrStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CxrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CxrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CxrStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            CxrStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CxrStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn class(code: u8) -> Result<ClassCode, Fail> {
    ClassCode::from_u8(code).ok_or_else(|| Fail::Arg(format!("unknown class code {code}")))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn cxr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cxr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a map from `height * width` row-major class codes.
///
/// # Safety
/// `codes` must point to `height * width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_new(
    height: usize,
    width: usize,
    codes: *const u8,
    out: *mut *mut CxrLabelMap,
) -> CxrStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| Fail::Arg("map size overflows".into()))?;
        let raw = slice(codes, n, "codes")?;
        put(out, CxrLabelMap(LabelMap::from_raw(height, width, raw)?))
    })
}

/// # Safety
/// `map` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_free(map: *mut CxrLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_dims(map: *const CxrLabelMap, height: *mut usize, width: *mut usize) -> CxrStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        if height.is_null() || width.is_null() {
            return Err(Fail::Null("dims output"));
        }
        *height = m.0.height();
        *width = m.0.width();
        Ok(())
    })
}

/// Copies the class codes into `buf`, which must hold `height * width` bytes.
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_codes(map: *const CxrLabelMap, buf: *mut u8, len: usize) -> CxrStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        let raw = m.0.raw();
        if len != raw.len() {
            return Err(Fail::Arg(format!("buffer holds {len} bytes, map has {}", raw.len())));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(raw.as_ptr(), buf, len);
        Ok(())
    })
}

/// Encodes with the standard palette as PNG. Release the bytes with [`cxr_bytes_free`].
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_encode_png(
    map: *const CxrLabelMap,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> CxrStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        if out_bytes.is_null() || out_len.is_null() {
            return Err(Fail::Null("byte output"));
        }
        let bytes = label::encode(&m.0, &Palette::standard())?.into_boxed_slice();
        *out_len = bytes.len();
        *out_bytes = Box::into_raw(bytes).cast();
        Ok(())
    })
}

/// # Safety
/// `bytes`/`len` must come from [`cxr_label_map_encode_png`].
#[no_mangle]
pub unsafe extern "C" fn cxr_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(bytes, len)));
    }
}

/// # Safety
/// `bytes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_decode_png(bytes: *const u8, len: usize, out: *mut *mut CxrLabelMap) -> CxrStatus {
    guard(|| {
        let b = slice(bytes, len, "bytes")?;
        put(out, CxrLabelMap(label::decode(b, &Palette::standard())?))
    })
}

/// Nearest-neighbour resize.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_label_map_resize(
    map: *const CxrLabelMap,
    height: usize,
    width: usize,
    out: *mut *mut CxrLabelMap,
) -> CxrStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        put(out, CxrLabelMap(label::resize_nearest(&m.0, height, width)?))
    })
}

/// 64x64 centroid dot map with disks of `radius` cells.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_dot_map(map: *const CxrLabelMap, radius: usize, out: *mut *mut CxrLabelMap) -> CxrStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        put(out, CxrLabelMap(dots::dot_map(&m.0, radius)?))
    })
}

/// Jaccard and Dice of one class between two maps of equal size.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_score(
    pred: *const CxrLabelMap,
    target: *const CxrLabelMap,
    class_code: u8,
    out: *mut CxrScore,
) -> CxrStatus {
    guard(|| {
        let p = borrow(pred, "pred")?;
        let t = borrow(target, "target")?;
        let code = class(class_code)?;
        if out.is_null() {
            return Err(Fail::Null("score output"));
        }
        let c = metrics::confusion(&p.0, &t.0)?;
        let j = metrics::jaccard(&c, code);
        let d = metrics::dice(&c, code);
        *out = CxrScore { jaccard: j.value, dice: d.value, empty: j.empty as u8 };
        Ok(())
    })
}

/// Image from `height * width` intensities; values outside `[0, 1]` are rejected.
///
/// # Safety
/// `data` must point to `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn cxr_image_new(height: usize, width: usize, data: *const f32, out: *mut *mut CxrImage) -> CxrStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| Fail::Arg("image size overflows".into()))?;
        let d = slice(data, n, "data")?;
        put(out, CxrImage(GrayImage::new(height, width, d.to_vec())?))
    })
}

/// # Safety
/// `image` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cxr_image_free(image: *mut CxrImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_image_dims(image: *const CxrImage, height: *mut usize, width: *mut usize) -> CxrStatus {
    guard(|| {
        let i = borrow(image, "image")?;
        if height.is_null() || width.is_null() {
            return Err(Fail::Null("dims output"));
        }
        *height = i.0.height();
        *width = i.0.width();
        Ok(())
    })
}

/// Copies the intensities into `buf` (`height * width` floats).
///
/// # Safety
/// `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn cxr_image_data(image: *const CxrImage, buf: *mut f32, len: usize) -> CxrStatus {
    guard(|| {
        let i = borrow(image, "image")?;
        let d = i.0.data();
        if len != d.len() {
            return Err(Fail::Arg(format!("buffer holds {len} floats, image has {}", d.len())));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), buf, len);
        Ok(())
    })
}

/// The `index`-th phantom of the generator seeded with `seed` at side `size`.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cxr_phantom(
    seed: u64,
    size: usize,
    index: usize,
    out_image: *mut *mut CxrImage,
    out_labels: *mut *mut CxrLabelMap,
) -> CxrStatus {
    guard(|| {
        if out_image.is_null() || out_labels.is_null() {
            return Err(Fail::Null("phantom output"));
        }
        let cfg = PhantomConfig { seed, size, count: index + 1, ..Default::default() };
        let e = make_phantom(&cfg, index)?;
        put(out_image, CxrImage(e.image))?;
        put(out_labels, CxrLabelMap(e.labels))
    })
}

/// Applies one random rigid jitter plus noise, drawn from `seed`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_augment(
    image: *const CxrImage,
    labels: *const CxrLabelMap,
    seed: u64,
    out_image: *mut *mut CxrImage,
    out_labels: *mut *mut CxrLabelMap,
) -> CxrStatus {
    guard(|| {
        let i = borrow(image, "image")?;
        let l = borrow(labels, "labels")?;
        if out_image.is_null() || out_labels.is_null() {
            return Err(Fail::Null("augment output"));
        }
        let (ai, al) = augment::apply(&i.0, &l.0, &augment::sample_params(seed))?;
        put(out_image, CxrImage(ai))?;
        put(out_labels, CxrLabelMap(al))
    })
}

/// Loads a segmenter checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn cxr_segmenter_load(path: *const c_char, out: *mut *mut CxrSegmenter) -> CxrStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let ck = NetworkCheckpoint::load(Path::new(p))?;
        put(out, CxrSegmenter(Segmenter::from_checkpoint(&ck)?))
    })
}

/// # Safety
/// `seg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cxr_segmenter_free(seg: *mut CxrSegmenter) {
    if !seg.is_null() {
        drop(Box::from_raw(seg));
    }
}

/// Sliding-window prediction of a full label map.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cxr_segmenter_predict(
    seg: *const CxrSegmenter,
    image: *const CxrImage,
    out: *mut *mut CxrLabelMap,
) -> CxrStatus {
    guard(|| {
        let s = borrow(seg, "segmenter")?;
        let i = borrow(image, "image")?;
        put(out, CxrLabelMap(predict_sliding(&s.0, &i.0)?.labels))
    })
}
