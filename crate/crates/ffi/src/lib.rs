//! C ABI over the sketchssl core: stroke sequences, rendering, pretrained
//! encoders, retrieval scoring and the command-line entry point.
//!
//! Every fallible call returns a [`SketchsslStatus`]; on failure the message
//! is kept per thread and read back with [`sketchssl_last_error`]. Handles are
//! opaque, created by `*_new`/`*_load`/`sketchssl_render` and released with
//! the matching `*_free` (which accepts NULL).

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sketchssl::data::LabeledSample;
use sketchssl::downstream_sketch::{eval_retrieval, Depth, DistanceMetric, RetrievalItem, SketchEncoder};
use sketchssl::models::Modality;
use sketchssl::nn::{ParameterStore, Tape};
use sketchssl::pretrain::{Pretrained, Task};
use sketchssl::raster::{render, RasterConfig, RasterImage};
use sketchssl::stroke::StrokeSequence;
use sketchssl::Error;

/// Result of every fallible call. 1–3 mirror the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchsslStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    Usage = 1,
    /// Malformed input data, checkpoint or shape.
    Data = 2,
    /// Training produced a non-finite loss.
    Diverged = 3,
    NullPointer = 4,
    /// The output buffer is smaller than the result.
    BufferTooSmall = 5,
    InvalidUtf8 = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// A validated pen-state stroke sequence.
pub struct SketchsslStrokes {
    inner: StrokeSequence,
}

/// A rendered image, row-major with interleaved channels.
pub struct SketchsslRaster {
    inner: RasterImage,
}

/// The encoder half of a pretext checkpoint plus its weights.
pub struct SketchsslEncoder {
    encoder: SketchEncoder,
    store: ParameterStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: SketchsslStatus, msg: impl Into<String>) -> SketchsslStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SketchsslStatus {
    let status = match e.exit_code() {
        1 => SketchsslStatus::Usage,
        3 => SketchsslStatus::Diverged,
        _ => SketchsslStatus::Data,
    };
    fail(status, format!("{}: {e}", e.kind()))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), SketchsslStatus>) -> SketchsslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SketchsslStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SketchsslStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: sketchssl::Result<T>) -> Result<T, SketchsslStatus> {
    r.map_err(from_error)
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, SketchsslStatus> {
    p.as_ref().ok_or_else(|| fail(SketchsslStatus::NullPointer, format!("{what} is NULL")))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), SketchsslStatus> {
    if p.is_null() {
        Err(fail(SketchsslStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn copy_out(src: &[f64], out: *mut f64, cap: usize) -> Result<(), SketchsslStatus> {
    check_out(out, "output buffer")?;
    if cap < src.len() {
        return Err(fail(
            SketchsslStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sketchssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `cap`) and returns the full length including the NUL.
/// Pass `buf = NULL` to query the length.
///
/// # Safety
/// `buf` must be NULL or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Builds a sequence from `n_rows` rows of `(x, y, down, lift, end)` (one-hot pen state) in
/// unit-canvas coordinates.
///
/// # Safety
/// `rows` must point to `5 * n_rows` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_strokes_new(
    rows: *const f64,
    n_rows: usize,
    out: *mut *mut SketchsslStrokes,
) -> SketchsslStatus {
    guard(|| {
        check_out(out, "out")?;
        deref(rows, "rows")?;
        let flat = std::slice::from_raw_parts(rows, n_rows * 5);
        let rows: Vec<[f64; 5]> = flat.chunks_exact(5).map(|r| r.try_into().expect("5 values")).collect();
        let inner = lift(StrokeSequence::from_rows(&rows))?;
        *out = Box::into_raw(Box::new(SketchsslStrokes { inner }));
        Ok(())
    })
}

/// Number of points, or 0 for NULL.
///
/// # Safety
/// `s` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_strokes_len(s: *const SketchsslStrokes) -> usize {
    s.as_ref().map_or(0, |s| s.inner.len())
}

/// Writes the `5 * len` row values into `out`.
///
/// # Safety
/// `s` must be a live handle and `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_strokes_rows(s: *const SketchsslStrokes, out: *mut f64, cap: usize) -> SketchsslStatus {
    guard(|| {
        let s = deref(s, "strokes")?;
        let flat: Vec<f64> = s.inner.to_rows().into_iter().flatten().collect();
        copy_out(&flat, out, cap)
    })
}

/// Ramer–Douglas–Peucker simplification of each stroke.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_strokes_simplify(
    s: *const SketchsslStrokes,
    epsilon: f64,
    out: *mut *mut SketchsslStrokes,
) -> SketchsslStatus {
    guard(|| {
        let s = deref(s, "strokes")?;
        check_out(out, "out")?;
        let inner = lift(s.inner.rdp_simplify(epsilon))?;
        *out = Box::into_raw(Box::new(SketchsslStrokes { inner }));
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_strokes_free(s: *mut SketchsslStrokes) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Renders black-on-white at the given canvas size and stroke width.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_render(
    s: *const SketchsslStrokes,
    height: usize,
    width: usize,
    stroke_width: usize,
    out: *mut *mut SketchsslRaster,
) -> SketchsslStatus {
    guard(|| {
        let s = deref(s, "strokes")?;
        check_out(out, "out")?;
        let cfg = RasterConfig {
            height,
            width,
            stroke_width,
            ..RasterConfig::default()
        };
        let inner = lift(render(&s.inner, &cfg))?;
        *out = Box::into_raw(Box::new(SketchsslRaster { inner }));
        Ok(())
    })
}

/// # Safety
/// `r` must be a live handle; each output pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_raster_shape(
    r: *const SketchsslRaster,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> SketchsslStatus {
    guard(|| {
        let r = &deref(r, "raster")?.inner;
        for (p, v) in [(height, r.height), (width, r.width), (channels, r.channels)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies `height * width * channels` pixel values in `[0, 1]`.
///
/// # Safety
/// `r` must be a live handle and `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_raster_pixels(r: *const SketchsslRaster, out: *mut f64, cap: usize) -> SketchsslStatus {
    guard(|| copy_out(&deref(r, "raster")?.inner.pixels, out, cap))
}

/// # Safety
/// `r` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_raster_free(r: *mut SketchsslRaster) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Opens a pretext checkpoint directory and keeps its encoder: the image
/// encoder of a vectorization run, the sequence encoder of a rasterization
/// run.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_encoder_load(dir: *const c_char, out: *mut *mut SketchsslEncoder) -> SketchsslStatus {
    guard(|| {
        deref(dir, "dir")?;
        check_out(out, "out")?;
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| fail(SketchsslStatus::InvalidUtf8, "path is not UTF-8"))?;
        let p = lift(Pretrained::load(Path::new(dir)))?;
        let modality = match p.config.task {
            Task::Vectorization => Modality::Image,
            Task::Rasterization => Modality::Vector,
        };
        let encoder = lift(SketchEncoder::from_pretrained(&p, modality))?;
        *out = Box::into_raw(Box::new(SketchsslEncoder { encoder, store: p.store }));
        Ok(())
    })
}

/// 1 when the encoder consumes images (rendered from the strokes given to
/// [`sketchssl_encoder_embed`]), 0 when it consumes stroke sequences.
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_encoder_is_image(e: *const SketchsslEncoder) -> c_int {
    e.as_ref().map_or(0, |e| c_int::from(e.encoder.modality() == Modality::Image))
}

/// Length of the final-layer feature vector (0 for NULL).
///
/// # Safety
/// `e` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_encoder_feature_dim(e: *const SketchsslEncoder) -> usize {
    e.as_ref().and_then(|e| e.encoder.feature_dim(Depth::Final).ok()).unwrap_or(0)
}

/// Final-layer features of one sketch.
///
/// # Safety
/// Handles must be live; `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_encoder_embed(
    e: *const SketchsslEncoder,
    s: *const SketchsslStrokes,
    out: *mut f64,
    cap: usize,
) -> SketchsslStatus {
    guard(|| {
        let e = deref(e, "encoder")?;
        let s = deref(s, "strokes")?;
        // The placeholder raster never matches the encoder canvas, so image
        // encoders render the strokes themselves.
        let sample = LabeledSample {
            id: String::new(),
            vector: s.inner.clone(),
            raster: RasterImage::filled(1, 1, 1, 1.0),
            label: None,
            text: None,
        };
        let mut tape = Tape::new();
        let v = lift(e.encoder.forward(&mut tape, &e.store, &[&sample], Depth::Final))?;
        copy_out(&tape.value(v).data, out, cap)
    })
}

/// # Safety
/// `e` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_encoder_free(e: *mut SketchsslEncoder) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Leave-one-out retrieval over `n` embeddings of width `dim`: each item
/// queries the others. Writes Acc@top1 and mAP@top10. `cosine` selects
/// cosine distance instead of Euclidean.
///
/// # Safety
/// `embeddings` must hold `n * dim` doubles and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_eval_retrieval(
    embeddings: *const f64,
    labels: *const u32,
    n: usize,
    dim: usize,
    cosine: c_int,
    acc_at_top1: *mut f64,
    map_at_top10: *mut f64,
) -> SketchsslStatus {
    guard(|| {
        deref(embeddings, "embeddings")?;
        deref(labels, "labels")?;
        check_out(acc_at_top1, "acc_at_top1")?;
        check_out(map_at_top10, "map_at_top10")?;
        let emb = std::slice::from_raw_parts(embeddings, n * dim);
        let labels = std::slice::from_raw_parts(labels, n);
        let items: Vec<RetrievalItem> = (0..n)
            .map(|i| RetrievalItem {
                id: format!("{i:020}"),
                label: labels[i] as usize,
                embedding: emb[i * dim..(i + 1) * dim].to_vec(),
            })
            .collect();
        let metric = if cosine != 0 { DistanceMetric::Cosine } else { DistanceMetric::Euclidean };
        let r = lift(eval_retrieval(&items, &items, metric))?;
        *acc_at_top1 = r.acc_at_top1;
        *map_at_top10 = r.map_at_top10;
        Ok(())
    })
}

/// Runs the command line with `argv[0..argc]` (program name first) and
/// returns its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sketchssl_cli_dispatch(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    if argc > 0 && !argv.is_null() {
        for i in 0..argc as usize {
            let a = *argv.add(i);
            if a.is_null() {
                set_error("NULL argument".into());
                return SketchsslStatus::NullPointer as c_int;
            }
            args.push(CStr::from_ptr(a).to_string_lossy().into_owned());
        }
    }
    match catch_unwind(|| sketchssl::cli::dispatch(args)) {
        Ok(code) => code,
        Err(_) => {
            set_error("panic in command".into());
            SketchsslStatus::Panic as c_int
        }
    }
}
