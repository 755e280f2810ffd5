//! C ABI over the synthcomp pipeline.
//!
//! Every function returns a [`SynthcompStatus`]. On failure the message is
//! kept per thread and read with [`synthcomp_last_error`]. Handles are opaque
//! and must be released with their matching `_free` function. Masks cross the
//! boundary as row-major byte arrays where any nonzero byte is set.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use synthcomp::config::PipelineConfig;
use synthcomp::dataset::{rle_decode, rle_encode, validate_dataset, RleMask, ValidationReport};
use synthcomp::gateway::{BackendEndpoint, Gateway, StubBackend};
use synthcomp::mask::InstanceMask;
use synthcomp::pipeline::{exit, Pipeline};
use synthcomp::plan::expected_counts;
use synthcomp::prompt::{intervene, parse_edits, Caption, CaptionSource, Lexicon};
use synthcomp::vocab::ClassVocabulary;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthcompStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Backend = 5,
    /// The dataset was written but validation found violations.
    DatasetDirty = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

pub struct SynthcompConfig {
    inner: PipelineConfig,
}

pub struct SynthcompVocab {
    inner: ClassVocabulary,
}

/// Artifact counts implied by a config and vocabulary.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SynthcompCounts {
    pub classes: u64,
    pub generated_per_caption: u64,
    pub kept_per_caption: u64,
    pub generated_per_cdi: u64,
    pub kept_per_cdi: u64,
    pub contexts_generated: u64,
    pub contexts_kept: u64,
    pub zero_shot_generated: u64,
    pub zero_shot_kept: u64,
    pub fg_generated: u64,
    pub fg_kept: u64,
    pub samples: u64,
    pub paste_attempts: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SynthcompValidation {
    pub images: u64,
    pub annotations: u64,
    pub violations: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(SynthcompStatus, String);

impl Failure {
    fn new(status: SynthcompStatus, message: impl std::fmt::Display) -> Self {
        Failure(status, message.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SynthcompStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SynthcompStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            SynthcompStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(SynthcompStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(SynthcompStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SynthcompStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SynthcompStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_c_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        c_str(p, what).map(Some)
    }
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn synthcomp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn synthcomp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_config_default(out: *mut *mut SynthcompConfig) -> SynthcompStatus {
    guard(|| {
        *out_ptr(out, "out")? = boxed(SynthcompConfig {
            inner: PipelineConfig::default(),
        });
        Ok(())
    })
}

/// Parse `key = value` config text; absent keys keep their defaults.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_config_parse(
    text: *const c_char,
    out: *mut *mut SynthcompConfig,
) -> SynthcompStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = PipelineConfig::parse(c_str(text, "text")?).map_err(|e| Failure::new(SynthcompStatus::Parse, e))?;
        *out = boxed(SynthcompConfig { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_config_set_seed(config: *mut SynthcompConfig, seed: u64) -> SynthcompStatus {
    guard(|| {
        out_ptr(config, "config")?.inner.master_seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_config_seed(config: *const SynthcompConfig, out: *mut u64) -> SynthcompStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(config, "config")?.inner.master_seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_config_free(config: *mut SynthcompConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// The 20 VOC classes.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_vocab_voc(out: *mut *mut SynthcompVocab) -> SynthcompStatus {
    guard(|| {
        *out_ptr(out, "out")? = boxed(SynthcompVocab {
            inner: ClassVocabulary::voc(),
        });
        Ok(())
    })
}

/// One `label[<TAB>synonym,...]` per line.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_vocab_parse(text: *const c_char, out: *mut *mut SynthcompVocab) -> SynthcompStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner =
            ClassVocabulary::parse(c_str(text, "text")?).map_err(|e| Failure::new(SynthcompStatus::Parse, e))?;
        *out = boxed(SynthcompVocab { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_vocab_len(vocab: *const SynthcompVocab, out: *mut usize) -> SynthcompStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(vocab, "vocab")?.inner.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_vocab_free(vocab: *mut SynthcompVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_expected_counts(
    config: *const SynthcompConfig,
    vocab: *const SynthcompVocab,
    out: *mut SynthcompCounts,
) -> SynthcompStatus {
    guard(|| {
        let plan = expected_counts(&non_null(config, "config")?.inner, &non_null(vocab, "vocab")?.inner);
        *out_ptr(out, "out")? = SynthcompCounts {
            classes: plan.classes,
            generated_per_caption: plan.generated_per_caption,
            kept_per_caption: plan.kept_per_caption,
            generated_per_cdi: plan.generated_per_cdi,
            kept_per_cdi: plan.kept_per_cdi,
            contexts_generated: plan.contexts_generated,
            contexts_kept: plan.contexts_kept,
            zero_shot_generated: plan.zero_shot_generated,
            zero_shot_kept: plan.zero_shot_kept,
            fg_generated: plan.fg_generated,
            fg_kept: plan.fg_kept,
            samples: plan.samples,
            paste_attempts: plan.paste_attempts,
        };
        Ok(())
    })
}

/// Column-major run lengths of a `width` x `height` mask. `out_len` always
/// receives the required count; a short buffer returns `BUFFER_TOO_SMALL`
/// with nothing written. `counts` may be null when `capacity` is 0.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_rle_encode(
    bits: *const u8,
    width: u32,
    height: u32,
    counts: *mut u64,
    capacity: usize,
    out_len: *mut usize,
) -> SynthcompStatus {
    guard(|| {
        let out_len = out_ptr(out_len, "out_len")?;
        let n = width as usize * height as usize;
        if n > 0 && bits.is_null() {
            return Err(Failure::new(SynthcompStatus::NullPointer, "bits is null"));
        }
        let src: &[u8] = if n == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(bits, n)
        };
        let mask = InstanceMask::from_fn(width, height, |x, y| src[y as usize * width as usize + x as usize] != 0);
        let rle = rle_encode(&mask);
        *out_len = rle.counts.len();
        if capacity < rle.counts.len() {
            return Err(Failure::new(
                SynthcompStatus::BufferTooSmall,
                format!("need {} counts, capacity {capacity}", rle.counts.len()),
            ));
        }
        if !rle.counts.is_empty() {
            std::slice::from_raw_parts_mut(counts, rle.counts.len()).copy_from_slice(&rle.counts);
        }
        Ok(())
    })
}

/// Inverse of [`synthcomp_rle_encode`]; writes `width * height` bytes of 0/1.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_rle_decode(
    counts: *const u64,
    len: usize,
    width: u32,
    height: u32,
    bits: *mut u8,
    capacity: usize,
) -> SynthcompStatus {
    guard(|| {
        let n = width as usize * height as usize;
        if capacity < n {
            return Err(Failure::new(
                SynthcompStatus::BufferTooSmall,
                format!("need {n} bytes, capacity {capacity}"),
            ));
        }
        if (len > 0 && counts.is_null()) || (n > 0 && bits.is_null()) {
            return Err(Failure::new(SynthcompStatus::NullPointer, "counts or bits is null"));
        }
        let counts = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(counts, len).to_vec()
        };
        let mask = rle_decode(&RleMask {
            size: [height, width],
            counts,
        })
        .map_err(|e| Failure::new(SynthcompStatus::InvalidArgument, e))?;
        if n > 0 {
            let dst = std::slice::from_raw_parts_mut(bits, n);
            for y in 0..height {
                for x in 0..width {
                    dst[y as usize * width as usize + x as usize] = mask.get(x, y) as u8;
                }
            }
        }
        Ok(())
    })
}

/// Apply an edit list (one edit per line) to a caption. The result must be
/// released with [`synthcomp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn synthcomp_intervene(
    caption: *const c_char,
    edits: *const c_char,
    out: *mut *mut c_char,
) -> SynthcompStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let edits = parse_edits(c_str(edits, "edits")?).map_err(|e| Failure::new(SynthcompStatus::Parse, e))?;
        let start = Caption::new(c_str(caption, "caption")?, CaptionSource::CdiCaption, "ffi");
        let result = edits.iter().fold(start, |acc, e| intervene(&acc, e));
        *out = CString::new(result.text)
            .map_err(|e| Failure::new(SynthcompStatus::InvalidArgument, e))?
            .into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn synthcomp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn summarize(report: &ValidationReport) -> SynthcompValidation {
    SynthcompValidation {
        images: report.images,
        annotations: report.annotations,
        violations: report.violations.len() as u64,
    }
}

/// Run every stage into `out_dir`. A null `backend_url` selects the built-in
/// procedural backend; a null `cdi_dir` selects zero-shot backgrounds.
/// `report` is filled whenever validation ran, including on `DATASET_DIRTY`.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_run_pipeline(
    config: *const SynthcompConfig,
    vocab: *const SynthcompVocab,
    out_dir: *const c_char,
    cdi_dir: *const c_char,
    backend_url: *const c_char,
    workers: u32,
    report: *mut SynthcompValidation,
) -> SynthcompStatus {
    guard(|| {
        let config = non_null(config, "config")?.inner.clone();
        let vocab = non_null(vocab, "vocab")?.inner.clone();
        let out_dir = PathBuf::from(c_str(out_dir, "out_dir")?);
        let cdi_dir = opt_c_str(cdi_dir, "cdi_dir")?.map(PathBuf::from);
        let backend_url = opt_c_str(backend_url, "backend_url")?;
        let report = out_ptr(report, "report")?;
        let workers = (workers as usize).max(1);
        let gateway = match backend_url {
            None => Gateway::stub(
                StubBackend::new(config.fg_templates.clone()),
                config.image_size,
                workers,
            ),
            Some(url) => Gateway::http(
                BackendEndpoint {
                    max_in_flight: workers,
                    ..BackendEndpoint::new(url)
                },
                config.image_size,
            )
            .map_err(|e| Failure::new(SynthcompStatus::Backend, e))?,
        };
        let map = |e: synthcomp::pipeline::PipelineError| {
            let status = match e.exit_code() {
                exit::BACKEND => SynthcompStatus::Backend,
                _ => SynthcompStatus::InvalidArgument,
            };
            Failure::new(status, e)
        };
        let mut pipeline = Pipeline::new(config, vocab, Lexicon::bundled(), &out_dir, workers).map_err(map)?;
        let result = pipeline.run_all(&gateway, cdi_dir.as_deref(), &[]).map_err(map)?;
        *report = summarize(&result);
        if result.is_clean() {
            Ok(())
        } else {
            Err(Failure::new(
                SynthcompStatus::DatasetDirty,
                format!("{} violations", result.violations.len()),
            ))
        }
    })
}

/// Validate a written dataset root.
#[no_mangle]
pub unsafe extern "C" fn synthcomp_validate(
    dataset_dir: *const c_char,
    report: *mut SynthcompValidation,
) -> SynthcompStatus {
    guard(|| {
        let root = PathBuf::from(c_str(dataset_dir, "dataset_dir")?);
        let report = out_ptr(report, "report")?;
        let result = validate_dataset(&root).map_err(|e| Failure::new(SynthcompStatus::Io, e))?;
        *report = summarize(&result);
        if result.is_clean() {
            Ok(())
        } else {
            Err(Failure::new(
                SynthcompStatus::DatasetDirty,
                format!("{} violations", result.violations.len()),
            ))
        }
    })
}
