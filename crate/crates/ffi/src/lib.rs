//! C ABI over the pooling mixer and its causal stream.
//!
//! Every function returns a [`PonetStatus`]; on failure the message is
//! available from [`ponet_last_error`] until the next call on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ponet::causal::CausalStream;
use ponet::cost::{count_mults, Path};
use ponet::mixer::{mix_fused, mix_naive, MixerConfig, ProjectionSet, Variant};
use ponet::segment::SegmentMap;
use ponet::tensor::{SeededRng, Tensor};
use ponet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PonetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    InvalidState = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PonetVariant {
    Full = 0,
    NoSsGa = 1,
    NoGa = 2,
    NoSmp = 3,
    NoLmp = 4,
    GaOnly = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PonetPath {
    Fused = 0,
    Naive = 1,
}

/// Mixer parameters plus configuration.
pub struct PonetMixer {
    params: ProjectionSet,
    cfg: MixerConfig,
}

/// Causal stream state bound to one mixer's parameters.
pub struct PonetStream {
    inner: CausalStream,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PonetStatus {
    match e {
        Error::Shape(_) | Error::Index { .. } | Error::EmptySequence => PonetStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::Diverged { .. } => PonetStatus::Numeric,
        Error::State(_) => PonetStatus::InvalidState,
        _ => PonetStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PonetStatus, String)>) -> PonetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PonetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PonetStatus::Panic
        }
    }
}

fn lift(e: Error) -> (PonetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PonetStatus, String) {
    (PonetStatus::NullPointer, format!("{what} is null"))
}

fn variant_of(v: PonetVariant) -> Variant {
    match v {
        PonetVariant::Full => Variant::Full,
        PonetVariant::NoSsGa => Variant::NoSsGa,
        PonetVariant::NoGa => Variant::NoGa,
        PonetVariant::NoSmp => Variant::NoSmp,
        PonetVariant::NoLmp => Variant::NoLmp,
        PonetVariant::GaOnly => Variant::GaOnly,
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ponet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ponet_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Closed-form multiplication count of one mixer forward pass.
#[no_mangle]
pub extern "C" fn ponet_count_mults(n: u64, d: u64, path: PonetPath) -> u64 {
    count_mults(n, d, if path == PonetPath::Fused { Path::Fused } else { Path::Naive })
}

/// Creates a mixer with seeded random projections (std `1/sqrt(d)`, zero
/// biases). `lmp_window` must be odd.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ponet_mixer_new(
    d: usize,
    heads: usize,
    lmp_window: usize,
    share_kv: bool,
    variant: PonetVariant,
    seed: u64,
    out: *mut *mut PonetMixer,
) -> PonetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = MixerConfig { lmp_window, share_kv, ..MixerConfig::new(d, heads) }.with_variant(variant_of(variant));
        cfg.validate().map_err(lift)?;
        let std = 1.0 / (d as f64).sqrt();
        let params = ProjectionSet::random(d, share_kv, std, &mut SeededRng::new(seed));
        *out = Box::into_raw(Box::new(PonetMixer { params, cfg }));
        Ok(())
    })
}

/// Releases a mixer. Null is ignored.
///
/// # Safety
/// `mixer` must come from [`ponet_mixer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ponet_mixer_free(mixer: *mut PonetMixer) {
    if !mixer.is_null() {
        drop(Box::from_raw(mixer));
    }
}

/// Model width of a mixer, or 0 for null.
///
/// # Safety
/// `mixer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ponet_mixer_dim(mixer: *const PonetMixer) -> usize {
    mixer.as_ref().map_or(0, |m| m.cfg.d)
}

/// Mixes `n` rows of `input` (row-major `n × d`) into `output` (same size).
/// `segment_ids` holds one non-decreasing, gap-free id per row starting at 0;
/// pass null to treat the whole sequence as one segment.
///
/// # Safety
/// `input` and `output` must each point to `n * d` doubles; `segment_ids`
/// must be null or point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn ponet_mixer_forward(
    mixer: *const PonetMixer,
    input: *const f64,
    n: usize,
    segment_ids: *const u32,
    path: PonetPath,
    output: *mut f64,
) -> PonetStatus {
    guard(|| {
        let m = mixer.as_ref().ok_or_else(|| null("mixer"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        if n == 0 {
            return Err(lift(Error::EmptySequence));
        }
        let d = m.cfg.d;
        let len = n.checked_mul(d).ok_or((PonetStatus::InvalidArgument, "n * d overflows".to_string()))?;
        let h = Tensor::new(&[n, d], std::slice::from_raw_parts(input, len).to_vec()).map_err(lift)?;
        let seg = if segment_ids.is_null() {
            SegmentMap::whole(n)
        } else {
            let ids: Vec<usize> = std::slice::from_raw_parts(segment_ids, n).iter().map(|&i| i as usize).collect();
            SegmentMap::from_ids(&ids)
        }
        .map_err(lift)?;
        let p = match path {
            PonetPath::Fused => mix_fused(&h, &m.params, &seg, &m.cfg),
            PonetPath::Naive => mix_naive(&h, &m.params, &seg, &m.cfg),
        }
        .map_err(lift)?
        .p;
        std::slice::from_raw_parts_mut(output, len).copy_from_slice(p.data());
        Ok(())
    })
}

/// Opens a causal stream over a mixer's parameters. Only the `NoSsGa` and
/// `NoGa` variants can stream.
///
/// # Safety
/// `mixer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ponet_stream_new(mixer: *const PonetMixer, out: *mut *mut PonetStream) -> PonetStatus {
    guard(|| {
        let m = mixer.as_ref().ok_or_else(|| null("mixer"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = CausalStream::new(m.params.clone(), m.cfg.clone()).map_err(lift)?;
        *out = Box::into_raw(Box::new(PonetStream { inner }));
        Ok(())
    })
}

/// Feeds one row of width `d`; `boundary` opens a new segment at this row.
/// Writes the emitted row of width `d` to `output`.
///
/// # Safety
/// `stream` must be live; `row` and `output` must point to `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn ponet_stream_step(
    stream: *mut PonetStream,
    row: *const f64,
    d: usize,
    boundary: bool,
    output: *mut f64,
) -> PonetStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        if row.is_null() {
            return Err(null("row"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let emitted = s.inner.step(std::slice::from_raw_parts(row, d), boundary).map_err(lift)?;
        if emitted.len() != d {
            return Err((PonetStatus::ShapeMismatch, format!("stream width {} differs from {d}", emitted.len())));
        }
        std::slice::from_raw_parts_mut(output, d).copy_from_slice(&emitted);
        Ok(())
    })
}

/// Returns a stream to its freshly opened state.
///
/// # Safety
/// `stream` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn ponet_stream_reset(stream: *mut PonetStream) -> PonetStatus {
    guard(|| {
        stream.as_mut().ok_or_else(|| null("stream"))?.inner.reset();
        Ok(())
    })
}

/// Releases a stream. Null is ignored.
///
/// # Safety
/// `stream` must come from [`ponet_stream_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ponet_stream_free(stream: *mut PonetStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}
