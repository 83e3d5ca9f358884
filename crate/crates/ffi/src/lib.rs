//! C ABI over the styleshift core: style statistics, AdaIN, exact
//! distribution matching, balancing targets, redundant-sample selection and
//! test-time shifting against an opaque registry handle.
//!
//! Every function returns an [`SsStatus`]. On failure a description is
//! available from [`ss_last_error`] on the same thread. Output pointers are
//! only written on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use styleshift::balance::{compute_targets, select_samples};
use styleshift::rng::derive_rng;
use styleshift::shift::{decide, ts_apply, DomainCentroid, DomainRegistry, ShiftMode};
use styleshift::style_ops::{adain, efdm};
use styleshift::tensor::{style_vector, ChannelStats};
use styleshift::{Error, FeatureMap, StyleVector};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    NonFinite = 3,
    EmptySet = 4,
    Config = 5,
    Parse = 6,
    Io = 7,
    RegistryBuild = 8,
    InvalidArgument = 9,
    /// Any other library error.
    Failed = 10,
    /// A panic was caught at the boundary.
    Internal = 99,
}

/// Test-time shifting rule for [`ss_ts_apply`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsShiftMode {
    Off = 0,
    Proposed = 1,
    ShiftAll = 2,
    SingleDomain = 3,
}

impl From<SsShiftMode> for ShiftMode {
    fn from(m: SsShiftMode) -> Self {
        match m {
            SsShiftMode::Off => ShiftMode::Off,
            SsShiftMode::Proposed => ShiftMode::Proposed,
            SsShiftMode::ShiftAll => ShiftMode::ShiftAll,
            SsShiftMode::SingleDomain => ShiftMode::SingleDomain,
        }
    }
}

/// Opaque registry of per-domain mean styles.
pub struct SsRegistry(DomainRegistry);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::Dimension(_) => SsStatus::Dimension,
        Error::NonFinite(_) => SsStatus::NonFinite,
        Error::EmptySet(_) => SsStatus::EmptySet,
        Error::Config(_) => SsStatus::Config,
        Error::Parse { .. } => SsStatus::Parse,
        Error::Io { .. } => SsStatus::Io,
        Error::RegistryBuild(_) => SsStatus::RegistryBuild,
        _ => SsStatus::Failed,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("{name} is null"));
            SsStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            SsStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SsStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: non-null pointers from the caller point to a valid `T`.
    unsafe { p.as_mut() }.ok_or(Fail::Null(name))
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Arg(format!("{name} is not UTF-8")))
}

unsafe fn registry<'a>(p: *const SsRegistry) -> Result<&'a DomainRegistry, Fail> {
    // SAFETY: handles come from this library and are live until freed.
    unsafe { p.as_ref() }
        .map(|r| &r.0)
        .ok_or(Fail::Null("registry"))
}

fn feature_map(
    data: &[f64],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<FeatureMap, Fail> {
    let len = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Fail::Arg("feature map size overflows".into()))?;
    if data.len() != len {
        return Err(Fail::Arg(format!(
            "expected {len} values, got {}",
            data.len()
        )));
    }
    Ok(FeatureMap::new(channels, height, width, data.to_vec())?)
}

/// Description of the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Writes the `2 * channels` style vector `[mu, sigma]` of a
/// `channels x height x width` feature map to `out`.
///
/// # Safety
/// `features` holds `channels * height * width` doubles; `out` has room
/// for `2 * channels`.
#[no_mangle]
pub unsafe extern "C" fn ss_style_vector(
    features: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let data = unsafe { slice(features, channels * height * width, "features")? };
        let phi = style_vector(&feature_map(data, channels, height, width)?);
        unsafe { slice_mut(out, phi.len(), "out")? }.copy_from_slice(phi.as_slice());
        Ok(())
    })
}

/// AdaIN of a `channels x height x width` map to the target style
/// `[mu, sigma]` (`2 * channels` values). `out` receives the shifted map.
///
/// # Safety
/// `content` and `out` hold `channels * height * width` doubles; `style`
/// holds `2 * channels`.
#[no_mangle]
pub unsafe extern "C" fn ss_adain(
    content: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    style: *const f64,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let n = channels * height * width;
        let data = unsafe { slice(content, n, "content")? };
        let phi = StyleVector::new(unsafe { slice(style, 2 * channels, "style")? }.to_vec())?;
        let stats = ChannelStats::new(phi.mu().to_vec(), phi.sigma().to_vec())?;
        let shifted = adain(&feature_map(data, channels, height, width)?, &stats)?;
        unsafe { slice_mut(out, n, "out")? }.copy_from_slice(shifted.as_slice());
        Ok(())
    })
}

/// Exact distribution matching of one plane: `out` gets the values of `y`
/// arranged in the rank order of `x`.
///
/// # Safety
/// `x`, `y` and `out` each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_efdm(
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let v = efdm(unsafe { slice(x, len, "x")? }, unsafe {
            slice(y, len, "y")?
        })?;
        unsafe { slice_mut(out, len, "out")? }.copy_from_slice(&v);
        Ok(())
    })
}

/// Per-domain sample targets for one class from `num_domains` counts.
/// `targets` receives `num_domains` values and `average` the real mean.
/// A class with no samples yields all-zero targets.
///
/// # Safety
/// `counts` and `targets` hold `num_domains` elements; `average` may be null.
#[no_mangle]
pub unsafe extern "C" fn ss_compute_targets(
    counts: *const usize,
    num_domains: usize,
    targets: *mut usize,
    average: *mut f64,
) -> SsStatus {
    guard(|| {
        let t = compute_targets(unsafe { slice(counts, num_domains, "counts")? })?;
        let dst = unsafe { slice_mut(targets, num_domains, "targets")? };
        if t.is_empty() {
            dst.fill(0);
        } else {
            dst.copy_from_slice(&t.targets);
        }
        if let Some(a) = unsafe { average.as_mut() } {
            *a = t.average;
        }
        Ok(())
    })
}

/// Selects up to `m` of `count` style vectors (row-major, `style_len`
/// each) by redundancy. Positions go to `selected` in selection order and
/// their number to `selected_len`; `distance_evals` (nullable) receives the
/// number of pairwise distances computed.
///
/// # Safety
/// `styles` holds `count * style_len` doubles; `selected` has room for
/// `m` elements.
#[no_mangle]
pub unsafe extern "C" fn ss_select_samples(
    styles: *const f64,
    count: usize,
    style_len: usize,
    m: usize,
    selected: *mut usize,
    selected_len: *mut usize,
    distance_evals: *mut usize,
) -> SsStatus {
    guard(|| {
        if style_len == 0 {
            return Err(Fail::Arg("style_len must be positive".into()));
        }
        let flat = unsafe { slice(styles, count * style_len, "styles")? };
        let styles = flat
            .chunks_exact(style_len)
            .map(|c| StyleVector::new(c.to_vec()))
            .collect::<styleshift::Result<Vec<_>>>()?;
        let sel = select_samples(&styles, m)?;
        let len = unsafe { out(selected_len, "selected_len")? };
        unsafe { slice_mut(selected, sel.selected.len(), "selected")? }
            .copy_from_slice(&sel.selected);
        *len = sel.selected.len();
        if let Some(d) = unsafe { distance_evals.as_mut() } {
            *d = sel.distance_evals;
        }
        Ok(())
    })
}

/// Builds a registry from `num_domains` centroids of `style_len` values
/// each (row-major). Domains are named `domain0`, `domain1`, ... Free the
/// handle with [`ss_registry_free`].
///
/// # Safety
/// `layer` is a NUL-terminated string; `centroids` holds
/// `num_domains * style_len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ss_registry_new(
    layer: *const c_char,
    alpha: f64,
    centroids: *const f64,
    num_domains: usize,
    style_len: usize,
    out_handle: *mut *mut SsRegistry,
) -> SsStatus {
    guard(|| {
        let layer = unsafe { text(layer, "layer")? };
        let handle = unsafe { out(out_handle, "out_handle")? };
        if style_len == 0 {
            return Err(Fail::Arg("style_len must be positive".into()));
        }
        let flat = unsafe { slice(centroids, num_domains * style_len, "centroids")? };
        let domains = flat
            .chunks_exact(style_len)
            .enumerate()
            .map(|(i, c)| {
                Ok(DomainCentroid {
                    name: format!("domain{i}"),
                    style: StyleVector::new(c.to_vec())?,
                })
            })
            .collect::<styleshift::Result<Vec<_>>>()?;
        let reg = DomainRegistry::from_centroids(layer, alpha, domains)?;
        *handle = Box::into_raw(Box::new(SsRegistry(reg)));
        Ok(())
    })
}

/// Loads a registry JSON file written by the `stats` command.
///
/// # Safety
/// `path` is a NUL-terminated string; `out_handle` is writable.
#[no_mangle]
pub unsafe extern "C" fn ss_registry_load(
    path: *const c_char,
    out_handle: *mut *mut SsRegistry,
) -> SsStatus {
    guard(|| {
        let path = unsafe { text(path, "path")? };
        let handle = unsafe { out(out_handle, "out_handle")? };
        let reg = DomainRegistry::load(Path::new(path))?;
        *handle = Box::into_raw(Box::new(SsRegistry(reg)));
        Ok(())
    })
}

/// # Safety
/// `registry` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ss_registry_save(
    registry: *const SsRegistry,
    path: *const c_char,
) -> SsStatus {
    guard(|| {
        let reg = unsafe { self::registry(registry)? };
        let path = unsafe { text(path, "path")? };
        reg.save(Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `registry` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_registry_free(registry: *mut SsRegistry) {
    if !registry.is_null() {
        // SAFETY: the handle was created by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(registry) });
    }
}

/// Number of domains, channels, the spread and the default alpha.
///
/// # Safety
/// `registry` is a live handle; each output is null or writable.
#[no_mangle]
pub unsafe extern "C" fn ss_registry_info(
    registry: *const SsRegistry,
    num_domains: *mut usize,
    channels: *mut usize,
    spread: *mut f64,
    alpha: *mut f64,
) -> SsStatus {
    guard(|| {
        let reg = unsafe { self::registry(registry)? };
        unsafe {
            if let Some(v) = num_domains.as_mut() {
                *v = reg.num_domains();
            }
            if let Some(v) = channels.as_mut() {
                *v = reg.channels();
            }
            if let Some(v) = spread.as_mut() {
                *v = reg.spread();
            }
            if let Some(v) = alpha.as_mut() {
                *v = reg.alpha();
            }
        }
        Ok(())
    })
}

/// The shift test for one style vector of `2 * channels` values.
/// `shift_to` gets the destination domain or -1; `avg_distance` and
/// `threshold` (both nullable) the quantities compared.
///
/// # Safety
/// `registry` is a live handle; `phi` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_decide(
    registry: *const SsRegistry,
    phi: *const f64,
    len: usize,
    alpha: f64,
    shift_to: *mut i64,
    avg_distance: *mut f64,
    threshold: *mut f64,
) -> SsStatus {
    guard(|| {
        let reg = unsafe { self::registry(registry)? };
        let phi = StyleVector::new(unsafe { slice(phi, len, "phi")? }.to_vec())?;
        let to = unsafe { out(shift_to, "shift_to")? };
        let d = decide(&phi, reg, alpha)?;
        *to = d.shift_to.map_or(-1, |n| n as i64);
        unsafe {
            if let Some(v) = avg_distance.as_mut() {
                *v = d.avg_distance;
            }
            if let Some(v) = threshold.as_mut() {
                *v = d.threshold;
            }
        }
        Ok(())
    })
}

/// Applies a test-time rule to one `channels x height x width` map.
/// `out` receives the (possibly unchanged) map, `shift_to` the destination
/// domain or -1.
///
/// # Safety
/// `registry` is a live handle; `features` and `out` hold
/// `channels * height * width` doubles; `shift_to` is writable.
#[no_mangle]
pub unsafe extern "C" fn ss_ts_apply(
    registry: *const SsRegistry,
    features: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    alpha: f64,
    mode: SsShiftMode,
    out: *mut f64,
    shift_to: *mut i64,
) -> SsStatus {
    guard(|| {
        let reg = unsafe { self::registry(registry)? };
        let n = channels * height * width;
        let map = feature_map(
            unsafe { slice(features, n, "features")? },
            channels,
            height,
            width,
        )?;
        let to = unsafe { self::out(shift_to, "shift_to")? };
        // Only the nearest-sample rule draws randomness, and it is not exposed.
        let mut rng = derive_rng(0, 0);
        let (shifted, d) = ts_apply(&map, reg, alpha, mode.into(), None, &mut rng)?;
        unsafe { slice_mut(out, n, "out")? }.copy_from_slice(shifted.as_slice());
        *to = d.shift_to.map_or(-1, |k| k as i64);
        Ok(())
    })
}
