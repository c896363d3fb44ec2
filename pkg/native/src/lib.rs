//! C ABI for the native rANS coder.
//!
//! The Python side discovers this library through the LUMEN_NATIVE_CODER
//! environment variable and talks to it exclusively through the functions
//! below: flat primitive buffers in, a malloc'd stream buffer out.  Every
//! entry point reports failures as an error code and catches panics at the
//! boundary; nothing unwinds across the ABI.
//!
//! A handle is immutable after construction, so concurrent encode and
//! decode calls on one handle are safe.

mod coder;

pub use coder::{CoderError, Decoder, TableSet, BYPASS_BITS, MAX_BYPASS_CHUNKS, RANS_L};

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::{ptr, slice};

pub const LUMEN_OK: i32 = 0;
pub const LUMEN_ERR_ARG: i32 = 1;
pub const LUMEN_ERR_TABLE: i32 = 2;
pub const LUMEN_ERR_TRUNCATED: i32 = 3;
pub const LUMEN_ERR_DESYNC: i32 = 4;
pub const LUMEN_ERR_SYMBOL: i32 = 5;
pub const LUMEN_ERR_PANIC: i32 = 99;

fn code_for(err: CoderError) -> i32 {
    match err {
        CoderError::InvalidArgument => LUMEN_ERR_ARG,
        CoderError::InvalidTable => LUMEN_ERR_TABLE,
        CoderError::Truncated => LUMEN_ERR_TRUNCATED,
        CoderError::Desync => LUMEN_ERR_DESYNC,
        CoderError::Symbol => LUMEN_ERR_SYMBOL,
    }
}

/// Build a coder handle from concatenated CDF tables.
///
/// `cdfs` holds every table back to back; `lens[t]` is the entry count of
/// table `t` (slots + 1) and `offsets[t]` the value of its first slot.
/// Returns null if any pointer is null, `count` is zero, or validation
/// rejects the tables.
///
/// # Safety
/// `lens` and `offsets` must point to `count` readable elements and `cdfs`
/// to `sum(lens)` readable elements.
#[no_mangle]
pub unsafe extern "C" fn lumen_rans_handle_new(
    cdfs: *const u32,
    lens: *const u32,
    offsets: *const i32,
    count: u32,
    precision: u32,
) -> *mut TableSet {
    let built = catch_unwind(AssertUnwindSafe(|| {
        if cdfs.is_null() || lens.is_null() || offsets.is_null() || count == 0 {
            return None;
        }
        let lens = slice::from_raw_parts(lens, count as usize);
        let offsets = slice::from_raw_parts(offsets, count as usize);
        let mut total = 0usize;
        for &len in lens {
            total = total.checked_add(len as usize)?;
        }
        let flat = slice::from_raw_parts(cdfs, total);
        TableSet::from_flat(flat, lens, offsets, precision).ok()
    }));
    match built {
        Ok(Some(set)) => Box::into_raw(Box::new(set)),
        _ => ptr::null_mut(),
    }
}

/// Free a handle returned by `lumen_rans_handle_new`.  Null is a no-op.
///
/// # Safety
/// `handle` must come from `lumen_rans_handle_new` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn lumen_rans_handle_free(handle: *mut TableSet) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Encode `n` symbols; on success `*out_buf`/`*out_len` receive a buffer
/// that the caller releases with `lumen_rans_buffer_free`.
///
/// # Safety
/// `symbols` and `table_ids` must point to `n` readable elements when
/// `n > 0`; `out_buf` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lumen_rans_encode(
    handle: *const TableSet,
    symbols: *const i32,
    table_ids: *const u32,
    n: usize,
    out_buf: *mut *mut u8,
    out_len: *mut usize,
) -> i32 {
    catch_unwind(AssertUnwindSafe(|| {
        if handle.is_null() || out_buf.is_null() || out_len.is_null() {
            return LUMEN_ERR_ARG;
        }
        if n > 0 && (symbols.is_null() || table_ids.is_null()) {
            return LUMEN_ERR_ARG;
        }
        let set = &*handle;
        let syms = if n == 0 { &[][..] } else { slice::from_raw_parts(symbols, n) };
        let ids = if n == 0 { &[][..] } else { slice::from_raw_parts(table_ids, n) };
        match set.encode(syms, ids) {
            Ok(stream) => {
                let boxed = stream.into_boxed_slice();
                *out_len = boxed.len();
                *out_buf = Box::into_raw(boxed) as *mut u8;
                LUMEN_OK
            }
            Err(e) => code_for(e),
        }
    }))
    .unwrap_or(LUMEN_ERR_PANIC)
}

/// Decode `n` values from `stream` into `out`.
///
/// # Safety
/// `stream` must point to `stream_len` readable bytes when nonempty;
/// `table_ids` and `out` must hold `n` elements when `n > 0`.
#[no_mangle]
pub unsafe extern "C" fn lumen_rans_decode(
    handle: *const TableSet,
    stream: *const u8,
    stream_len: usize,
    table_ids: *const u32,
    n: usize,
    out: *mut i32,
) -> i32 {
    catch_unwind(AssertUnwindSafe(|| {
        if handle.is_null() {
            return LUMEN_ERR_ARG;
        }
        if stream_len > 0 && stream.is_null() {
            return LUMEN_ERR_ARG;
        }
        if n > 0 && (table_ids.is_null() || out.is_null()) {
            return LUMEN_ERR_ARG;
        }
        let set = &*handle;
        let stream = if stream_len == 0 { &[][..] } else { slice::from_raw_parts(stream, stream_len) };
        let ids = if n == 0 { &[][..] } else { slice::from_raw_parts(table_ids, n) };
        let out = if n == 0 { &mut [][..] } else { slice::from_raw_parts_mut(out, n) };
        match set.decode(stream, ids, out) {
            Ok(()) => LUMEN_OK,
            Err(e) => code_for(e),
        }
    }))
    .unwrap_or(LUMEN_ERR_PANIC)
}

/// Release a stream buffer returned by `lumen_rans_encode`.
///
/// # Safety
/// `buf`/`len` must match one successful `lumen_rans_encode` output and
/// not be freed twice.  Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn lumen_rans_buffer_free(buf: *mut u8, len: usize) {
    if !buf.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf, len)));
    }
}
