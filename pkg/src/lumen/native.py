"""ctypes bridge to the optional native range coder.

The shared library is discovered through the ``LUMEN_NATIVE_CODER``
environment variable; when unset, the pure-Python coder is the only
implementation.  The native coder produces byte-identical streams.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .coder import DecodeError
from .entropy import CdfTableSet

ENV_VAR = "LUMEN_NATIVE_CODER"

_OK = 0
_ERR_ARG = 1
_ERR_TABLE = 2
_ERR_TRUNCATED = 3
_ERR_DESYNC = 4
_ERR_SYMBOL = 5
_ERR_PANIC = 99


class NativeCoderError(RuntimeError):
    """Raised for invalid arguments or table definitions on the native side."""


def _raise_for(code: int) -> None:
    if code == _OK:
        return
    if code in (_ERR_TRUNCATED, _ERR_DESYNC):
        raise DecodeError(f"native decode failed (code {code})")
    raise NativeCoderError(f"native coder error (code {code})")


def library_path() -> Path | None:
    value = os.environ.get(ENV_VAR)
    if not value:
        return None
    return Path(value)


def load_library(path: str | Path | None = None) -> ctypes.CDLL | None:
    """Load the shared library; None when not configured."""
    if path is None:
        path = library_path()
    if path is None:
        return None
    lib = ctypes.CDLL(str(path))
    lib.lumen_rans_handle_new.restype = ctypes.c_void_p
    lib.lumen_rans_handle_new.argtypes = [
        ctypes.POINTER(ctypes.c_uint32),  # concatenated CDFs
        ctypes.POINTER(ctypes.c_uint32),  # per-table CDF lengths
        ctypes.POINTER(ctypes.c_int32),  # per-table offsets
        ctypes.c_uint32,  # table count
        ctypes.c_uint32,  # precision
    ]
    lib.lumen_rans_handle_free.restype = None
    lib.lumen_rans_handle_free.argtypes = [ctypes.c_void_p]
    lib.lumen_rans_encode.restype = ctypes.c_int32
    lib.lumen_rans_encode.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(ctypes.c_int32),  # symbols
        ctypes.POINTER(ctypes.c_uint32),  # table ids
        ctypes.c_size_t,  # count
        ctypes.POINTER(ctypes.POINTER(ctypes.c_uint8)),  # out buffer
        ctypes.POINTER(ctypes.c_size_t),  # out length
    ]
    lib.lumen_rans_decode.restype = ctypes.c_int32
    lib.lumen_rans_decode.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(ctypes.c_uint8),  # stream
        ctypes.c_size_t,  # stream length
        ctypes.POINTER(ctypes.c_uint32),  # table ids
        ctypes.c_size_t,  # count
        ctypes.POINTER(ctypes.c_int32),  # decoded values out
    ]
    lib.lumen_rans_buffer_free.restype = None
    lib.lumen_rans_buffer_free.argtypes = [ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t]
    return lib


class NativeCodec:
    """Native rANS codec over a fixed table set, mirroring the Python coder."""

    def __init__(self, tables: CdfTableSet, lib: ctypes.CDLL | None = None):
        self._lib = lib if lib is not None else load_library()
        if self._lib is None:
            raise NativeCoderError(f"{ENV_VAR} is not set; no native coder available")
        flat = np.concatenate(tables.cdfs).astype(np.uint32)
        lens = np.array([len(c) for c in tables.cdfs], dtype=np.uint32)
        offs = tables.offsets.astype(np.int32)
        self._flat, self._lens, self._offs = flat, lens, offs  # keep alive
        handle = self._lib.lumen_rans_handle_new(
            flat.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            lens.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            offs.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            len(tables.cdfs),
            tables.precision,
        )
        if not handle:
            raise NativeCoderError("native coder rejected the table set")
        self._handle = handle

    def close(self) -> None:
        if getattr(self, "_handle", None):
            self._lib.lumen_rans_handle_free(self._handle)
            self._handle = None

    def __del__(self):
        self.close()

    def encode(self, symbols, table_ids) -> bytes:
        syms = np.ascontiguousarray(symbols, dtype=np.int32)
        ids = np.ascontiguousarray(table_ids, dtype=np.uint32)
        if syms.shape != ids.shape:
            raise ValueError("symbols and table_ids must have equal length")
        out_ptr = ctypes.POINTER(ctypes.c_uint8)()
        out_len = ctypes.c_size_t()
        code = self._lib.lumen_rans_encode(
            self._handle,
            syms.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            ids.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            syms.size,
            ctypes.byref(out_ptr),
            ctypes.byref(out_len),
        )
        _raise_for(code)
        try:
            return ctypes.string_at(out_ptr, out_len.value)
        finally:
            self._lib.lumen_rans_buffer_free(out_ptr, out_len)

    def decode(self, stream: bytes, table_ids) -> np.ndarray:
        ids = np.ascontiguousarray(table_ids, dtype=np.uint32)
        buf = np.frombuffer(stream, dtype=np.uint8)
        buf = np.ascontiguousarray(buf)
        out = np.empty(ids.size, dtype=np.int32)
        code = self._lib.lumen_rans_decode(
            self._handle,
            buf.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
            buf.size,
            ids.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ids.size,
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
        )
        _raise_for(code)
        return out
