"""Range coder (rANS), bitstream container, and the codec pipelines."""

from __future__ import annotations

import math
import struct
from array import array
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageTensor
from .entropy import PRECISION, CdfTableSet, scale_index
from .transforms import LowLightCodec

RANS_L = 1 << 16  # lower bound of the coder state
BYPASS_BITS = 4  # raw-chunk width for escape-coded magnitudes
_MAX_BYPASS_CHUNKS = 16

MAGIC = b"JLLC"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sBBIIII")


class DecodeError(RuntimeError):
    """Raised when a stream is truncated, desynchronized, or corrupt."""


class ContainerError(ValueError):
    """Raised for malformed container bytes."""


class CoderStateError(RuntimeError):
    """Raised when coding is attempted before CDF tables exist."""


class RansDecoder:
    """Incremental decoder over one stream; symbols come out in write order."""

    def __init__(self, codec: "RansCodec", stream: bytes):
        if len(stream) < 4:
            raise DecodeError("stream shorter than the flushed state")
        self._codec = codec
        self._stream = stream
        self._pos = 4
        self._state = int.from_bytes(stream[:4], "big")

    def _renorm(self) -> None:
        state, stream, pos = self._state, self._stream, self._pos
        while state < RANS_L:
            if pos >= len(stream):
                raise DecodeError("truncated stream")
            state = (state << 8) | stream[pos]
            pos += 1
        self._state, self._pos = state, pos

    def _read_bits(self, nbits: int) -> int:
        val = self._state & ((1 << nbits) - 1)
        self._state >>= nbits
        self._renorm()
        return val

    def decode_symbol(self, table_id: int) -> int:
        """Decode one integer value using the given table."""
        codec = self._codec
        lut = codec.lut(table_id)
        starts = codec.starts[table_id]
        freqs = codec.freqs[table_id]
        escape = codec.num_slots[table_id] - 1

        cf = self._state & (codec.prob_mask)
        slot = lut[cf]
        self._state = freqs[slot] * (self._state >> codec.precision) + cf - starts[slot]
        self._renorm()
        if slot != escape:
            return slot + codec.offsets[table_id]
        sign = self._read_bits(1)
        mag = 0
        shift = 0
        while True:
            mag |= self._read_bits(BYPASS_BITS) << shift
            shift += BYPASS_BITS
            if not self._read_bits(1):
                break
            if shift >= BYPASS_BITS * _MAX_BYPASS_CHUNKS:
                raise DecodeError("runaway escape magnitude")
        rel = -(mag + 1) if sign else escape + mag
        return rel + codec.offsets[table_id]

    def finish(self) -> None:
        """Verify the stream was fully and consistently consumed."""
        if self._state != RANS_L or self._pos != len(self._stream):
            raise DecodeError("corrupt or truncated stream")


class RansCodec:
    """rANS coder over a fixed set of quantized CDF tables.

    16-bit probabilities, 32-bit state, byte-wise renormalization.  Symbols
    outside a table's support are escape-coded through the reserved last
    slot: a sign bit then 4-bit magnitude chunks, each followed by a
    continuation bit.
    """

    def __init__(self, tables: CdfTableSet):
        self.tables = tables
        self.precision = tables.precision
        self.prob_mask = (1 << self.precision) - 1
        self.offsets = tables.offsets.tolist()
        self.num_slots = tables.lengths.tolist()
        self.starts = [c.astype(np.int64).tolist() for c in tables.cdfs]
        self.freqs = [np.diff(c.astype(np.int64)).tolist() for c in tables.cdfs]
        self._luts: dict[int, array] = {}

    def lut(self, table_id: int) -> array:
        """Slot lookup over the full probability range (built lazily)."""
        lut = self._luts.get(table_id)
        if lut is None:
            counts = np.diff(self.tables.cdfs[table_id].astype(np.int64))
            slots = np.repeat(np.arange(len(counts), dtype=np.uint16), counts)
            lut = array("H")
            lut.frombytes(slots.astype("<u2").tobytes())
            self._luts[table_id] = lut
        return lut

    def _check_ids(self, table_ids) -> list[int]:
        ids = np.asarray(table_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.starts)):
            raise ValueError("table id out of range")
        return ids.tolist()

    def encode(self, symbols, table_ids, return_cost: bool = False):
        """Encode integer ``symbols`` with per-symbol ``table_ids``.

        Returns the stream bytes, optionally with the ideal codelength in
        bits under the quantized tables.
        """
        syms = np.asarray(symbols, dtype=np.int64).tolist()
        ids = self._check_ids(table_ids)
        if len(syms) != len(ids):
            raise ValueError("symbols and table_ids must have equal length")

        precision = self.precision
        offsets, num_slots = self.offsets, self.num_slots
        starts, freqs = self.starts, self.freqs
        cost = 0.0
        buf = bytearray()
        state = RANS_L
        log2 = math.log2
        scale_bits = float(precision)

        for i in range(len(syms) - 1, -1, -1):
            t = ids[i]
            rel = syms[i] - offsets[t]
            escape = num_slots[t] - 1
            if 0 <= rel < escape:
                slot = rel
            else:
                # escape: emit (reversed) continuation-chunked magnitude, sign
                slot = escape
                if rel < 0:
                    sign, mag = 1, -rel - 1
                else:
                    sign, mag = 0, rel - escape
                chunks = []
                while True:
                    chunks.append(mag & 0xF)
                    mag >>= BYPASS_BITS
                    if not mag:
                        break
                if return_cost:
                    cost += 1 + len(chunks) * (BYPASS_BITS + 1)
                last = len(chunks) - 1
                for j in range(last, -1, -1):
                    flag = 0 if j == last else 1
                    # bypass push: continuation flag then chunk
                    while state >= 1 << (8 + precision - 1):
                        buf.append(state & 0xFF)
                        state >>= 8
                    state = (state << 1) | flag
                    while state >= 1 << (8 + precision - BYPASS_BITS):
                        buf.append(state & 0xFF)
                        state >>= 8
                    state = (state << BYPASS_BITS) | chunks[j]
                while state >= 1 << (8 + precision - 1):
                    buf.append(state & 0xFF)
                    state >>= 8
                state = (state << 1) | sign
            f = freqs[t][slot]
            if return_cost:
                cost += scale_bits - log2(f)
            limit = f << 8
            while state >= limit:
                buf.append(state & 0xFF)
                state >>= 8
            state = ((state // f) << precision) + (state % f) + starts[t][slot]

        buf += state.to_bytes(4, "little")
        buf.reverse()
        stream = bytes(buf)
        if return_cost:
            return stream, cost
        return stream

    def decode(self, stream: bytes, table_ids) -> list[int]:
        """Decode one value per entry of ``table_ids``; verifies the flush."""
        ids = self._check_ids(table_ids)
        dec = RansDecoder(self, stream)
        out = [dec.decode_symbol(t) for t in ids]
        dec.finish()
        return out

    def decoder(self, stream: bytes) -> RansDecoder:
        return RansDecoder(self, stream)


def rans_encode(symbols, table_ids, tables: CdfTableSet) -> bytes:
    return RansCodec(tables).encode(symbols, table_ids)


def rans_decode(stream: bytes, table_ids, tables: CdfTableSet) -> list[int]:
    return RansCodec(tables).decode(stream, table_ids)


@dataclass
class BitstreamContainer:
    """Self-describing payload: header fields plus the two coded streams."""

    quality_index: int
    orig_h: int
    orig_w: int
    z_stream: bytes
    y_stream: bytes

    def pack(self) -> bytes:
        head = _HEADER.pack(
            MAGIC,
            CONTAINER_VERSION,
            self.quality_index,
            self.orig_h,
            self.orig_w,
            len(self.z_stream),
            len(self.y_stream),
        )
        return head + self.z_stream + self.y_stream

    @property
    def nbytes(self) -> int:
        return _HEADER.size + len(self.z_stream) + len(self.y_stream)

    @classmethod
    def unpack(cls, blob: bytes) -> "BitstreamContainer":
        if len(blob) < _HEADER.size:
            raise ContainerError("container shorter than its header")
        magic, version, quality, oh, ow, zlen, ylen = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if oh < 1 or ow < 1:
            raise ContainerError("invalid image dimensions")
        if len(blob) != _HEADER.size + zlen + ylen:
            raise ContainerError("container length does not match header")
        z = blob[_HEADER.size : _HEADER.size + zlen]
        y = blob[_HEADER.size + zlen :]
        return cls(quality, oh, ow, z, y)


@dataclass
class CodingResult:
    """Latents and accounting data from one compress/decompress run."""

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    ideal_bits_y: float = 0.0
    ideal_bits_z: float = 0.0


def _codecs(model: LowLightCodec) -> tuple[RansCodec, RansCodec]:
    if not model.tables_ready:
        raise CoderStateError("CDF tables not built; call update_tables() first")
    if getattr(model, "_codec_cache", None) is None or model._codec_cache[0] is not model.gaussian_tables:
        model._codec_cache = (
            model.gaussian_tables,
            RansCodec(model.gaussian_tables),
            RansCodec(model.factorized_tables),
        )
    return model._codec_cache[1], model._codec_cache[2]


def _pad_to_multiple(x: ImageTensor) -> ImageTensor:
    if x.padded_h % 64 or x.padded_w % 64:
        return x.padded()
    return x


def _serial_encode(model: LowLightCodec, y: torch.Tensor, hyper: torch.Tensor):
    """Sequential conditional coding pass; mirrors the decoder exactly."""
    m = y.shape[1]
    h, w = y.shape[-2:]
    canvas = torch.zeros(1, m, h + 4, w + 4)
    wm = model.ctx.masked_weight()
    bias = model.ctx.bias
    symbols: list[int] = []
    ids: list[int] = []
    for i in range(h):
        for j in range(w):
            win = canvas[:, :, i : i + 5, j : j + 5]
            ctx = F.conv2d(win, wm, bias)
            means, scales = model.entropy_parameters(hyper[:, :, i : i + 1, j : j + 1], ctx)
            mu = means[0, :, 0, 0]
            sym = torch.round(y[0, :, i, j] - mu)
            canvas[0, :, i + 2, j + 2] = sym + mu
            symbols.extend(sym.to(torch.int64).tolist())
            ids.extend(scale_index(scales[0, :, 0, 0], model.scales).tolist())
    y_hat = canvas[:, :, 2:-2, 2:-2]
    return y_hat, symbols, ids


def _serial_decode(model: LowLightCodec, dec: RansDecoder, hyper: torch.Tensor, h: int, w: int):
    m = model.latent_channels
    canvas = torch.zeros(1, m, h + 4, w + 4)
    wm = model.ctx.masked_weight()
    bias = model.ctx.bias
    scales_t = model.scales
    for i in range(h):
        for j in range(w):
            win = canvas[:, :, i : i + 5, j : j + 5]
            ctx = F.conv2d(win, wm, bias)
            means, scales = model.entropy_parameters(hyper[:, :, i : i + 1, j : j + 1], ctx)
            mu = means[0, :, 0, 0]
            ids = scale_index(scales[0, :, 0, 0], scales_t).tolist()
            sym = torch.tensor([float(dec.decode_symbol(t)) for t in ids])
            canvas[0, :, i + 2, j + 2] = sym + mu
    return canvas[:, :, 2:-2, 2:-2]


def compress(x: ImageTensor, model: LowLightCodec) -> tuple[BitstreamContainer, CodingResult]:
    """Encode an image into a container; also reports coding-side latents."""
    y_codec, z_codec = _codecs(model)
    x = _pad_to_multiple(x)
    model.eval()
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(x.data, dtype=np.float32)).unsqueeze(0)
        y, _ = model.analyze(xt)
        z = model.h_a(y)
        z_hat = torch.round(z)

        k = model.hyper_channels
        spatial = z_hat.shape[-2] * z_hat.shape[-1]
        z_syms = z_hat[0].to(torch.int64).flatten().tolist()
        z_ids = np.repeat(np.arange(k), spatial)
        z_stream, z_bits = z_codec.encode(z_syms, z_ids, return_cost=True)

        hyper = model.h_s(z_hat)
        y_hat, y_syms, y_ids = _serial_encode(model, y, hyper)
        y_stream, y_bits = y_codec.encode(y_syms, y_ids, return_cost=True)

    container = BitstreamContainer(model.cfg.quality_index, x.orig_h, x.orig_w, z_stream, y_stream)
    return container, CodingResult(y_hat, z_hat, y_bits, z_bits)


def decompress(container: BitstreamContainer, model: LowLightCodec) -> tuple[ImageTensor, CodingResult]:
    """Decode a container back to an image.

    Uses only the coded latents and the model weights; quality must match
    the model configuration.
    """
    y_codec, z_codec = _codecs(model)
    if container.quality_index != model.cfg.quality_index:
        raise CoderStateError(
            f"container quality {container.quality_index} does not match "
            f"model quality {model.cfg.quality_index}"
        )
    pad_h = -container.orig_h % 64 + container.orig_h
    pad_w = -container.orig_w % 64 + container.orig_w
    zh, zw = pad_h // 64, pad_w // 64
    yh, yw = pad_h // 16, pad_w // 16
    k = model.hyper_channels

    model.eval()
    with torch.no_grad():
        z_ids = np.repeat(np.arange(k), zh * zw)
        z_vals = z_codec.decode(container.z_stream, z_ids)
        z_hat = torch.tensor(z_vals, dtype=torch.float32).reshape(1, k, zh, zw)

        hyper = model.h_s(z_hat)
        dec = y_codec.decoder(container.y_stream)
        y_hat = _serial_decode(model, dec, hyper, yh, yw)
        dec.finish()

        x_hat = model.synthesize(y_hat)
    data = x_hat[0].numpy().astype(np.float32)
    img = ImageTensor(np.clip(data, 0.0, 1.0), container.orig_h, container.orig_w)
    return img, CodingResult(y_hat, z_hat)
