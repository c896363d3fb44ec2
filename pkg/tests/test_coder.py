"""Range coder, container format, and full image round trips."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_image, tiny_config
from lumen.coder import (
    BYPASS_BITS,
    RANS_L,
    BitstreamContainer,
    CoderStateError,
    ContainerError,
    DecodeError,
    RansCodec,
    compress,
    decompress,
    rans_decode,
    rans_encode,
)
from lumen.entropy import PRECISION, CdfTableSet, quantize_pmf
from lumen.transforms import LowLightCodec


def toy_tables() -> CdfTableSet:
    """Two small tables; the last slot of each is the escape slot."""
    pmfs = [
        np.array([0.55, 0.25, 0.1, 0.07, 0.03]),
        np.array([0.4, 0.35, 0.25]),
    ]
    cdfs = [np.concatenate([[0], np.cumsum(quantize_pmf(p))]) for p in pmfs]
    return CdfTableSet(cdfs, offsets=np.array([-2, 0]))


@pytest.fixture(scope="module")
def codec() -> RansCodec:
    return RansCodec(toy_tables())


class TestStreamFraming:
    def test_empty_input_is_the_flushed_initial_state(self, codec):
        stream = codec.encode([], [])
        assert stream == RANS_L.to_bytes(4, "big")
        assert stream.hex() == "00010000"
        assert codec.decode(stream, []) == []

    def test_streams_shorter_than_the_flush_are_rejected(self, codec):
        for n in range(4):
            with pytest.raises(DecodeError):
                codec.decode(b"\x00" * n, [])

    def test_symbol_id_length_mismatch(self, codec):
        with pytest.raises(ValueError):
            codec.encode([1, 2], [0])

    def test_table_id_out_of_range(self, codec):
        with pytest.raises(ValueError):
            codec.encode([0], [2])
        with pytest.raises(ValueError):
            codec.encode([0], [-1])


class TestRoundTrip:
    def test_in_support_symbols(self, codec):
        syms = [-2, -1, 0, 1, 0, 1, -2, 0]
        ids = [0, 0, 0, 0, 1, 1, 0, 1]
        stream = codec.encode(syms, ids)
        assert codec.decode(stream, ids) == syms

    def test_single_symbol(self, codec):
        stream = codec.encode([1], [0])
        assert codec.decode(stream, [0]) == [1]

    def test_escape_both_signs_and_large_magnitudes(self, codec):
        syms = [-3, 2, 17, -250, 10**9, -(10**9), 2, 0]
        ids = [0, 0, 1, 1, 0, 1, 1, 0]
        stream = codec.encode(syms, ids)
        assert codec.decode(stream, ids) == syms

    def test_random_mixture(self, codec, rng):
        syms = rng.integers(-40, 40, size=5000).tolist()
        ids = rng.integers(0, 2, size=5000).tolist()
        stream = codec.encode(syms, ids)
        assert codec.decode(stream, ids) == syms

    def test_encoding_is_deterministic(self, codec, rng):
        syms = rng.integers(-5, 5, size=300).tolist()
        ids = rng.integers(0, 2, size=300).tolist()
        a = codec.encode(syms, ids)
        b = RansCodec(toy_tables()).encode(syms, ids)
        assert a == b

    def test_module_level_helpers(self):
        tables = toy_tables()
        syms, ids = [0, 1, -2, 9], [0, 1, 0, 1]
        stream = rans_encode(syms, ids, tables)
        assert rans_decode(stream, ids, tables) == syms

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(-(10**6), 10**6), st.integers(0, 1)),
            max_size=200,
        )
    )
    def test_any_symbols_round_trip(self, pairs):
        codec = RansCodec(toy_tables())
        syms = [p[0] for p in pairs]
        ids = [p[1] for p in pairs]
        assert codec.decode(codec.encode(syms, ids), ids) == syms


class TestIdealCost:
    def test_stream_length_tracks_the_reported_cost(self, codec, rng):
        syms = rng.integers(-2, 2, size=20000).tolist()
        ids = rng.integers(0, 2, size=20000).tolist()
        stream, bits = codec.encode(syms, ids, return_cost=True)
        actual = len(stream) * 8
        assert bits <= actual <= bits * 1.01 + 64

    def test_escape_cost_includes_the_raw_bits(self, codec):
        freqs0 = toy_tables().freqs(0)
        esc_bits = PRECISION - math.log2(freqs0[-1])
        # magnitude 20 needs two 4-bit chunks: sign + 2 * (chunk + flag)
        _, bits = codec.encode([2 + 20], [0], return_cost=True)
        want = esc_bits + 1 + 2 * (BYPASS_BITS + 1)
        assert bits == pytest.approx(want, abs=1e-9)

    def test_in_support_cost_is_the_log_probability(self, codec):
        freqs0 = toy_tables().freqs(0)
        _, bits = codec.encode([-2], [0], return_cost=True)
        assert bits == pytest.approx(PRECISION - math.log2(freqs0[0]), abs=1e-9)


@pytest.fixture(scope="module")
def valid(codec):
    rng = np.random.default_rng(7)
    syms = rng.integers(-30, 30, size=200).tolist()
    ids = rng.integers(0, 2, size=200).tolist()
    return codec, codec.encode(syms, ids), ids


class TestRobustness:
    """Damaged input must surface as DecodeError, never anything else."""

    @staticmethod
    def _decode_must_not_crash(codec, stream, ids):
        try:
            out = codec.decode(stream, ids)
        except DecodeError:
            return
        assert len(out) == len(ids)

    def test_every_truncation(self, valid):
        codec, stream, ids = valid
        for n in range(len(stream)):
            self._decode_must_not_crash(codec, stream[:n], ids)

    def test_byte_corruption(self, valid):
        codec, stream, ids = valid
        rng = np.random.default_rng(11)
        for _ in range(300):
            pos = int(rng.integers(0, len(stream)))
            val = int(rng.integers(0, 256))
            mutated = bytearray(stream)
            mutated[pos] ^= val | 1
            self._decode_must_not_crash(codec, bytes(mutated), ids)

    def test_garbage_streams(self, valid):
        codec, _, ids = valid
        rng = np.random.default_rng(13)
        for _ in range(200):
            n = int(rng.integers(0, 120))
            blob = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            self._decode_must_not_crash(codec, blob, ids)

    def test_runaway_continuation_bits_are_cut_off(self):
        # Hand-build a stream whose escape magnitude never terminates; the
        # decoder must give up instead of looping.
        codec = RansCodec(toy_tables())
        starts, freqs = codec.starts[0], codec.freqs[0]
        escape = codec.num_slots[0] - 1

        buf = bytearray()
        state = RANS_L
        for _ in range(20):  # all-ones continuation flags, chunk 0xF
            while state >= 1 << (8 + PRECISION - 1):
                buf.append(state & 0xFF)
                state >>= 8
            state = (state << 1) | 1
            while state >= 1 << (8 + PRECISION - BYPASS_BITS):
                buf.append(state & 0xFF)
                state >>= 8
            state = (state << BYPASS_BITS) | 0xF
        while state >= 1 << (8 + PRECISION - 1):
            buf.append(state & 0xFF)
            state >>= 8
        state = (state << 1) | 0  # sign
        f = freqs[escape]
        while state >= f << 8:
            buf.append(state & 0xFF)
            state >>= 8
        state = ((state // f) << PRECISION) + (state % f) + starts[escape]
        buf += state.to_bytes(4, "little")
        buf.reverse()

        with pytest.raises(DecodeError):
            codec.decode(bytes(buf), [0])


class TestContainer:
    def test_pack_unpack_round_trip(self):
        c = BitstreamContainer(5, 123, 456, b"\x01\x02", b"\x03\x04\x05")
        c2 = BitstreamContainer.unpack(c.pack())
        assert c2 == c

    def test_nbytes_matches_packed_length(self):
        c = BitstreamContainer(0, 1, 1, b"ab", b"xyz")
        assert c.nbytes == len(c.pack()) == 22 + 2 + 3

    def test_empty_streams_allowed(self):
        c = BitstreamContainer(7, 9, 9, b"", b"")
        assert BitstreamContainer.unpack(c.pack()) == c

    def test_short_blob_rejected(self):
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(b"JLLC")

    def test_bad_magic_rejected(self):
        blob = bytearray(BitstreamContainer(0, 4, 4, b"", b"").pack())
        blob[0:4] = b"NOPE"
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(bytes(blob))

    def test_unknown_version_rejected(self):
        blob = bytearray(BitstreamContainer(0, 4, 4, b"", b"").pack())
        blob[4] = 99
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(bytes(blob))

    def test_zero_dimensions_rejected(self):
        blob = bytearray(BitstreamContainer(0, 4, 4, b"", b"").pack())
        blob[6:10] = (0).to_bytes(4, "little")
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(bytes(blob))

    def test_length_mismatch_rejected(self):
        blob = BitstreamContainer(0, 4, 4, b"ab", b"cd").pack()
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(blob + b"!")
        with pytest.raises(ContainerError):
            BitstreamContainer.unpack(blob[:-1])


class TestImageRoundTrip:
    def test_latents_survive_coding_exactly(self, small_model, rng):
        x = make_image(rng, 64, 64)
        container, enc = compress(x, small_model)
        _, dec = decompress(container, small_model)
        assert torch.equal(enc.y_hat, dec.y_hat)
        assert torch.equal(enc.z_hat, dec.z_hat)

    def test_decompression_is_deterministic(self, small_model, rng):
        x = make_image(rng, 64, 64)
        container, _ = compress(x, small_model)
        a, _ = decompress(container, small_model)
        b, _ = decompress(container, small_model)
        assert np.array_equal(a.data, b.data)

    def test_compressed_bytes_are_deterministic(self, small_model, rng):
        x = make_image(rng, 64, 64)
        a, _ = compress(x, small_model)
        b, _ = compress(x, small_model)
        assert a.pack() == b.pack()

    def test_odd_sizes_restore_original_dimensions(self, small_model, rng):
        x = make_image(rng, 70, 90)
        container, _ = compress(x, small_model)
        out, _ = decompress(container, small_model)
        assert (out.orig_h, out.orig_w) == (70, 90)
        img = out.cropped()
        assert img.shape == (3, 70, 90)
        assert np.isfinite(img).all()
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_container_size_tracks_ideal_bits(self, small_model, rng):
        x = make_image(rng, 64, 64)
        container, enc = compress(x, small_model)
        ideal = enc.ideal_bits_y + enc.ideal_bits_z
        actual = (len(container.z_stream) + len(container.y_stream)) * 8
        assert actual <= ideal * 1.01 + 64 * 8

    def test_quality_mismatch_is_refused(self, small_model, rng):
        x = make_image(rng, 64, 64)
        container, _ = compress(x, small_model)
        container.quality_index = (container.quality_index + 1) % 8
        with pytest.raises(CoderStateError):
            decompress(container, small_model)

    def test_coding_requires_built_tables(self, rng):
        model = LowLightCodec(tiny_config())
        x = make_image(rng, 64, 64)
        with pytest.raises(CoderStateError):
            compress(x, model)
        with pytest.raises(CoderStateError):
            decompress(BitstreamContainer(3, 64, 64, b"", b""), model)
