import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lumen.core import (
    GRAY_WEIGHTS,
    ImageFormatError,
    ImageTensor,
    Plane,
    load_image,
    resize_map,
    to_grayscale,
)


def write_png(path, arr_hwc, dtype=np.uint8):
    bgr = arr_hwc[:, :, ::-1].astype(dtype)
    assert cv2.imwrite(str(path), bgr)


class TestLoadImage:
    def test_8bit_values_and_padding(self, tmp_path, rng):
        arr = rng.integers(0, 256, (50, 70, 3), dtype=np.uint8)
        write_png(tmp_path / "a.png", arr)
        img = load_image(tmp_path / "a.png")
        assert (img.orig_h, img.orig_w) == (50, 70)
        assert img.padded_h % 64 == 0 and img.padded_w % 64 == 0
        np.testing.assert_allclose(
            img.cropped(), arr.transpose(2, 0, 1).astype(np.float32) / 255.0, rtol=0, atol=0
        )

    def test_16bit_values(self, tmp_path, rng):
        arr = rng.integers(0, 65536, (64, 64, 3), dtype=np.uint16)
        write_png(tmp_path / "b.png", arr, dtype=np.uint16)
        img = load_image(tmp_path / "b.png")
        np.testing.assert_allclose(
            img.cropped(), arr.transpose(2, 0, 1).astype(np.float32) / 65535.0, rtol=0, atol=0
        )

    def test_padding_replicates_edges(self, tmp_path, rng):
        arr = rng.integers(0, 256, (65, 64, 3), dtype=np.uint8)
        write_png(tmp_path / "c.png", arr)
        img = load_image(tmp_path / "c.png")
        assert img.padded_h == 128
        # every padded row equals the last original row
        np.testing.assert_array_equal(img.data[:, 65:, :], np.repeat(img.data[:, 64:65, :], 63, axis=1))

    def test_grayscale_file_rejected(self, tmp_path):
        gray = np.zeros((32, 32), dtype=np.uint8)
        assert cv2.imwrite(str(tmp_path / "g.png"), gray)
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "g.png")

    def test_rgba_file_rejected(self, tmp_path):
        rgba = np.zeros((32, 32, 4), dtype=np.uint8)
        assert cv2.imwrite(str(tmp_path / "r.png"), rgba)
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "r.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")


class TestImageTensor:
    def test_crop_inverts_padding(self, rng):
        data = rng.random((3, 50, 70), dtype=np.float32)
        img = ImageTensor.from_array(data).padded()
        assert img.data.shape == (3, 64, 128)
        np.testing.assert_array_equal(img.cropped(), data)

    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((1, 4, 4), dtype=np.float32), 4, 4)
        with pytest.raises(ValueError):
            ImageTensor(np.full((3, 4, 4), 2.0, dtype=np.float32), 4, 4)
        with pytest.raises(ValueError):
            ImageTensor(np.full((3, 4, 4), np.nan, dtype=np.float32), 4, 4)
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((3, 4, 4), dtype=np.float32), 5, 4)
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((3, 4, 4), dtype=np.uint8), 4, 4)


class TestGrayscale:
    def test_weights(self):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        img[0] = 1.0
        assert to_grayscale(ImageTensor.from_array(img)).data[0, 0] == np.float32(GRAY_WEIGHTS[0])
        img = np.ones((3, 2, 2), dtype=np.float32)
        np.testing.assert_allclose(to_grayscale(ImageTensor.from_array(img)).data, 1.0, atol=1e-6)


def resize_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel reimplementation used as an oracle."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - wy) * (1 - wx)
                + src[y0, x1] * (1 - wy) * wx
                + src[y1, x0] * wy * (1 - wx)
                + src[y1, x1] * wy * wx
            )
    return out


class TestResizeMap:
    def test_matches_reference(self, rng):
        for in_shape, out_shape in [((8, 12), (3, 5)), ((5, 5), (16, 9)), ((7, 3), (7, 3))]:
            src = rng.random(in_shape)
            got = resize_map(Plane(src), *out_shape).data
            want = resize_reference(src, *out_shape)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_identity_at_same_size(self, rng):
        src = rng.random((9, 11))
        np.testing.assert_allclose(resize_map(Plane(src), 9, 11).data, src, atol=1e-12)

    @given(
        h=st.integers(1, 12),
        w=st.integers(1, 12),
        oh=st.integers(1, 20),
        ow=st.integers(1, 20),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=40, deadline=None)
    def test_range_preserved(self, h, w, oh, ow, seed):
        src = np.random.default_rng(seed).random((h, w))
        out = resize_map(Plane(src), oh, ow).data
        assert out.shape == (oh, ow)
        assert out.min() >= src.min() - 1e-12
        assert out.max() <= src.max() + 1e-12

    def test_constant_stays_constant(self):
        out = resize_map(Plane(np.full((6, 4), 0.7)), 13, 9).data
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_invalid_target(self):
        with pytest.raises(ValueError):
            resize_map(Plane(np.zeros((4, 4))), 0, 5)
