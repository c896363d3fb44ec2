"""Image containers, loading, padding, grayscale and map resampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

# The transform stack downsamples by 64 in total, so padded inputs must be
# multiples of this.
PAD_MULTIPLE = 64

# BT.601 luma weights.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Raised when a file decodes to something other than an RGB image."""


@dataclass
class Plane:
    """Single-channel [H, W] float map."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"plane must be 2-D, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class ImageTensor:
    """[3, H, W] float32 image in [0, 1] plus its pre-padding size.

    ``data`` may carry replication padding on the bottom/right edges; the
    original content always occupies ``[:, :orig_h, :orig_w]``.
    """

    data: np.ndarray
    orig_h: int
    orig_w: int

    def __post_init__(self) -> None:
        d = self.data
        if d.ndim != 3 or d.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] data, got shape {d.shape}")
        if not np.issubdtype(d.dtype, np.floating):
            raise ValueError(f"expected float data, got {d.dtype}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image data contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image data outside [0, 1]")
        h, w = d.shape[1:]
        if not (1 <= self.orig_h <= h and 1 <= self.orig_w <= w):
            raise ValueError(
                f"original size {self.orig_h}x{self.orig_w} inconsistent "
                f"with data {h}x{w}"
            )

    @classmethod
    def from_array(cls, data: np.ndarray) -> "ImageTensor":
        """Wrap an unpadded [3, H, W] array; original size is the full size."""
        data = np.asarray(data, dtype=np.float32)
        return cls(data, data.shape[1], data.shape[2])

    @property
    def padded_h(self) -> int:
        return self.data.shape[1]

    @property
    def padded_w(self) -> int:
        return self.data.shape[2]

    def cropped(self) -> np.ndarray:
        """Original pixels without the replication padding."""
        return self.data[:, : self.orig_h, : self.orig_w]

    def padded(self, multiple: int = PAD_MULTIPLE) -> "ImageTensor":
        """Copy padded by edge replication so both dims divide ``multiple``."""
        h, w = self.orig_h, self.orig_w
        ph = (multiple - h % multiple) % multiple
        pw = (multiple - w % multiple) % multiple
        data = np.pad(self.cropped(), ((0, 0), (0, ph), (0, pw)), mode="edge")
        return ImageTensor(data, h, w)


def load_image(path: str | Path) -> ImageTensor:
    """Load an 8- or 16-bit RGB image, normalize to [0, 1] and pad to x64.

    Raises ``FileNotFoundError`` for unreadable paths and
    ``ImageFormatError`` for non-RGB content or unsupported bit depths.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        shape = getattr(raw, "shape", None)
        raise ImageFormatError(f"expected a 3-channel RGB image, got shape {shape}: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"unsupported sample type {raw.dtype}: {path}")
    rgb = raw[:, :, ::-1].astype(np.float32) / scale  # cv2 loads BGR
    data = np.ascontiguousarray(rgb.transpose(2, 0, 1))
    return ImageTensor.from_array(data).padded()


def to_grayscale(x: ImageTensor) -> Plane:
    """Luma plane of the padded image data (BT.601 weights)."""
    w = np.asarray(GRAY_WEIGHTS, dtype=x.data.dtype)
    return Plane(np.tensordot(w, x.data, axes=1))


def resize_map(s: Plane, out_h: int, out_w: int) -> Plane:
    """Bilinear resample with half-pixel centers; preserves the value range."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    dtype = s.data.dtype
    src = np.asarray(s.data, dtype=np.float64)
    in_h, in_w = src.shape

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    tl = src[np.ix_(y0, x0)]
    tr = src[np.ix_(y0, x1)]
    bl = src[np.ix_(y1, x0)]
    br = src[np.ix_(y1, x1)]
    top = tl * (1.0 - wx) + tr * wx
    bot = bl * (1.0 - wx) + br * wx
    out = top * (1.0 - wy) + bot * wy
    return Plane(out.astype(dtype))
