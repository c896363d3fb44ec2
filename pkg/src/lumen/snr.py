"""Signal-to-noise conditioning: map estimation, local/non-local features, fusion."""

from __future__ import annotations

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from torch import nn

from .core import GRAY_WEIGHTS, ImageTensor, Plane
from .layers import ResidualBlock

SNR_EPS = 1e-6
SNR_MAX = 100.0

# Keys whose normalized SNR falls below this are dropped from attention.
ATTN_SNR_THRESHOLD = 0.5


def compute_snr_map(x: ImageTensor, kernel_size: int = 3) -> Plane:
    """Per-pixel SNR estimate: smoothed luma over |luma - smoothed luma|.

    The smoothing is a box filter with edge replication.  Pixels where both
    numerator and denominator vanish map to 0; everything is clamped to
    [0, SNR_MAX].  Returned in float64.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    weights64 = np.asarray(GRAY_WEIGHTS, dtype=np.float64)
    gray = np.tensordot(weights64, x.data.astype(np.float64), axes=1)
    k2 = 1.0 / (kernel_size * kernel_size)
    weights = np.full((kernel_size, kernel_size), k2, dtype=np.float64)
    smooth = scipy.ndimage.correlate(gray, weights, mode="nearest")
    noise = np.abs(gray - smooth)
    snr = smooth / np.maximum(noise, SNR_EPS)
    snr[(smooth == 0.0) & (noise == 0.0)] = 0.0
    return Plane(np.clip(snr, 0.0, SNR_MAX))


def normalize_snr_map(s: Plane) -> Plane:
    """Min-max normalize to [0, 1]; a constant map normalizes to 0.5."""
    d = np.asarray(s.data, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi - lo <= 0.0:
        return Plane(np.full_like(d, 0.5))
    return Plane((d - lo) / (hi - lo))


def snr_fuse(f_s: torch.Tensor, f_l: torch.Tensor, s_resized: torch.Tensor) -> torch.Tensor:
    """Convex per-pixel blend: local features where SNR is high, non-local below.

    ``s_resized`` is broadcast over channels and clamped to [0, 1].
    """
    if f_s.shape != f_l.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_l.shape)}")
    if s_resized.shape[-2:] != f_s.shape[-2:]:
        raise ValueError(
            f"map size {tuple(s_resized.shape[-2:])} does not match "
            f"features {tuple(f_s.shape[-2:])}"
        )
    s = s_resized.clamp(0.0, 1.0)
    return f_s * s + f_l * (1.0 - s)


class SnrAttention(nn.Module):
    """Multi-head self-attention over spatial tokens with low-SNR keys masked.

    Large grids are average-pooled down to at most ``max_tokens`` tokens
    before attention and bilinearly upsampled back afterwards.
    """

    def __init__(self, channels: int, num_heads: int | None = None, max_tokens: int = 1024):
        super().__init__()
        if num_heads is None:
            num_heads = max(1, min(4, channels // 8))
        self.attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.max_tokens = max_tokens

    def forward(
        self,
        feat: torch.Tensor,
        s_resized: torch.Tensor,
        return_weights: bool = False,
    ):
        b, c, h, w = feat.shape
        s = s_resized.clamp(0.0, 1.0)
        if s.dim() == 2:
            s = s.expand(b, 1, h, w)
        elif s.dim() == 3:
            s = s.unsqueeze(1)

        pool = 1
        while (h // pool) * (w // pool) > self.max_tokens and min(h, w) // pool > 1:
            pool *= 2
        if pool > 1:
            feat_t = F.avg_pool2d(feat, pool)
            s_t = F.avg_pool2d(s, pool)
        else:
            feat_t, s_t = feat, s
        th, tw = feat_t.shape[-2:]

        tokens = feat_t.flatten(2).transpose(1, 2)  # [B, T, C]
        key_snr = s_t.flatten(2).squeeze(1)  # [B, T]
        mask = key_snr < ATTN_SNR_THRESHOLD
        # If every key would be masked, fall back to unmasked attention.
        all_masked = mask.all(dim=1)
        if all_masked.any():
            mask = mask.clone()
            mask[all_masked] = False
        out, weights = self.attn(
            tokens,
            tokens,
            tokens,
            key_padding_mask=mask,
            need_weights=True,
            average_attn_weights=True,
        )
        out = out.transpose(1, 2).reshape(b, c, th, tw)
        if pool > 1:
            out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
        if return_weights:
            return out, weights, mask
        return out


class SnrLevel(nn.Module):
    """One conditioning level: local residual path, masked attention path, fusion."""

    def __init__(self, channels: int, max_tokens: int = 1024):
        super().__init__()
        self.local = nn.Sequential(ResidualBlock(channels, channels), ResidualBlock(channels, channels))
        self.nonlocal_attn = SnrAttention(channels, max_tokens=max_tokens)

    def local_features(self, feat: torch.Tensor) -> torch.Tensor:
        return self.local(feat)

    def nonlocal_features(self, feat: torch.Tensor, s_resized: torch.Tensor, return_weights: bool = False):
        return self.nonlocal_attn(feat, s_resized, return_weights=return_weights)

    def forward(self, feat: torch.Tensor, s_resized: torch.Tensor) -> torch.Tensor:
        f_s = self.local_features(feat)
        f_l = self.nonlocal_features(feat, s_resized)
        return snr_fuse(f_s, f_l, s_resized)


def snr_condition_maps(x: torch.Tensor, kernel_size: int = 3) -> torch.Tensor:
    """Normalized SNR maps for a [B, 3, H, W] batch, as [B, 1, H, W] float32.

    Pure conditioning input: computed without gradients from pixel values.
    """
    maps = []
    arr = x.detach().cpu().numpy()
    for i in range(arr.shape[0]):
        img = ImageTensor.from_array(np.clip(arr[i], 0.0, 1.0))
        s = compute_snr_map(img, kernel_size)
        maps.append(normalize_snr_map(s).data.astype(np.float32))
    out = torch.from_numpy(np.stack(maps)[:, None])
    return out.to(x.device)
