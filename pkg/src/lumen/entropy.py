"""Quantization, likelihood models, and quantized CDF table construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special
import torch
from torch import nn

from .layers import lower_bound

PRECISION = 16
PROB_SCALE = 1 << PRECISION

SCALE_MIN = 0.11
SCALE_MAX = 256.0
SCALE_LEVELS = 64

# Symbol support half-width for the conditional tables: +-ceil(9 sigma),
# capped so the widest table stays small.
SUPPORT_SIGMAS = 9.0
SUPPORT_CAP = 128

LIKELIHOOD_FLOOR = 1e-9
TAIL_MASS = 1e-9

_SQRT2 = math.sqrt(2.0)


def quantize(
    v: torch.Tensor,
    mode: str,
    means: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Quantize latents.

    ``noise``: additive uniform noise on [-0.5, 0.5) (training relaxation).
    ``round``: nearest integer, offset by ``means`` when given.
    ``ste``: rounds in value, identity in derivative.
    """
    if mode == "noise":
        u = torch.empty_like(v).uniform_(-0.5, 0.5, generator=generator)
        return v + u
    if mode == "round":
        if means is not None:
            return torch.round(v - means) + means
        return torch.round(v)
    if mode == "ste":
        centered = v if means is None else v - means
        rounded = torch.round(centered) + (means if means is not None else 0.0)
        return v + (rounded - v).detach()
    raise ValueError(f"unknown quantization mode: {mode!r}")


def _ndtr(t: torch.Tensor) -> torch.Tensor:
    """Standard normal CDF via erfc, stable in the left tail."""
    return 0.5 * torch.erfc(-t / _SQRT2)


def gaussian_likelihood(
    y_hat: torch.Tensor,
    means: torch.Tensor | None,
    scales: torch.Tensor,
) -> torch.Tensor:
    """Probability of ``y_hat`` under an integer-bin Gaussian around ``means``.

    Mass of the length-1 bin centered on the value, floored at
    ``LIKELIHOOD_FLOOR``.  ``scales`` must be positive.
    """
    v = y_hat if means is None else y_hat - means
    va = torch.abs(v)
    upper = _ndtr((0.5 - va) / scales)
    lower = _ndtr((-0.5 - va) / scales)
    return lower_bound(upper - lower, LIKELIHOOD_FLOOR)


def scale_table() -> np.ndarray:
    """Log-spaced conditional scale bins, SCALE_MIN..SCALE_MAX."""
    return np.exp(np.linspace(math.log(SCALE_MIN), math.log(SCALE_MAX), SCALE_LEVELS))


def scale_index(scales: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Index of the smallest table entry >= scale (clamped into range)."""
    s = scales.clamp(float(table[0]), float(table[-1]))
    idx = torch.searchsorted(table, s.contiguous())
    return idx.clamp(0, len(table) - 1)


class FactorizedDensity(nn.Module):
    """Per-channel learned cumulative density for the hyper-latent.

    A stack of monotone scalar maps (softplus-positive matrices, additive
    biases, tanh gating) composed into a CDF via a final sigmoid.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            m = nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init))
            self._matrices.append(m)
            b = nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5))
            self._biases.append(b)
            if i < len(self.filters):
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, n] -> [C, 1, n]
        out = x
        for i, matrix in enumerate(self._matrices):
            out = torch.matmul(torch.nn.functional.softplus(matrix), out) + self._biases[i]
            if i < len(self._factors):
                out = out + torch.tanh(self._factors[i]) * torch.tanh(out)
        return out

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """CDF values for per-channel points ``x`` of shape [C, n]."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def forward(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Likelihood of each element of ``z_hat`` ([B, C, H, W])."""
        b, c, h, w = z_hat.shape
        v = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lo = self._logits(v - 0.5)
        hi = self._logits(v + 0.5)
        # Evaluate both sigmoids on the side where they are small to avoid
        # catastrophic cancellation in the tails.
        sign = -torch.sign(lo + hi).detach()
        p = torch.abs(torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo))
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return lower_bound(p, LIKELIHOOD_FLOOR)


@dataclass
class CdfTableSet:
    """Quantized per-table CDFs for the range coder.

    ``cdfs[t]`` has ``lengths[t] + 1`` entries from 0 to 2**precision, one
    slot per symbol with the last slot reserved for out-of-range escapes.
    ``offsets[t]`` is the integer value of slot 0.
    """

    cdfs: list[np.ndarray]
    offsets: np.ndarray
    precision: int = PRECISION
    lengths: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.cdfs = [np.asarray(c, dtype=np.uint32) for c in self.cdfs]
        self.offsets = np.asarray(self.offsets, dtype=np.int32)
        if len(self.cdfs) != len(self.offsets):
            raise ValueError("one offset per table required")
        self.lengths = np.array([len(c) - 1 for c in self.cdfs], dtype=np.int64)
        total = 1 << self.precision
        for t, c in enumerate(self.cdfs):
            if len(c) < 3:
                raise ValueError(f"table {t}: needs at least one symbol plus escape")
            if c[0] != 0 or c[-1] != total:
                raise ValueError(f"table {t}: CDF must span 0..{total}")
            if np.any(np.diff(c.astype(np.int64)) <= 0):
                raise ValueError(f"table {t}: CDF must be strictly increasing")

    @property
    def num_tables(self) -> int:
        return len(self.cdfs)

    def freqs(self, t: int) -> np.ndarray:
        return np.diff(self.cdfs[t].astype(np.int64))


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to 2**precision, every slot >= 1.

    Largest-remainder apportionment of the normalized masses, then unit
    stealing from the currently largest slots to clear empty ones.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or len(pmf) < 2:
        raise ValueError("pmf must be 1-D with at least two slots")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise ValueError("pmf must be finite and nonnegative")
    total = pmf.sum()
    if total <= 0:
        raise ValueError("pmf must have positive mass")
    scale = 1 << precision
    raw = pmf / total * scale
    freqs = np.floor(raw).astype(np.int64)
    remainder = raw - freqs
    short = scale - int(freqs.sum())
    if short > 0:
        order = np.argsort(-remainder, kind="stable")
        freqs[order[:short]] += 1
    zeros = np.flatnonzero(freqs == 0)
    if zeros.size:
        # Raise empty slots to one unit, spreading the donations over the
        # largest slots so no single donor absorbs all the error.
        donors = np.argsort(-freqs, kind="stable")
        cursor = 0
        for i in zeros:
            for _ in range(len(donors)):
                d = donors[cursor % len(donors)]
                cursor += 1
                if freqs[d] > 1:
                    freqs[d] -= 1
                    break
            else:
                raise ValueError("pmf has too many slots for the precision")
            freqs[i] += 1
    return freqs


def _freqs_to_cdf(freqs: np.ndarray) -> np.ndarray:
    return np.concatenate(([0], np.cumsum(freqs))).astype(np.uint32)


def _norm_cdf(t: np.ndarray) -> np.ndarray:
    return 0.5 * scipy.special.erfc(-t / _SQRT2)


def build_gaussian_tables(precision: int = PRECISION) -> CdfTableSet:
    """One table per scale bin: integer-bin Gaussian plus an escape slot."""
    cdfs = []
    offsets = []
    for sigma in scale_table():
        half = int(min(SUPPORT_CAP, math.ceil(SUPPORT_SIGMAS * sigma)))
        ks = np.arange(-half, half + 1, dtype=np.float64)
        upper = _norm_cdf((ks + 0.5) / sigma)
        lower = _norm_cdf((ks - 0.5) / sigma)
        pmf = np.maximum(upper - lower, 0.0)
        escape = max(1.0 - pmf.sum(), 0.0)
        freqs = quantize_pmf(np.concatenate((pmf, [escape])), precision)
        cdfs.append(_freqs_to_cdf(freqs))
        offsets.append(-half)
    return CdfTableSet(cdfs, np.array(offsets), precision)


def _bisect_first_above(density: FactorizedDensity, target: float, span: int) -> np.ndarray:
    """Per channel, smallest integer k in [-span, span] with CDF(k - 0.5) > target."""
    c = density.channels
    lo = np.full(c, -span, dtype=np.int64)
    hi = np.full(c, span, dtype=np.int64)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        pts = torch.from_numpy(mid.astype(np.float64) - 0.5).unsqueeze(1)
        val = density.cdf(pts).squeeze(1).numpy()
        above = val > target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid + 1)
    return lo


def build_factorized_tables(density: FactorizedDensity, precision: int = PRECISION) -> CdfTableSet:
    """One table per hyper-latent channel from the learned density."""
    span = 1 << 14
    restore_float = next(density.parameters()).dtype == torch.float32
    density.double()
    try:
        with torch.no_grad():
            c = density.channels
            los = np.minimum(_bisect_first_above(density, TAIL_MASS, span) - 1, -2)
            his = np.maximum(_bisect_first_above(density, 1.0 - TAIL_MASS, span) + 1, 2)
            widths = his - los + 1
            n = int(widths.max())
            ks = los[:, None] + np.arange(n)[None, :]
            ks = np.minimum(ks, his[:, None]).astype(np.float64)
            upper = density.cdf(torch.from_numpy(ks + 0.5)).numpy()
            lower = density.cdf(torch.from_numpy(ks - 0.5)).numpy()
            cdfs = []
            for ch in range(c):
                w = int(widths[ch])
                pmf = np.maximum(upper[ch, :w] - lower[ch, :w], 0.0)
                escape = max(1.0 - pmf.sum(), 0.0)
                freqs = quantize_pmf(np.concatenate((pmf, [escape])), precision)
                cdfs.append(_freqs_to_cdf(freqs))
    finally:
        if restore_float:
            density.float()
    return CdfTableSet(cdfs, los, precision)


def build_cdf_tables(model, precision: int = PRECISION) -> CdfTableSet:
    """Dispatch: 'gaussian' for the scale-bin family, or a FactorizedDensity."""
    if model == "gaussian":
        return build_gaussian_tables(precision)
    if isinstance(model, FactorizedDensity):
        return build_factorized_tables(model, precision)
    raise ValueError(f"unsupported table source: {model!r}")
