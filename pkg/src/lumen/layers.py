"""Building-block layers for the analysis/synthesis transforms."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class _LowerBoundFn(torch.autograd.Function):
    """clamp(x, min=bound) whose gradient passes through when moving up."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad_output < 0)
        return grad_output * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


class NonNegativeParam:
    """Square-root reparameterization keeping a parameter above ``minimum``."""

    def __init__(self, minimum: float = 0.0):
        self.pedestal = 2**-18
        self.bound = (minimum + self.pedestal) ** 0.5

    def init(self, value: torch.Tensor) -> torch.Tensor:
        return torch.sqrt(torch.clamp(value + self.pedestal, min=self.pedestal))

    def __call__(self, raw: torch.Tensor) -> torch.Tensor:
        return lower_bound(raw, self.bound) ** 2 - self.pedestal


class GDN(nn.Module):
    """Generalized divisive normalization (inverse form for the decoder)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self._beta_param = NonNegativeParam(minimum=1e-6)
        self._gamma_param = NonNegativeParam()
        beta = torch.ones(channels)
        gamma = 0.1 * torch.eye(channels)
        self.beta = nn.Parameter(self._beta_param.init(beta))
        self.gamma = nn.Parameter(self._gamma_param.init(gamma))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        beta = self._beta_param(self.beta)
        gamma = self._gamma_param(self.gamma).reshape(c, c, 1, 1)
        norm = F.conv2d(x**2, gamma, beta)
        if self.inverse:
            return x * torch.sqrt(norm)
        return x * torch.rsqrt(norm)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def conv1x1(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride)


def subpel_conv3x3(in_ch: int, out_ch: int, r: int = 2) -> nn.Sequential:
    """3x3 conv into pixel shuffle, upsampling by ``r``."""
    return nn.Sequential(nn.Conv2d(in_ch, out_ch * r**2, kernel_size=3, padding=1), nn.PixelShuffle(r))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.skip = conv1x1(in_ch, out_ch) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.conv1(x))
        out = F.leaky_relu(self.conv2(out))
        identity = x if self.skip is None else self.skip(x)
        return out + identity


class ResidualBlockWithStride(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 2):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch, stride=stride)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.gdn = GDN(out_ch)
        self.skip = conv1x1(in_ch, out_ch, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.conv1(x))
        out = self.conv2(out)
        out = self.gdn(out)
        return out + self.skip(x)


class ResidualBlockUpsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, r: int = 2):
        super().__init__()
        self.subpel = subpel_conv3x3(in_ch, out_ch, r)
        self.conv = conv3x3(out_ch, out_ch)
        self.igdn = GDN(out_ch, inverse=True)
        self.skip = subpel_conv3x3(in_ch, out_ch, r)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.subpel(x))
        out = self.conv(out)
        out = self.igdn(out)
        return out + self.skip(x)


class _ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        half = channels // 2
        self.body = nn.Sequential(
            conv1x1(channels, half),
            nn.ReLU(),
            conv3x3(half, half),
            nn.ReLU(),
            conv1x1(half, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.body(x))


class AttentionBlock(nn.Module):
    """Spatial gating block: trunk modulated by a sigmoid mask branch."""

    def __init__(self, channels: int):
        super().__init__()
        self.trunk = nn.Sequential(*[_ResidualUnit(channels) for _ in range(3)])
        self.mask = nn.Sequential(
            *[_ResidualUnit(channels) for _ in range(3)],
            conv1x1(channels, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


class MaskedConv2d(nn.Conv2d):
    """Raster-causal convolution: weights at and after the center are zeroed.

    Output at (i, j) therefore depends only on inputs strictly before (i, j)
    in raster order.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 5):
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        pad = kernel_size // 2
        super().__init__(in_ch, out_ch, kernel_size, padding=pad)
        mask = torch.ones_like(self.weight)
        mask[:, :, pad, pad:] = 0.0
        mask[:, :, pad + 1 :, :] = 0.0
        self.register_buffer("mask", mask)

    def masked_weight(self) -> torch.Tensor:
        return self.weight * self.mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.masked_weight(), self.bias, padding=self.padding[0])
