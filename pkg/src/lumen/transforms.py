"""Analysis/synthesis transforms and the joint codec model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .entropy import (
    SCALE_MIN,
    FactorizedDensity,
    build_factorized_tables,
    build_gaussian_tables,
    gaussian_likelihood,
    quantize,
    scale_table,
)
from .layers import (
    AttentionBlock,
    MaskedConv2d,
    ResidualBlock,
    ResidualBlockUpsample,
    ResidualBlockWithStride,
    conv1x1,
    conv3x3,
    lower_bound,
    subpel_conv3x3,
)
from .snr import SnrLevel, snr_condition_maps


@dataclass
class ModelConfig:
    """Channel widths and operating point of the codec."""

    stage0_channels: int = 64  # features at 1/4 resolution
    latent_channels: int = 64  # coded latent at 1/16 resolution
    hyper_channels: int = 64  # hyper-latent at 1/64 resolution
    quality_index: int = 4
    snr_kernel: int = 3
    attn_tokens: int = 1024

    def __post_init__(self) -> None:
        for name in ("stage0_channels", "latent_channels", "hyper_channels"):
            if getattr(self, name) < 8:
                raise ValueError(f"{name} must be >= 8")
        if not 0 <= self.quality_index <= 7:
            raise ValueError(f"quality_index must be in 0..7, got {self.quality_index}")


class FeatureAdapt(nn.Module):
    """Per-element modulation of latents by SNR features; identity at init.

    The multiplicative head maps through 2*sigmoid so zero weights give a
    gain of exactly 1; the additive head is zero-initialized.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.scale_head = nn.Sequential(conv3x3(channels, channels), nn.LeakyReLU(), conv3x3(channels, channels))
        self.shift_head = nn.Sequential(conv3x3(channels, channels), nn.LeakyReLU(), conv3x3(channels, channels))
        nn.init.zeros_(self.scale_head[-1].weight)
        nn.init.zeros_(self.scale_head[-1].bias)
        nn.init.zeros_(self.shift_head[-1].weight)
        nn.init.zeros_(self.shift_head[-1].bias)

    def gain(self, cond: torch.Tensor) -> torch.Tensor:
        return 2.0 * torch.sigmoid(self.scale_head(cond))

    def forward(self, feat: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return feat * self.gain(cond) + self.shift_head(cond)


class EntropyParameters(nn.Module):
    """Conditional Gaussian parameters from hyper and context features."""

    def __init__(self, latent_channels: int):
        super().__init__()
        m = latent_channels
        self.net = nn.Sequential(
            conv1x1(4 * m, 10 * m // 3),
            nn.LeakyReLU(),
            conv1x1(10 * m // 3, 8 * m // 3),
            nn.LeakyReLU(),
            conv1x1(8 * m // 3, 2 * m),
        )

    def forward(self, hyper: torch.Tensor, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        params = self.net(torch.cat((hyper, ctx), dim=1))
        means, raw_scales = params.chunk(2, dim=1)
        scales = lower_bound(F.softplus(raw_scales), SCALE_MIN)
        return means, scales


def _analysis_stage0(n: int) -> nn.Sequential:
    return nn.Sequential(
        ResidualBlockWithStride(3, n),
        ResidualBlock(n, n),
        ResidualBlockWithStride(n, n),
        ResidualBlock(n, n),
    )


def _analysis_stage1(n: int, m: int) -> nn.Sequential:
    return nn.Sequential(
        AttentionBlock(n),
        ResidualBlockWithStride(n, n),
        ResidualBlock(n, n),
        conv3x3(n, m, stride=2),
        AttentionBlock(m),
    )


def _hyper_analysis(m: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        conv3x3(m, k),
        nn.LeakyReLU(),
        conv3x3(k, k),
        nn.LeakyReLU(),
        conv3x3(k, k, stride=2),
        nn.LeakyReLU(),
        conv3x3(k, k),
        nn.LeakyReLU(),
        conv3x3(k, k, stride=2),
    )


def _hyper_synthesis(m: int, k: int) -> nn.Sequential:
    k2 = k * 3 // 2
    return nn.Sequential(
        subpel_conv3x3(k, k, 2),
        nn.LeakyReLU(),
        conv3x3(k, k2),
        nn.LeakyReLU(),
        subpel_conv3x3(k2, k2, 2),
        nn.LeakyReLU(),
        conv3x3(k2, 2 * m),
    )


def _synthesis(n: int, m: int) -> nn.Sequential:
    return nn.Sequential(
        AttentionBlock(m),
        ResidualBlock(m, m),
        ResidualBlockUpsample(m, n),
        ResidualBlock(n, n),
        ResidualBlockUpsample(n, n),
        AttentionBlock(n),
        ResidualBlock(n, n),
        ResidualBlockUpsample(n, n),
        ResidualBlock(n, n),
        subpel_conv3x3(n, 3, 2),
    )


class LowLightCodec(nn.Module):
    """Joint compression/enhancement codec with SNR-conditioned analysis.

    Encoding applies two analysis stages with SNR-guided feature adaptation
    between them; the decoder sees only the quantized latents.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, m, k = cfg.stage0_channels, cfg.latent_channels, cfg.hyper_channels
        self.g_a0 = _analysis_stage0(n)
        self.g_a1 = _analysis_stage1(n, m)
        self.h_a = _hyper_analysis(m, k)
        self.h_s = _hyper_synthesis(m, k)
        self.g_s = _synthesis(n, m)
        self.snr0 = SnrLevel(n, max_tokens=cfg.attn_tokens)
        self.snr1 = SnrLevel(m, max_tokens=cfg.attn_tokens)
        self.adapt0 = FeatureAdapt(n)
        self.adapt1 = FeatureAdapt(m)
        self.ctx = MaskedConv2d(m, 2 * m, 5)
        self.params = EntropyParameters(m)
        self.z_density = FactorizedDensity(k)
        self.register_buffer("scales", torch.from_numpy(scale_table().astype(np.float32)))
        self.use_snr = True
        self.training_stage: str | None = None
        self.gaussian_tables = None
        self.factorized_tables = None

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    @property
    def hyper_channels(self) -> int:
        return self.cfg.hyper_channels

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] input, got {tuple(x.shape)}")
        if x.shape[2] % 64 or x.shape[3] % 64:
            raise ValueError(f"input dims must be multiples of 64, got {tuple(x.shape[2:])}")

    def analyze(self, x: torch.Tensor, use_snr: bool | None = None) -> tuple[torch.Tensor, dict]:
        """Run both analysis stages; returns the latent and intermediates."""
        self._check_input(x)
        if use_snr is None:
            use_snr = self.use_snr
        aux: dict = {}
        y0_raw = self.g_a0(x)
        if use_snr:
            s = snr_condition_maps(x, self.cfg.snr_kernel).to(x.dtype)
            s0 = F.interpolate(s, size=y0_raw.shape[-2:], mode="bilinear", align_corners=False)
            cond0 = self.snr0(y0_raw, s0)
            y0 = self.adapt0(y0_raw, cond0)
        else:
            y0 = y0_raw
        y1_raw = self.g_a1(y0)
        if use_snr:
            s1 = F.interpolate(s, size=y1_raw.shape[-2:], mode="bilinear", align_corners=False)
            cond1 = self.snr1(y1_raw, s1)
            y = self.adapt1(y1_raw, cond1)
        else:
            y = y1_raw
        aux.update(y0_raw=y0_raw, y0=y0, y1_raw=y1_raw, y=y)
        return y, aux

    def synthesize(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Decode latents to an image, clamped to [0, 1]."""
        return self.g_s(y_hat).clamp(0.0, 1.0)

    def context_predict(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Raster-causal context features over the full latent grid."""
        return self.ctx(y_hat)

    def entropy_parameters(self, hyper: torch.Tensor, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.params(hyper, ctx)

    def teacher_latents(self, x_gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Latents of the clean image through the bare analysis stack."""
        with torch.no_grad():
            t0 = self.g_a0(x_gt)
            t1 = self.g_a1(t0)
        return t0, t1

    def forward(
        self,
        x: torch.Tensor,
        mode: str = "noise",
        use_snr: bool | None = None,
        generator: torch.Generator | None = None,
    ) -> dict:
        """Full training/estimation pass.

        In ``round`` mode the context features come from a single full-grid
        pass over rounded latents, which approximates the sequential
        decode-time prediction; coded results use the sequential path in
        the coder module.
        """
        y, aux = self.analyze(x, use_snr=use_snr)
        z = self.h_a(y)
        z_hat = quantize(z, "noise" if mode == "noise" else "round", generator=generator)
        p_z = self.z_density(z_hat)
        hyper = self.h_s(z_hat)
        if mode == "noise":
            y_hat = quantize(y, "noise", generator=generator)
            ctx = self.context_predict(y_hat)
            means, scales = self.entropy_parameters(hyper, ctx)
        elif mode in ("round", "ste"):
            ctx = self.context_predict(quantize(y, "round"))
            means, scales = self.entropy_parameters(hyper, ctx)
            y_hat = quantize(y, mode, means=means)
        else:
            raise ValueError(f"unknown mode: {mode!r}")
        p_y = gaussian_likelihood(y_hat, means, scales)
        x_hat = self.g_s(y_hat)
        return {
            "x_hat": x_hat,
            "y_hat": y_hat,
            "z_hat": z_hat,
            "p_y": p_y,
            "p_z": p_z,
            "means": means,
            "scales": scales,
            **aux,
            "z": z,
        }

    def update_tables(self) -> None:
        """(Re)build the quantized CDF tables from the current weights."""
        self.gaussian_tables = build_gaussian_tables()
        self.factorized_tables = build_factorized_tables(self.z_density)

    @property
    def tables_ready(self) -> bool:
        return self.gaussian_tables is not None and self.factorized_tables is not None
