"""Two-stage training: rate-distortion pretrain, then joint enhancement."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .core import ImageTensor, load_image
from .transforms import LowLightCodec

# Rate-distortion tradeoffs for the eight quality indices, low to high rate.
QUALITY_LAMBDAS = (0.0001, 0.0002, 0.0004, 0.0008, 0.0016, 0.0028, 0.0064, 0.012)

# Iteration budgets: total published schedule and its pretrain prefix.
PRETRAIN_ITERS = 150_000
JOINT_ITERS = 750_000

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}

STAGES = ("pretrain", "joint", "guidance")


class TrainingError(RuntimeError):
    """Raised for non-finite losses or invalid training invocations."""


class TrainingStateError(TrainingError):
    """Raised when a stage is started without the weights it builds on."""


class IngestionError(ValueError):
    """Raised for unusable training directories or unpaired files."""


@dataclass
class TrainConfig:
    lambda_d: float = 0.0016
    lambda_g: float | None = None  # None: lambda_d / 10 in guidance stage; 0 disables
    batch_size: int = 8
    patch_size: int = 512
    lr: float = 1e-4
    lr_decay_iters: tuple[int, ...] = (500_000, 600_000, 700_000, 850_000)
    loss_cap: float | None = None  # None: cap_multiplier x EMA of accepted losses
    cap_multiplier: float = 5.0
    cap_ema_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.lambda_d <= 0:
            raise ValueError("lambda_d must be positive")
        if self.lambda_g is not None and self.lambda_g < 0:
            raise ValueError("lambda_g must be nonnegative")
        if self.batch_size < 1 or self.patch_size < 64:
            raise ValueError("batch_size must be >= 1 and patch_size >= 64")
        if self.patch_size % 64:
            raise ValueError("patch_size must be a multiple of 64")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if list(self.lr_decay_iters) != sorted(self.lr_decay_iters):
            raise ValueError("lr_decay_iters must be sorted")

    @classmethod
    def for_quality(cls, quality: int, **overrides) -> "TrainConfig":
        return cls(lambda_d=QUALITY_LAMBDAS[quality], **overrides)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Stepwise-halved learning rate: one halving per decay point reached."""
    halvings = sum(1 for s in cfg.lr_decay_iters if iteration >= s)
    return cfg.lr * 0.5**halvings


def _finite_or_raise(name: str, value: torch.Tensor) -> None:
    if not bool(torch.isfinite(value)):
        raise TrainingError(f"non-finite loss component: {name}")


def _rate_bits_per_pixel(p: torch.Tensor, num_pixels: int) -> torch.Tensor:
    return -torch.log2(p.double()).sum() / num_pixels


def rd_pretrain_loss(
    x_ref: torch.Tensor,
    x_hat: torch.Tensor,
    p_y: torch.Tensor,
    p_z: torch.Tensor,
    lambda_d: float,
) -> tuple[torch.Tensor, dict]:
    """Squared-error rate-distortion objective on the 8-bit amplitude scale.

    Components are accumulated in float64; the report's total is exactly
    ``lambda_d * distortion + rate_y + rate_z`` over the reported values.
    """
    num_pixels = x_ref.shape[0] * x_ref.shape[-2] * x_ref.shape[-1]
    distortion = ((x_hat.double() - x_ref.double()) * 255.0).pow(2).mean()
    rate_y = _rate_bits_per_pixel(p_y, num_pixels)
    rate_z = _rate_bits_per_pixel(p_z, num_pixels)
    for name, value in (("distortion", distortion), ("rate_y", rate_y), ("rate_z", rate_z)):
        _finite_or_raise(name, value)
    total = lambda_d * distortion + rate_y + rate_z
    report = {
        "distortion": distortion.item(),
        "rate_y": rate_y.item(),
        "rate_z": rate_z.item(),
        "guidance": 0.0,
        "loss": total.item(),
    }
    return total, report


def joint_loss(
    x_gt: torch.Tensor,
    x_hat: torch.Tensor,
    p_y: torch.Tensor,
    p_z: torch.Tensor,
    lambda_d: float,
) -> tuple[torch.Tensor, dict]:
    """Absolute-error objective against the clean reference image."""
    num_pixels = x_gt.shape[0] * x_gt.shape[-2] * x_gt.shape[-1]
    distortion = ((x_hat.double() - x_gt.double()) * 255.0).abs().mean()
    rate_y = _rate_bits_per_pixel(p_y, num_pixels)
    rate_z = _rate_bits_per_pixel(p_z, num_pixels)
    for name, value in (("distortion", distortion), ("rate_y", rate_y), ("rate_z", rate_z)):
        _finite_or_raise(name, value)
    total = lambda_d * distortion + rate_y + rate_z
    report = {
        "distortion": distortion.item(),
        "rate_y": rate_y.item(),
        "rate_z": rate_z.item(),
        "guidance": 0.0,
        "loss": total.item(),
    }
    return total, report


def guidance_loss(
    y0_teacher: torch.Tensor,
    y0: torch.Tensor,
    y_teacher: torch.Tensor,
    y: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute gap to detached clean-image latents, both levels."""
    t0 = y0_teacher.detach().double()
    t1 = y_teacher.detach().double()
    return (y0.double() - t0).abs().mean() + (y.double() - t1).abs().mean()


@dataclass
class StepReport:
    iteration: int
    stage: str
    loss: float
    distortion: float
    rate_y: float
    rate_z: float
    guidance: float
    lr: float
    skipped: bool


class MetricsLog:
    """Append-only CSV of per-step training metrics."""

    FIELDS = ("iteration", "stage", "loss", "distortion", "rate_y", "rate_z", "guidance", "lr", "skipped")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(self.FIELDS)
            self._fh.flush()

    def append(self, report: StepReport) -> None:
        self._writer.writerow(
            [
                report.iteration,
                report.stage,
                repr(report.loss),
                repr(report.distortion),
                repr(report.rate_y),
                repr(report.rate_z),
                repr(report.guidance),
                repr(report.lr),
                int(report.skipped),
            ]
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class Trainer:
    """Runs optimization steps for one stage with loss-capped skipping."""

    def __init__(
        self,
        model: LowLightCodec,
        cfg: TrainConfig,
        stage: str,
        log: MetricsLog | None = None,
    ):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if stage != "pretrain" and model.training_stage is None:
            raise TrainingStateError(f"stage {stage!r} requires weights from a pretrain stage")
        self.model = model
        self.cfg = cfg
        self.stage = stage
        self.log = log
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.iteration = 0
        self._loss_ema: float | None = None
        if stage == "guidance":
            self.lambda_g = cfg.lambda_d / 10.0 if cfg.lambda_g is None else cfg.lambda_g
        else:
            self.lambda_g = 0.0

    def _cap(self) -> float | None:
        if self.cfg.loss_cap is not None:
            return self.cfg.loss_cap
        if self._loss_ema is None:
            return None
        return self.cfg.cap_multiplier * self._loss_ema

    def step(self, low: torch.Tensor, gt: torch.Tensor) -> StepReport:
        """One optimization step on a batch; may skip on a loss spike."""
        model = self.model
        model.train()
        lr = lr_at(self.iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        use_snr = self.stage != "pretrain"
        out = model(low, mode="noise", use_snr=use_snr)
        if self.stage == "pretrain":
            total, report = rd_pretrain_loss(low, out["x_hat"], out["p_y"], out["p_z"], self.cfg.lambda_d)
        else:
            total, report = joint_loss(gt, out["x_hat"], out["p_y"], out["p_z"], self.cfg.lambda_d)
            if self.stage == "guidance" and self.lambda_g > 0:
                t0, t1 = model.teacher_latents(gt)
                s = guidance_loss(t0, out["y0"], t1, out["y"])
                _finite_or_raise("guidance", s)
                total = total + self.lambda_g * s
                report["guidance"] = s.item()
                report["loss"] = total.item()

        cap = self._cap()
        skipped = cap is not None and report["loss"] > cap
        if not skipped:
            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()
            ema = self.cfg.cap_ema_decay
            if self._loss_ema is None:
                self._loss_ema = report["loss"]
            else:
                self._loss_ema = ema * self._loss_ema + (1.0 - ema) * report["loss"]

        sr = StepReport(
            iteration=self.iteration,
            stage=self.stage,
            lr=lr,
            skipped=skipped,
            **report,
        )
        self.iteration += 1
        if self.log is not None:
            self.log.append(sr)
        return sr


def _list_images(folder: Path) -> list[str]:
    return sorted(p.name for p in folder.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def _random_crop(
    low: ImageTensor,
    gt: ImageTensor,
    patch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    a, b = low.cropped(), gt.cropped()
    if a.shape != b.shape:
        raise IngestionError(f"paired images disagree in size: {a.shape} vs {b.shape}")
    h, w = a.shape[1:]
    if h < patch or w < patch:
        pad_h, pad_w = max(0, patch - h), max(0, patch - w)
        a = np.pad(a, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        b = np.pad(b, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        h, w = a.shape[1:]
    i = int(rng.integers(0, h - patch + 1))
    j = int(rng.integers(0, w - patch + 1))
    return (
        a[:, i : i + patch, j : j + patch].copy(),
        b[:, i : i + patch, j : j + patch].copy(),
    )


def iterate_pairs(
    data_dir: str | Path,
    patch: int,
    seed: int,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless co-located random crops of (low, ground-truth) pairs.

    ``data_dir`` either holds ``low/`` and ``gt/`` subfolders with matching
    filenames, or is a flat folder of images used as their own targets.
    """
    root = Path(data_dir)
    low_dir = root / "low"
    gt_dir = root / "gt"
    paired = low_dir.is_dir()
    if paired:
        if not gt_dir.is_dir():
            raise IngestionError(f"{root} has low/ but no gt/ folder")
        names = _list_images(low_dir)
        if not names:
            raise IngestionError(f"no images under {low_dir}")
        for name in names:
            if not (gt_dir / name).exists():
                raise IngestionError(f"missing ground-truth counterpart for {name}")
        extra = set(_list_images(gt_dir)) - set(names)
        if extra:
            raise IngestionError(f"missing low-light counterpart for {sorted(extra)[0]}")
    else:
        if not root.is_dir():
            raise IngestionError(f"not a directory: {root}")
        names = _list_images(root)
        if not names:
            raise IngestionError(f"no images under {root}")

    cache: dict[str, tuple[ImageTensor, ImageTensor]] = {}
    rng = np.random.default_rng(seed)
    while True:
        for idx in rng.permutation(len(names)):
            name = names[idx]
            if name not in cache:
                if paired:
                    cache[name] = (load_image(low_dir / name), load_image(gt_dir / name))
                else:
                    img = load_image(root / name)
                    cache[name] = (img, img)
            low, gt = cache[name]
            yield _random_crop(low, gt, patch, rng)


def batches(
    pairs: Iterator[tuple[np.ndarray, np.ndarray]],
    batch_size: int,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Stack single-pair crops into [B, 3, P, P] float batches."""
    while True:
        lows, gts = zip(*(next(pairs) for _ in range(batch_size)))
        yield (
            torch.from_numpy(np.stack(lows)),
            torch.from_numpy(np.stack(gts)),
        )


def train_model(
    model: LowLightCodec,
    cfg: TrainConfig,
    stage: str,
    data_dir: str | Path,
    iters: int,
    seed: int,
    log_path: str | Path | None = None,
) -> LowLightCodec:
    """Drive one stage end to end and rebuild the coding tables."""
    torch.manual_seed(seed)
    log = MetricsLog(log_path) if log_path is not None else None
    trainer = Trainer(model, cfg, stage, log=log)
    feed = batches(iterate_pairs(data_dir, cfg.patch_size, seed), cfg.batch_size)
    try:
        for _ in range(iters):
            low, gt = next(feed)
            trainer.step(low, gt)
    finally:
        if log is not None:
            log.close()
    model.training_stage = "pretrain" if stage == "pretrain" else "joint"
    model.update_tables()
    return model
