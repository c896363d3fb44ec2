"""Corpus evaluation, rate-distortion reporting, and pipeline comparisons."""

from __future__ import annotations

import csv
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from . import coder, metrics
from .core import ImageTensor, load_image
from .transforms import LowLightCodec


class EnhancerError(RuntimeError):
    """Raised when an external enhancer executable fails."""


@dataclass
class RdPoint:
    image_id: str
    quality: int
    bpp: float
    psnr: float
    ms_ssim: float
    ms_ssim_db: float


CSV_FIELDS = ("image_id", "quality", "bpp", "psnr", "ms_ssim", "ms_ssim_db")


def write_image(img: ImageTensor, path: str | Path) -> None:
    """Write the unpadded pixels as an 8-bit image."""
    rgb = np.clip(img.cropped(), 0.0, 1.0).transpose(1, 2, 0)
    bgr = (rgb[:, :, ::-1] * 255.0).round().astype(np.uint8)
    if not cv2.imwrite(str(path), bgr):
        raise OSError(f"cannot write image: {path}")


def evaluate_pair(low: ImageTensor, gt: ImageTensor, model: LowLightCodec, image_id: str) -> RdPoint:
    """Compress the low-light image, decode, and score against ground truth."""
    container, _ = coder.compress(low, model)
    recon, _ = coder.decompress(container, model)
    ref = gt.cropped()
    out = recon.cropped()
    value = metrics.ms_ssim(ref, out)
    return RdPoint(
        image_id=image_id,
        quality=model.cfg.quality_index,
        bpp=metrics.bpp(container.nbytes, low.orig_h, low.orig_w),
        psnr=metrics.psnr(ref, out),
        ms_ssim=value,
        ms_ssim_db=metrics.ms_ssim_db(value),
    )


def _corpus_pairs(data_dir: Path) -> list[tuple[str, Path, Path]]:
    low_dir = data_dir / "low"
    gt_dir = data_dir / "gt"
    if low_dir.is_dir() and gt_dir.is_dir():
        entries = []
        for p in sorted(low_dir.iterdir()):
            if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".tif", ".tiff"}:
                gt = gt_dir / p.name
                if not gt.exists():
                    raise FileNotFoundError(f"missing ground-truth counterpart for {p.name}")
                entries.append((p.stem, p, gt))
        return entries
    entries = []
    for p in sorted(data_dir.iterdir()):
        if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".tif", ".tiff"}:
            entries.append((p.stem, p, p))
    return entries


def evaluate_corpus(data_dir: str | Path, models: dict[int, LowLightCodec]) -> list[RdPoint]:
    """Rate-distortion points for every image under every supplied quality."""
    entries = _corpus_pairs(Path(data_dir))
    if not entries:
        raise FileNotFoundError(f"no images under {data_dir}")
    points = []
    for quality in sorted(models):
        model = models[quality]
        for image_id, low_path, gt_path in entries:
            low = load_image(low_path)
            gt = load_image(gt_path)
            points.append(evaluate_pair(low, gt, model, image_id))
    return points


def mean_points(points: list[RdPoint]) -> list[RdPoint]:
    """Per-quality means over images, reported as synthetic 'mean' rows."""
    out = []
    for quality in sorted({p.quality for p in points}):
        group = [p for p in points if p.quality == quality]
        out.append(
            RdPoint(
                image_id="mean",
                quality=quality,
                bpp=float(np.mean([p.bpp for p in group])),
                psnr=float(np.mean([p.psnr for p in group])),
                ms_ssim=float(np.mean([p.ms_ssim for p in group])),
                ms_ssim_db=float(np.mean([p.ms_ssim_db for p in group])),
            )
        )
    return out


def write_report(points: list[RdPoint], path: str | Path) -> None:
    """CSV report that parses back to the same values via ``read_report``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for p in points:
            writer.writerow(
                [p.image_id, p.quality, repr(p.bpp), repr(p.psnr), repr(p.ms_ssim), repr(p.ms_ssim_db)]
            )


def read_report(path: str | Path) -> list[RdPoint]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_FIELDS:
            raise ValueError(f"unexpected report header: {header}")
        return [
            RdPoint(row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4]), float(row[5]))
            for row in reader
        ]


def plot_rd(points: list[RdPoint], path: str | Path) -> None:
    """PSNR-vs-bpp curve of the per-quality means."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    means = mean_points(points)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.bpp for p in means], [p.psnr for p in means], marker="o")
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class PipelineResult:
    image: ImageTensor
    bpp: float
    stage_order: tuple[str, ...]


def _run_enhancer(exe: str | Path, src: ImageTensor) -> ImageTensor:
    with tempfile.TemporaryDirectory(prefix="lumen-enh-") as tmp:
        inp = Path(tmp) / "in.png"
        outp = Path(tmp) / "out.png"
        write_image(src, inp)
        proc = subprocess.run([str(exe), str(inp), str(outp)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise EnhancerError(
                f"enhancer {exe} exited with status {proc.returncode}: {proc.stderr.strip()}"
            )
        if not outp.exists():
            raise EnhancerError(f"enhancer {exe} produced no output image")
        return load_image(outp)


def sequential_pipeline(
    x: ImageTensor,
    mode: str,
    codec_model: LowLightCodec,
    enhancer: str | Path,
) -> PipelineResult:
    """Compress-then-enhance or enhance-then-compress with an external tool.

    ``codec_model`` should be a compression-only model (no SNR conditioning)
    so the comparison isolates the ordering of the two operations.
    """
    if mode not in ("cbe", "ebc"):
        raise ValueError(f"mode must be 'cbe' or 'ebc', got {mode!r}")
    if mode == "cbe":
        container, _ = coder.compress(x, codec_model)
        decoded, _ = coder.decompress(container, codec_model)
        out = _run_enhancer(enhancer, decoded)
        order = ("compress", "enhance")
    else:
        enhanced = _run_enhancer(enhancer, x)
        container, _ = coder.compress(enhanced, codec_model)
        out, _ = coder.decompress(container, codec_model)
        order = ("enhance", "compress")
    return PipelineResult(
        image=out,
        bpp=metrics.bpp(container.nbytes, x.orig_h, x.orig_w),
        stage_order=order,
    )
