"""Versioned weight archives with full key/shape validation."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .entropy import CdfTableSet
from .transforms import LowLightCodec, ModelConfig

FORMAT_TAG = "lumen-ckpt-v1"


class CheckpointError(RuntimeError):
    """Raised for unreadable, mistagged, or structurally invalid archives."""


def _pack_tables(prefix: str, tables: CdfTableSet, out: dict) -> None:
    out[f"{prefix}/cdf"] = np.concatenate(tables.cdfs).astype(np.uint32)
    out[f"{prefix}/len"] = np.array([len(c) for c in tables.cdfs], dtype=np.int64)
    out[f"{prefix}/offset"] = tables.offsets.astype(np.int32)
    out[f"{prefix}/precision"] = np.array(tables.precision, dtype=np.int64)


def _unpack_tables(prefix: str, archive) -> CdfTableSet:
    flat = archive[f"{prefix}/cdf"]
    lens = archive[f"{prefix}/len"]
    bounds = np.cumsum(lens)[:-1]
    cdfs = np.split(flat, bounds)
    return CdfTableSet(cdfs, archive[f"{prefix}/offset"], int(archive[f"{prefix}/precision"]))


def save_checkpoint(model: LowLightCodec, path: str | Path, stage: str | None = None) -> None:
    """Write config, weights, and any built CDF tables to ``path``."""
    meta = {
        "config": asdict(model.cfg),
        "stage": stage if stage is not None else model.training_stage,
        "use_snr": model.use_snr,
    }
    out: dict[str, np.ndarray] = {
        "format": np.array(FORMAT_TAG),
        "meta": np.array(json.dumps(meta)),
    }
    for key, value in model.state_dict().items():
        out[f"param/{key}"] = value.detach().cpu().numpy()
    if model.tables_ready:
        _pack_tables("tables/y", model.gaussian_tables, out)
        _pack_tables("tables/z", model.factorized_tables, out)
    np.savez_compressed(str(path), **out)


def load_checkpoint(path: str | Path) -> LowLightCodec:
    """Rebuild a model from an archive, validating every key and shape."""
    try:
        archive = np.load(str(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        keys = set(archive.files)
        if "format" not in keys or str(archive["format"]) != FORMAT_TAG:
            raise CheckpointError(f"not a recognized checkpoint: {path}")
        meta = json.loads(str(archive["meta"]))
        cfg = ModelConfig(**meta["config"])
        model = LowLightCodec(cfg)

        expected = {f"param/{k}": tuple(v.shape) for k, v in model.state_dict().items()}
        stored = {k for k in keys if k.startswith("param/")}
        problems = []
        for key, shape in expected.items():
            if key not in stored:
                problems.append(f"missing {key}")
            elif tuple(archive[key].shape) != shape:
                problems.append(f"{key}: shape {archive[key].shape} != expected {shape}")
        for key in sorted(stored - set(expected)):
            problems.append(f"unexpected {key}")
        if problems:
            raise CheckpointError("invalid checkpoint: " + "; ".join(problems))

        state = {k[len("param/") :]: torch.from_numpy(np.array(archive[k])) for k in expected}
        model.load_state_dict(state)
        model.training_stage = meta.get("stage")
        model.use_snr = bool(meta.get("use_snr", True))
        if "tables/y/cdf" in keys:
            model.gaussian_tables = _unpack_tables("tables/y", archive)
            model.factorized_tables = _unpack_tables("tables/z", archive)
    return model
