"""Command-line entry points: encode, decode, train, eval, pipeline."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import coder, evaluate, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import load_image
from .training import TrainConfig, train_model
from .transforms import LowLightCodec, ModelConfig

# Domain failures a user can cause and fix; anything else is a bug and may
# traceback.  ValueError covers the argument errors raised across the
# package (container parsing, metric preconditions, corpus ingestion).
_USER_ERRORS = (
    ValueError,
    OSError,
    coder.DecodeError,
    coder.CoderStateError,
    CheckpointError,
    training.TrainingError,
    evaluate.EnhancerError,
)


def _add_encode(sub) -> None:
    p = sub.add_parser("encode", help="compress an image to a bitstream file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--quality", type=int, default=None, help="override checkpoint quality index")
    p.add_argument("--ckpt", required=True)


def _add_decode(sub) -> None:
    p = sub.add_parser("decode", help="decompress a bitstream file to a PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ckpt", required=True)


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=training.STAGES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--quality", type=int, default=4)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--init-from", default=None, help="checkpoint to continue from")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--log", default=None, help="CSV metrics log path")


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="rate-distortion evaluation over a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint path (repeatable)")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--plot", default=None, help="optional RD plot path")


def _add_pipeline(sub) -> None:
    p = sub.add_parser("pipeline", help="sequential codec/enhancer comparison")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", choices=("cbe", "ebc"), required=True)
    p.add_argument("--enhancer", required=True, help="executable taking <in.png> <out.png>")
    p.add_argument("--ckpt", required=True)


def _cmd_encode(args) -> int:
    model = load_checkpoint(args.ckpt)
    if args.quality is not None and args.quality != model.cfg.quality_index:
        print(
            f"error: checkpoint was trained for quality {model.cfg.quality_index}, "
            f"not {args.quality}",
            file=sys.stderr,
        )
        return 2
    img = load_image(args.input)
    container, _ = coder.compress(img, model)
    Path(args.output).write_bytes(container.pack())
    return 0


def _cmd_decode(args) -> int:
    model = load_checkpoint(args.ckpt)
    container = coder.BitstreamContainer.unpack(Path(args.input).read_bytes())
    img, _ = coder.decompress(container, model)
    evaluate.write_image(img, args.output)
    return 0


def _cmd_train(args) -> int:
    if args.init_from:
        model = load_checkpoint(args.init_from)
    else:
        model = LowLightCodec(
            ModelConfig(
                stage0_channels=args.channels,
                latent_channels=args.channels,
                hyper_channels=args.channels,
                quality_index=args.quality,
            )
        )
    cfg = TrainConfig.for_quality(args.quality, batch_size=args.batch, patch_size=args.patch)
    iters = args.iters
    if iters is None:
        iters = training.PRETRAIN_ITERS if args.stage == "pretrain" else training.JOINT_ITERS
    train_model(model, cfg, args.stage, args.data, iters, args.seed, log_path=args.log)
    save_checkpoint(model, args.ckpt_out)
    return 0


def _cmd_eval(args) -> int:
    models = {}
    for path in args.ckpt:
        model = load_checkpoint(path)
        models[model.cfg.quality_index] = model
    points = evaluate.evaluate_corpus(args.data, models)
    rows = points + evaluate.mean_points(points)
    evaluate.write_report(rows, args.out)
    if args.plot:
        evaluate.plot_rd(points, args.plot)
    return 0


def _cmd_pipeline(args) -> int:
    model = load_checkpoint(args.ckpt)
    img = load_image(args.input)
    result = evaluate.sequential_pipeline(img, args.mode, model, args.enhancer)
    evaluate.write_image(result.image, args.output)
    print(f"order={'+'.join(result.stage_order)} bpp={result.bpp:.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lumen", description="joint low-light compression and enhancement")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_encode(sub)
    _add_decode(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_pipeline(sub)
    args = parser.parse_args(argv)
    handlers = {
        "encode": _cmd_encode,
        "decode": _cmd_decode,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "pipeline": _cmd_pipeline,
    }
    try:
        return handlers[args.command](args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
