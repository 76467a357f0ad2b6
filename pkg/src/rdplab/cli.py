"""Command-line entry points.

Commands: train-rd, freeze, finetune-pd, sweep, encode, decode, evaluate,
analyze, plot, run. Exit codes: 0 success, 1 validation error, 2 runtime
failure. All outputs are files under the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import bitstream as bs, harness, training
from .codec import load_checkpoint
from .errors import ConfigError, RdpLabError
from .imageio import load_image, save_image
from .metrics import METRIC_CSV_HEADER, evaluate_image

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rdplab", description=__doc__)
    parser.add_argument("--config", type=Path, default=Path("experiment.json"))
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument(
        "--output-dir", type=Path, default=None, help="override config output_dir"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", help="full experiment: all stages, all rate points")
    sub.add_parser("train-rd", help="rate-distortion training for every lambda")
    sub.add_parser("freeze", help="freeze rate-determining sub-networks")

    p = sub.add_parser("finetune-pd", help="decoder fine-tune for one gamma")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--rate-index", type=int, default=0)

    sub.add_parser("sweep", help="gamma sweep at every rate point")

    p = sub.add_parser("encode", help="encode an image to a bitstream")
    p.add_argument("image", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("decode", help="decode a bitstream to an image")
    p.add_argument("bitstream", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("evaluate", help="per-image metric reports for a checkpoint")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--rate-index", type=int, default=0)

    sub.add_parser("analyze", help="curves, knees, CSV/JSON exports")
    sub.add_parser("plot", help="perception-distortion plots")
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    out = args.output_dir or os.environ.get(harness.OUTPUT_DIR_ENV)
    if out is not None:
        from dataclasses import replace

        cfg = replace(cfg, output_dir=Path(out).resolve())
    return cfg


def _cmd_run(args) -> int:
    exp = harness.Experiment(_load_config(args))
    exp.run()
    print(f"experiment complete: {exp.out / harness.MANIFEST_NAME}")
    return 0


def _cmd_train_rd(args) -> int:
    exp = harness.Experiment(_load_config(args))
    for i in range(len(exp.cfg.lambdas)):
        exp.ensure_rd(i)
        print(f"rate point {i}: rd checkpoint {exp.rd_ckpt(i)}")
    return 0


def _cmd_freeze(args) -> int:
    exp = harness.Experiment(_load_config(args))
    for i in range(len(exp.cfg.lambdas)):
        _, _, fhash = exp.ensure_frozen(i)
        print(f"rate point {i}: frozen_hash {fhash}")
    return 0


def _cmd_finetune_pd(args) -> int:
    exp = harness.Experiment(_load_config(args))
    if args.gamma < 0:
        raise ConfigError("--gamma must be >= 0")
    exp.ensure_pd(args.rate_index, args.gamma)
    print(f"fine-tuned checkpoint {exp.pd_ckpt(args.rate_index, args.gamma)}")
    return 0


def _cmd_sweep(args) -> int:
    exp = harness.Experiment(_load_config(args))
    for i in range(len(exp.cfg.lambdas)):
        result = exp.ensure_sweep(i)
        print(f"rate point {i}: curve of {len(result.curve.points)} points")
    return 0


def _cmd_encode(args) -> int:
    codec, _ = load_checkpoint(args.checkpoint)
    x = load_image(args.image).unsqueeze(0)
    data = bs.encode_image(x, codec)
    args.output.write_bytes(data)
    npx = x.shape[2] * x.shape[3]
    print(f"{args.output}: {len(data)} bytes, {bs.actual_bpp(data, npx):.4f} bpp")
    return 0


def _cmd_decode(args) -> int:
    codec, _ = load_checkpoint(args.checkpoint)
    data = args.bitstream.read_bytes()
    x_hat = bs.decode_image(data, codec)
    save_image(x_hat, args.output)
    print(f"{args.output}: {tuple(x_hat.shape[2:])}")
    return 0


def _cmd_evaluate(args) -> int:
    exp = harness.Experiment(_load_config(args))
    if args.checkpoint is not None:
        codec, _ = load_checkpoint(args.checkpoint)
        label = args.checkpoint.stem
    else:
        codec, _, _ = exp.ensure_frozen(args.rate_index)
        label = f"frozen_{args.rate_index:03d}"
    images = training.load_eval_images(
        harness.list_eval_images(exp.cfg.dataset.eval_dir)
    )
    spec = exp.cfg.sweep.eval_metric_spec
    out_dir = exp.out / "eval"
    out_dir.mkdir(exist_ok=True)
    rows, reports = [METRIC_CSV_HEADER], []
    with torch.no_grad():
        for image_id, x in images:
            stream = bs.encode_image(x, codec)
            x_hat = bs.decode_image(stream, codec)
            bpp = bs.actual_bpp(stream, x.shape[2] * x.shape[3])
            report = evaluate_image(x, x_hat, bpp, spec, image_id=image_id)
            rows.append(report.csv_row())
            reports.append(report.to_json())
    (out_dir / f"metrics_{label}.csv").write_text("\n".join(rows) + "\n")
    (out_dir / f"metrics_{label}.json").write_text(
        json.dumps(reports, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {out_dir / f'metrics_{label}.csv'}")
    return 0


def _cmd_analyze(args) -> int:
    exp = harness.Experiment(_load_config(args))
    for i in range(len(exp.cfg.lambdas)):
        _, knees = exp.ensure_analysis(i)
        k = knees[exp.cfg.knee_axis]
        label = (
            "mse-only" if k.gamma_at_knee == float("inf") else repr(k.gamma_at_knee)
        )
        print(f"rate point {i}: knee at index {k.index} (gamma {label})")
    return 0


def _cmd_plot(args) -> int:
    exp = harness.Experiment(_load_config(args))
    for path in exp.ensure_plots():
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "train-rd": _cmd_train_rd,
    "freeze": _cmd_freeze,
    "finetune-pd": _cmd_finetune_pd,
    "sweep": _cmd_sweep,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "evaluate": _cmd_evaluate,
    "analyze": _cmd_analyze,
    "plot": _cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RdpLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
