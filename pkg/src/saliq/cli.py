"""Command-line entry point: ``saliq <command> [options]``.

Failures print one JSON object to stderr (``{"error": ..., "message": ...,
"hint": ...}``) and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .experiment import MissingArtifact, Pipeline
from .quantizers import ALLOWED_BITS, KINDS

_UNSET = object()  # distinguishes "--group-size matrix" (None) from an absent flag
COMMANDS = ("pretrain", "saliency", "quantize", "calibrate", "eval", "pack", "report")


def _group_size(text: str):
    if text == "matrix":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer or 'matrix', got {text!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError("group size must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--bits", type=int, choices=ALLOWED_BITS)
    common.add_argument("--group-size", type=_group_size, metavar="N|matrix", default=_UNSET)
    common.add_argument("--quantizer", choices=KINDS)
    common.add_argument("--variant", choices=("none", "naive", "saliency"))
    common.add_argument("--lora-position", choices=("before", "after"))
    common.add_argument("--coef", type=float, help="initial regularizer coefficient")
    common.add_argument("--coef-mult", type=float, help="per-block coefficient multiplier")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="saliq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the full-precision toy model")
    sub.add_parser("saliency", parents=[common], help="compute squared-gradient saliency")
    p = sub.add_parser("quantize", parents=[common], help="quantize without calibration")
    p.add_argument("--name", default="quantized", help="output checkpoint stem")
    p = sub.add_parser("calibrate", parents=[common], help="block-wise calibration")
    p.add_argument("--name", default="calibrated", help="output checkpoint stem")
    p = sub.add_parser("eval", parents=[common], help="perplexity on the evaluation splits")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/fp.ulbq)")
    p.add_argument("--name", help="model id in the report (default: checkpoint stem)")
    p = sub.add_parser("pack", parents=[common], help="re-encode codes at their true bit width")
    p.add_argument("--checkpoint", help="quantized checkpoint (default: <out>/calibrated.ulbq)")
    p = sub.add_parser("report", parents=[common], help="comparison table over all eval files")
    p.add_argument("--base", default="quantized", help="model id of the quantized baseline")
    p.add_argument("--fp", default="fp", help="model id of the full-precision model")
    return parser


FLAG_KEYS = {
    "seed": "seed", "out": "out", "bits": "quant.bits", "group_size": "quant.group_size",
    "quantizer": "quant.quantizer", "variant": "calibration.variant",
    "lora_position": "calibration.lora_position", "coef": "calibration.coef",
    "coef_mult": "calibration.coef_mult",
}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None and value is not _UNSET:
            overrides[key] = value
    if args.group_size is None:
        overrides["quant.group_size"] = None
    return cfg.with_overrides(overrides)


def run(args: argparse.Namespace) -> Path:
    cfg = resolve_config(args)
    pipe = Pipeline(cfg)
    cmd = args.command
    if cmd == "pretrain":
        return pipe.run_pretrain()
    if cmd == "saliency":
        return pipe.run_saliency()
    if cmd == "quantize":
        return pipe.run_quantize(args.name)
    if cmd == "calibrate":
        return pipe.run_calibrate(args.name)
    if cmd == "eval":
        return pipe.run_eval(args.checkpoint, args.name)
    if cmd == "pack":
        return pipe.run_pack(args.checkpoint)
    return pipe.run_report(args.base, args.fp)


def _fail(kind: str, message: str, hint: str = "", code: int = 1) -> int:
    record = {"error": kind, "message": message}
    if hint:
        record["hint"] = hint
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            return 0
        return _fail("usage", "invalid command line (see usage above)", code=2)
    try:
        path = run(args)
    except MissingArtifact as e:
        return _fail("missing_artifact", str(e), e.hint)
    except ConfigError as e:
        return _fail("config", str(e), code=2)
    except Exception as e:  # every failure becomes a machine-readable record
        return _fail(type(e).__name__, str(e))
    print(json.dumps({"command": args.command, "output": str(path)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
