"""Command-line entry point.

Exit codes: 0 ok, 2 invalid config, 3 missing dependency checkpoint,
4 variant mismatch against a checkpoint manifest, 5 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, deep_merge, resolve_config
from .report import SchemaMismatchError
from .volumes import VolumeFormatError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_VARIANT, EXIT_IO = 0, 2, 3, 4, 5

COMMANDS = ("gen-data", "pretrain-backbone", "pretrain-encoder", "finetune", "baseline", "evaluate", "report")

# config section that --steps / --batch-size act on
_STAGE = {
    "pretrain-backbone": "backbone_pretrain",
    "pretrain-encoder": "encoder_pretrain",
    "finetune": "finetune",
    "baseline": "baseline",
    "evaluate": "evaluate",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with per-stage sections")
    common.add_argument("--seed", type=int, help="seed for the cohort and the split; pre-training reuses it")
    common.add_argument("--out", help="output root (cohort, checkpoints, report)")
    common.add_argument("--steps", type=int, help="override the stage's step count")
    common.add_argument("--batch-size", type=int, help="override the stage's batch size")
    common.add_argument("--variant", choices=("F", "P", "N", "T"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config entry, e.g. finetune.base_lr=2e-4 (value parsed as JSON)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hccnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("reports", nargs="*", help="metrics.json files, baseline first")
            p.add_argument("--table", help="write the comparison table here")
        if name == "evaluate":
            p.add_argument("--stages", nargs="+", default=["finetune", "baseline"],
                           choices=["finetune", "baseline"])
    return parser


def parse_set(items: Sequence[str]) -> dict:
    """``a.b=1`` -> ``{"a": {"b": 1}}``; values are JSON, falling back to plain strings."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def _resolve(args) -> dict:
    overrides = {"variant": args.variant, "out": args.out}
    if args.seed is not None:
        overrides.update(seed=args.seed, synthetic={"seed": args.seed})
    overrides = deep_merge(parse_set(args.set), {k: v for k, v in overrides.items() if v is not None})
    return resolve_config(
        args.config, overrides, stage=_STAGE.get(args.command), steps=args.steps, batch_size=args.batch_size
    )


def _run(args, cfg: dict) -> None:
    cmd = args.command
    if cmd == "gen-data":
        summary = pipeline.gen_data(cfg)
        print(f"patients: {summary['patients']}  positives: {summary['positives']}")
        print("visits per patient: " + ", ".join(f"{k}: {v}" for k, v in summary["visit_histogram"].items()))
        print(f"manifest: {summary['manifest']} (sha256 {summary['manifest_sha256'][:16]})")
    elif cmd == "pretrain-backbone":
        print(pipeline.pretrain_backbone(cfg))
    elif cmd == "pretrain-encoder":
        print(pipeline.pretrain_encoder(cfg))
    elif cmd in ("finetune", "baseline"):
        results = pipeline.finetune(cfg, init="pretrained" if cmd == "finetune" else "random")
        for r in results:
            print(f"seed {r.seed}: final loss {r.losses[-1]:.4f} -> {r.checkpoint}")
    elif cmd == "evaluate":
        for stage, path in pipeline.evaluate(cfg, args.stages).items():
            print(f"{stage}: {path}")
    elif cmd == "report":
        report_dir = pipeline.paths(cfg)["report"]
        reports = [Path(r) for r in args.reports] or [
            report_dir / "baseline" / "metrics.json",
            report_dir / "finetune" / "metrics.json",
        ]
        missing = [str(r) for r in reports if not r.exists()]
        if missing:
            raise pipeline.MissingDependencyError(f"missing report(s): {', '.join(missing)}; run `evaluate` first")
        table_path = Path(args.table) if args.table else report_dir / "comparison.tsv"
        print(pipeline.compare(reports, table_path))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        _run(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingDependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except pipeline.VariantMismatchError as exc:
        print(f"variant mismatch: {exc}", file=sys.stderr)
        return EXIT_VARIANT
    except (OSError, CheckpointError, VolumeFormatError, SchemaMismatchError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
