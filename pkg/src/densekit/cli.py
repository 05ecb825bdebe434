"""Command-line entry point: ``densekit {audit,train,eval,heatmap,sweep}``.

Exit codes: 0 success, 1 I/O or runtime failure, 2 configuration or validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import analysis, checkpoint, trainer
from .audit import count_flops
from .data import NormStats, compute_norm_stats, parse_data_spec
from .errors import (ConfigError, DenseKitError, PlanMismatchError,
                     UnsupportedAnalysisError)
from .model import init_model
from .plan import build_plan, load_config

log = logging.getLogger("densekit")

DEFAULT_SEED = 42
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _resolve_seed(cli_seed: Optional[int], file_seed: Optional[int]) -> int:
    """CLI flag beats the config file, which beats the default."""
    if cli_seed is not None:
        return cli_seed
    if file_seed is not None:
        return file_seed
    return DEFAULT_SEED


def _train_config(path: Optional[str], seed: Optional[int]) -> trainer.TrainConfig:
    if path is None:
        cfg = trainer.PRESETS["desk"]
        file_seed = None
    else:
        cfg = trainer.load_train_config(path)
        file_seed = cfg.seed if _file_sets_seed(path) else None
    return dataclasses.replace(cfg, seed=_resolve_seed(seed, file_seed))


def _file_sets_seed(path: str) -> bool:
    if path in trainer.PRESETS:
        return False
    with open(path, encoding="utf-8") as fh:
        return "seed" in json.load(fh)


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    report = count_flops(build_plan(cfg))
    if args.format == "json":
        doc = report.to_dict()
        doc["config"] = cfg.to_json_dict()
        print(json.dumps(doc, sort_keys=True))
    else:
        print(report.to_table())
    return EXIT_OK


def cmd_train(args) -> int:
    arch = load_config(args.config)
    tcfg = _train_config(args.train_config, args.seed)
    if tcfg.dropout_rate is not None:
        arch = dataclasses.replace(arch, dropout_rate=tcfg.dropout_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = parse_data_spec(args.data, tcfg.seed)
    report_path = out / "report.jsonl"
    resume = None
    if args.resume:
        resume = checkpoint.read_checkpoint(args.resume, expect=arch)
    elif report_path.exists():
        report_path.unlink()
    model = init_model(build_plan(arch), tcfg.seed)
    log.info("training %s with seed %d", arch.to_json(), tcfg.seed)
    rep = trainer.train(model, train_set, test_set, tcfg, out_dir=out,
                        report_path=report_path, resume=resume)
    summary = {"seed": tcfg.seed, "epochs": len(rep.records), "final": rep.final,
               "checkpoint": str(rep.checkpoints[-1]) if rep.checkpoints else None,
               "flags": rep.flags}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    expect = load_config(args.config) if args.config else None
    ck = checkpoint.read_checkpoint(args.checkpoint, expect=expect)
    seed = _resolve_seed(args.seed, ck.rng_state.get("seed"))
    train_set, test_set = parse_data_spec(args.data, seed)
    if "norm_stats" in ck.extra:
        stats = NormStats.from_dict(ck.extra["norm_stats"])
    else:
        stats = compute_norm_stats(train_set)
    res = trainer.evaluate(ck.model, test_set, stats)
    print(json.dumps({"top1_error": res.top1_error, "loss": res.mean_loss, "seed": seed},
                     sort_keys=True))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    model = checkpoint.load_checkpoint(args.checkpoint)
    report = analysis.weight_heatmap(model)
    for path in analysis.heatmap_export(report, args.out, args.format):
        print(path)
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.configs))
    if not paths:
        raise ConfigError(f"no config files match {args.configs!r}")
    configs = [load_config(p) for p in paths]
    tcfg = _train_config(args.train_config, args.seed)
    data = parse_data_spec(args.data, tcfg.seed) if args.data else None
    points = analysis.efficiency_sweep(configs, tcfg, data=data, out_csv=args.out)
    for p in points:
        print(f"{p.config_id}\t{p.params}\t{p.test_error}\t{p.flops}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="print parameter and FLOP counts of an architecture")
    p.add_argument("--config", required=True)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="train a model and write epoch checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--train-config", default=None,
                   help="JSON file or preset name (%s)" % ", ".join(trainer.PRESETS))
    p.add_argument("--data", required=True, help="CIFAR-10 binary directory or synthetic:N")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report test error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="fail unless the checkpoint matches")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export the feature-reuse heatmap of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output file stem")
    p.add_argument("--format", choices=("csv", "pgm", "both"), default="both")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("sweep", help="train several configs and tabulate params vs error")
    p.add_argument("--configs", required=True, help="glob of architecture config files")
    p.add_argument("--train-config", default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("DENSEKIT_LOG", "").upper()
    if level in ("DEBUG", "INFO"):
        logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PlanMismatchError, UnsupportedAnalysisError) as exc:
        print(f"densekit {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DenseKitError) as exc:
        print(f"densekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
