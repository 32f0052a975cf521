"""Command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
Machine-readable JSON goes to stdout, human-readable logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checks
from .data import DatasetFormatError, GenSpec, generate, load, save
from .training import (
    PRESETS, Checkpoint, ConfigError, NumericalError, RunConfig, evaluate, loss_log_lines,
    model_spec_for, train,
)

logger = logging.getLogger("rnada")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                         f"{exc.msg}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    try:
        spec = GenSpec.from_dict(_read_json(args.spec)) if args.spec else GenSpec()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data spec: {exc}") from None
    dataset = generate(spec, args.seed)
    save(dataset, args.out)
    logger.info("wrote %s", args.out)
    _emit({"out": str(args.out), "counts": dataset.meta["counts"], "seed": args.seed})
    return EXIT_OK


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration (unknown keys rejected)."""
    obj = _read_json(path)
    try:
        return RunConfig.from_dict(obj)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.preset:
        config = config.with_preset(args.preset)
    if args.pretrained:
        overrides["pretrained"] = args.pretrained
    if args.freeze_pretrained:
        overrides["freeze_pretrained"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        try:
            config = replace(config, **overrides)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.data:
        dataset = load(args.data)
    elif config.data is not None:
        dataset = None
    else:
        raise UsageError("train needs --data or a 'data' entry in the config")
    resume = Checkpoint.load(args.resume) if args.resume else None

    ckpt = train(config, dataset, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint.json")
    (out / "loss_log.ndjson").write_text(loss_log_lines(ckpt.history), encoding="utf-8")
    last = ckpt.history[-1] if ckpt.history else None
    _emit({
        "checkpoint": str(out / "checkpoint.json"),
        "loss_log": str(out / "loss_log.ndjson"),
        "epochs": ckpt.epoch,
        "losses": list(config.losses),
        "final_total": None if last is None else last["total"],
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = load(args.data)
    spec = model_spec_for(dataset, ckpt.spec.feat_dim)
    if spec != ckpt.spec:
        raise UsageError(f"checkpoint expects {ckpt.spec.to_dict()}, data provides {spec.to_dict()}")
    report = evaluate(ckpt.members, dataset[args.split], per_kitchen=args.per_kitchen)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    _emit(report.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    name = args.loss or args.name or "all"
    names = None if name == "all" else [name]
    if names and names[0] not in checks.CHECKS:
        raise UsageError(f"unknown loss {name!r}; choose from all, {', '.join(checks.CHECKS)}")
    results = checks.run_checks(names, seed=args.seed, n_seeds=args.n_seeds)
    ok = all(r["passed"] for r in results.values())
    _emit({"seed": args.seed, "n_seeds": args.n_seeds, "passed": ok, "checks": results})
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnada", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--spec", help="JSON generator spec (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one backbone or an ensemble")
    p.add_argument("--config", help="JSON run config (defaults if omitted)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="directory for checkpoint.json and loss_log.ndjson")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--pretrained", help="checkpoint whose members initialize the run")
    p.add_argument("--freeze-pretrained", action="store_true",
                   help="keep pretrained encoders fixed; adapt heads and discriminators only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labelled target clips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_eval", choices=("source_train", "target_eval"))
    p.add_argument("--per-kitchen", action="store_true")
    p.add_argument("--csv", help="also write a CSV table to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    p.add_argument("name", nargs="?", help="loss name or 'all'")
    p.add_argument("--loss", help="loss name or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = int(os.environ.get("RNA_DA_THREADS", "1"))
    except ValueError:
        parser.error("RNA_DA_THREADS must be an integer")
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except NumericalError as exc:
        print(f"rnada: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetFormatError) as exc:
        print(f"rnada: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
