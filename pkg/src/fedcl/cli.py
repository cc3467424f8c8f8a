"""Command-line entry point: ``fedcl train | gradcheck | channeltest | sweep``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, coerce, parse_config
from .data import ConfigError
from .diagnostics import GRAD_TOLERANCE, SNR_TOLERANCE_DB, channel_check, gradcheck_suite
from .metrics import write_features_csv, write_metrics_csv
from .protocol import run_training

logger = logging.getLogger("fedcl")

THREADS_ENV = "FEDCL_THREADS"


def thread_budget(clients: int) -> int:
    """Worker threads for the client phase: one per client, capped by ``FEDCL_THREADS``."""
    raw = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return max(1, min(cap, clients))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--scheme", choices=["fedcl", "fedproto", "fedavg", "vanilla"])
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--clients", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--set", dest="extra", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; may be repeated")


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.extra:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        key, value = coerce(key, raw)
        overrides[key] = value
    # dedicated flags win over --set
    for key in ("seed", "out", "scheme", "snr_db", "clients", "m", "lam"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return parse_config(args.config, overrides)


def train_one(config: ExperimentConfig, out: Path) -> dict:
    """Run one experiment and write ``metrics.csv``, ``features.csv`` and ``config.txt``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    start = time.perf_counter()
    result = run_training(config, threads=thread_budget(config.clients))
    write_metrics_csv(result.metrics, out / "metrics.csv")
    write_features_csv(result.feature_dumps, out / "features.csv")
    summary = {"rounds": len(result.metrics), "seconds": time.perf_counter() - start}
    if result.test_accuracy:
        summary["test_accuracy"] = result.mean_test_accuracy
        summary["per_client"] = result.test_accuracy
        labels = {int(y) for d in result.feature_dumps for y in d[2]}
        summary["separability"] = result.final_separability if len(labels) > 1 else math.nan
    return summary


def cmd_train(args) -> int:
    config = resolve_config(args)
    summary = train_one(config, Path(config.out))
    print(f"trained {config.scheme}: {summary['rounds']} rounds in {summary['seconds']:.1f}s")
    if "test_accuracy" in summary:
        for k, acc in sorted(summary["per_client"].items()):
            print(f"  client {k}: test accuracy {acc:.4f}")
        print(f"mean test accuracy {summary['test_accuracy']:.4f}, "
              f"separability {summary['separability']:.4f}")
    print(f"wrote {config.out}/metrics.csv, features.csv, config.txt")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck_suite(seed=args.seed, eps=args.eps)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel error {r.max_rel_error:.3e}  {status}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {GRAD_TOLERANCE:g} "
          f"in {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def cmd_channeltest(args) -> int:
    bad = 0
    for snr in args.snr_db:
        r = channel_check(snr, args.symbols, args.seed)
        delta = r.measured_db - r.configured_db if math.isfinite(snr) else 0.0
        status = "ok" if r.passed else "FAIL"
        print(f"configured {snr:g} dB  measured {r.measured_db:.4f} dB  delta {delta:+.4f}  {status}")
        bad += not r.passed
    if args.symbols < 100_000:
        print(f"note: tolerance {SNR_TOLERANCE_DB} dB assumes at least 1e5 symbols")
    return 1 if bad else 0


def _sweep_cells(base: ExperimentConfig, param: str, values: List[str], schemes, seeds):
    for raw in values:
        key, value = coerce(param, raw)
        changes = {key: value}
        if key == "m":
            # keep every client's total sample count fixed
            total = base.m * base.q
            if total % value:
                raise ConfigError(f"m = {value} does not divide m*q = {total}")
            changes["q"] = total // value
        for scheme in schemes:
            for seed in seeds:
                yield raw, base.replace(scheme=scheme, seed=seed, **changes)


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    param = {"snr-db": "snr_db", "snr_db": "snr_db", "m": "m"}[args.param]
    schemes = args.schemes.split(",") if args.schemes else [base.scheme]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    cells = list(_sweep_cells(base, param, args.values.split(","), schemes, seeds))
    root = Path(base.out)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "scheme", "seed", "test_accuracy", "separability", "dir"])
        for raw, cfg in cells:
            cell = root / f"{param}={raw}" / f"{cfg.scheme}-seed{cfg.seed}"
            summary = train_one(cfg.replace(out=str(cell)), cell)
            acc, sep = summary.get("test_accuracy", math.nan), summary.get("separability", math.nan)
            w.writerow([raw, cfg.scheme, cfg.seed, format(acc, ".9g"), format(sep, ".9g"),
                        cell.relative_to(root).as_posix()])
            fh.flush()
            print(f"{param}={raw} {cfg.scheme} seed {cfg.seed}: accuracy {acc:.4f}", flush=True)
    print(f"wrote {len(cells)} cells and {root}/summary.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcl", description="Federated contrastive split-learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("channeltest", help="measure the empirical SNR of the channel")
    p.add_argument("--snr-db", dest="snr_db", type=float, nargs="+", default=[0.0, 5.0, 10.0, 20.0])
    p.add_argument("--symbols", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_channeltest)

    p = sub.add_parser("sweep", help="grid over snr_db or m, one run directory per cell")
    _add_config_flags(p)
    p.add_argument("--param", required=True, choices=["snr-db", "snr_db", "m"])
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--schemes", help="comma-separated schemes (default: the configured one)")
    p.add_argument("--seeds", help="comma-separated seeds (default: the configured one)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, FloatingPointError) as exc:
        print(f"fedcl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
