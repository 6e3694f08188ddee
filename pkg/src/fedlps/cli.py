"""Command line: ``fedlps run``, ``fedlps sweep`` and ``fedlps verify``.

Outputs go to ``$FEDLPS_OUT/<run-name>/`` (default root ``out``):
``metrics.csv`` (one row per round), ``manifest.json`` and optional
``ckpt_XXXX.bin`` checkpoints.  Exit codes: 0 success, 1 failed checks,
2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .config import HETEROGENEITY_LEVELS, ConfigError, RunConfig
from .data import DataConfigError, IdxParseError
from .orchestrator import METRIC_COLUMNS, run

SCHEMA_VERSION = 1
SCHEMA_HEADER = f"# fedlps metrics schema {SCHEMA_VERSION}"

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2

SWEEP_DEFAULTS = {
    "ratio": "0.2,0.4,0.6,0.8",
    "pattern": "learnable,random,ordered,magnitude",
    "heterogeneity": "low,median,high",
    "noniid": "2,5,10",
}

log = logging.getLogger("fedlps")


class UsageError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get("FEDLPS_OUT", "out"))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows, extra: dict | None = None) -> str:
    """CSV text with the schema comment first; ``extra`` columns are prepended."""
    extra = extra or {}
    buf = io.StringIO()
    buf.write(SCHEMA_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*extra, *METRIC_COLUMNS])
    for row in rows:
        w.writerow([*map(_fmt, extra.values()), *(_fmt(row[c]) for c in METRIC_COLUMNS)])
    return buf.getvalue()


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    return cfg.replace(**changes) if changes else cfg


def _execute(cfg: RunConfig) -> tuple[Path, object]:
    out_dir = output_root() / cfg.name
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run(cfg, out_dir=out_dir)
    (out_dir / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out_dir / "manifest.json").write_text(json.dumps(result.manifest(), indent=1, sort_keys=True))
    return out_dir, result


def cmd_run(args) -> int:
    cfg = _apply_overrides(config_mod.load(args.config), args)
    out_dir, result = _execute(cfg)
    mean_acc = sum(result.final_accuracy) / len(result.final_accuracy)
    print(f"final mean accuracy {mean_acc:.2f}%  cumulative FLOPs {result.total_flops:.4g}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def sweep_configs(base: RunConfig, axis: str, values: list[str]) -> list[tuple[str, RunConfig]]:
    if not values:
        raise UsageError(f"sweep axis '{axis}' needs at least one value")
    out = []
    for v in values:
        if axis == "ratio":
            cfg = base.replace(ratio_rule="fixed", fixed_ratio=float(v))
        elif axis == "pattern":
            cfg = base.replace(pattern=v, ratio_rule="fixed", fixed_ratio=0.5)
        elif axis == "heterogeneity":
            if v not in HETEROGENEITY_LEVELS:
                raise ConfigError("capability_levels", f"unknown heterogeneity level {v!r}")
            cfg = base.replace(capability_levels=list(HETEROGENEITY_LEVELS[v]))
        elif axis == "noniid":
            cfg = base.replace(classes_per_client=int(v))
        else:
            raise UsageError(f"unknown sweep axis {axis!r}")
        out.append((v, cfg.replace(name=f"{base.name}_{axis}_{v}")))
    return out


def cmd_sweep(args) -> int:
    base = _apply_overrides(config_mod.load(args.config), args)
    raw = SWEEP_DEFAULTS[args.axis] if args.values is None else args.values
    values = [v.strip() for v in raw.split(",") if v.strip()]
    runs = sweep_configs(base, args.axis, values)
    root = output_root() / f"{base.name}_sweep_{args.axis}"
    root.mkdir(parents=True, exist_ok=True)
    parts = []
    for value, cfg in runs:
        _, result = _execute(cfg)
        mean_acc = sum(result.final_accuracy) / len(result.final_accuracy)
        print(f"{args.axis}={value}: final mean accuracy {mean_acc:.2f}%  "
              f"cumulative FLOPs {result.total_flops:.4g}")
        text = metrics_csv(result.metrics, {"axis": args.axis, "value": value})
        lines = text.splitlines(keepends=True)
        parts.append("".join(lines if not parts else lines[2:]))
    (root / "sweep.csv").write_text("".join(parts))
    print(f"wrote {root / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a TOML config")
    p_run.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="run one config across values of an axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    p_sweep.add_argument("--values", default=None,
                         help="comma-separated axis values (defaults depend on the axis)")
    for p in (p_run, p_sweep):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads per round")
    sub.add_parser("verify", help="run the built-in oracle checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataConfigError, IdxParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
