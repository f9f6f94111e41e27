"""``mtn`` command line: solve, sweep, tune and density.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 threshold failure in ``solve --check`` mode, 1 any other stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .assembly import NumericalError
from .config import ConfigError, load_run_config, load_sweep_config
from .geometry import BallCover
from .pipeline import StageError, ball_probes, density_summary, run_density, run_solve, run_sweep, run_tune, write_csv

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("mtn")


def _numeric(exc: BaseException) -> bool:
    orig = getattr(exc, "original", exc)
    if isinstance(orig, (NumericalError, FloatingPointError)):
        return True
    return "non-finite" in str(orig)


def _cmd_solve(args) -> int:
    cfg = load_run_config(args.config)
    report, _ = run_solve(cfg)
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    if args.check:
        thresholds = cfg.check or {}
        if not thresholds:
            log.error("--check given but the config has no 'check' thresholds")
            return EXIT_CONFIG
        failed = []
        for key, bound in thresholds.items():
            val = _metric(report, key)
            if val is None or not val <= bound:
                failed.append(f"{key}={val} > {bound}")
        if failed:
            log.error("threshold check failed: %s", "; ".join(failed))
            return EXIT_CHECK
    return EXIT_OK


def _metric(report, key: str):
    if key.startswith("rl2_") and key[4:] in report.rl2:
        return report.rl2[key[4:]]
    if key.startswith("rlinf_") and key[6:] in report.rlinf:
        return report.rlinf[key[6:]]
    if key == "rl2_grad":
        return report.rl2_grad
    return None


def _cmd_sweep(args) -> int:
    cfg = load_sweep_config(args.config)
    rows = run_sweep(cfg, args.output)
    if not args.output:
        for r in rows:
            print(json.dumps(r))
    return EXIT_OK


def _cmd_tune(args) -> int:
    cfg = load_run_config(args.config)
    C, trace = run_tune(cfg)
    text = json.dumps({"C": C, "M0": cfg.shape.M0 or cfg.M, "trace": trace.to_dict()}, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK


def _cmd_density(args) -> int:
    center = np.array(args.center if args.center else [0.0] * args.dim, float)
    ball = BallCover(center, args.radius)
    if not args.tau < args.radius:
        raise ConfigError("tau must be smaller than the radius")
    probes = ball_probes(center, args.probe_radius, args.probes, args.probe_seed)
    seeds = range(args.seed, args.seed + args.seeds)
    rows = run_density(ball, args.M, args.tau, seeds, probes)
    cols = ["seed", "probe"] + [f"x{j}" for j in range(ball.dim)] + ["D", "expected"]
    if args.output:
        write_csv(rows, args.output, cols)
    print(json.dumps(density_summary(rows)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtn", description="Multi-TransNet solver for elliptic interface problems")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run one configuration and print its error report")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--output")
    s.add_argument("--check", action="store_true", help="exit 4 if a 'check' threshold is exceeded")
    s.set_defaults(func=_cmd_solve)

    s = sub.add_parser("sweep", help="trimmed-mean sweep over M and contrasts")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--output")
    s.set_defaults(func=_cmd_sweep)

    s = sub.add_parser("tune", help="fit the empirical shape constant C")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--output")
    s.set_defaults(func=_cmd_tune)

    s = sub.add_parser("density", help="hyperplane density at probe points")
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--center", type=float, nargs="*")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("-M", type=int, default=10000)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--probes", type=int, default=50)
    s.add_argument("--probe-radius", type=float, default=0.9)
    s.add_argument("--probe-seed", type=int, default=12345)
    s.add_argument("-o", "--output")
    s.set_defaults(func=_cmd_density)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC if _numeric(exc) else EXIT_STAGE
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
