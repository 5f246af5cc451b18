"""Command line entry point: simulate, sweep, expand, verify.

Exit codes: 0 all checks pass, 1 a property or rate check failed, 2 configuration
error, 3 numerical abort (NaN, CFL violation, Gauss ceiling).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import _accel
from .arrayfile import ArrayFileError
from .kinetic_solver import SolverError
from .limit_harness import (
    ConfigError,
    RunConfig,
    Workspace,
    run_epsilon_sweep,
    run_expansion_check,
    run_property_suite,
    simulate,
    split_timing,
    write_json,
)

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("vmblimit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmblimit", description="Two-species VMB/VPB perturbation simulator and limit harness.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "run one system and write series.csv, checkpoints and macro.csv",
        "sweep": "epsilon sweep against the VPB limit; writes rates.json",
        "expand": "expansion remainder check against direct VMB; writes rates.json",
        "verify": "property suite; writes report.json",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", type=Path, help="YAML config file (defaults apply when omitted)")
        s.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        s.add_argument("--seed", type=int, help="RNG seed for random recipes and the property suite")
        s.add_argument("--threads", type=int, help="numba worker threads")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed, recipe=replace(cfg.recipe, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    if args.threads is not None and args.threads < 1:
        raise ConfigError("threads must be positive")
    cfg.validate()
    return cfg


def _slope_ok(cfg: RunConfig, slope: float | None) -> bool:
    if cfg.expected_slope is None:
        return True
    lo, hi = cfg.expected_slope
    return slope is not None and lo <= slope <= hi


def _cmd_simulate(cfg: RunConfig, ws: Workspace, out: Path, args) -> int:
    traj = simulate(cfg, out, ws, resume=args.resume)
    print(f"simulate: {len(traj.rows)} rows, final t = {traj.final.t:.6g}, output in {out}")
    return EXIT_OK


def _cmd_rates(cfg: RunConfig, ws: Workspace, out: Path, expansion: bool) -> int:
    def progress(eps, err):
        log.info("eps=%g error=%.6e", eps, err)

    rep = run_expansion_check(cfg, ws, progress) if expansion else run_epsilon_sweep(cfg, ws, progress)
    payload, timing = split_timing(rep)
    write_json(out / "rates.json", payload)
    write_json(out / "timing.json", timing)
    ok = _slope_ok(cfg, rep.slope)
    slope = "n/a" if rep.slope is None else f"{rep.slope:.4f}"
    resid = "n/a" if rep.residual is None else f"{rep.residual:.2e}"
    print(f"{'expand' if expansion else 'sweep'}: slope {slope}, fit residual {resid}, {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_PROPERTY


def _cmd_verify(cfg: RunConfig, ws: Workspace | None, out: Path) -> int:
    rep = run_property_suite(cfg, ws, cfg.checks)
    write_json(out / "report.json", rep.to_dict())
    for r in rep.records:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: value={r.value} threshold={r.threshold}")
    return EXIT_OK if rep.passed else EXIT_PROPERTY


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        _accel.set_threads(args.threads)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            # the suite builds the operator only when a selected group needs it
            return _cmd_verify(cfg, None, out)
        ws = Workspace.build(cfg)
        if args.command == "simulate":
            return _cmd_simulate(cfg, ws, out, args)
        return _cmd_rates(cfg, ws, out, expansion=args.command == "expand")
    except (ConfigError, ArrayFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
