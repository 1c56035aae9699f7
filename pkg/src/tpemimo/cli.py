"""Command-line entry point: ``python -m tpemimo <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import simkit
from .optimizer import (CSV_HEADER, MaxMinProblem, bisection_solve, result_csv_row, rzf_mimic_weights)
from .detequiv import build_sinr_model, rzf_sinr_detequiv
from .scenario import ScenarioConfig, load_config

log = logging.getLogger("tpemimo")

PHI_RULES = {
    "config": None,
    "sigma2": lambda cfg: cfg.sigma2,
    "scaled": simkit.scaled_phi,
}

DEFAULT_VALUES = {
    "sweep-m": [80, 160, 240, 320, 400],
    "sweep-phi": [0.001, 0.01, 0.1, 1.0],
    "sweep-rho": [0, 4, 8, 12],
    "theory-vs-emp": [80, 160, 240],
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON scenario file")
    p.add_argument("--out", type=Path, help="output CSV (default: stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, help="Monte-Carlo trials per drop")
    p.add_argument("--drops", type=int, help="user drops per sweep point")
    p.add_argument("--profile", choices=sorted(simkit.PROFILES))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpemimo", description="Multi-cell TPE/RZF precoding experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, what in (("sweep-m", "antenna count M"), ("sweep-phi", "RZF regularisation phi"),
                       ("sweep-rho", "training SNR in dB")):
        p = sub.add_parser(name, help=f"sweep the {what}")
        _common(p)
        p.add_argument("--values", type=float, nargs="+")
        p.add_argument("--orders", type=int, nargs="+", help="TPE orders (default: config J)")
        p.add_argument("--coeffs", choices=("optimized", "taylor"), default="optimized")
        p.add_argument("--phi-rule", choices=sorted(PHI_RULES), default="config",
                       help="override phi at every point (sigma2: phi = sigma^2, scaled: phi = M sigma^2 / K)")
        p.add_argument("--epsilon", type=float, default=1e-3, help="bisection tolerance")
    p = sub.add_parser("theory-vs-emp", help="deterministic vs empirical rates versus M")
    _common(p)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--orders", type=int, nargs=1, default=[5])
    p = sub.add_parser("optimize-only", help="solve the coefficient problem without Monte-Carlo")
    _common(p)
    p.add_argument("--orders", type=int, nargs=1, help="TPE order (default: config J)")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--dump-problem", type=Path, help="save the problem of drop 0 (.npz)")
    p.add_argument("--load-problem", type=Path, help="solve a saved problem instead of a drop")
    return parser


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    cfg = simkit.apply_profile(cfg, args.profile)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["n_trials"] = args.trials
    if args.drops is not None:
        changes["n_drops"] = args.drops
    return cfg.replace(**changes) if changes else cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_bytes(text.encode("utf-8"))


def _optimize_only(args, cfg: ScenarioConfig) -> str:
    lines = ["drop," + CSV_HEADER]
    if args.load_problem:
        res = bisection_solve(MaxMinProblem.load(args.load_problem), epsilon=args.epsilon)
        lines.append("file," + result_csv_row(res))
        return "\n".join(lines) + "\n"
    J = args.orders[0] if args.orders else cfg.J[0]
    for d in range(cfg.n_drops):
        ctx = simkit.build_drop(cfg, d)
        rzf = rzf_sinr_detequiv(ctx.covs, ctx.est_model, cfg.phi, cfg.sigma2, cfg.P)
        model = build_sinr_model(ctx.covs, ctx.est_model, J, cfg.sigma2)
        problem = MaxMinProblem.from_model(model, rzf_mimic_weights(rzf), cfg.P)
        if d == 0 and args.dump_problem:
            problem.dump(args.dump_problem)
        lines.append(f"{d}," + result_csv_row(bisection_solve(problem, epsilon=args.epsilon)))
    return "\n".join(lines) + "\n"


def run(args) -> str:
    cfg = _config(args)
    values = args.values if getattr(args, "values", None) else DEFAULT_VALUES.get(args.command)
    progress = (lambda msg: log.info(msg)) if args.verbose else None
    if args.command == "optimize-only":
        return _optimize_only(args, cfg)
    if args.command == "theory-vs-emp":
        rows = simkit.theory_vs_empirical(cfg, [int(v) for v in values], J=args.orders[0], progress=progress)
        return simkit.rows_to_csv(rows)
    name = {"sweep-m": "M", "sweep-phi": "phi", "sweep-rho": "rho_tr_db"}[args.command]
    sweep = simkit.SweepSpec(name, values, tpe_orders=args.orders, coeffs=args.coeffs,
                             phi_rule=PHI_RULES[args.phi_rule], epsilon=args.epsilon)
    return simkit.rows_to_csv(simkit.run_experiment(cfg, sweep, progress))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = run(args)
    except simkit.StageError as exc:
        print(f"tpemimo: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"tpemimo: [setup] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last resort
        print(f"tpemimo: [internal] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    _emit(text, args.out)
    return 0
