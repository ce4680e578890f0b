"""
Grouped FDR - Command Line
  python cli.py analyze --input data.csv --procedure addow --alpha 0.05 --pi0-mode storey:0.5
  python cli.py simulate --preset scenario3 --reps 10 --seed 7 --out report.csv
  python cli.py null-quantile --group-sizes 500,500 --alpha 0.05 --replicates 1000 --out t.json
  python cli.py oracle --model model.json --alpha 0.05 --u 0.1

Results go to stdout (or --out), logs to stderr. Exit codes: 0 success,
1 runtime error (`error[<ErrorClass>]: message`), 2 usage error.
"""

import argparse
import logging
import sys
from typing import Optional

import numpy as np
from pydantic import BaseModel

from addow import addow, addow_lcm, ihw
from classic import abh, hzz, pro1_pro2
from config import settings
from estimation import parse_pi0_mode
from harness import PROCEDURE_NAMES, emit_report, load_config, preset, run_scenario
from models import CostVector, GroupedPValues, NullEstimates, dump_dataset, load_dataset
from oracle import (
    critical_alpha, expected_power, limiting_fdr, load_model, oracle_mwbh, oracle_weights,
)
from quantile_store import get_or_build_table, load_table, save_table
from stabilize import null_quantile_table, saddow
from stepup import bh

logger = logging.getLogger("grouped_fdr.cli")

# library modules each subcommand reaches
SUBCOMMAND_MODULES = {
    "analyze": ["models", "estimation", "stepup", "addow", "classic", "stabilize", "quantile_store", "oracle"],
    "simulate": ["harness", "oracle", "quantile_store", "stabilize"],
    "null-quantile": ["stabilize", "quantile_store"],
    "oracle": ["oracle"],
}


class AnalyzeResult(BaseModel):
    procedure: str
    alpha: float
    u_hat: float
    n_rejections: int
    weights: list[float]
    estimates: Optional[NullEstimates] = None
    rejections: list[tuple[str, int]]
    z: Optional[float] = None
    quantile: Optional[float] = None
    signal_detected: Optional[bool] = None


class OracleResult(BaseModel):
    alpha: float
    u: float
    costs: list[float]
    weights: list[float]
    expected_power: float
    critical_alpha: float
    limiting_fdr: Optional[float] = None


# ─── analyze ─────────────────────────────────────────────

def _cmd_analyze(args) -> int:
    data = load_dataset(args.input)
    estimates = parse_pi0_mode(args.pi0_mode, data)
    extra = {}

    name = args.procedure
    if name == "bh":
        outcome = bh(data, args.alpha)
    elif name == "abh":
        outcome = abh(data, estimates, args.alpha)
    elif name == "hzz":
        outcome = hzz(data, estimates, args.alpha)
    elif name in ("pro1", "pro2"):
        outcome = pro1_pro2(data, estimates, args.alpha)[0 if name == "pro1" else 1]
    elif name == "ihw":
        outcome = ihw(data, args.alpha)
    elif name == "addow":
        outcome = addow_lcm(data, estimates, args.alpha) if args.lcm else addow(data, estimates, args.alpha)
    elif name == "addow-lcm":
        outcome = addow_lcm(data, estimates, args.alpha)
    elif name == "saddow":
        if args.table:
            table = load_table(args.table)
        else:
            table = get_or_build_table(data.group_sizes.tolist(), args.alpha,
                                       settings.quantile_replicates, seed=0, threads=args.threads)
        stabilized = saddow(data, estimates, args.alpha, args.beta, table)
        outcome = stabilized.outcome
        extra = {"z": stabilized.z, "quantile": stabilized.quantile,
                 "signal_detected": stabilized.signal_detected}
    else:  # oracle
        model = load_model(args.model)
        outcome = oracle_mwbh(data, model, CostVector.from_estimates(estimates), args.alpha)

    logger.info(f"{outcome.procedure}: u_hat={outcome.u_hat:.6g}, {outcome.n_rejections} rejections")

    if args.format == "json":
        result = AnalyzeResult(
            procedure=outcome.procedure,
            alpha=outcome.alpha,
            u_hat=outcome.u_hat,
            n_rejections=outcome.n_rejections,
            weights=outcome.weights_at_u.w.tolist(),
            estimates=estimates,
            rejections=[(data.groups[g].key, i) for g, i in outcome.rejections.pairs()],
            **extra,
        )
        sys.stdout.write(result.model_dump_json(indent=2) + "\n")
    else:
        flags = []
        for group, idx in zip(data.groups, outcome.rejections.indices):
            mask = np.zeros(group.size, dtype=int)
            mask[idx] = 1
            flags.append(mask)
        marked = GroupedPValues.from_arrays(
            [g.pvalues for g in data.groups], flags, keys=[g.key for g in data.groups],
        )
        dump_dataset(marked, sys.stdout)
    return 0


# ─── simulate ────────────────────────────────────────────

def _cmd_simulate(args) -> int:
    if args.config:
        config = load_config(args.config)
        update = {}
        if args.ci:
            update["replications"] = settings.ci_replications
        if args.reps is not None:
            update["replications"] = args.reps
        if args.seed is not None:
            update["seed"] = args.seed
        config = config.model_copy(update=update) if update else config
    else:
        config = preset(args.preset, replications=args.reps, ci=args.ci, seed=args.seed)

    report = run_scenario(config, threads=args.threads)
    fmt = args.format or ("json" if args.out and args.out.endswith(".json") else "csv")
    emit_report(report, fmt, args.out or sys.stdout)
    if args.out:
        logger.info(f"Report with {len(report.rows)} rows written to {args.out}")
    return 0


# ─── null-quantile ───────────────────────────────────────

def _cmd_null_quantile(args) -> int:
    sizes = [int(s) for s in args.group_sizes.split(",")]
    table = null_quantile_table(sum(sizes), sizes, args.alpha, args.replicates, args.seed, args.threads)
    if args.out:
        save_table(table, args.out)
    else:
        sys.stdout.write(table.model_dump_json(by_alias=True, indent=2) + "\n")
    return 0


# ─── oracle ──────────────────────────────────────────────

def _cmd_oracle(args) -> int:
    model = load_model(args.model)
    if args.pi0_mode == "oracle":
        pibar = model.pi0
        costs = CostVector(c=model.pi * model.pi0)
    else:
        pibar = np.ones(model.G)
        costs = CostVector.unit(model.group_sizes)
    w = oracle_weights(model, costs, args.alpha, args.u)
    result = OracleResult(
        alpha=args.alpha,
        u=args.u,
        costs=costs.c.tolist(),
        weights=w.w.tolist(),
        expected_power=expected_power(model, w, args.alpha, args.u),
        critical_alpha=critical_alpha(model, pibar),
        limiting_fdr=limiting_fdr(model, pibar, args.alpha),
    )
    sys.stdout.write(result.model_dump_json(indent=2) + "\n")
    return 0


# ─── Parser ──────────────────────────────────────────────

def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0,1)")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=settings.threads,
                        help="Worker processes (default from GROUPED_FDR_THREADS).")
    parser = argparse.ArgumentParser(prog="grouped-fdr", description="Adaptively weighted BH for grouped p-values.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="Run one procedure on a group,pvalue[,label] CSV.")
    p.add_argument("--input", required=True)
    p.add_argument("--procedure", required=True, choices=PROCEDURE_NAMES)
    p.add_argument("--alpha", required=True, type=_probability)
    p.add_argument("--pi0-mode", default="ne", help="ne | storey[:lam] | schedule[:e] | oracle:v1,v2,...")
    p.add_argument("--beta", type=_probability, help="Stabilization level (saddow).")
    p.add_argument("--table", help="Null quantile table JSON (saddow).")
    p.add_argument("--model", help="Gaussian model JSON (oracle).")
    p.add_argument("--lcm", action="store_true", help="Use the concave-majorant objective (addow only).")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("simulate", parents=[common], help="Run a Monte Carlo scenario.")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=("scenario1", "scenario2", "scenario3"))
    source.add_argument("--config", help="ScenarioConfig JSON file.")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ci", action="store_true", help=f"Use {settings.ci_replications} replications.")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))

    p = sub.add_parser("null-quantile", parents=[common], help="Simulate a full-null Z table for saddow.")
    p.add_argument("--group-sizes", required=True, help="Comma separated, e.g. 500,500.")
    p.add_argument("--alpha", required=True, type=_probability)
    p.add_argument("--replicates", type=int, default=settings.quantile_replicates)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("oracle", parents=[common], help="Oracle weights and critical alpha of a Gaussian model.")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", required=True, type=_probability)
    p.add_argument("--u", type=float, default=1.0)
    p.add_argument("--pi0-mode", choices=("ne", "oracle"), default="ne")
    return parser


COMMANDS = {
    "analyze": _cmd_analyze,
    "simulate": _cmd_simulate,
    "null-quantile": _cmd_null_quantile,
    "oracle": _cmd_oracle,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.command == "analyze":
        if args.procedure == "saddow" and args.beta is None:
            parser.print_usage(sys.stderr)
            sys.stderr.write("error: saddow needs --beta\n")
            return 2
        if args.procedure == "oracle" and not args.model:
            parser.print_usage(sys.stderr)
            sys.stderr.write("error: the oracle procedure needs --model\n")
            return 2
        if args.lcm and args.procedure != "addow":
            parser.print_usage(sys.stderr)
            sys.stderr.write("error: --lcm only applies to addow\n")
            return 2

    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        sys.stderr.write(f"error[{type(e).__name__}]: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
