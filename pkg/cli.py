#!/usr/bin/env python3
"""
Command-line front end for the coalescent lab.

    python cli.py simulate --n 100 --s 2 --reps 1000 --seed 7 --out lengths.csv
    python cli.py clt --n 100000 --s 3 --reps 20000 --seed 1 --workers 8   # chain mode

Exit codes: 0 success, 1 I/O failure, 2 usage or invalid argument,
3 unsupported regime or resource limit.
"""

import argparse
import csv
import json
import logging
import math
import sys
from contextlib import contextmanager
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from branch_count_chain import simulate_path
from coalescent_core import order_counts, sample_merge_history
from coupling import RegionConfig, lemma2_mismatch_shape, lemma3_variance_shape
from errors import InvalidArgumentError, LabError, UnsupportedRegimeError
from exact_moments import MomentRow, mean_w, second_moment_w
from lab_config import LabConfig
from mutation_sfs import MutationConfig, summarize_sfs, theta_conventions
from seeding import block_rng
from stats_harness import (ExperimentConfig, formation_level_test, run_clt_experiment,
                           run_gap_experiment, run_region_experiment, sfs_table,
                           simulate_lengths)

logger = logging.getLogger(__name__)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.{LabConfig.SIGNIFICANT_DIGITS}g}"


@contextmanager
def open_output(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            yield handle


def write_table(header: Sequence[str], rows: Iterable[Sequence], args) -> None:
    rows = list(rows)
    with open_output(args.out) as handle:
        if args.format == "json":
            records = [{name: _json_value(v) for name, v in zip(header, row)} for row in rows]
            handle.write(json.dumps(records, indent=2) + "\n")
            return
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_model(model: BaseModel, path: Optional[str]) -> None:
    with open_output(path) as handle:
        handle.write(model.model_dump_json(indent=2) + "\n")


def _json_value(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def order_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _workers(args) -> int:
    return args.workers if args.workers is not None else LabConfig.workers()


def _config(args, n: int, s: int, replicates: int, mode: str = "tree",
            rate: Optional[float] = None) -> ExperimentConfig:
    return ExperimentConfig(n=n, s=s, replicates=replicates, master_seed=args.seed, mode=mode,
                            mutation_rate=rate, workers=_workers(args), out=args.out,
                            summary=getattr(args, "summary", None))


def cmd_simulate(args) -> int:
    config = _config(args, args.n, args.s, args.reps, args.mode)
    samples = simulate_lengths(config)
    header = (["replicate_id"] + [f"L_{r}" for r in range(1, config.s + 1)]
              + [f"Lsm_{r}" for r in range(1, config.s + 1)])
    rows = ([i] + list(raw) + list(smoothed)
            for i, (raw, smoothed) in enumerate(zip(samples.raw, samples.smoothed)))
    write_table(header, rows, args)
    return 0


class Figure2Summary(BaseModel):
    n: int
    replicates: int
    mean: List[float]
    mean_se: List[float]
    target: List[float] = [2.0, 1.0]


def cmd_figure2(args) -> int:
    config = _config(args, args.n, 2, args.reps, args.mode)
    samples = simulate_lengths(config)
    write_table(["replicate_id", "L1", "L2"],
                ([i, a, b] for i, (a, b) in enumerate(samples.raw)), args)

    se = samples.raw.std(axis=0, ddof=1) / math.sqrt(config.replicates) if config.replicates > 1 \
        else np.zeros(2)
    summary = Figure2Summary(n=config.n, replicates=config.replicates,
                             mean=samples.raw.mean(axis=0).tolist(), mean_se=se.tolist())
    logger.info(f"figure2 means {summary.mean} (SE {summary.mean_se}), target {summary.target}")
    if args.summary:
        write_model(summary, args.summary)
    return 0


def cmd_figure3(args) -> int:
    n = args.n if args.n is not None else LabConfig.FIGURE3_PRESETS[args.preset]
    orders = args.orders
    if min(orders) < 1 or max(orders) >= n:
        raise InvalidArgumentError(f"orders {orders} must lie in 1..{n - 1}")
    s = max(orders)
    rng = block_rng(args.seed, 0)
    if args.mode == "chain":
        counts = simulate_path(n, s, rng).counts
    else:
        counts = order_counts(sample_merge_history(n, rng), s).counts

    header = ["k"] + [f"W{r}" for r in orders] + [f"EW{r}" for r in orders]
    rows = ([k] + [counts[k, r - 1] for r in orders] + [float(mean_w(n, k, r)) for r in orders]
            for k in range(n, 0, -1))
    write_table(header, rows, args)
    return 0


MOMENT_COLUMNS = list(MomentRow.model_fields)


def cmd_moments(args) -> int:
    levels = [args.k] if args.k is not None else list(range(args.n, 0, -1))
    rows, unsupported = [], False
    for k in levels:
        mean = mean_w(args.n, k, args.r)
        second = None
        if not args.mean_only:
            try:
                second = second_moment_w(args.n, k, args.r)
            except UnsupportedRegimeError:
                unsupported = True
        row = MomentRow.from_values(args.n, k, args.r, mean, second).model_dump()
        rows.append([row[name] for name in MOMENT_COLUMNS])
    write_table(MOMENT_COLUMNS, rows, args)
    if unsupported:
        raise UnsupportedRegimeError(
            f"second moment needs n > 2r (n={args.n}, r={args.r}); only means were written")
    return 0


def cmd_couple(args) -> int:
    a_n, b_n = RegionConfig.default_bounds(args.n)
    region = RegionConfig(a_n=args.a_n if args.a_n is not None else a_n,
                          b_n=args.b_n if args.b_n is not None else b_n, n=args.n)
    config = _config(args, args.n, args.s, args.reps, mode="coupled")
    diagnostics = run_region_experiment(config, region).diagnostics

    mismatch = diagnostics.mismatch_rate()
    abs_diff = diagnostics.mean_abs_diff()
    var_diff = diagnostics.var_diff()
    levels = diagnostics.levels
    lemma2 = lemma2_mismatch_shape(args.n, region.a_n, levels)
    lemma3 = lemma3_variance_shape(args.n, region.a_n, levels)
    header = ["k", "r", "mismatch_rate", "mean_abs_diff", "var_diff",
              "lemma2_bound_shape", "lemma3_bound_shape"]
    rows = ([k, r, mismatch[k, r - 1], abs_diff[k, r - 1], var_diff[k, r - 1], shape2, shape3]
            for k, shape2, shape3 in zip(levels.tolist(), lemma2, lemma3)
            for r in range(1, args.s + 1))
    write_table(header, rows, args)
    return 0


def cmd_sfs(args) -> int:
    mutation = MutationConfig(rate=args.rate)
    conventions = theta_conventions(mutation.rate, args.s)
    logger.info(f"rate ν={mutation.rate}: θ={conventions['theta_if_rate_is_half_theta']} "
                f"if ν=θ/2, θ={conventions['theta_if_rate_is_theta']} if ν=θ")
    config = _config(args, args.n, args.s, args.reps, rate=mutation.rate)
    table = sfs_table(config)
    header = ["replicate_id"] + [f"M_{r}" for r in range(1, args.s + 1)] + ["S_n"]
    write_table(header, ([i] + list(row) for i, row in enumerate(table)), args)
    if args.summary:
        write_model(summarize_sfs(args.n, mutation, table[:, :-1], table[:, -1]), args.summary)
    return 0


def cmd_clt(args) -> int:
    write_model(run_clt_experiment(_config(args, args.n, args.s, args.reps, args.mode)), args.out)
    return 0


def cmd_gap(args) -> int:
    write_model(run_gap_experiment(_config(args, args.n, args.s, args.reps, mode="coupled")), args.out)
    return 0


def cmd_formation(args) -> int:
    write_model(formation_level_test(args.n, args.k, args.reps, args.seed), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output file (default: stdout)")
    common.add_argument("--format", choices=["csv", "json"], default="csv")
    common.add_argument("--verbose", action="store_true", help="debug logging on stderr")

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, required=True, help="master seed (required)")
    seeded.add_argument("--workers", type=int, default=None,
                        help="parallel workers (default: $COALESCENT_WORKERS or 1)")

    parser = argparse.ArgumentParser(description="Order-r branch lengths of the Kingman coalescent")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, seeded], help="per-replicate order lengths")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--mode", choices=["tree", "chain"], default="tree")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("figure2", parents=[common, seeded], help="scatter data of (L1, L2)")
    p.add_argument("--n", type=int, default=LabConfig.FIGURE2_N)
    p.add_argument("--reps", type=int, default=LabConfig.FIGURE2_REPLICATES)
    p.add_argument("--mode", choices=["tree", "chain"], default="tree")
    p.add_argument("--summary", default=None, help="JSON file for the mean summary")
    p.set_defaults(handler=cmd_figure2)

    p = sub.add_parser("figure3", parents=[common, seeded], help="one trajectory of W_k with E(W_k)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--preset", choices=sorted(LabConfig.FIGURE3_PRESETS), default="small")
    p.add_argument("--orders", type=order_list, default=[1, 2], help="comma-separated orders, e.g. 1,2")
    p.add_argument("--mode", choices=["tree", "chain"], default="tree")
    p.set_defaults(handler=cmd_figure3)

    p = sub.add_parser("moments", parents=[common], help="exact moments of W_k(r)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, default=None, help="single level (default: all levels)")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--mean-only", action="store_true", help="skip the second moment")
    p.set_defaults(handler=cmd_moments)

    p = sub.add_parser("couple", parents=[common, seeded], help="per-level coupling diagnostics")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--a-n", type=int, default=None)
    p.add_argument("--b-n", type=int, default=None)
    p.set_defaults(handler=cmd_couple)

    p = sub.add_parser("sfs", parents=[common, seeded], help="site frequency spectra")
    p.add_argument("--rate", type=float, required=True, help="mutations per unit length (ν = θ/2)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--summary", default=None, help="JSON file for the Poisson-limit summary")
    p.set_defaults(handler=cmd_sfs)

    p = sub.add_parser("clt", parents=[common, seeded], help="CLT summary (JSON)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--mode", choices=["tree", "chain", "coupled"], default="chain",
                   help="chain (default) has the same law as tree and scales to n = 10^5")
    p.set_defaults(handler=cmd_clt)

    p = sub.add_parser("gap", parents=[common, seeded], help="coupled length gap (JSON)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--reps", type=int, required=True)
    p.set_defaults(handler=cmd_gap)

    p = sub.add_parser("formation", parents=[common, seeded], help="formation level law of {1,2} (JSON)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.set_defaults(handler=cmd_formation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else LabConfig.LOG_LEVEL,
        format=LabConfig.LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return 2
    except LabError as e:
        logger.error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
