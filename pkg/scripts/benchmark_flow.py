#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
import sys
import time
import tracemalloc
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from condopt.core import CondOptPrior, fit
from condopt.dataset import resolve_space
from condopt.opt import OptPrior
from condopt.simulate import FLOW, Scenario, scenario_columns, simulate


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Time a flow-sized synthetic fit at n and 2n.")
    parser.add_argument("--n", type=int, default=100_000)
    parser.add_argument("--depth", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--trace-memory", action="store_true", help="Report peak traced allocations (slower)")
    return parser.parse_args()


def timed_fit(n: int, args: argparse.Namespace) -> dict:
    data = simulate(Scenario(FLOW, n, args.seed))
    predictors, responses = scenario_columns(FLOW)
    prior = CondOptPrior(local=OptPrior(max_depth_y=args.depth), max_depth_x=args.depth)
    if args.trace_memory:
        tracemalloc.start()
    started = time.perf_counter()
    tree = fit(resolve_space(predictors, data.x), resolve_space(responses, data.y), prior, data, threads=args.threads)
    elapsed = time.perf_counter() - started
    peak = None
    if args.trace_memory:
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    return {"n": n, "seconds": elapsed, "nodes": tree.size, "peak_bytes": peak}


def main() -> None:
    args = parse_args()
    single = timed_fit(args.n, args)
    double = timed_fit(2 * args.n, args)
    print(
        json.dumps(
            {
                "runs": [single, double],
                "ratio": double["seconds"] / single["seconds"],
            },
            indent=2,
        )
    )


if __name__ == "__main__":
    main()
