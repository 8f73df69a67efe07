#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from condopt.core import CondOptPrior, fit, hmap, inclusion_probabilities
from condopt.dataset import resolve_space
from condopt.inference import independence_test, log_predictive_score
from condopt.simulate import EX1, EX2, EX3, EX4, Scenario, generator, scenario_columns, simulate


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Print summaries of the four simulation studies.")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--permutations", type=int, default=200)
    parser.add_argument("--draws", type=int, default=1000)
    return parser.parse_args()


def _fit(name: str, n: int, seed: int, prior: CondOptPrior):
    data = simulate(Scenario(name, n, seed))
    predictors, responses = scenario_columns(name)
    space_x = resolve_space(predictors, data.x)
    space_y = resolve_space(responses, data.y)
    return data, space_x, space_y, fit(space_x, space_y, prior, data)


def _bounds(region) -> list:
    return [list(b) if isinstance(b, tuple) else b for b in region.bounds()]


def main() -> None:
    args = parse_args()
    summary = {}

    _, _, _, tree = _fit(EX1, 2500, args.seed, CondOptPrior())
    test = simulate(Scenario(EX1, 100, args.seed + 1000))
    summary[EX1] = {
        "rho_post_root": tree.root.rho_post,
        "hmap_leaves": [_bounds(leaf.region) for leaf in hmap(tree).leaves()],
        "log_p": log_predictive_score(tree, test),
    }

    _, space_x, _, tree = _fit(EX2, 2000, args.seed, CondOptPrior())
    test = simulate(Scenario(EX2, 100, args.seed + 1000))
    inside = space_x.dims[0]
    keep = (test.x[:, 0] >= inside.lo) & (test.x[:, 0] <= inside.hi)
    keep &= (test.y[:, 0] >= tree.space_y.dims[0].lo) & (test.y[:, 0] <= tree.space_y.dims[0].hi)
    summary[EX2] = {
        "hmap_leaves": len(hmap(tree).leaves()),
        "log_p": log_predictive_score(tree, test.subset(keep.nonzero()[0])),
        "test_points_in_range": int(keep.sum()),
    }

    binary_prior = CondOptPrior(max_depth_x=4)
    for n in (500, 200):
        _, _, _, tree = _fit(EX3, n, args.seed, binary_prior)
        probs = inclusion_probabilities(tree, args.draws, generator(args.seed))
        top = sorted(range(len(probs)), key=lambda j: -probs[j])[:3]
        summary[f"{EX3}-n{n}"] = {
            "inclusion": [round(float(p), 3) for p in probs],
            "top3_dims": [j + 1 for j in top],
        }

    data = simulate(Scenario(EX4, 400, args.seed))
    predictors, responses = scenario_columns(EX4)
    result = independence_test(
        data,
        binary_prior,
        args.permutations,
        generator(args.seed),
        space_x=resolve_space(predictors, data.x),
        space_y=resolve_space(responses, data.y),
    )
    summary[EX4] = {
        "stat_observed": result.stat_observed,
        "p_value": result.p_value,
        "bayes_factor": result.bayes_factor,
    }

    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
