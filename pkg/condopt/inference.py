from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from joblib import Parallel, delayed

from condopt.core import CondOptPrior, PosteriorTree, PredictorIndex, fit, index_predictors, predict_density
from condopt.dataset import Dataset
from condopt.space import SampleSpace, empirical_dimension

logger = logging.getLogger(__name__)

Y_GIVEN_X = "y|x"
X_GIVEN_Y = "x|y"
MIN_OF_BOTH = "min"
DIRECTIONS = (Y_GIVEN_X, X_GIVEN_Y, MIN_OF_BOTH)
HISTOGRAM_BINS = 20


@dataclass(frozen=True)
class IndependenceResult:
    stat_observed: float
    null_stats: list[float]
    p_value: float
    bayes_factor: float
    direction: str
    log_bayes_factor: float = 0.0
    degenerate: bool = False
    stats_by_direction: dict[str, float] = field(default_factory=dict)

    @property
    def permutations(self) -> int:
        return len(self.null_stats)

    def to_dict(self) -> dict[str, Any]:
        counts, edges = np.histogram(self.null_stats, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
        return {
            "direction": self.direction,
            "stat_observed": self.stat_observed,
            "p_value": self.p_value,
            "bayes_factor": _finite(self.bayes_factor),
            "log_bayes_factor": _finite(self.log_bayes_factor),
            "permutations": self.permutations,
            "degenerate": self.degenerate,
            "stats_by_direction": dict(self.stats_by_direction),
            "null_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }


def _finite(value: float) -> float | None:
    # null when the statistic underflowed to zero
    return value if math.isfinite(value) else None


def bayes_factor(rho: float, stat: float) -> float:
    """Evidence for dependence implied by the posterior stopping probability at the root."""
    if stat <= 0.0:
        return math.inf
    return (rho / (1.0 - rho)) * (1.0 / stat - 1.0)


def log_bayes_factor(tree: PosteriorTree) -> float:
    """log of [sum_j lambda_j prod_i Phi(child)] / M at the root, computed without rho_post."""
    root = tree.index_of_key(tree.lattice.root_key)
    if root < 0:
        return 0.0
    return tree.split_log_marginal(root) - float(tree.log_m[root])


def p_value(observed: float, null_stats: list[float] | np.ndarray) -> float:
    """Add-one permutation p-value; smaller statistics are more extreme."""
    null = np.asarray(null_stats, dtype=float)
    return float((1 + np.count_nonzero(null <= observed)) / (1 + null.size))


def _default_space(values: np.ndarray, prefix: str) -> SampleSpace:
    return SampleSpace(tuple(empirical_dimension(values[:, j], f"{prefix}{j + 1}") for j in range(values.shape[1])))


@dataclass
class _Direction:
    name: str
    space_x: SampleSpace
    space_y: SampleSpace
    prior: CondOptPrior
    data: Dataset
    index: PredictorIndex
    inverse: bool

    def statistic(self, permutation: np.ndarray | None = None) -> float:
        data = self.data
        if permutation is not None:
            order = np.argsort(permutation) if self.inverse else permutation
            data = data.with_responses(data.y[order])
        tree = fit(self.space_x, self.space_y, self.prior, data, index=self.index)
        return tree.root.rho_post


def independence_test(
    data: Dataset,
    prior: CondOptPrior,
    permutations: int,
    rng: np.random.Generator,
    direction: str = Y_GIVEN_X,
    *,
    space_x: SampleSpace | None = None,
    space_y: SampleSpace | None = None,
    threads: int = 1,
) -> IndependenceResult:
    """Permutation test of X independent of Y using the root's posterior stopping probability."""
    if direction not in DIRECTIONS:
        raise ValueError(f"Unknown direction {direction!r}; expected one of {', '.join(DIRECTIONS)}")
    if data.n < 2:
        raise ValueError("The independence test needs at least 2 observations")
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    space_x = space_x or _default_space(data.x, "x")
    space_y = space_y or _default_space(data.y, "y")

    directions: list[_Direction] = []
    if direction in (Y_GIVEN_X, MIN_OF_BOTH):
        directions.append(
            _Direction(Y_GIVEN_X, space_x, space_y, prior, data, index_predictors(space_x, prior, data.x), False)
        )
    if direction in (X_GIVEN_Y, MIN_OF_BOTH):
        reverse = prior.reversed()
        swapped = data.swapped()
        directions.append(
            _Direction(X_GIVEN_Y, space_y, space_x, reverse, swapped, index_predictors(space_y, reverse, swapped.x), True)
        )

    trees = {d.name: fit(d.space_x, d.space_y, d.prior, d.data, threads=threads, index=d.index) for d in directions}
    by_direction = {name: tree.root.rho_post for name, tree in trees.items()}
    chosen = min(by_direction, key=by_direction.get)
    observed = by_direction[chosen]
    chosen_tree = trees[chosen]
    degenerate = any(bool(np.all(d.data.x == d.data.x[0])) for d in directions)
    if degenerate:
        logger.warning("predictors are constant: the root carries no usable split")

    def replicate(stream: np.random.Generator) -> float:
        permutation = stream.permutation(data.n)
        return min(d.statistic(permutation) for d in directions)

    streams = rng.spawn(permutations)
    null_stats = Parallel(n_jobs=threads, prefer="threads")(delayed(replicate)(s) for s in streams)
    logger.debug("%d permutation fits done", permutations)

    return IndependenceResult(
        stat_observed=observed,
        null_stats=[float(s) for s in null_stats],
        p_value=p_value(observed, null_stats),
        bayes_factor=bayes_factor(chosen_tree.prior.rho_at(0), observed),
        direction=direction,
        log_bayes_factor=log_bayes_factor(chosen_tree),
        degenerate=degenerate,
        stats_by_direction=by_direction,
    )


def log_predictive_score(tree: PosteriorTree, test_data: Dataset) -> float:
    """Sum of log posterior-mean conditional densities over held-out pairs."""
    if test_data.n == 0:
        return 0.0
    densities = predict_density(tree, test_data.x, test_data.y)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(densities)))
