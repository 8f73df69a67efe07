from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from condopt.dataset import BINARY, ColumnSpec, Dataset
from condopt.errors import InvariantError

logger = logging.getLogger(__name__)

EX1 = "ex1-beta-blocks"
EX2 = "ex2-bivariate-normal"
EX3 = "ex3-markov-binary"
EX4 = "ex4-independence-test"
FLOW = "flow-synthetic"
SCENARIOS = (EX1, EX2, EX3, EX4, FLOW)

MARKOV_PERSISTENCE = 0.7
EX2_MEAN = (0.6, 0.4)
EX2_COV = ((0.01, 0.005), (0.005, 0.01))


@dataclass(frozen=True)
class Scenario:
    name: str
    n: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise ValueError(f"Unknown scenario {self.name!r}; expected one of {', '.join(SCENARIOS)}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def markov_binary(rng: np.random.Generator, n: int, dims: int, persistence: float = MARKOV_PERSISTENCE) -> np.ndarray:
    """Rows of a binary chain: first coordinate fair, each next one repeats with ``persistence``."""
    x = np.empty((n, dims))
    x[:, 0] = rng.random(n) < 0.5
    for i in range(1, dims):
        stay = rng.random(n) < persistence
        x[:, i] = np.where(stay, x[:, i - 1], 1.0 - x[:, i - 1])
    return x


def _beta_blocks(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    x = rng.beta(2.0, 2.0, n)
    y = np.empty(n)
    blocks = [
        (x < 0.25, (30.0, 20.0)),
        ((x >= 0.25) & (x <= 0.5), (10.0, 30.0)),
        (x > 0.5, (0.5, 0.5)),
    ]
    for mask, (a, b) in blocks:
        y[mask] = rng.beta(a, b, int(mask.sum()))
    return x.reshape(-1, 1), y.reshape(-1, 1)


def _bivariate_normal(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = rng.multivariate_normal(EX2_MEAN, EX2_COV, size=n, method="cholesky")
    return pairs[:, :1], pairs[:, 1:]


def _markov_model(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    x = markov_binary(rng, n, 30)
    x5, x20, x30 = x[:, 4], x[:, 19], x[:, 29]
    first = (x5 == 1) & (x20 == 0) & (x30 == 1)
    second = (x5 == 0) & (x20 == 1)
    rest = ~(first | second)
    y = np.empty(n)
    y[first] = rng.beta(1.0, 6.0, int(first.sum()))
    y[second] = rng.beta(12.0, 16.0, int(second.sum()))
    y[rest] = rng.beta(3.0, 4.0, int(rest.sum()))
    return x, y.reshape(-1, 1)


def _independence_model(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    x = markov_binary(rng, n, 10)
    x1, x2, x5, x8, x10 = x[:, 0], x[:, 1], x[:, 4], x[:, 7], x[:, 9]
    bell = (x1 == 1) & (x2 == 1) & (x5 == 0)
    horns = (x5 == 1) & (x8 == 0) & (x10 == 0)
    if np.any(bell & horns):
        raise InvariantError("ex4 response conditions overlap")
    flat = ~(bell | horns)
    y = np.empty(n)
    y[bell] = rng.beta(4.0, 4.0, int(bell.sum()))
    y[horns] = rng.beta(0.5, 0.5, int(horns.sum()))
    y[flat] = rng.random(int(flat.sum()))
    return x, y.reshape(-1, 1)


def _flow_like(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two scatter channels and two markers on the unit square, one population per quadrant."""
    component = rng.integers(0, 4, n)
    shapes_x = np.array([[2.0, 6.0], [6.0, 2.0], [3.0, 3.0], [8.0, 8.0]])
    x = np.empty((n, 2))
    x[:, 0] = rng.beta(shapes_x[component, 0], shapes_x[component, 1])
    x[:, 1] = rng.beta(shapes_x[component, 1], shapes_x[component, 0])
    quadrant = (x[:, 0] >= 0.5).astype(np.int64) * 2 + (x[:, 1] >= 0.5).astype(np.int64)
    modes = np.array([[0.2, 0.7], [0.7, 0.2], [0.5, 0.5], [0.8, 0.8]])
    concentration = 20.0
    y = np.empty((n, 2))
    for k in range(2):
        mean = modes[quadrant, k]
        y[:, k] = rng.beta(mean * concentration, (1.0 - mean) * concentration)
    return x, y


_GENERATORS = {
    EX1: _beta_blocks,
    EX2: _bivariate_normal,
    EX3: _markov_model,
    EX4: _independence_model,
    FLOW: _flow_like,
}


def scenario_columns(name: str) -> tuple[list[ColumnSpec], list[ColumnSpec]]:
    """Predictor and response columns, with the bounds each scenario's points respect."""
    if name == EX1:
        return [ColumnSpec("x", lo=0.0, hi=1.0)], [ColumnSpec("y", lo=0.0, hi=1.0)]
    if name == EX2:
        return [ColumnSpec("x")], [ColumnSpec("y")]
    if name == EX3:
        return [ColumnSpec(f"x{i}", BINARY) for i in range(1, 31)], [ColumnSpec("y", lo=0.0, hi=1.0)]
    if name == EX4:
        return [ColumnSpec(f"x{i}", BINARY) for i in range(1, 11)], [ColumnSpec("y", lo=0.0, hi=1.0)]
    if name == FLOW:
        unit = dict(lo=0.0, hi=1.0)
        return (
            [ColumnSpec("x1", **unit), ColumnSpec("x2", **unit)],
            [ColumnSpec("y1", **unit), ColumnSpec("y2", **unit)],
        )
    raise ValueError(f"Unknown scenario {name!r}")


def scenario_config(name: str) -> str:
    """key=value config matching the scenario's columns."""
    predictors, responses = scenario_columns(name)
    lines = [
        f"predictors={','.join(c.render() for c in predictors)}",
        f"responses={','.join(c.render() for c in responses)}",
    ]
    if name == FLOW:
        lines.append("profile=flow")
    return "\n".join(lines) + "\n"


def simulate(scenario: Scenario) -> Dataset:
    rng = generator(scenario.seed)
    x, y = _GENERATORS[scenario.name](rng, scenario.n)
    predictors, responses = scenario_columns(scenario.name)
    logger.debug("simulated %d rows of %s (seed %d)", scenario.n, scenario.name, scenario.seed)
    return Dataset(x, y, tuple(c.name for c in predictors), tuple(c.name for c in responses))


def simulate_null(scenario: Scenario) -> Dataset:
    """The scenario's marginals with the responses re-paired at random, so X and Y are independent."""
    data = simulate(scenario)
    rng = generator(scenario.seed ^ 0x5EED)
    return data.permuted(rng)
