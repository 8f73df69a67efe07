from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import betaln

from condopt.lattice import (
    CHUNK_ENTRIES,
    LevelTable,
    Lattice,
    backward,
    enumerate_levels,
    lookup,
    prior_rho,
    selection_probabilities,
)
from condopt.space import Region, SampleSpace

logger = logging.getLogger(__name__)

DEFAULT_RHO = 0.5
DEFAULT_ALPHA = 0.5
DEFAULT_MAX_DEPTH = 12


@dataclass(frozen=True)
class OptPrior:
    rho_y: float = DEFAULT_RHO
    alpha: tuple[float, float] = (DEFAULT_ALPHA, DEFAULT_ALPHA)
    max_depth_y: int = DEFAULT_MAX_DEPTH
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.rho_y < 1.0:
            raise ValueError("rho_y must lie in (0, 1)")
        if len(self.alpha) != 2 or min(self.alpha) <= 0.0:
            raise ValueError("alpha must be a pair of positive pseudo-counts")
        if self.max_depth_y < 0:
            raise ValueError("max_depth_y must be >= 0")
        if self.weights is not None and min(self.weights) <= 0.0:
            raise ValueError("selection weights must be positive")
        object.__setattr__(self, "rho_y", float(self.rho_y))
        object.__setattr__(self, "alpha", (float(self.alpha[0]), float(self.alpha[1])))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def symmetric(self) -> bool:
        return self.alpha[0] == self.alpha[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rho_y": self.rho_y.hex(),
            "alpha": [a.hex() for a in self.alpha],
            "max_depth_y": self.max_depth_y,
            "weights": None if self.weights is None else [w.hex() for w in self.weights],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "OptPrior":
        weights = payload.get("weights")
        return cls(
            rho_y=float.fromhex(payload["rho_y"]),
            alpha=tuple(float.fromhex(a) for a in payload["alpha"]),  # type: ignore[arg-type]
            max_depth_y=int(payload["max_depth_y"]),
            weights=None if weights is None else tuple(float.fromhex(w) for w in weights),
        )


class _LocalModel:
    def __init__(self, lattice: Lattice, prior: OptPrior) -> None:
        self.lattice = lattice
        self.prior = prior
        self.symmetric = prior.symmetric
        self.weights = _weights_array(prior.weights, lattice.dims)
        self._beta_prior = float(betaln(*prior.alpha))

    def stop_terms(self, table: LevelTable) -> np.ndarray:
        return -table.counts * self.lattice.log_measure(table.depth)

    def rho(self, depth: int) -> float:
        return self.prior.rho_y

    def split_factor(self, depth: int, n_left: np.ndarray, n_right: np.ndarray) -> np.ndarray:
        a_left, a_right = self.prior.alpha
        return betaln(a_left + n_left, a_right + n_right) - self._beta_prior


def _weights_array(weights: Sequence[float] | None, dims: int) -> np.ndarray | None:
    if weights is None:
        return None
    if len(weights) != dims:
        raise ValueError(f"Expected {dims} selection weights, got {len(weights)}")
    return np.asarray(weights, dtype=float)


def _validated(space: SampleSpace, ys: Any, label: str = "response") -> np.ndarray:
    return space.validate(np.asarray(ys, dtype=float).reshape(-1, len(space)), label=label)


@dataclass(frozen=True)
class LocalNode:
    region: Region
    n: int
    log_phi: float
    rho_post: float
    lambda_post: tuple[float, ...]
    alpha_post: tuple[tuple[float, float], ...]
    materialized: bool


@dataclass(frozen=True)
class PiecewiseDensity:
    """Piecewise-constant density on disjoint dyadic cells covering the space."""

    lattice: Lattice = field(repr=False)
    keys: np.ndarray
    values: np.ndarray

    def __call__(self, ys: Any) -> np.ndarray:
        space = self.lattice.space
        points = _validated(space, ys)
        codes = self.lattice.codes(points)
        out = np.zeros(points.shape[0])
        shapes, inverse = np.unique(self.lattice.levels_of(self.keys), axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        for s, shape in enumerate(shapes):
            cells = np.flatnonzero(inverse == s)
            pos, found = lookup(self.keys[cells], self.lattice.point_keys(codes, shape))
            out[found] = self.values[cells][pos[found]]
        return out

    def integral(self) -> float:
        depths = self.lattice.levels_of(self.keys).sum(axis=1)
        measures = np.exp(self.lattice.space.log_measure - depths * math.log(2.0))
        return float(np.sum(self.values * measures))

    def cells(self) -> list[Region]:
        return [self.lattice.region_of(int(key)) for key in self.keys]


class LocalOptPosterior:
    """Posterior OPT on the response space; only nonempty regions are stored."""

    def __init__(
        self,
        space: SampleSpace,
        prior: OptPrior,
        lattice: Lattice,
        keys: np.ndarray,
        n: np.ndarray,
        log_phi: np.ndarray,
        rho_post: np.ndarray,
        lambda_post: np.ndarray,
    ) -> None:
        self.space = space
        self.prior = prior
        self.lattice = lattice
        self.keys = keys
        self.n = n
        self.log_phi = log_phi
        self.rho_post = rho_post
        self.lambda_post = lambda_post
        self._model = _LocalModel(lattice, prior)

    @property
    def total(self) -> int:
        return int(self.n[self._root()]) if self.keys.size else 0

    def _root(self) -> int:
        pos, found = lookup(self.keys, np.array([self.lattice.root_key], dtype=np.int64))
        return int(pos[0]) if found[0] else -1

    @property
    def log_marginal(self) -> float:
        root = self._root()
        return float(self.log_phi[root]) if root >= 0 else 0.0

    def _params(self, keys: np.ndarray, shapes: np.ndarray, depth: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        candidates = shapes < self.lattice.caps
        pos, found = lookup(self.keys, keys)
        counts = np.where(found, self.n[pos] if self.n.size else 0, 0)
        rho0 = prior_rho(self._model, depth, self.lattice.max_depth, candidates)
        rho = np.where(found, self.rho_post[pos] if self.n.size else 0.0, rho0)
        lam0 = selection_probabilities(self._model.weights, candidates)
        if self.n.size:
            lam = np.where(found[..., None], self.lambda_post[pos], lam0)
        else:
            lam = np.broadcast_to(lam0, keys.shape + (self.lattice.dims,))
        return counts, rho, lam

    def mean_density(self, ys: Any) -> np.ndarray:
        """Posterior-mean density, vectorized over response points."""
        points = _validated(self.space, ys)
        return self.grouped_mean_density(points, np.zeros(points.shape[0], dtype=np.int64))

    def grouped_mean_density(self, ys: Any, groups: np.ndarray) -> np.ndarray:
        """Mean density of group ``groups[i]`` at ``ys[i]`` for a posterior built by ``grouped_posterior``."""
        points = _validated(self.space, ys)
        groups = np.asarray(groups, dtype=np.int64)
        out = np.empty(points.shape[0])
        widest = max(self.lattice.shapes(d).shape[0] for d in range(self.lattice.max_total_depth + 1))
        step = max(1, CHUNK_ENTRIES // (widest * self.lattice.dims))
        for start in range(0, points.shape[0], step):
            out[start : start + step] = self._mean_density(points[start : start + step], groups[start : start + step])
        return out

    def _mean_density(self, points: np.ndarray, groups: np.ndarray) -> np.ndarray:
        lattice = self.lattice
        codes = lattice.codes(points)
        heaps = lattice.heap_table(codes)
        prefix = groups << lattice.bits
        a_left, a_right = self.prior.alpha
        q = points.shape[0]
        density = np.zeros(q)
        reach = np.ones((q, 1))
        shapes = lattice.shapes(0)
        keys = lattice.keys_for(heaps, shapes, prefix=prefix)
        counts, rho, lam = self._params(keys, shapes, 0)
        for depth in range(lattice.max_total_depth + 1):
            density += np.sum(reach * rho, axis=1) * math.exp(-lattice.log_measure(depth))
            next_shapes = lattice.shapes(depth + 1)
            if depth == lattice.max_total_depth or next_shapes.shape[0] == 0:
                break
            next_keys = lattice.keys_for(heaps, next_shapes, prefix=prefix)
            next_counts, next_rho, next_lam = self._params(next_keys, next_shapes, depth + 1)
            outflow = reach * (1.0 - rho)
            child_map = lattice.child_shape_map(depth)
            next_reach = np.zeros((q, next_shapes.shape[0]))
            for j in range(lattice.dims):
                valid = np.flatnonzero((child_map[:, j] >= 0) & (shapes[:, j] < lattice.caps[j]))
                if valid.size == 0:
                    continue
                target = child_map[valid, j]
                level = shapes[valid, j] + 1
                side = (codes[:, j : j + 1] >> (lattice.caps[j] - level)[None, :]) & 1
                pseudo = np.where(side == 0, a_left, a_right)
                share = (pseudo + next_counts[:, target]) / (a_left + a_right + counts[:, valid])
                next_reach[:, target] += outflow[:, valid] * lam[:, valid, j] * share
            reach, shapes, keys = next_reach, next_shapes, next_keys
            counts, rho, lam = next_counts, next_rho, next_lam
        return density

    def _node_params(self, key: int, depth: int) -> tuple[int, float, np.ndarray, np.ndarray]:
        levels = self.lattice.levels_of(np.array([key], dtype=np.int64))[0]
        counts, rho, lam = self._params(np.array([[key]], dtype=np.int64), levels[None, :], depth)
        return int(counts[0, 0]), float(rho[0, 0]), lam[0, 0], levels

    def _child_count(self, key: int) -> int:
        pos, found = lookup(self.keys, np.array([key], dtype=np.int64))
        return int(self.n[pos[0]]) if found[0] else 0

    def _draw_split(self, key: int, j: int, rng: np.random.Generator) -> tuple[int, int, float]:
        left = int(self.lattice.child_keys(np.array([key], dtype=np.int64), j, 0)[0])
        right = int(self.lattice.child_keys(np.array([key], dtype=np.int64), j, 1)[0])
        a_left, a_right = self.prior.alpha
        theta = rng.beta(a_left + self._child_count(left), a_right + self._child_count(right))
        return left, right, float(theta)

    def sample(self, rng: np.random.Generator) -> PiecewiseDensity:
        """One density from the posterior, drawn top-down over the whole space."""
        cells: list[int] = []
        masses: list[float] = []
        stack = [(self.lattice.root_key, 0, 1.0)]
        while stack:
            key, depth, mass = stack.pop()
            _, rho, lam, _ = self._node_params(key, depth)
            if rho >= 1.0 or rng.random() < rho:
                cells.append(key)
                masses.append(mass * math.exp(-self.lattice.log_measure(depth)))
                continue
            j = int(rng.choice(self.lattice.dims, p=lam / lam.sum()))
            left, right, theta = self._draw_split(key, j, rng)
            stack.append((right, depth + 1, mass * (1.0 - theta)))
            stack.append((left, depth + 1, mass * theta))
        order = np.argsort(np.array(cells, dtype=np.int64))
        return PiecewiseDensity(
            self.lattice,
            np.array(cells, dtype=np.int64)[order],
            np.array(masses, dtype=float)[order],
        )

    def sample_at(self, y: Sequence[float], rng: np.random.Generator) -> float:
        """Value at ``y`` of one posterior density draw, realized along y's path only."""
        point = _validated(self.space, [list(np.atleast_1d(y))])
        codes = self.lattice.codes(point)[0]
        key, depth, mass = self.lattice.root_key, 0, 1.0
        while True:
            _, rho, lam, levels = self._node_params(key, depth)
            if rho >= 1.0 or rng.random() < rho:
                return mass * math.exp(-self.lattice.log_measure(depth))
            j = int(rng.choice(self.lattice.dims, p=lam / lam.sum()))
            left, right, theta = self._draw_split(key, j, rng)
            side = (int(codes[j]) >> (int(self.lattice.caps[j]) - int(levels[j]) - 1)) & 1
            key, mass = (right, mass * (1.0 - theta)) if side else (left, mass * theta)
            depth += 1

    def node(self, region: Region) -> LocalNode:
        key = self.lattice.key_of(region)
        n, rho, lam, levels = self._node_params(key, region.depth)
        candidates = np.flatnonzero(levels < self.lattice.caps)
        alpha_post = []
        for j in candidates:
            left, right = (
                int(self.lattice.child_keys(np.array([key], dtype=np.int64), int(j), side)[0]) for side in (0, 1)
            )
            alpha_post.append(
                (self.prior.alpha[0] + self._child_count(left), self.prior.alpha[1] + self._child_count(right))
            )
        pos, found = lookup(self.keys, np.array([key], dtype=np.int64))
        log_phi = float(self.log_phi[pos[0]]) if found[0] else 0.0
        return LocalNode(
            region=region,
            n=n,
            log_phi=log_phi,
            rho_post=rho,
            lambda_post=tuple(float(lam[j]) for j in candidates),
            alpha_post=tuple(alpha_post),
            materialized=bool(found[0]),
        )


def grouped_log_marginals(lattice: Lattice, prior: OptPrior, codes: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Log marginal likelihood of every group of coded responses, groups numbered 0..G-1."""
    model = _LocalModel(lattice, prior)
    tables, _, _ = enumerate_levels(lattice, codes, groups=groups, expand_min=2 if prior.symmetric else 1)
    if not tables:
        return np.zeros(0)
    return backward(lattice, tables, model)[0].log_phi


def opt_log_marginal(space_y: SampleSpace, prior: OptPrior, ys: Any) -> float:
    points = _validated(space_y, ys)
    if points.shape[0] == 0:
        return 0.0
    lattice = Lattice(space_y, prior.max_depth_y)
    codes = lattice.codes(points)
    return float(grouped_log_marginals(lattice, prior, codes, np.zeros(points.shape[0], dtype=np.int64))[0])


def opt_posterior(space_y: SampleSpace, prior: OptPrior, ys: Any, *, lattice: Lattice | None = None) -> LocalOptPosterior:
    points = _validated(space_y, ys)
    lattice = lattice or Lattice(space_y, prior.max_depth_y)
    return grouped_posterior(space_y, prior, lattice, lattice.codes(points))


def grouped_posterior(
    space_y: SampleSpace,
    prior: OptPrior,
    lattice: Lattice,
    codes: np.ndarray,
    groups: np.ndarray | None = None,
) -> LocalOptPosterior:
    """Posteriors of many row groups in one table; keys carry the group number above the lattice bits."""
    tables, _, _ = enumerate_levels(lattice, codes, groups=groups, expand_min=1)
    posteriors = backward(lattice, tables, _LocalModel(lattice, prior))
    if not tables:
        empty = np.empty(0)
        return LocalOptPosterior(
            space_y, prior, lattice, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
            empty, empty, np.empty((0, lattice.dims)),
        )
    keys = np.concatenate([t.keys for t in tables])
    order = np.argsort(keys)
    return LocalOptPosterior(
        space_y,
        prior,
        lattice,
        keys[order],
        np.concatenate([t.counts for t in tables])[order],
        np.concatenate([p.log_phi for p in posteriors])[order],
        np.concatenate([p.rho_post for p in posteriors])[order],
        np.concatenate([p.lambda_post for p in posteriors])[order],
    )


def opt_mean_density(post: LocalOptPosterior, y: Any) -> float | np.ndarray:
    values = post.mean_density(y)
    return float(values[0]) if np.ndim(y) <= 1 and values.size == 1 else values


def opt_sample_density(post: LocalOptPosterior, rng: np.random.Generator) -> PiecewiseDensity:
    return post.sample(rng)

