from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from condopt.dataset import Dataset
from condopt.errors import DataError
from condopt.lattice import (
    CHUNK_ENTRIES,
    MAX_KEY_BITS,
    Lattice,
    LevelTable,
    backward,
    enumerate_levels,
    lookup,
    prior_rho,
    selection_probabilities,
)
from condopt.opt import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_RHO,
    LocalOptPosterior,
    OptPrior,
    PiecewiseDensity,
    grouped_log_marginals,
    grouped_posterior,
    opt_posterior,
)
from condopt.space import Region, SampleSpace, Split, candidate_splits, split_region

logger = logging.getLogger(__name__)

HMAP_STOP_THRESHOLD = 0.5
PAIRS_PER_CHUNK = 1 << 21
NEGLIGIBLE_STOP_WEIGHT = 1e-18


@dataclass(frozen=True)
class CondOptPrior:
    rho: float = DEFAULT_RHO
    local: OptPrior = field(default_factory=OptPrior)
    max_depth_x: int = DEFAULT_MAX_DEPTH
    min_points: int = 0
    weights: tuple[float, ...] | None = None
    rho_by_depth: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.max_depth_x < 0:
            raise ValueError("max_depth_x must be >= 0")
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")
        if self.weights is not None:
            if min(self.weights) <= 0.0:
                raise ValueError("selection weights must be positive")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.rho_by_depth is not None:
            if any(not 0.0 <= r <= 1.0 for r in self.rho_by_depth):
                raise ValueError("rho_by_depth entries must lie in [0, 1]")
            object.__setattr__(self, "rho_by_depth", tuple(float(r) for r in self.rho_by_depth))
        object.__setattr__(self, "rho", float(self.rho))

    def rho_at(self, depth: int) -> float:
        if self.rho_by_depth is not None and depth < len(self.rho_by_depth):
            return self.rho_by_depth[depth]
        return self.rho

    def reversed(self) -> "CondOptPrior":
        return CondOptPrior(
            rho=self.local.rho_y,
            local=OptPrior(
                rho_y=self.rho,
                alpha=self.local.alpha,
                max_depth_y=self.max_depth_x,
                weights=self.weights,
            ),
            max_depth_x=self.local.max_depth_y,
            min_points=self.min_points,
            weights=self.local.weights,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "rho": self.rho.hex(),
            "local": self.local.to_dict(),
            "max_depth_x": self.max_depth_x,
            "min_points": self.min_points,
            "weights": None if self.weights is None else [w.hex() for w in self.weights],
            "rho_by_depth": None if self.rho_by_depth is None else [r.hex() for r in self.rho_by_depth],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "CondOptPrior":
        weights = payload.get("weights")
        by_depth = payload.get("rho_by_depth")
        return cls(
            rho=float.fromhex(payload["rho"]),
            local=OptPrior.from_dict(payload["local"]),
            max_depth_x=int(payload["max_depth_x"]),
            min_points=int(payload.get("min_points", 0)),
            weights=None if weights is None else tuple(float.fromhex(w) for w in weights),
            rho_by_depth=None if by_depth is None else tuple(float.fromhex(r) for r in by_depth),
        )


class _PredictorModel:
    def __init__(self, prior: CondOptPrior, dims: int, log_m: np.ndarray | None = None, offsets: np.ndarray | None = None) -> None:
        self.prior = prior
        self.symmetric = prior.local.symmetric
        self.weights = None if prior.weights is None else np.asarray(prior.weights, dtype=float)
        if self.weights is not None and self.weights.size != dims:
            raise ValueError(f"Expected {dims} predictor selection weights, got {self.weights.size}")
        self.log_m = log_m
        self.offsets = offsets

    def stop_terms(self, table: LevelTable) -> np.ndarray:
        start = int(self.offsets[table.depth])
        return self.log_m[start : start + table.keys.size]

    def rho(self, depth: int) -> float:
        return self.prior.rho_at(depth)

    def split_factor(self, depth: int, n_left: np.ndarray, n_right: np.ndarray) -> float:
        return 0.0


@dataclass
class PredictorIndex:
    lattice: Lattice
    tables: list[LevelTable]
    offsets: np.ndarray
    pair_nodes: np.ndarray
    pair_rows: np.ndarray
    n: int

    @property
    def node_count(self) -> int:
        return int(self.offsets[-1])


def index_predictors(space_x: SampleSpace, prior: CondOptPrior, x: np.ndarray) -> PredictorIndex:
    lattice = Lattice(space_x, prior.max_depth_x)
    symmetric = prior.local.symmetric
    tables, nodes, rows = enumerate_levels(
        lattice,
        lattice.codes(x),
        expand_min=2 if symmetric else 1,
        min_points=prior.min_points,
        record_pairs=True,
    )
    offsets = np.concatenate([[0], np.cumsum([t.keys.size for t in tables])]).astype(np.int64)
    if symmetric and nodes.size:
        counts = np.concatenate([t.counts for t in tables])
        keep = counts[nodes] >= 2
        nodes, rows = nodes[keep], rows[keep]
    order = np.argsort(nodes, kind="stable")
    logger.debug("indexed %d predictor regions, %d local memberships", int(offsets[-1]), nodes.size)
    return PredictorIndex(lattice, tables, offsets, nodes[order], rows[order], int(x.shape[0]))


def _chunks(sizes: np.ndarray, max_groups: int) -> list[tuple[int, int]]:
    ends = np.cumsum(sizes)
    chunks = []
    g = 0
    while g < sizes.size:
        limit = int(np.searchsorted(ends, ends[g] - sizes[g] + PAIRS_PER_CHUNK, side="right"))
        end = min(max(limit, g + 1), g + max_groups, sizes.size)
        chunks.append((g, end))
        g = end
    return chunks


def local_log_marginals(
    index: PredictorIndex,
    space_y: SampleSpace,
    prior: OptPrior,
    y: np.ndarray,
    *,
    threads: int = 1,
) -> np.ndarray:
    lattice = Lattice(space_y, prior.max_depth_y)
    log_m = np.full(index.node_count, -space_y.log_measure)
    if index.pair_nodes.size == 0:
        return log_m
    codes = lattice.codes(y)
    nodes, starts, sizes = np.unique(index.pair_nodes, return_index=True, return_counts=True)
    max_groups = 1 << (MAX_KEY_BITS - lattice.bits)
    chunks = _chunks(sizes, max_groups)

    def run(g0: int, g1: int) -> np.ndarray:
        p0 = int(starts[g0])
        p1 = int(starts[g1 - 1] + sizes[g1 - 1])
        groups = np.repeat(np.arange(g1 - g0, dtype=np.int64), sizes[g0:g1])
        return grouped_log_marginals(lattice, prior, codes[index.pair_rows[p0:p1]], groups)

    results = Parallel(n_jobs=threads, prefer="threads")(delayed(run)(g0, g1) for g0, g1 in chunks)
    for (g0, g1), values in zip(chunks, results):
        log_m[nodes[g0:g1]] = values
    logger.debug("local marginals for %d regions in %d chunks", nodes.size, len(chunks))
    return log_m


@dataclass(frozen=True)
class NodeSummary:
    region: Region
    n: int
    log_phi: float
    log_m: float
    rho_post: float
    lambda_post: tuple[float, ...]
    splits: tuple[Split, ...]
    materialized: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": [list(step) for step in self.region.path],
            "n": self.n,
            "log_phi": self.log_phi,
            "log_m": self.log_m,
            "rho_post": self.rho_post,
            "lambda_post": list(self.lambda_post),
            "materialized": self.materialized,
        }


class PosteriorTree:
    """Sorted region keys with per-region marginals; regions left out are at their prior."""

    def __init__(
        self,
        *,
        space_x: SampleSpace,
        space_y: SampleSpace,
        prior: CondOptPrior,
        x: np.ndarray,
        y: np.ndarray,
        keys: np.ndarray,
        n: np.ndarray,
        log_phi: np.ndarray,
        log_m: np.ndarray,
        rho_post: np.ndarray,
        lambda_post: np.ndarray,
        rep: np.ndarray,
        stats: dict[str, Any] | None = None,
    ) -> None:
        self.space_x = space_x
        self.space_y = space_y
        self.prior = prior
        self.x = x
        self.y = y
        self.keys = keys
        self.n = n
        self.log_phi = log_phi
        self.log_m = log_m
        self.rho_post = rho_post
        self.lambda_post = lambda_post
        self.rep = rep
        self.stats = dict(stats or {})
        self.lattice = Lattice(space_x, prior.max_depth_x)
        self.local_lattice = Lattice(space_y, prior.local.max_depth_y)
        self._model = _PredictorModel(prior, len(space_x))
        self._x_codes = self.lattice.codes(x)
        self._x_heaps = self.lattice.heap_table(self._x_codes)
        self._locals: dict[tuple[str, int], LocalOptPosterior] = {}
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return int(self.keys.size)

    @property
    def n_total(self) -> int:
        return int(self.x.shape[0])

    def index_of_key(self, key: int) -> int:
        pos, found = lookup(self.keys, np.array([key], dtype=np.int64))
        return int(pos[0]) if found[0] else -1

    def index_of(self, region: Region) -> int:
        return self.index_of_key(self.lattice.key_of(region))

    @property
    def root(self) -> "NodeSummary":
        return self.node(Region.root(self.space_x))

    def _row_in(self, row: int, key: int, levels: list[int]) -> bool:
        point = 0
        for j, k in enumerate(levels):
            point += int(self._x_heaps[j][row, k])
        return point == key

    def state(self, key: int, carried: int = -1) -> tuple[int, int, float, np.ndarray, int]:
        """(index, n, rho, lambda, single row) for a region key, using the prior when not stored."""
        idx = self.index_of_key(key)
        if idx >= 0:
            return idx, int(self.n[idx]), float(self.rho_post[idx]), self.lambda_post[idx], int(self.rep[idx])
        levels = self.lattice.key_levels(key)
        candidates = np.asarray(levels) < self.lattice.caps
        rep = carried if carried >= 0 and self._row_in(carried, key, levels) else -1
        rho = float(prior_rho(self._model, sum(levels), self.lattice.max_depth, candidates))
        lam = selection_probabilities(self._model.weights, candidates)
        return -1, (1 if rep >= 0 else 0), rho, lam, rep

    def node(self, region: Region) -> NodeSummary:
        key = self.lattice.key_of(region)
        splits = tuple(candidate_splits(self.space_x, region))
        dims = [s.dim for s in splits]
        idx = self.index_of_key(key)
        if idx >= 0:
            return NodeSummary(
                region,
                int(self.n[idx]),
                float(self.log_phi[idx]),
                float(self.log_m[idx]),
                float(self.rho_post[idx]),
                tuple(float(self.lambda_post[idx, j]) for j in dims),
                splits,
                True,
            )
        rows = np.flatnonzero(region.contains_points(self.x))
        candidates = np.asarray(region.levels) < self.lattice.caps
        lam = selection_probabilities(self._model.weights, candidates)
        rho = float(prior_rho(self._model, region.depth, self.lattice.max_depth, candidates))
        if rows.size == 0:
            log_m = 0.0
        elif rows.size == 1 and self.prior.local.symmetric and self.prior.min_points < 1:
            log_m = -self.space_y.log_measure
        else:
            # below a forced stop: treated as terminal
            log_m = self.local_posterior_for_rows(rows).log_marginal
            rho = 1.0
        return NodeSummary(
            region, int(rows.size), log_m, log_m, rho, tuple(float(lam[j]) for j in dims), splits, False
        )

    def _rows_of(self, idx: int) -> np.ndarray:
        levels = self.lattice.key_levels(int(self.keys[idx]))
        return np.flatnonzero(self.lattice.point_keys(self._x_codes, levels) == self.keys[idx])

    def local_posterior_for_rows(self, rows: np.ndarray) -> LocalOptPosterior:
        return opt_posterior(self.space_y, self.prior.local, self.y[rows], lattice=self.local_lattice)

    def local_posterior(self, idx: int = -1, rep: int = -1) -> LocalOptPosterior:
        if idx >= 0:
            cache_key = ("node", idx)
        elif rep >= 0:
            cache_key = ("row", rep)
        else:
            cache_key = ("prior", -1)
        with self._lock:
            cached = self._locals.get(cache_key)
        if cached is not None:
            return cached
        if idx >= 0:
            rows = self._rows_of(idx)
        elif rep >= 0:
            rows = np.array([rep], dtype=np.int64)
        else:
            rows = np.empty(0, dtype=np.int64)
        built = self.local_posterior_for_rows(rows)
        with self._lock:
            return self._locals.setdefault(cache_key, built)

    def split_log_marginal(self, idx: int) -> float:
        """log of sum_j lambda_j prod_i Phi(child) for a stored region, under the prior weights."""
        key = int(self.keys[idx])
        levels = self.lattice.key_levels(key)
        candidates = np.asarray(levels) < self.lattice.caps
        lam = selection_probabilities(self._model.weights, candidates)
        carried = int(self.rep[idx])
        terms = []
        for j in np.flatnonzero(candidates):
            total = math.log(lam[j])
            for side in (0, 1):
                child = self.lattice.child_key(key, int(j), side)
                c_idx, c_n, _, _, _ = self.state(child, carried)
                if c_idx >= 0:
                    total += float(self.log_phi[c_idx])
                elif c_n == 1:
                    total += -self.space_y.log_measure
            terms.append(total)
        return float(logsumexp(terms)) if terms else -math.inf


def fit(
    space_x: SampleSpace,
    space_y: SampleSpace,
    prior: CondOptPrior,
    data: Dataset,
    *,
    threads: int = 1,
    index: PredictorIndex | None = None,
) -> PosteriorTree:
    """Exact posterior of the two-stage model by one forward and one backward sweep."""
    started = time.perf_counter()
    x = space_x.validate(data.x, label="predictor")
    y = space_y.validate(data.y, label="response")
    if x.shape[0] != y.shape[0]:
        raise DataError("predictor and response row counts differ")
    if prior.local.weights is not None and len(prior.local.weights) != len(space_y):
        raise ValueError(f"Expected {len(space_y)} response selection weights")
    if index is None:
        index = index_predictors(space_x, prior, x)
    elif index.n != x.shape[0]:
        raise ValueError("Predictor index was built for a different dataset")
    log_m = local_log_marginals(index, space_y, prior.local, y, threads=threads)
    model = _PredictorModel(prior, len(space_x), log_m, index.offsets)
    levels = backward(index.lattice, index.tables, model)

    if index.tables:
        keys = np.concatenate([t.keys for t in index.tables])
        counts = np.concatenate([t.counts for t in index.tables])
        expanded = np.concatenate([t.expanded for t in index.tables])
        first = np.concatenate([t.first for t in index.tables])
        rep = np.where((counts == 1) & ~expanded & prior.local.symmetric, first, -1)
        order = np.argsort(keys)
        arrays = (
            keys[order],
            counts[order],
            np.concatenate([lv.log_phi for lv in levels])[order],
            log_m[order],
            np.concatenate([lv.rho_post for lv in levels])[order],
            np.concatenate([lv.lambda_post for lv in levels])[order],
            rep[order].astype(np.int64),
        )
    else:
        arrays = (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0),
            np.empty(0),
            np.empty(0),
            np.empty((0, len(space_x))),
            np.empty(0, dtype=np.int64),
        )
    stats = {
        "nodes": int(arrays[0].size),
        "local_memberships": int(index.pair_nodes.size),
        "depth": len(index.tables) - 1,
        "wall_seconds": time.perf_counter() - started,
    }
    logger.debug("fit %d rows into %d regions in %.3fs", x.shape[0], stats["nodes"], stats["wall_seconds"])
    return PosteriorTree(
        space_x=space_x,
        space_y=space_y,
        prior=prior,
        x=x,
        y=y,
        keys=arrays[0],
        n=arrays[1],
        log_phi=arrays[2],
        log_m=arrays[3],
        rho_post=arrays[4],
        lambda_post=arrays[5],
        rep=arrays[6],
        stats=stats,
    )


@dataclass(frozen=True)
class HmapNode:
    region: Region
    n: int
    rho_post: float
    split: Split | None = None
    children: tuple["HmapNode", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def leaves(self) -> list["HmapNode"]:
        if self.is_leaf:
            return [self]
        return [leaf for child in self.children for leaf in child.leaves()]

    def split_dims(self) -> set[int]:
        if self.is_leaf:
            return set()
        dims = {self.split.dim}
        for child in self.children:
            dims |= child.split_dims()
        return dims

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "path": [list(step) for step in self.region.path],
            "bounds": [list(b) if isinstance(b, tuple) else b for b in self.region.bounds()],
            "n": self.n,
            "rho_post": self.rho_post,
        }
        if self.split is not None:
            payload["split"] = {"dim": self.split.dim, "kind": self.split.kind}
            payload["children"] = [child.to_dict() for child in self.children]
        return payload


@dataclass(frozen=True)
class HmapTree:
    root: HmapNode

    def leaves(self) -> list[HmapNode]:
        return self.root.leaves()

    def split_dims(self) -> set[int]:
        return self.root.split_dims()

    def to_dict(self) -> dict[str, Any]:
        return self.root.to_dict()


def hmap(tree: PosteriorTree) -> HmapTree:
    """Top-down modal partition: stop when rho_post >= 0.5, else follow the most probable split."""

    def build(region: Region, carried: int) -> HmapNode:
        key = tree.lattice.key_of(region)
        _, n, rho, lam, rep = tree.state(key, carried)
        if rho >= HMAP_STOP_THRESHOLD:
            return HmapNode(region, n, rho)
        splits = candidate_splits(tree.space_x, region)
        best = max(splits, key=lambda s: (lam[s.dim], -s.dim))
        left, right = split_region(region, best)
        return HmapNode(region, n, rho, best, (build(left, rep), build(right, rep)))

    return HmapTree(build(Region.root(tree.space_x), -1))


@dataclass(frozen=True)
class PartitionNode:
    region: Region
    stopped: bool
    split_dim: int | None
    n: int


def _sample_nodes(
    tree: PosteriorTree, rng: np.random.Generator, cache: dict | None = None
) -> Iterator[tuple[PartitionNode, int, int]]:
    cache = {} if cache is None else cache
    stack: list[tuple[Region, int]] = [(Region.root(tree.space_x), -1)]
    while stack:
        region, carried = stack.pop()
        address = (region.levels, region.index, carried)
        state = cache.get(address)
        if state is None:
            idx, n, rho, lam, rep = tree.state(tree.lattice.key_of(region), carried)
            total = lam.sum()
            state = cache[address] = (idx, n, rho, lam / total if total > 0 else lam, rep)
        idx, n, rho, probs, rep = state
        if rho >= 1.0 or rng.random() < rho:
            yield PartitionNode(region, True, None, n), idx, rep
            continue
        j = int(rng.choice(probs.size, p=probs))
        yield PartitionNode(region, False, j, n), idx, rep
        left, right = split_region(region, candidate_split(tree.space_x, region, j))
        stack.append((right, rep))
        stack.append((left, rep))


def candidate_split(space: SampleSpace, region: Region, dim: int) -> Split:
    for split in candidate_splits(space, region):
        if split.dim == dim:
            return split
    raise ValueError(f"Dim {dim} cannot be split in this region")


def sample_partition(tree: PosteriorTree, rng: np.random.Generator) -> list[PartitionNode]:
    return [node for node, _, _ in _sample_nodes(tree, rng)]


def sample_conditional_density(
    tree: PosteriorTree, rng: np.random.Generator
) -> list[tuple[PartitionNode, PiecewiseDensity]]:
    draws = []
    for node, idx, rep in _sample_nodes(tree, rng):
        if node.stopped:
            draws.append((node, tree.local_posterior(idx, rep).sample(rng)))
    return draws


def inclusion_probabilities(
    tree: PosteriorTree, draws: int, rng: np.random.Generator, *, min_count: int = 0
) -> np.ndarray:
    """Share of sampled partitions with an internal split on each predictor."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    hits = np.zeros(len(tree.space_x))
    cache: dict = {}
    for _ in range(draws):
        dims = {
            node.split_dim
            for node, _, _ in _sample_nodes(tree, rng, cache)
            if not node.stopped and node.n >= min_count
        }
        hits[list(dims)] += 1
    logger.debug("inclusion from %d draws over %d cached regions", draws, len(cache))
    return hits / draws


def _validated_pairs(tree: PosteriorTree, x: Any, y: Any) -> tuple[np.ndarray, np.ndarray]:
    xs = tree.space_x.validate(np.asarray(x, dtype=float).reshape(-1, len(tree.space_x)), label="predictor")
    ys = tree.space_y.validate(np.asarray(y, dtype=float).reshape(-1, len(tree.space_y)), label="response")
    if xs.shape[0] == 1 and ys.shape[0] > 1:
        xs = np.repeat(xs, ys.shape[0], axis=0)
    elif ys.shape[0] == 1 and xs.shape[0] > 1:
        ys = np.repeat(ys, xs.shape[0], axis=0)
    if xs.shape[0] != ys.shape[0]:
        raise DataError("predictor and response query counts differ")
    return xs, ys


def _stop_weights(tree: PosteriorTree, code: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probability that the partition around one predictor point stops at each local posterior.

    Ids are stored region indices, ``-2 - row`` for single-row regions below
    their first appearance, and ``-1`` for the prior.  Only regions holding
    data are walked; the whole mass entering an empty region goes to the prior.
    """
    if tree.size == 0:
        return np.array([-1], dtype=np.int64), np.ones(1)
    lattice = tree.lattice
    model = tree._model
    keys = np.array([lattice.root_key], dtype=np.int64)
    reach = np.ones(1)
    carried = np.full(1, -1, dtype=np.int64)
    ids: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for depth in range(lattice.max_total_depth + 1):
        levels = lattice.levels_of(keys)
        candidates = levels < lattice.caps
        pos, found = lookup(tree.keys, keys)
        rep = np.where(found, tree.rep[pos], carried)
        virtual = np.flatnonzero(~found & (rep >= 0))
        if virtual.size:
            point = np.zeros(virtual.size, dtype=np.int64)
            for j in range(lattice.dims):
                point += tree._x_heaps[j][rep[virtual], levels[virtual, j]]
            rep[virtual[point != keys[virtual]]] = -1
        empty = ~found & (rep < 0)
        if empty.any():
            ids.append(np.array([-1], dtype=np.int64))
            weights.append(np.array([reach[empty].sum()]))
        rho = np.where(found, tree.rho_post[pos], prior_rho(model, depth, lattice.max_depth, candidates))
        rho[empty] = 1.0
        lam = np.where(found[:, None], tree.lambda_post[pos], selection_probabilities(model.weights, candidates))
        stop = reach * rho
        keep = ~empty & (stop > NEGLIGIBLE_STOP_WEIGHT)
        ids.append(np.where(found, pos, -2 - rep)[keep])
        weights.append(stop[keep])

        outflow = reach * (1.0 - rho)
        child_keys, child_reach, child_rep = [], [], []
        for j in range(lattice.dims):
            moved = outflow * lam[:, j]
            move = np.flatnonzero(candidates[:, j] & (moved > NEGLIGIBLE_STOP_WEIGHT))
            if move.size == 0:
                continue
            side = (code[j] >> (lattice.caps[j] - levels[move, j] - 1)) & 1
            child_keys.append(lattice.child_keys(keys[move], j, side))
            child_reach.append(moved[move])
            child_rep.append(rep[move])
        if not child_keys:
            break
        keys, inverse = np.unique(np.concatenate(child_keys), return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        reach = np.bincount(inverse, weights=np.concatenate(child_reach), minlength=keys.size)
        carried = np.full(keys.size, -1, dtype=np.int64)
        np.maximum.at(carried, inverse, np.concatenate(child_rep))
    stop_ids, inverse = np.unique(np.concatenate(ids), return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    return stop_ids, np.bincount(inverse, weights=np.concatenate(weights), minlength=stop_ids.size)


def _group_members(tree: PosteriorTree, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    groups: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    stored = np.flatnonzero(ids >= 0)
    if stored.size:
        keys = tree.keys[ids[stored]]
        shapes = np.unique(tree.lattice.levels_of(keys), axis=0)
        step = max(1, CHUNK_ENTRIES // max(1, tree.n_total))
        for start in range(0, shapes.shape[0], step):
            point = tree.lattice.keys_for(tree._x_heaps, shapes[start : start + step])
            pos, found = lookup(keys, point)
            r, s = np.nonzero(found)
            groups.append(stored[pos[r, s]])
            rows.append(r.astype(np.int64))
    single = np.flatnonzero(ids <= -2)
    groups.append(single)
    rows.append(-2 - ids[single])
    group = np.concatenate(groups)
    order = np.argsort(group, kind="stable")
    return group[order], np.concatenate(rows)[order]


def _pair_blocks(
    stops: list[tuple[np.ndarray, np.ndarray]],
    queries: list[np.ndarray],
    ids: np.ndarray,
    g0: int,
    g1: int,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    size = 0
    for (stop_ids, stop_weight), cell_queries in zip(stops, queries):
        g = np.searchsorted(ids, stop_ids)
        inside = (g >= g0) & (g < g1)
        if not inside.any():
            continue
        g, w = g[inside] - g0, stop_weight[inside]
        block = max(1, PAIRS_PER_CHUNK // g.size)
        for start in range(0, cell_queries.size, block):
            chunk = cell_queries[start : start + block]
            parts.append((np.repeat(chunk, g.size), np.tile(g, chunk.size), np.tile(w, chunk.size)))
            size += chunk.size * g.size
            if size >= PAIRS_PER_CHUNK:
                yield tuple(np.concatenate(column) for column in zip(*parts))  # type: ignore[misc]
                parts, size = [], 0
    if parts:
        yield tuple(np.concatenate(column) for column in zip(*parts))  # type: ignore[misc]


def predict_density(tree: PosteriorTree, x: Any, y: Any) -> np.ndarray:
    """Posterior-mean conditional density at paired (x, y) queries."""
    xs, ys = _validated_pairs(tree, x, y)
    density = np.zeros(xs.shape[0])
    if xs.shape[0] == 0:
        return density
    cells, inverse = np.unique(tree.lattice.codes(xs), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    bounds = np.cumsum(np.bincount(inverse, minlength=cells.shape[0]))[:-1]
    queries = np.split(np.argsort(inverse, kind="stable"), bounds)
    stops = [_stop_weights(tree, code) for code in cells]
    ids = np.unique(np.concatenate([stop_ids for stop_ids, _ in stops]))
    groups, rows = _group_members(tree, ids)
    local_lattice = tree.local_lattice
    y_codes = local_lattice.codes(tree.y[rows])
    sizes = np.bincount(groups, minlength=ids.size)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    for g0, g1 in _chunks(sizes, 1 << (MAX_KEY_BITS - local_lattice.bits)):
        p0, p1 = int(starts[g0]), int(starts[g1])
        local = grouped_posterior(tree.space_y, tree.prior.local, local_lattice, y_codes[p0:p1], groups[p0:p1] - g0)
        for pair_q, pair_g, pair_w in _pair_blocks(stops, queries, ids, g0, g1):
            values = local.grouped_mean_density(ys[pair_q], pair_g)
            density += np.bincount(pair_q, weights=values * pair_w, minlength=density.size)
    logger.debug("predicted %d queries over %d predictor cells and %d local posteriors", xs.shape[0], len(stops), ids.size)
    return density


def sample_density_at(tree: PosteriorTree, x: Any, y: Any, rng: np.random.Generator) -> float:
    """q(y | x) for one posterior draw, realized lazily along the path of x."""
    xs, ys = _validated_pairs(tree, x, y)
    codes = tree.lattice.codes(xs[:1])[0]
    key, carried = tree.lattice.root_key, -1
    while True:
        idx, _, rho, lam, rep = tree.state(key, carried)
        if rho >= 1.0 or rng.random() < rho:
            return tree.local_posterior(idx, rep).sample_at(ys[0], rng)
        j = int(rng.choice(lam.size, p=lam / lam.sum()))
        level = tree.lattice.key_levels(key)[j]
        side = (int(codes[j]) >> (int(tree.lattice.caps[j]) - level - 1)) & 1
        key, carried = tree.lattice.child_key(key, j, side), rep
