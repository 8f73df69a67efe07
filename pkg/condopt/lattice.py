"""Dyadic addressing shared by the predictor and response recursions.

Every region of a sample space partitioned by mid-splits to at most
``max_depth`` levels is a product of dyadic cells.  Per dimension the cell at
level ``k`` with index ``i`` is encoded as the heap number ``(1 << k) | i``;
the heap numbers of all dimensions are packed into one int64 key.  Keys of
different depths never collide, so a single sorted key array indexes a whole
tree.  Local response trees of many predictor blocks are processed together
by prefixing keys with a group number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from condopt.space import LOG2, Region, SampleSpace

logger = logging.getLogger(__name__)

MAX_KEY_BITS = 62
CHUNK_ENTRIES = 1 << 23


class Lattice:
    def __init__(self, space: SampleSpace, max_depth: int) -> None:
        if max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        self.space = space
        self.max_depth = int(max_depth)
        self.caps = np.array(
            [self.max_depth if space.is_continuous(j) else 1 for j in range(len(space))],
            dtype=np.int64,
        )
        widths = self.caps + 1
        self.offsets = np.concatenate([[0], np.cumsum(widths)[:-1]]).astype(np.int64)
        self.bits = int(widths.sum())
        if self.bits > MAX_KEY_BITS:
            raise ValueError(
                f"Dyadic address needs {self.bits} bits (limit {MAX_KEY_BITS}); reduce max depth or dimensions"
            )
        self.masks = (np.int64(1) << widths) - 1
        self.root_key = int(sum(1 << int(off) for off in self.offsets))
        self._shapes: dict[int, np.ndarray] = {}
        self._child_maps: dict[int, np.ndarray] = {}

    @property
    def dims(self) -> int:
        return len(self.caps)

    @property
    def max_total_depth(self) -> int:
        return min(self.max_depth, int(self.caps.sum()))

    def shapes(self, depth: int) -> np.ndarray:
        cached = self._shapes.get(depth)
        if cached is None:
            cached = _compositions([int(c) for c in self.caps], depth)
            self._shapes[depth] = cached
        return cached

    def child_shape_map(self, depth: int) -> np.ndarray:
        # position of shape + e_j among the next depth's shapes, -1 when capped
        cached = self._child_maps.get(depth)
        if cached is None:
            shapes = self.shapes(depth)
            lookup = {tuple(row): pos for pos, row in enumerate(self.shapes(depth + 1).tolist())}
            cached = np.full(shapes.shape, -1, dtype=np.int64)
            for s, row in enumerate(shapes.tolist()):
                for j in range(self.dims):
                    row[j] += 1
                    cached[s, j] = lookup.get(tuple(row), -1)
                    row[j] -= 1
            self._child_maps[depth] = cached
        return cached

    def codes(self, points: np.ndarray) -> np.ndarray:
        return self.space.codes(points, self.caps)

    def heap_table(self, codes: np.ndarray) -> list[np.ndarray]:
        table = []
        for j in range(self.dims):
            cap = int(self.caps[j])
            levels = np.arange(cap + 1, dtype=np.int64)
            heap = (np.int64(1) << levels)[None, :] | (codes[:, j : j + 1] >> (cap - levels)[None, :])
            table.append(heap << self.offsets[j])
        return table

    def keys_for(
        self,
        heaps: list[np.ndarray],
        shapes: np.ndarray,
        rows: np.ndarray | None = None,
        prefix: np.ndarray | None = None,
    ) -> np.ndarray:
        keys = None
        for j in range(self.dims):
            column = heaps[j] if rows is None else heaps[j][rows]
            part = column[:, shapes[:, j]]
            keys = part if keys is None else keys + part
        if prefix is not None:
            keys = keys + (prefix if rows is None else prefix[rows])[:, None]
        return keys

    def heap(self, keys: np.ndarray, j: int) -> np.ndarray:
        return (keys >> self.offsets[j]) & self.masks[j]

    def levels_of(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        out = np.empty(keys.shape + (self.dims,), dtype=np.int64)
        for j in range(self.dims):
            out[..., j] = np.frexp(self.heap(keys, j).astype(np.float64))[1] - 1
        return out

    def child_keys(self, keys: np.ndarray, j: int, side: int | np.ndarray) -> np.ndarray:
        return keys + ((self.heap(keys, j) + side) << self.offsets[j])

    def parent_keys(self, keys: np.ndarray, j: int) -> np.ndarray:
        heap = self.heap(keys, j)
        return keys - ((heap - (heap >> 1)) << self.offsets[j])

    def key_levels(self, key: int) -> list[int]:
        key = int(key)
        return [((key >> int(off)) & int(mask)).bit_length() - 1 for off, mask in zip(self.offsets, self.masks)]

    def child_key(self, key: int, j: int, side: int) -> int:
        key = int(key)
        heap = (key >> int(self.offsets[j])) & int(self.masks[j])
        return key + ((heap + side) << int(self.offsets[j]))

    def log_measure(self, depth: int) -> float:
        return self.space.log_measure - depth * LOG2

    def key_of(self, region: Region) -> int:
        key = 0
        for j, (k, i) in enumerate(zip(region.levels, region.index)):
            if k > self.caps[j]:
                raise ValueError("Region is deeper than the lattice")
            key |= ((1 << k) | i) << int(self.offsets[j])
        return key

    def region_of(self, key: int) -> Region:
        key = int(key) & ((1 << self.bits) - 1)
        levels, index = [], []
        for j in range(self.dims):
            heap = (key >> int(self.offsets[j])) & int(self.masks[j])
            k = heap.bit_length() - 1
            levels.append(k)
            index.append(heap - (1 << k))
        return Region.from_address(self.space, levels, index)

    def point_keys(self, codes: np.ndarray, shape: Sequence[int]) -> np.ndarray:
        key = np.zeros(codes.shape[0], dtype=np.int64)
        for j, k in enumerate(shape):
            heap = (np.int64(1) << k) | (codes[:, j] >> (int(self.caps[j]) - k))
            key += heap << self.offsets[j]
        return key


def _compositions(caps: list[int], total: int) -> np.ndarray:
    p = len(caps)
    suffix = [0] * (p + 1)
    for j in range(p - 1, -1, -1):
        suffix[j] = suffix[j + 1] + caps[j]
    out: list[tuple[int, ...]] = []
    current = [0] * p

    def fill(j: int, remaining: int) -> None:
        if j == p:
            if remaining == 0:
                out.append(tuple(current))
            return
        for k in range(max(0, remaining - suffix[j + 1]), min(caps[j], remaining) + 1):
            current[j] = k
            fill(j + 1, remaining - k)
        current[j] = 0

    if 0 <= total <= suffix[0]:
        fill(0, total)
    return np.array(out, dtype=np.int64).reshape(len(out), p)


def lookup(sorted_keys: np.ndarray, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if sorted_keys.size == 0:
        zeros = np.zeros(np.shape(keys), dtype=np.int64)
        return zeros, np.zeros(np.shape(keys), dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, sorted_keys.size - 1)
    return pos, sorted_keys[pos] == keys


@dataclass
class LevelTable:
    depth: int
    keys: np.ndarray
    counts: np.ndarray
    first: np.ndarray
    expanded: np.ndarray
    candidates: np.ndarray
    min_points: int = 0


@dataclass
class LevelPosterior:
    log_phi: np.ndarray
    rho_post: np.ndarray
    lambda_post: np.ndarray


def _merge_counts(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(parts) == 1:
        return parts[0]
    keys = np.concatenate([part[0] for part in parts])
    counts = np.concatenate([part[1] for part in parts])
    first = np.concatenate([part[2] for part in parts])
    order = np.argsort(keys, kind="stable")
    keys, counts, first = keys[order], counts[order], first[order]
    starts = np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))
    return keys[starts], np.add.reduceat(counts, starts), np.minimum.reduceat(first, starts)


def _has_expanded_parent(lattice: Lattice, keys: np.ndarray, parents: LevelTable) -> np.ndarray:
    levels = lattice.levels_of(keys)
    ok = np.zeros(keys.size, dtype=bool)
    for j in range(lattice.dims):
        has = levels[:, j] > 0
        if not has.any():
            continue
        pos, found = lookup(parents.keys, lattice.parent_keys(keys[has], j))
        ok[has] |= found & parents.expanded[pos]
    return ok


def enumerate_levels(
    lattice: Lattice,
    codes: np.ndarray,
    *,
    groups: np.ndarray | None = None,
    expand_min: int = 1,
    min_points: int = 0,
    record_pairs: bool = False,
) -> tuple[list[LevelTable], np.ndarray | None, np.ndarray | None]:
    """Nonempty regions depth by depth, keeping only children of expanded regions.

    A region is expanded when it holds at least ``expand_min`` and more than
    ``min_points`` rows, lies above the depth limit and has a candidate split.
    With ``record_pairs`` the (node, row) memberships are returned as well;
    node numbers run over the concatenation of all tables in depth order.
    """
    n = codes.shape[0]
    tables: list[LevelTable] = []
    if n == 0:
        empty = np.empty(0, dtype=np.int64)
        return (tables, empty, empty.copy()) if record_pairs else (tables, None, None)
    heaps = lattice.heap_table(codes)
    prefix = None
    if groups is not None:
        group_bits = int(groups.max()).bit_length()
        if group_bits + lattice.bits > MAX_KEY_BITS:
            raise ValueError("Too many groups for one batch")
        prefix = groups.astype(np.int64) << lattice.bits
    live = np.arange(n, dtype=np.int64)
    pair_nodes: list[np.ndarray] = []
    pair_rows: list[np.ndarray] = []
    offset = 0
    for depth in range(lattice.max_total_depth + 1):
        shapes = lattice.shapes(depth)
        if live.size == 0 or shapes.shape[0] == 0:
            break
        width = shapes.shape[0]
        step = max(1, CHUNK_ENTRIES // width)
        parts = []
        for start in range(0, live.size, step):
            rows = live[start : start + step]
            flat = lattice.keys_for(heaps, shapes, rows, prefix).ravel()
            keys, where, counts = np.unique(flat, return_index=True, return_counts=True)
            parts.append((keys, counts.astype(np.int64), rows[where // width]))
        keys, counts, first = _merge_counts(parts)
        if depth > 0:
            keep = _has_expanded_parent(lattice, keys, tables[-1])
            keys, counts, first = keys[keep], counts[keep], first[keep]
        candidates = lattice.levels_of(keys) < lattice.caps
        expanded = (
            (counts >= expand_min)
            & (counts > min_points)
            & (depth < lattice.max_depth)
            & candidates.any(axis=1)
        )
        table = LevelTable(depth, keys, counts, first, expanded, candidates, min_points)
        tables.append(table)
        logger.debug("depth %d: %d regions, %d expanded, %d live rows", depth, keys.size, int(expanded.sum()), live.size)

        in_expanded = np.zeros(live.size, dtype=bool)
        for start in range(0, live.size, step):
            rows = live[start : start + step]
            chunk = lattice.keys_for(heaps, shapes, rows, prefix)
            pos, found = lookup(keys, chunk)
            if record_pairs:
                r, s = np.nonzero(found)
                pair_nodes.append(offset + pos[r, s])
                pair_rows.append(rows[r])
            in_expanded[start : start + step] = (found & expanded[pos]).any(axis=1)
        live = live[in_expanded]
        offset += keys.size

    if not record_pairs:
        return tables, None, None
    return tables, np.concatenate(pair_nodes), np.concatenate(pair_rows)


class RecursionModel(Protocol):
    symmetric: bool
    weights: np.ndarray | None

    def stop_terms(self, table: LevelTable) -> np.ndarray: ...

    def rho(self, depth: int) -> float: ...

    def split_factor(self, depth: int, n_left: np.ndarray, n_right: np.ndarray) -> np.ndarray | float: ...


def prior_rho(model: RecursionModel, depth: int, max_depth: int, candidates: np.ndarray) -> np.ndarray:
    terminal = (depth >= max_depth) | ~np.asarray(candidates).any(axis=-1)
    return np.where(terminal, 1.0, model.rho(depth))


def selection_probabilities(weights: np.ndarray | None, candidates: np.ndarray) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=bool)
    raw = np.where(candidates, 1.0 if weights is None else np.asarray(weights, dtype=float), 0.0)
    total = raw.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, raw / np.where(total > 0, total, 1.0), 0.0)


def backward(lattice: Lattice, tables: list[LevelTable], model: RecursionModel) -> list[LevelPosterior]:
    """Marginal likelihoods and conjugate posterior parameters, deepest level first.

    Non-expanded regions are terminal except single rows under a symmetric
    prior, which keep the prior unless ``min_points`` stops them.  Children
    missing from the next table are empty and contribute log 1.
    """
    results: list[LevelPosterior | None] = [None] * len(tables)
    for d in range(len(tables) - 1, -1, -1):
        table = tables[d]
        m = table.keys.size
        stop = np.asarray(model.stop_terms(table), dtype=float)
        log_lam = _log(selection_probabilities(model.weights, table.candidates))
        lam_prior = np.exp(log_lam)
        rho0 = prior_rho(model, d, lattice.max_depth, table.candidates)

        log_phi = stop.copy()
        rho_post = np.ones(m)
        lambda_post = lam_prior.copy()

        singleton = (table.counts == 1) & model.symmetric & (table.counts > table.min_points)
        rho_post[singleton] = rho0[singleton]

        active = table.expanded & ~singleton
        if active.any() and d + 1 < len(tables):
            child = tables[d + 1]
            child_post = results[d + 1]
            keys = table.keys[active]
            split = np.full((keys.size, lattice.dims), -np.inf)
            cand = table.candidates[active]
            for j in range(lattice.dims):
                rows = cand[:, j]
                if not rows.any():
                    continue
                terms = log_lam[active][rows, j].copy()
                sizes = []
                for side in (0, 1):
                    pos, found = lookup(child.keys, lattice.child_keys(keys[rows], j, side))
                    terms += np.where(found, child_post.log_phi[pos], 0.0)
                    sizes.append(np.where(found, child.counts[pos], 0))
                terms += model.split_factor(d, sizes[0], sizes[1])
                split[rows, j] = terms
            log_split = logsumexp(split, axis=1)
            rho = float(model.rho(d))
            with np.errstate(divide="ignore"):
                log_rho = np.log(rho)
                log_rest = np.log1p(-rho)
            a = log_rho + stop[active]
            b = log_rest + log_split
            total = np.logaddexp(a, b)
            log_phi[active] = total
            with np.errstate(invalid="ignore"):
                rho_post[active] = np.clip(np.exp(a - total), 0.0, 1.0)
            usable = np.isfinite(log_split) & (rho < 1.0)
            with np.errstate(invalid="ignore"):
                posterior_lam = np.exp(split - log_split[:, None])
            lambda_post[active] = np.where(usable[:, None], posterior_lam, lam_prior[active])
        results[d] = LevelPosterior(log_phi, rho_post, lambda_post)
    return results  # type: ignore[return-value]


def _log(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(values)
