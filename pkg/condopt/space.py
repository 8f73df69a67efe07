from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np

from condopt.errors import DataError

LOG2 = math.log(2.0)
EMPIRICAL_PAD = 1e-9

MIDPOINT = "midpoint"
LEVEL = "level"
LEFT = 0
RIGHT = 1


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float
    name: str = ""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo >= self.hi:
            raise ValueError(f"Invalid bounds for {self.name or 'continuous dimension'}: [{self.lo}, {self.hi}]")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    @property
    def measure(self) -> float:
        return self.hi - self.lo

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "continuous", "name": self.name, "lo": self.lo.hex(), "hi": self.hi.hex()}


@dataclass(frozen=True)
class Binary:
    name: str = ""

    @property
    def measure(self) -> float:
        return 2.0

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "binary", "name": self.name}


Dimension = Union[Continuous, Binary]


def empirical_dimension(values: np.ndarray, name: str = "") -> Continuous:
    """Continuous dimension spanning the observed range, padded on both sides."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("cannot derive bounds from an empty column", column=name or None)
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite value", column=name or None)
    lo = float(values.min())
    hi = float(values.max())
    pad = EMPIRICAL_PAD * (hi - lo)
    if pad == 0.0:
        pad = EMPIRICAL_PAD * max(1.0, abs(lo))
    return Continuous(lo - pad, hi + pad, name)


def dimension_from_dict(payload: dict[str, Any]) -> Dimension:
    if payload["kind"] == "binary":
        return Binary(payload.get("name", ""))
    return Continuous(float.fromhex(payload["lo"]), float.fromhex(payload["hi"]), payload.get("name", ""))


@dataclass(frozen=True)
class SampleSpace:
    dims: tuple[Dimension, ...]

    def __post_init__(self) -> None:
        if not self.dims:
            raise ValueError("A sample space needs at least one dimension")
        object.__setattr__(self, "dims", tuple(self.dims))

    def __len__(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(dim.name or f"d{j}" for j, dim in enumerate(self.dims))

    @property
    def measure(self) -> float:
        return math.prod(dim.measure for dim in self.dims)

    @property
    def log_measure(self) -> float:
        return sum(math.log(dim.measure) for dim in self.dims)

    def is_continuous(self, j: int) -> bool:
        return isinstance(self.dims[j], Continuous)

    def validate(self, points: Any, *, label: str = "point", first_row: int = 1) -> np.ndarray:
        """Return ``points`` as an (n, p) float array, raising DataError on the first bad row."""
        arr = np.asarray(points, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, len(self.dims)) if arr.size else np.empty((0, len(self.dims)))
        if arr.ndim != 2 or arr.shape[1] != len(self.dims):
            raise DataError(f"{label} must have {len(self.dims)} coordinates")
        for j, dim in enumerate(self.dims):
            column = arr[:, j]
            if isinstance(dim, Continuous):
                bad = ~np.isfinite(column) | (column < dim.lo) | (column > dim.hi)
                reason = f"outside [{dim.lo}, {dim.hi}] or not finite"
            else:
                bad = (column != 0.0) & (column != 1.0)
                reason = "binary value must be 0 or 1"
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DataError(f"{label} {column[i]!r} {reason}", row=first_row + i, column=self.names[j])
        return arr

    def contains(self, point: Sequence[float]) -> bool:
        try:
            self.validate([list(point)])
        except DataError:
            return False
        return True

    def codes(self, points: np.ndarray, levels: Sequence[int]) -> np.ndarray:
        """Dyadic cell index of every point at the given per-dimension levels.

        Continuous cells are left-closed/right-open; the root's upper bound is
        closed, so ``hi`` lands in the last cell.
        """
        points = np.asarray(points, dtype=float)
        out = np.empty(points.shape, dtype=np.int64)
        for j, dim in enumerate(self.dims):
            k = int(levels[j])
            if isinstance(dim, Continuous):
                t = (points[:, j] - dim.lo) / (dim.hi - dim.lo)
                cell = np.floor(np.ldexp(t, k)).astype(np.int64)
                out[:, j] = np.minimum(cell, (1 << k) - 1)
            else:
                out[:, j] = points[:, j].astype(np.int64) if k else 0
        return out

    def grid_size(self, resolution: int) -> int:
        return math.prod(resolution if isinstance(dim, Continuous) else 2 for dim in self.dims)

    def grid(self, resolution: int) -> tuple[np.ndarray, float]:
        """Cell midpoints of a regular grid (``resolution`` per continuous dim) and the cell volume."""
        if resolution < 1:
            raise ValueError("resolution must be positive")
        axes = []
        volume = 1.0
        for dim in self.dims:
            if isinstance(dim, Continuous):
                step = dim.measure / resolution
                axes.append(dim.lo + step * (np.arange(resolution) + 0.5))
                volume *= step
            else:
                axes.append(np.array([0.0, 1.0]))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1), volume

    def to_dict(self) -> list[dict[str, Any]]:
        return [dim.to_dict() for dim in self.dims]

    @classmethod
    def from_dict(cls, payload: list[dict[str, Any]]) -> "SampleSpace":
        return cls(tuple(dimension_from_dict(item) for item in payload))


@dataclass(frozen=True)
class Split:
    dim: int
    kind: str
    children_count: int = 2


@dataclass(frozen=True)
class Region:
    """A dyadic cell: ``levels[j]`` splits taken in dim j, ``index[j]`` the cell at that level.

    The dyadic address is the identity; ``path`` records how the cell was reached.
    """

    space: SampleSpace = field(repr=False, compare=False)
    levels: tuple[int, ...]
    index: tuple[int, ...]
    path: tuple[tuple[int, int], ...] = field(default=(), compare=False)

    @classmethod
    def root(cls, space: SampleSpace) -> "Region":
        zeros = (0,) * len(space)
        return cls(space, zeros, zeros, ())

    @classmethod
    def from_address(cls, space: SampleSpace, levels: Sequence[int], index: Sequence[int]) -> "Region":
        levels = tuple(int(k) for k in levels)
        index = tuple(int(i) for i in index)
        path = []
        for j, (k, i) in enumerate(zip(levels, index)):
            for step in range(1, k + 1):
                path.append((j, (i >> (k - step)) & 1))
        return cls(space, levels, index, tuple(path))

    @property
    def depth(self) -> int:
        return sum(self.levels)

    @property
    def measure(self) -> float:
        return math.ldexp(self.space.measure, -self.depth)

    @property
    def log_measure(self) -> float:
        return self.space.log_measure - self.depth * LOG2

    def bounds(self) -> tuple[tuple[float, float] | int | None, ...]:
        out: list[tuple[float, float] | int | None] = []
        for dim, k, i in zip(self.space.dims, self.levels, self.index):
            if isinstance(dim, Continuous):
                width = math.ldexp(dim.measure, -k)
                out.append((dim.lo + i * width, dim.lo + (i + 1) * width))
            else:
                out.append(i if k else None)
        return tuple(out)

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        inside = np.ones(points.shape[0], dtype=bool)
        for j, dim in enumerate(self.space.dims):
            column = points[:, j]
            if isinstance(dim, Continuous):
                inside &= np.isfinite(column) & (column >= dim.lo) & (column <= dim.hi)
            else:
                inside &= (column == 0.0) | (column == 1.0)
        codes = self.space.codes(np.where(inside[:, None], points, _anchor(self.space)), self.levels)
        return inside & np.all(codes == np.asarray(self.index, dtype=np.int64), axis=1)

    def contains(self, point: Sequence[float]) -> bool:
        return bool(self.contains_points(np.asarray([point], dtype=float))[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": [list(step) for step in self.path],
            "levels": list(self.levels),
            "index": list(self.index),
        }


def _anchor(space: SampleSpace) -> np.ndarray:
    return np.array([dim.lo if isinstance(dim, Continuous) else 0.0 for dim in space.dims])


def candidate_splits(space: SampleSpace, region: Region) -> list[Split]:
    splits = []
    for j, dim in enumerate(space.dims):
        if isinstance(dim, Continuous):
            splits.append(Split(j, MIDPOINT))
        elif region.levels[j] == 0:
            splits.append(Split(j, LEVEL))
    return splits


def split_region(region: Region, split: Split) -> tuple[Region, Region]:
    if split not in candidate_splits(region.space, region):
        raise ValueError(f"Split on dim {split.dim} is not available for this region")
    j = split.dim
    levels = list(region.levels)
    levels[j] += 1
    children = []
    for side in (LEFT, RIGHT):
        index = list(region.index)
        index[j] = 2 * index[j] + side
        children.append(Region(region.space, tuple(levels), tuple(index), region.path + ((j, side),)))
    return children[0], children[1]


def partition_points(
    points: Sequence[int] | np.ndarray,
    coords: np.ndarray,
    region: Region,
    split: Split,
) -> tuple[np.ndarray, np.ndarray]:
    """Stable split of point indices into the two children of ``region``."""
    if split not in candidate_splits(region.space, region):
        raise ValueError(f"Split on dim {split.dim} is not available for this region")
    points = np.asarray(points, dtype=np.int64)
    if points.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    subset = np.asarray(coords, dtype=float)[points]
    inside = region.contains_points(subset)
    if not inside.all():
        raise ValueError(f"Point {int(points[np.flatnonzero(~inside)[0]])} lies outside the region")
    levels = list(region.levels)
    levels[split.dim] += 1
    side = region.space.codes(subset, levels)[:, split.dim] & 1
    return points[side == LEFT], points[side == RIGHT]
