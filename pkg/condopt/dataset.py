from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from condopt.errors import DataError
from condopt.space import Binary, Continuous, Region, SampleSpace, Split, empirical_dimension, partition_points

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = CONTINUOUS
    lo: float | None = None
    hi: float | None = None

    @classmethod
    def parse(cls, text: str) -> "ColumnSpec":
        """``name:continuous[:lo:hi]`` or ``name:binary``; the kind defaults to continuous."""
        parts = [part.strip() for part in text.split(":")]
        name = parts[0]
        if not name:
            raise ValueError(f"Missing column name in {text!r}")
        kind = parts[1] if len(parts) > 1 and parts[1] else CONTINUOUS
        if kind == BINARY:
            if len(parts) > 2:
                raise ValueError(f"Binary column {name} takes no bounds")
            return cls(name, BINARY)
        if kind != CONTINUOUS:
            raise ValueError(f"Unknown column kind {kind!r} for {name}")
        if len(parts) <= 2:
            return cls(name, CONTINUOUS)
        if len(parts) != 4:
            raise ValueError(f"Continuous column {name} needs both bounds or none")
        try:
            lo, hi = float(parts[2]), float(parts[3])
        except ValueError as error:
            raise ValueError(f"Invalid bounds for {name}: {parts[2]}:{parts[3]}") from error
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ValueError(f"Invalid bounds for {name}: [{lo}, {hi}]")
        return cls(name, CONTINUOUS, lo, hi)

    def render(self) -> str:
        if self.kind == BINARY:
            return f"{self.name}:{BINARY}"
        if self.lo is None or self.hi is None:
            return f"{self.name}:{CONTINUOUS}"
        return f"{self.name}:{CONTINUOUS}:{self.lo!r}:{self.hi!r}"


def resolve_space(columns: Sequence[ColumnSpec], values: np.ndarray) -> SampleSpace:
    """Sample space for the columns; continuous columns without bounds take the padded empirical range."""
    dims = []
    for j, column in enumerate(columns):
        if column.kind == BINARY:
            dims.append(Binary(column.name))
        elif column.lo is not None and column.hi is not None:
            dims.append(Continuous(column.lo, column.hi, column.name))
        else:
            dims.append(empirical_dimension(values[:, j], column.name))
    return SampleSpace(tuple(dims))


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_names: tuple[str, ...] = ()
    y_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} predictor rows but {y.shape[0]} response rows")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))
        if not self.y_names:
            object.__setattr__(self, "y_names", tuple(f"y{j + 1}" for j in range(y.shape[1])))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    def subset(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.x[rows], self.y[rows], self.x_names, self.y_names)

    def with_responses(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.x, y, self.x_names, self.y_names)

    def swapped(self) -> "Dataset":
        return Dataset(self.y, self.x, self.y_names, self.x_names)

    def permuted(self, rng: np.random.Generator) -> "Dataset":
        """Responses randomly re-paired with the predictors."""
        return self.with_responses(self.y[rng.permutation(self.n)])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            self.x_names,
            self.y_names,
        )

    def rows_in(self, region: Region) -> np.ndarray:
        return np.flatnonzero(region.contains_points(self.x))

    def split_rows(self, rows: Sequence[int], region: Region, split: Split) -> tuple[np.ndarray, np.ndarray]:
        return partition_points(rows, self.x, region, split)


def _parse_value(raw: str, column: ColumnSpec, row: int) -> float:
    text = raw.strip()
    if column.kind == BINARY:
        if text not in ("0", "1"):
            raise DataError(f"binary value must be 0 or 1, got {raw!r}", row=row, column=column.name)
        return float(text)
    try:
        value = float(text)
    except ValueError as error:
        raise DataError(f"unparsable number {raw!r}", row=row, column=column.name) from error
    if not math.isfinite(value):
        raise DataError(f"non-finite value {raw!r}", row=row, column=column.name)
    if column.lo is not None and column.hi is not None and not column.lo <= value <= column.hi:
        raise DataError(f"value {value!r} outside [{column.lo}, {column.hi}]", row=row, column=column.name)
    return value


def _column(buffer: array) -> np.ndarray:
    return np.frombuffer(buffer, dtype=float) if len(buffer) else np.empty(0)


def read_csv(path: str | Path, predictors: Sequence[ColumnSpec], responses: Sequence[ColumnSpec]) -> Dataset:
    """Stream a UTF-8 CSV with a header row into a Dataset.

    Row numbers in errors count data rows from 1, header excluded.
    """
    columns = list(predictors) + list(responses)
    buffers = [array("d") for _ in columns]
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = [name.strip() for name in next(reader)]
        except StopIteration as error:
            raise DataError("missing header row") from error
        positions = []
        for column in columns:
            if column.name not in header:
                raise DataError("missing column", column=column.name)
            positions.append(header.index(column.name))
        row = 0
        for record in reader:
            if not record or all(not field.strip() for field in record):
                continue
            row += 1
            if len(record) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(record)}", row=row)
            for buffer, column, position in zip(buffers, columns, positions):
                buffer.append(_parse_value(record[position], column, row))
    n = len(buffers[0]) if buffers else 0
    split = len(predictors)
    x = np.column_stack([_column(b) for b in buffers[:split]]) if split else np.empty((n, 0))
    y = np.column_stack([_column(b) for b in buffers[split:]])
    logger.debug("read %d rows from %s", n, path)
    return Dataset(
        x.reshape(n, split),
        y.reshape(n, len(responses)),
        tuple(c.name for c in predictors),
        tuple(c.name for c in responses),
    )


def atomic_write_text(path: str | Path, text: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 2**53:
        return str(int(value))
    return repr(value)


def format_rows(header: Sequence[str], rows: Iterable[Sequence[float]]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(value) for value in row))
    return "\n".join(lines) + "\n"


def write_csv(path: str | Path, dataset: Dataset) -> None:
    header = list(dataset.x_names) + list(dataset.y_names)
    atomic_write_text(path, format_rows(header, np.hstack([dataset.x, dataset.y])))
