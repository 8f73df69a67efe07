from __future__ import annotations

import io
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import png  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from condopt.core import HmapTree  # noqa: E402
from condopt.dataset import atomic_write_bytes  # noqa: E402
from condopt.space import Continuous, SampleSpace  # noqa: E402

logger = logging.getLogger(__name__)

MAX_SCHEMATIC_DIMS = 2


def _extent(space: SampleSpace, j: int, bound: tuple[float, float] | int | None) -> tuple[float, float]:
    dim = space.dims[j]
    if isinstance(dim, Continuous):
        return bound  # type: ignore[return-value]
    if bound is None:
        return 0.0, 2.0
    return float(bound), float(bound) + 1.0


def _full_extent(space: SampleSpace, j: int) -> tuple[float, float]:
    dim = space.dims[j]
    return (dim.lo, dim.hi) if isinstance(dim, Continuous) else (0.0, 2.0)


def hmap_svg(hmap_tree: HmapTree, space_x: SampleSpace, path: str | Path) -> bool:
    """Draw the hMAP blocks of a 1-D or 2-D predictor space; returns False when skipped."""
    if len(space_x) > MAX_SCHEMATIC_DIMS:
        logger.info("skipping partition schematic for %d predictor dims", len(space_x))
        return False
    leaves = hmap_tree.leaves()
    fig, ax = plt.subplots(figsize=(6, 6 if len(space_x) == 2 else 2.5))
    try:
        for leaf in leaves:
            bounds = leaf.region.bounds()
            x0, x1 = _extent(space_x, 0, bounds[0])
            if len(space_x) == 2:
                y0, y1 = _extent(space_x, 1, bounds[1])
            else:
                y0, y1 = 0.0, 1.0
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, linewidth=1.0))
            ax.text(
                (x0 + x1) / 2,
                (y0 + y1) / 2,
                f"n={leaf.n}\nrho={leaf.rho_post:.2f}",
                ha="center",
                va="center",
                fontsize=7,
            )
        lo0, hi0 = _full_extent(space_x, 0)
        ax.set_xlim(lo0, hi0)
        ax.set_xlabel(space_x.names[0])
        if len(space_x) == 2:
            lo1, hi1 = _full_extent(space_x, 1)
            ax.set_ylim(lo1, hi1)
            ax.set_ylabel(space_x.names[1])
        else:
            ax.set_ylim(0.0, 1.0)
            ax.set_yticks([])
        ax.set_title(f"hMAP partition ({len(leaves)} blocks)")
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg")
    finally:
        plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
    return True


def density_rgba(values: np.ndarray, colormap: str = "viridis") -> np.ndarray:
    """(rows, cols, 4) uint8 image of a grid, scaled to its maximum."""
    values = np.asarray(values, dtype=float)
    top = float(values.max()) if values.size else 0.0
    scaled = values / top if top > 0 else np.zeros_like(values)
    return (matplotlib.colormaps[colormap](scaled) * 255.0).round().astype(np.uint8)


def write_png(path: str | Path, rgba: np.ndarray) -> None:
    height, width = rgba.shape[:2]
    rows = [rgba[row].reshape(-1).tolist() for row in range(height)]
    buffer = io.BytesIO()
    writer = png.Writer(width=width, height=height, alpha=True, greyscale=False)
    writer.write(buffer, rows)
    atomic_write_bytes(path, buffer.getvalue())


def density_png(path: str | Path, grid: np.ndarray) -> None:
    """Heat map with the response on the vertical axis (low values at the bottom).

    ``grid[i, k]`` is the density at the i-th predictor and k-th response value.
    """
    image = np.flipud(np.asarray(grid, dtype=float).T)
    write_png(path, density_rgba(image))
