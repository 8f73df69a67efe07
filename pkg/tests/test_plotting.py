from __future__ import annotations

import tempfile
import unittest
from pathlib import Path

import numpy as np
import png

from condopt.core import CondOptPrior, fit, hmap
from condopt.dataset import Dataset
from condopt.opt import OptPrior
from condopt.plotting import density_png, density_rgba, hmap_svg
from condopt.space import Binary, Continuous, SampleSpace


class PlottingTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.prior = CondOptPrior(local=OptPrior(max_depth_y=3), max_depth_x=3)

    def test_schematic_for_small_spaces(self) -> None:
        rng = np.random.default_rng(0)
        space_x = SampleSpace((Continuous(0.0, 1.0, "x"), Binary("b")))
        space_y = SampleSpace((Continuous(0.0, 1.0),))
        x = np.column_stack([rng.random(60), rng.integers(0, 2, 60)])
        tree = fit(space_x, space_y, self.prior, Dataset(x, rng.random((60, 1))))
        path = self.dir / "hmap.svg"
        self.assertTrue(hmap_svg(hmap(tree), space_x, path))
        self.assertIn("<svg", path.read_text(encoding="utf-8"))

    def test_schematic_skipped_for_three_dims(self) -> None:
        space_x = SampleSpace((Binary(), Binary(), Binary()))
        space_y = SampleSpace((Continuous(0.0, 1.0),))
        tree = fit(space_x, space_y, self.prior, Dataset(np.zeros((4, 3)), np.full((4, 1), 0.5)))
        path = self.dir / "skipped.svg"
        self.assertFalse(hmap_svg(hmap(tree), space_x, path))
        self.assertFalse(path.exists())

    def test_heat_map_orientation(self) -> None:
        grid = np.zeros((3, 4))
        grid[0, 0] = 2.0
        path = self.dir / "grid.png"
        density_png(path, grid)
        width, height, rows, _ = png.Reader(filename=str(path)).asRGBA8()
        rows = [list(row) for row in rows]
        self.assertEqual((3, 4), (width, height))
        bright = density_rgba(np.array([[1.0]]))[0, 0].tolist()
        self.assertEqual(bright, rows[-1][:4])

    def test_flat_grid_does_not_divide_by_zero(self) -> None:
        rgba = density_rgba(np.zeros((2, 2)))
        self.assertEqual((2, 2, 4), rgba.shape)
        self.assertEqual(np.uint8, rgba.dtype)


if __name__ == "__main__":
    unittest.main()
