from __future__ import annotations

import math
import unittest

import numpy as np

from condopt.lattice import Lattice
from condopt.opt import (
    OptPrior,
    grouped_posterior,
    opt_log_marginal,
    opt_mean_density,
    opt_posterior,
    opt_sample_density,
)
from condopt.space import Binary, Continuous, Region, SampleSpace


class OptMarginalTests(unittest.TestCase):
    def test_two_points_in_one_half(self) -> None:
        space = SampleSpace((Continuous(0.0, 1.0),))
        prior = OptPrior(max_depth_y=1)
        # stop: 1; split: 0.375 * 2^2
        self.assertAlmostEqual(math.log(1.25), opt_log_marginal(space, prior, [[0.1], [0.2]]), places=12)

    def test_binary_response(self) -> None:
        space = SampleSpace((Binary(),))
        value = opt_log_marginal(space, OptPrior(), [[0.0], [0.0], [1.0], [1.0]])
        self.assertAlmostEqual(math.log(0.04296875), value, places=12)

    def test_single_observation_is_uniform_density(self) -> None:
        space = SampleSpace((Continuous(0.0, 2.0),))
        for depth in range(9):
            value = opt_log_marginal(space, OptPrior(max_depth_y=depth), [[0.3]])
            self.assertAlmostEqual(-math.log(2.0), value, places=12)

    def test_asymmetric_single_observation_depends_on_side(self) -> None:
        space = SampleSpace((Continuous(0.0, 1.0),))
        prior = OptPrior(alpha=(1.0, 3.0), max_depth_y=1)
        # 0.5 * 1 + 0.5 * (1/4) * 2
        self.assertAlmostEqual(math.log(0.75), opt_log_marginal(space, prior, [[0.2]]), places=12)

    def test_empty_data(self) -> None:
        space = SampleSpace((Continuous(0.0, 1.0),))
        self.assertEqual(0.0, opt_log_marginal(space, OptPrior(), np.empty((0, 1))))

    def test_permutation_invariant(self) -> None:
        rng = np.random.default_rng(0)
        space = SampleSpace((Continuous(0.0, 1.0), Continuous(0.0, 1.0)))
        points = rng.beta(2.0, 5.0, size=(200, 2))
        prior = OptPrior(max_depth_y=6)
        first = opt_log_marginal(space, prior, points)
        second = opt_log_marginal(space, prior, points[rng.permutation(200)])
        self.assertAlmostEqual(first, second, delta=1e-12 * abs(first))

    def test_invalid_prior(self) -> None:
        with self.assertRaises(ValueError):
            OptPrior(rho_y=1.0)
        with self.assertRaises(ValueError):
            OptPrior(alpha=(0.0, 1.0))


class OptPosteriorTests(unittest.TestCase):
    def setUp(self) -> None:
        self.space = SampleSpace((Continuous(0.0, 1.0),))
        self.post = opt_posterior(self.space, OptPrior(max_depth_y=1), [[0.1], [0.2]])

    def test_root_summary(self) -> None:
        node = self.post.node(Region.root(self.space))
        self.assertEqual(2, node.n)
        self.assertAlmostEqual(0.4, node.rho_post)
        self.assertEqual(((2.5, 0.5),), node.alpha_post)
        self.assertAlmostEqual(math.log(1.25), self.post.log_marginal)

    def test_mean_density_values(self) -> None:
        self.assertAlmostEqual(1.4, opt_mean_density(self.post, [0.1]))
        self.assertAlmostEqual(0.6, opt_mean_density(self.post, [0.7]))

    def test_mean_density_integrates_to_one(self) -> None:
        rng = np.random.default_rng(1)
        space = SampleSpace((Continuous(0.0, 1.0), Continuous(-1.0, 1.0)))
        post = opt_posterior(space, OptPrior(max_depth_y=8), np.column_stack([rng.beta(2, 2, 300), rng.uniform(-1, 0.2, 300)]))
        grid, volume = space.grid(256)
        self.assertAlmostEqual(1.0, float(post.mean_density(grid).sum() * volume), delta=1e-8)

    def test_no_data_posterior_is_prior(self) -> None:
        space = SampleSpace((Continuous(0.0, 4.0),))
        post = opt_posterior(space, OptPrior(max_depth_y=3), np.empty((0, 1)))
        np.testing.assert_allclose(0.25, post.mean_density([[0.1], [3.9]]))
        node = post.node(Region.from_address(space, (2,), (1,)))
        self.assertFalse(node.materialized)
        self.assertEqual(0.5, node.rho_post)
        self.assertEqual(((0.5, 0.5),), node.alpha_post)

    def test_grouped_posterior_matches_separate_fits(self) -> None:
        rng = np.random.default_rng(3)
        space = SampleSpace((Continuous(0.0, 1.0), Binary()))
        prior = OptPrior(max_depth_y=4, alpha=(0.5, 2.0))
        lattice = Lattice(space, prior.max_depth_y)
        first = np.column_stack([rng.beta(2.0, 5.0, 30), rng.integers(0, 2, 30)])
        second = np.column_stack([rng.random(12), np.ones(12)])
        codes = lattice.codes(np.vstack([first, second]))
        groups = np.repeat([0, 2], [30, 12])
        grouped = grouped_posterior(space, prior, lattice, codes, groups)
        ys = np.column_stack([rng.random(9), rng.integers(0, 2, 9)])
        for g, rows in ((0, first), (1, np.empty((0, 2))), (2, second)):
            expected = opt_posterior(space, prior, rows).mean_density(ys)
            values = grouped.grouped_mean_density(ys, np.full(9, g))
            np.testing.assert_allclose(expected, values, rtol=1e-12)

    def test_sampled_density_is_normalized(self) -> None:
        rng = np.random.default_rng(2)
        space = SampleSpace((Continuous(0.0, 1.0),))
        post = opt_posterior(space, OptPrior(max_depth_y=6), rng.beta(0.5, 0.5, (100, 1)))
        for _ in range(5):
            draw = opt_sample_density(post, rng)
            self.assertAlmostEqual(1.0, draw.integral(), delta=1e-9)
            self.assertTrue(np.all(draw(np.array([[0.0], [0.5], [1.0]])) > 0))

    def test_path_draws_average_to_mean_density(self) -> None:
        rng = np.random.default_rng(4)
        draws = np.array([self.post.sample_at([0.1], rng) for _ in range(4000)])
        error = draws.std() / math.sqrt(draws.size)
        self.assertLess(abs(draws.mean() - 1.4), 5 * error + 1e-12)


if __name__ == "__main__":
    unittest.main()
