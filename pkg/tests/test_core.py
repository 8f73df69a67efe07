from __future__ import annotations

import math
import os
import time
import unittest

import numpy as np

from condopt.core import (
    CondOptPrior,
    fit,
    hmap,
    inclusion_probabilities,
    predict_density,
    sample_conditional_density,
    sample_density_at,
    sample_partition,
)
from condopt.dataset import Dataset, resolve_space
from condopt.opt import OptPrior
from condopt.simulate import EX1, EX2, EX3, EX4, FLOW, Scenario, scenario_columns, simulate
from condopt.space import Binary, Continuous, Region, SampleSpace

SLOW = os.getenv("CONDOPT_SLOW_TESTS") == "1"
UNIT = SampleSpace((Continuous(0.0, 1.0),))
RELEVANT = {4, 19, 29}


def _fit_scenario(name: str, n: int, seed: int, prior: CondOptPrior):
    data = simulate(Scenario(name, n, seed))
    predictors, responses = scenario_columns(name)
    space_x = resolve_space(predictors, data.x)
    space_y = resolve_space(responses, data.y)
    return fit(space_x, space_y, prior, data), data


def _small_prior(depth_x: int = 6, depth_y: int = 6) -> CondOptPrior:
    return CondOptPrior(local=OptPrior(max_depth_y=depth_y), max_depth_x=depth_x)


def _recursive_density(tree, x, y) -> float:
    """Mean density by direct recursion over every region containing x."""
    code = tree.lattice.codes(np.array([x], dtype=float))[0]

    def value(key: int, carried: int) -> float:
        idx, _, rho, lam, rep = tree.state(key, carried)
        total = rho * float(tree.local_posterior(idx, rep).mean_density([y])[0])
        if rho < 1.0:
            levels = tree.lattice.key_levels(key)
            for j in np.flatnonzero(lam > 0):
                side = (int(code[j]) >> (int(tree.lattice.caps[j]) - levels[j] - 1)) & 1
                total += (1.0 - rho) * lam[j] * value(tree.lattice.child_key(key, int(j), side), rep)
        return total

    return value(tree.lattice.root_key, -1)


def _integrals(tree, xs, resolution: int) -> list[float]:
    ys, volume = tree.space_y.grid(resolution)
    return [float(predict_density(tree, [x], ys).sum() * volume) for x in xs]


class FitTests(unittest.TestCase):
    def test_empty_data_is_prior(self) -> None:
        tree = fit(UNIT, UNIT, _small_prior(), Dataset(np.empty((0, 1)), np.empty((0, 1))))
        self.assertEqual(0, tree.size)
        self.assertEqual(0.0, tree.root.log_phi)
        self.assertEqual(0.5, tree.root.rho_post)
        space_y = SampleSpace((Continuous(0.0, 2.0),))
        empty = fit(UNIT, space_y, _small_prior(), Dataset(np.empty((0, 1)), np.empty((0, 1))))
        np.testing.assert_allclose(0.5, predict_density(empty, [[0.3], [0.9]], [[0.1], [1.7]]))

    def test_single_observation(self) -> None:
        tree = fit(UNIT, UNIT, _small_prior(), Dataset([[0.3]], [[0.8]]))
        self.assertAlmostEqual(0.0, tree.root.log_phi, places=12)
        self.assertEqual(0.5, tree.root.rho_post)
        self.assertEqual(1, tree.root.n)

    def test_mismatched_rows_rejected(self) -> None:
        with self.assertRaises(ValueError):
            fit(UNIT, UNIT, _small_prior(), Dataset(np.zeros((3, 1)), np.zeros((2, 1))))

    def test_points_outside_space_rejected(self) -> None:
        with self.assertRaises(ValueError):
            fit(UNIT, UNIT, _small_prior(), Dataset([[0.3], [1.5]], [[0.1], [0.2]]))

    def test_permutation_invariant(self) -> None:
        rng = np.random.default_rng(5)
        tree, data = _fit_scenario(EX1, 300, 3, _small_prior())
        order = rng.permutation(data.n)
        other = fit(tree.space_x, tree.space_y, tree.prior, data.subset(order))
        self.assertAlmostEqual(tree.root.log_phi, other.root.log_phi, delta=1e-9 * abs(tree.root.log_phi))
        self.assertAlmostEqual(tree.root.rho_post, other.root.rho_post, delta=1e-12)

    def test_posterior_stop_and_marginal_are_consistent(self) -> None:
        tree, _ = _fit_scenario(EX1, 200, 4, _small_prior(depth_x=4, depth_y=4))
        checked = 0
        for idx in range(tree.size):
            depth = sum(tree.lattice.key_levels(int(tree.keys[idx])))
            if tree.n[idx] < 2 or depth >= tree.prior.max_depth_x:
                continue
            rho = tree.prior.rho_at(depth)
            stop = math.log(rho) + tree.log_m[idx]
            split = math.log1p(-rho) + tree.split_log_marginal(idx)
            self.assertAlmostEqual(float(np.logaddexp(stop, split)), tree.log_phi[idx], delta=1e-9)
            self.assertAlmostEqual(math.exp(stop - tree.log_phi[idx]), tree.rho_post[idx], delta=1e-12)
            checked += 1
        self.assertGreater(checked, 5)

    def test_extreme_root_stop_probabilities(self) -> None:
        _, data = _fit_scenario(EX1, 150, 2, _small_prior())
        predictors, responses = scenario_columns(EX1)
        space_x, space_y = resolve_space(predictors, data.x), resolve_space(responses, data.y)
        always = CondOptPrior(local=OptPrior(max_depth_y=5), max_depth_x=5, rho_by_depth=(1.0,))
        tree = fit(space_x, space_y, always, data)
        self.assertAlmostEqual(tree.root.log_m, tree.root.log_phi, places=12)
        self.assertEqual(1.0, tree.root.rho_post)
        never = CondOptPrior(local=OptPrior(max_depth_y=5), max_depth_x=5, rho_by_depth=(0.0,))
        tree = fit(space_x, space_y, never, data)
        self.assertAlmostEqual(tree.split_log_marginal(tree.index_of(Region.root(space_x))), tree.root.log_phi, places=10)
        self.assertEqual(0.0, tree.root.rho_post)

    def test_unmaterialized_regions_report_prior(self) -> None:
        x = np.array([[0.1], [0.2], [0.3], [0.05]])
        y = np.array([[0.5], [0.6], [0.7], [0.8]])
        tree = fit(UNIT, UNIT, _small_prior(), Dataset(x, y))
        node = tree.node(Region.from_address(UNIT, (2,), (3,)))
        self.assertFalse(node.materialized)
        self.assertEqual(0, node.n)
        self.assertEqual(0.5, node.rho_post)
        self.assertEqual(0.0, node.log_phi)
        single = tree.node(Region.from_address(UNIT, (3,), (2,)))
        self.assertEqual(1, single.n)
        self.assertAlmostEqual(0.0, single.log_m)

    def test_single_point_region_terminal_under_min_points(self) -> None:
        x = np.array([[0.1], [0.2], [0.8]])
        y = np.array([[0.3], [0.4], [0.9]])
        right = Region.from_address(UNIT, (1,), (1,))
        open_tree = fit(UNIT, UNIT, _small_prior(depth_x=3, depth_y=3), Dataset(x, y))
        self.assertEqual(0.5, open_tree.node(right).rho_post)
        prior = CondOptPrior(local=OptPrior(max_depth_y=3), max_depth_x=3, min_points=1)
        tree = fit(UNIT, UNIT, prior, Dataset(x, y))
        node = tree.node(right)
        self.assertTrue(node.materialized)
        self.assertEqual(1, node.n)
        self.assertEqual(1.0, node.rho_post)
        deeper = tree.node(Region.from_address(UNIT, (2,), (3,)))
        self.assertFalse(deeper.materialized)
        self.assertEqual(1.0, deeper.rho_post)
        ys, volume = UNIT.grid(8)
        self.assertAlmostEqual(1.0, float(predict_density(tree, [0.8], ys).sum() * volume), delta=1e-10)

    def test_reversed_prior_swaps_roles(self) -> None:
        prior = CondOptPrior(rho=0.3, local=OptPrior(rho_y=0.6, max_depth_y=5), max_depth_x=7)
        reverse = prior.reversed()
        self.assertEqual(0.6, reverse.rho)
        self.assertEqual(0.3, reverse.local.rho_y)
        self.assertEqual(5, reverse.max_depth_x)
        self.assertEqual(7, reverse.local.max_depth_y)

    def test_invalid_prior(self) -> None:
        with self.assertRaises(ValueError):
            CondOptPrior(rho=0.0)
        with self.assertRaises(ValueError):
            CondOptPrior(max_depth_x=-1)
        with self.assertRaises(ValueError):
            CondOptPrior(rho_by_depth=(1.5,))


class PredictTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tree, cls.data = _fit_scenario(EX1, 800, 1, _small_prior())

    def test_density_integrates_to_one(self) -> None:
        ys, volume = self.tree.space_y.grid(64)
        for x in (0.05, 0.3, 0.49, 0.7, 0.99):
            values = predict_density(self.tree, [x], ys)
            self.assertAlmostEqual(1.0, float(values.sum() * volume), delta=1e-8)

    def test_u_shape_above_one_half(self) -> None:
        values = predict_density(self.tree, [0.7], [[0.05], [0.5]])
        self.assertGreater(values[0], values[1])

    def test_repeated_predictor_points_share_one_path(self) -> None:
        ys = [[0.05], [0.3], [0.8]]
        single = predict_density(self.tree, [0.7], ys)
        mixed = predict_density(self.tree, [[0.7], [0.1], [0.7]], [[0.05], [0.3], [0.8]])
        self.assertAlmostEqual(single[0], mixed[0], delta=1e-12)
        self.assertAlmostEqual(single[2], mixed[2], delta=1e-12)
        self.assertAlmostEqual(float(predict_density(self.tree, [0.1], [0.3])[0]), mixed[1], delta=1e-12)

    def test_matches_direct_recursion_on_mixed_predictors(self) -> None:
        rng = np.random.default_rng(12)
        space_x = SampleSpace((Binary(), Binary(), Binary(), Continuous(0.0, 1.0)))
        x = np.column_stack([rng.integers(0, 2, (40, 3)), rng.random(40)]).astype(float)
        y = np.where(x[:, :1] == 1, rng.beta(6.0, 2.0, (40, 1)), rng.beta(2.0, 6.0, (40, 1)))
        tree = fit(space_x, UNIT, _small_prior(depth_x=4, depth_y=4), Dataset(x, y))
        queries = [
            ([1.0, 0.0, 1.0, 0.3], [0.8]),
            ([0.0, 0.0, 0.0, 0.9], [0.1]),
            ([0.0, 1.0, 1.0, 0.55], [0.45]),
            (list(x[0]), list(y[0])),
        ]
        values = predict_density(tree, [q[0] for q in queries], [q[1] for q in queries])
        for (px, py), value in zip(queries, values):
            expected = _recursive_density(tree, px, py)
            self.assertAlmostEqual(expected, value, delta=1e-10 * expected)

    def test_singleton_paths_match_direct_recursion(self) -> None:
        x = np.array([[0.1], [0.12], [0.6], [0.9]])
        y = np.array([[0.2], [0.25], [0.7], [0.1]])
        tree = fit(UNIT, UNIT, _small_prior(depth_x=5, depth_y=4), Dataset(x, y))
        for px, py in ((0.6, 0.7), (0.61, 0.2), (0.95, 0.1), (0.3, 0.5)):
            expected = _recursive_density(tree, [px], [py])
            self.assertAlmostEqual(expected, float(predict_density(tree, [px], [py])[0]), delta=1e-10 * expected)

    def test_queries_outside_space_rejected(self) -> None:
        with self.assertRaises(ValueError):
            predict_density(self.tree, [1.5], [0.5])

    def test_path_draws_average_to_mean(self) -> None:
        rng = np.random.default_rng(9)
        point_x, point_y = [0.2], [0.55]
        expected = float(predict_density(self.tree, point_x, point_y)[0])
        draws = np.array([sample_density_at(self.tree, point_x, point_y, rng) for _ in range(3000)])
        error = draws.std() / math.sqrt(draws.size)
        self.assertLess(abs(draws.mean() - expected), 5 * error + 1e-12)

    def test_full_draw_blocks_cover_space(self) -> None:
        rng = np.random.default_rng(10)
        blocks = sample_conditional_density(self.tree, rng)
        self.assertAlmostEqual(1.0, sum(node.region.measure for node, _ in blocks), places=12)
        for _, density in blocks:
            self.assertAlmostEqual(1.0, density.integral(), delta=1e-10)


class PartitionTests(unittest.TestCase):
    def test_sampling_is_deterministic(self) -> None:
        tree, _ = _fit_scenario(EX1, 300, 2, _small_prior())
        first = sample_partition(tree, np.random.default_rng(3))
        second = sample_partition(tree, np.random.default_rng(3))
        self.assertEqual(first, second)
        stopped = [node for node in first if node.stopped]
        self.assertAlmostEqual(1.0, sum(node.region.measure for node in stopped), places=12)

    def test_root_stop_frequency(self) -> None:
        rng = np.random.default_rng(4)
        x = rng.random((40, 1))
        y = rng.random((40, 1))
        tree = fit(UNIT, UNIT, _small_prior(depth_x=3, depth_y=3), Dataset(x, y))
        rho = tree.root.rho_post
        draws = 2000
        stops = sum(sample_partition(tree, rng)[0].stopped for _ in range(draws))
        self.assertLess(abs(stops / draws - rho), 4 * math.sqrt(rho * (1 - rho) / draws) + 1e-9)

    def test_zero_depth_has_single_block(self) -> None:
        tree, _ = _fit_scenario(EX1, 200, 1, _small_prior(depth_x=0))
        self.assertEqual(1.0, tree.root.rho_post)
        self.assertEqual(1, len(hmap(tree).leaves()))
        probs = inclusion_probabilities(tree, 50, np.random.default_rng(0))
        self.assertEqual([0.0], probs.tolist())

    def test_hmap_splits_dependent_data(self) -> None:
        tree, _ = _fit_scenario(EX1, 800, 1, _small_prior())
        self.assertLess(tree.root.rho_post, 0.01)
        summary = hmap(tree)
        self.assertGreater(len(summary.leaves()), 1)
        self.assertEqual({0}, summary.split_dims())
        self.assertEqual(800, summary.root.n)

    def test_inclusion_picks_relevant_binary_predictor(self) -> None:
        rng = np.random.default_rng(6)
        x = rng.integers(0, 2, (300, 3)).astype(float)
        y = np.where(x[:, 1:2] == 1, rng.beta(8.0, 2.0, (300, 1)), rng.beta(2.0, 8.0, (300, 1)))
        space_x = SampleSpace((Binary(), Binary(), Binary()))
        tree = fit(space_x, UNIT, _small_prior(depth_x=3), Dataset(x, y))
        probs = inclusion_probabilities(tree, 200, rng)
        self.assertGreater(probs[1], 0.9)
        self.assertEqual(1, int(np.argmax(probs)))

    def test_inclusion_counts_every_split_by_default(self) -> None:
        space_x = SampleSpace((Binary(), Binary()))
        tree = fit(space_x, UNIT, _small_prior(depth_x=2), Dataset([[0.0, 1.0]], [[0.4]]))
        probs = inclusion_probabilities(tree, 2000, np.random.default_rng(8))
        # root splits w.p. 1/2; after the other dim, either child may still split on this one
        np.testing.assert_allclose(0.4375, probs, atol=0.05)
        filtered = inclusion_probabilities(tree, 200, np.random.default_rng(8), min_count=2)
        self.assertEqual([0.0, 0.0], filtered.tolist())

    def test_inclusion_matches_partition_draws(self) -> None:
        tree, _ = _fit_scenario(EX1, 200, 5, _small_prior(depth_x=4, depth_y=4))
        rng = np.random.default_rng(11)
        hits = np.zeros(1)
        for _ in range(40):
            dims = {node.split_dim for node in sample_partition(tree, rng) if not node.stopped}
            hits[list(dims)] += 1
        probs = inclusion_probabilities(tree, 40, np.random.default_rng(11))
        np.testing.assert_array_equal(hits / 40, probs)

    def test_invalid_draws(self) -> None:
        tree = fit(UNIT, UNIT, _small_prior(), Dataset([[0.3]], [[0.8]]))
        with self.assertRaises(ValueError):
            inclusion_probabilities(tree, 0, np.random.default_rng(0))


class BinaryPredictorTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tree, cls.data = _fit_scenario(EX3, 500, 0, _small_prior(depth_x=4, depth_y=6))

    def test_density_integrates_to_one(self) -> None:
        xs = [self.data.x[0], self.data.x[1], np.zeros(30), np.ones(30)]
        for integral in _integrals(self.tree, xs, 64):
            self.assertAlmostEqual(1.0, integral, delta=1e-8)

    def test_relevant_predictors_rank_first(self) -> None:
        probs = inclusion_probabilities(self.tree, 200, np.random.default_rng(0))
        self.assertEqual(RELEVANT, set(np.argsort(probs)[-3:].tolist()))

    def test_hmap_splits_only_relevant_predictors(self) -> None:
        dims = hmap(self.tree).split_dims()
        self.assertTrue(dims)
        self.assertLessEqual(dims, RELEVANT)


class NormalizationTests(unittest.TestCase):
    def test_bivariate_normal(self) -> None:
        tree, data = _fit_scenario(EX2, 400, 0, _small_prior())
        xs = np.quantile(data.x, [0.0, 0.1, 0.5, 0.9, 1.0], axis=0)
        for integral in _integrals(tree, xs, 64):
            self.assertAlmostEqual(1.0, integral, delta=1e-8)

    def test_independence_example(self) -> None:
        tree, data = _fit_scenario(EX4, 300, 0, _small_prior(depth_x=4))
        xs = [data.x[0], data.x[7], np.zeros(10), np.ones(10)]
        for integral in _integrals(tree, xs, 64):
            self.assertAlmostEqual(1.0, integral, delta=1e-8)


@unittest.skipUnless(SLOW, "set CONDOPT_SLOW_TESTS=1")
class RecoveryTests(unittest.TestCase):
    def test_beta_blocks_structure(self) -> None:
        prior = CondOptPrior()
        hits = 0
        for seed in range(10):
            tree, _ = _fit_scenario(EX1, 2500, seed, prior)
            leaves = hmap(tree).leaves()
            bounds = sorted(leaf.region.bounds()[0] for leaf in leaves)
            if bounds == [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0)] and all(leaf.rho_post > 0.9 for leaf in leaves):
                hits += 1
        self.assertGreaterEqual(hits, 9)

    def test_markov_inclusion(self) -> None:
        prior = CondOptPrior(max_depth_x=4)
        hits = 0
        for seed in range(10):
            tree, _ = _fit_scenario(EX3, 500, seed, prior)
            probs = inclusion_probabilities(tree, 1000, np.random.default_rng(seed))
            relevant = probs[[4, 19, 29]]
            others = np.delete(probs, [4, 19, 29])
            if relevant.min() > 0.9 and others.max() < 0.2:
                hits += 1
        self.assertGreaterEqual(hits, 8)

    def test_full_draws_match_predictive(self) -> None:
        tree, _ = _fit_scenario(EX2, 2000, 0, CondOptPrior())
        rng = np.random.default_rng(1)
        points = [(0.5, 0.4), (0.6, 0.4), (0.6, 0.45), (0.7, 0.5), (0.55, 0.35)]
        for px, py in points:
            expected = float(predict_density(tree, [px], [py])[0])
            draws = np.array([sample_density_at(tree, [px], [py], rng) for _ in range(10000)])
            error = draws.std() / math.sqrt(draws.size)
            self.assertLess(abs(draws.mean() - expected), 3 * error + 1e-12)

    def test_normalization_on_every_example(self) -> None:
        rng = np.random.default_rng(21)
        cases = [(EX1, 2500, 12), (EX2, 2000, 12), (EX3, 500, 4), (EX4, 400, 4)]
        for name, n, depth_x in cases:
            with self.subTest(name=name):
                tree, data = _fit_scenario(name, n, 0, CondOptPrior(max_depth_x=depth_x))
                xs = data.x[rng.choice(data.n, 10, replace=False)]
                for integral in _integrals(tree, xs, 1 << tree.prior.local.max_depth_y):
                    self.assertAlmostEqual(1.0, integral, delta=1e-8)

    def test_markov_top_three_at_small_n(self) -> None:
        prior = CondOptPrior(max_depth_x=4)
        hits = 0
        for seed in range(10):
            tree, _ = _fit_scenario(EX3, 200, seed, prior)
            probs = inclusion_probabilities(tree, 1000, np.random.default_rng(seed))
            hits += set(np.argsort(probs)[-3:].tolist()) == RELEVANT
        self.assertGreaterEqual(hits, 8)

    def test_markov_hmap_splits(self) -> None:
        prior = CondOptPrior(max_depth_x=4)
        hits = 0
        for seed in range(10):
            tree, _ = _fit_scenario(EX3, 500, seed, prior)
            dims = hmap(tree).split_dims()
            hits += bool(dims) and dims <= RELEVANT
        self.assertGreaterEqual(hits, 8)

    def test_flow_fit_time_scales_linearly(self) -> None:
        prior = CondOptPrior(local=OptPrior(max_depth_y=8), max_depth_x=8)
        seconds = []
        for n in (100_000, 200_000):
            data = simulate(Scenario(FLOW, n, 0))
            predictors, responses = scenario_columns(FLOW)
            space_x, space_y = resolve_space(predictors, data.x), resolve_space(responses, data.y)
            started = time.perf_counter()
            fit(space_x, space_y, prior, data)
            seconds.append(time.perf_counter() - started)
        self.assertLess(seconds[0], 60.0)
        self.assertLess(seconds[1] / seconds[0], 3.0)


if __name__ == "__main__":
    unittest.main()
