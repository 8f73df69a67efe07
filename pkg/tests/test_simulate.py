from __future__ import annotations

import unittest

import numpy as np

from condopt.simulate import (
    EX1,
    EX2,
    EX2_COV,
    EX2_MEAN,
    EX3,
    EX4,
    FLOW,
    SCENARIOS,
    Scenario,
    markov_binary,
    scenario_columns,
    scenario_config,
    simulate,
    simulate_null,
)


class ScenarioTests(unittest.TestCase):
    def test_same_seed_same_data(self) -> None:
        for name in SCENARIOS:
            first = simulate(Scenario(name, 50, 12))
            second = simulate(Scenario(name, 50, 12))
            self.assertEqual(first.x.tobytes(), second.x.tobytes())
            self.assertEqual(first.y.tobytes(), second.y.tobytes())
        other = simulate(Scenario(EX1, 50, 13))
        self.assertFalse(np.array_equal(simulate(Scenario(EX1, 50, 12)).y, other.y))

    def test_invalid_scenario(self) -> None:
        with self.assertRaises(ValueError):
            Scenario("ex9", 10)
        with self.assertRaises(ValueError):
            Scenario(EX1, 0)
        with self.assertRaises(ValueError):
            Scenario(EX1, 10, -1)

    def test_points_respect_declared_bounds(self) -> None:
        for name in SCENARIOS:
            data = simulate(Scenario(name, 300, 1))
            predictors, responses = scenario_columns(name)
            self.assertEqual(tuple(c.name for c in predictors), data.x_names)
            self.assertEqual(tuple(c.name for c in responses), data.y_names)
            for values, columns in ((data.x, predictors), (data.y, responses)):
                for j, column in enumerate(columns):
                    if column.kind == "binary":
                        self.assertTrue(set(np.unique(values[:, j])) <= {0.0, 1.0})
                    elif column.lo is not None:
                        self.assertTrue(np.all((values[:, j] >= column.lo) & (values[:, j] <= column.hi)))

    def test_bivariate_normal_moments(self) -> None:
        data = simulate(Scenario(EX2, 20000, 3))
        pairs = np.hstack([data.x, data.y])
        np.testing.assert_allclose(EX2_MEAN, pairs.mean(axis=0), atol=0.003)
        np.testing.assert_allclose(EX2_COV, np.cov(pairs.T), atol=0.0005)

    def test_markov_chain_persistence(self) -> None:
        x = markov_binary(np.random.default_rng(0), 20000, 5)
        self.assertAlmostEqual(0.5, x[:, 0].mean(), delta=0.02)
        same = np.mean(x[:, 1:] == x[:, :-1])
        self.assertAlmostEqual(0.7, same, delta=0.01)

    def test_shapes(self) -> None:
        self.assertEqual((40, 30), simulate(Scenario(EX3, 40, 0)).x.shape)
        self.assertEqual((40, 10), simulate(Scenario(EX4, 40, 0)).x.shape)
        flow = simulate(Scenario(FLOW, 40, 0))
        self.assertEqual((40, 2), flow.x.shape)
        self.assertEqual((40, 2), flow.y.shape)

    def test_null_keeps_marginals(self) -> None:
        scenario = Scenario(EX1, 200, 4)
        data = simulate(scenario)
        null = simulate_null(scenario)
        np.testing.assert_array_equal(data.x, null.x)
        np.testing.assert_array_equal(np.sort(data.y, axis=0), np.sort(null.y, axis=0))
        self.assertFalse(np.array_equal(data.y, null.y))

    def test_config_matches_columns(self) -> None:
        text = scenario_config(FLOW)
        self.assertIn("profile=flow", text)
        self.assertIn("predictors=x1:continuous:0.0:1.0,x2:continuous:0.0:1.0", text)
        self.assertNotIn("profile", scenario_config(EX3))


if __name__ == "__main__":
    unittest.main()
