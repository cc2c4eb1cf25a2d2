"""
Tests for the recursive, greedy recursive and hybrid tree builders.
"""

import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from app.config import config
from app.core.diffusion_models import (black_scholes_euler, correlated_bs_2d, custom_model, euler_step,
                                       mixture_law)
from app.core.markov_tree import (QuantizationTree, TreeMethod, build_greedy_recursive_tree,
                                  build_hybrid_tree, build_recursive_tree_1d, recursive_transitions_1d,
                                  resolve_sizes)
from app.core.quantizer import Grid, distortion, lloyd_mixture_1d
from app.utils.errors import InvalidArgumentError


def table_one_model(n: int = 20):
    return black_scholes_euler(100.0, 0.25, n, mu=0.05, sigma=0.2, r=0.01)


class TreeTestCase(unittest.TestCase):
    """Runs every test with an empty grid cache."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.cache_patch = patch.object(config, "GRID_CACHE_DIR", Path(self.temp_dir.name))
        self.cache_patch.start()

    def tearDown(self):
        self.cache_patch.stop()
        self.temp_dir.cleanup()


class TestRecursiveTree(TreeTestCase):
    """Test cases for the closed-form recursive tree."""

    def test_single_step_single_point(self):
        model = black_scholes_euler(100.0, 0.25, 1, mu=0.05, sigma=0.2)
        tree = build_recursive_tree_1d(model, 1)
        np.testing.assert_allclose(tree.grids[1].points[:, 0], [100.0 + 0.25 * 5.0], atol=1e-12)
        np.testing.assert_allclose(tree.transitions[0], [[1.0]], atol=1e-12)
        np.testing.assert_allclose(tree.noise_moments[0], [[[0.0]]], atol=1e-12)

    def test_table_one_tree_invariants(self):
        tree = build_recursive_tree_1d(table_one_model(), 100)
        self.assertEqual(tree.sizes, [100] * 20)
        self.assertEqual(tree.method, TreeMethod.RQ)
        diagnostics = tree.diagnostics()
        self.assertLessEqual(diagnostics.row_sum_error, 1e-9)
        self.assertLessEqual(diagnostics.kolmogorov_error, 1e-9)
        self.assertLessEqual(diagnostics.noise_sum_error, 1e-7)
        self.assertTrue(tree.metadata["lloyd_converged"])
        for grid in tree.grids:
            self.assertAlmostEqual(float(grid.cell_weights.sum()), 1.0, delta=1e-12)

    def test_table_one_grids_are_stationary(self):
        model = table_one_model()
        tree = build_recursive_tree_1d(model, 100)
        for k in range(model.n):
            mix = mixture_law(model, k, tree.grids[k])
            recheck = lloyd_mixture_1d(mix, 100, init=tree.grids[k + 1].points[:, 0], max_iter=0)
            self.assertLessEqual(recheck.info["residual"], 1e-8, f"step {k}")

    def test_noise_moments_match_monte_carlo(self):
        model = table_one_model(5)
        tree = build_recursive_tree_1d(model, 10)
        k, i = 2, 4
        x_i = tree.grids[k].points[i]
        eps = np.random.default_rng(9).standard_normal((1_000_000, 1))
        cells = tree.grids[k + 1].assign(euler_step(model, k, x_i, eps))
        sqrt_dt = math.sqrt(model.step)
        for j in range(tree.grids[k + 1].size):
            sample = sqrt_dt * eps[:, 0] * (cells == j)
            se = sample.std(ddof=1) / math.sqrt(len(sample))
            self.assertLess(abs(sample.mean() - tree.noise_moments[k][i, j, 0]), 3 * se + 1e-12)

    def test_companion_rows_match_monte_carlo(self):
        model = table_one_model(5)
        tree = build_recursive_tree_1d(model, 10)
        n_paths = 1_000_000
        eps = np.random.default_rng(11).standard_normal((n_paths, 1))
        sqrt_dt = math.sqrt(model.step)
        hits = checked = 0
        for k in range(model.n):
            next_grid = tree.grids[k + 1]
            for i, x_i in enumerate(tree.grids[k].points):
                cells = next_grid.assign(euler_step(model, k, x_i, eps))
                counts = np.bincount(cells, minlength=next_grid.size)
                sums = np.bincount(cells, weights=eps[:, 0], minlength=next_grid.size)
                squares = np.bincount(cells, weights=eps[:, 0] ** 2, minlength=next_grid.size)
                p = tree.transitions[k][i]
                pi = tree.noise_moments[k][i, :, 0]
                se_p = np.sqrt(p * (1 - p) / n_paths)
                se_pi = sqrt_dt * np.sqrt(np.maximum(squares / n_paths - (sums / n_paths) ** 2, 0.0) / n_paths)
                live = p >= 1e-3
                hits += int(np.sum(np.abs(counts / n_paths - p)[live] <= 3 * se_p[live] + 1e-12))
                hits += int(np.sum(np.abs(sqrt_dt * sums / n_paths - pi)[live] <= 3 * se_pi[live] + 1e-12))
                checked += 2 * int(live.sum())
        self.assertGreater(checked, 200)
        self.assertGreaterEqual(hits / checked, 0.99)

    def test_degenerate_rows_use_indicators(self):
        model = custom_model(np.array([1.0]), 1.0, 2, drift=lambda t, x: x,
                             diffusion=lambda t, x: np.zeros((len(x), 1, 1)))
        grid = Grid(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        P, Pi, degenerate = recursive_transitions_1d(model, 0, grid, Grid(np.array([0.0, 1.2, 2.0])))
        self.assertEqual(degenerate, 2)
        np.testing.assert_array_equal(P, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(Pi, np.zeros((2, 3, 1)))

    def test_requires_1d_model(self):
        model = correlated_bs_2d([40.0, 36.0], 1.0, 2, r=0.0, sigma=0.2, rho=0.0)
        with self.assertRaises(InvalidArgumentError):
            build_recursive_tree_1d(model, 5)

    def test_sizes_checked(self):
        model = table_one_model(3)
        self.assertEqual(resolve_sizes(model, 4), [4, 4, 4])
        with self.assertRaises(InvalidArgumentError):
            resolve_sizes(model, [4, 4])
        with self.assertRaises(InvalidArgumentError):
            resolve_sizes(model, [4, 0, 4])

    def test_tree_shape_validation(self):
        tree = build_recursive_tree_1d(table_one_model(2), 3)
        with self.assertRaises(InvalidArgumentError):
            QuantizationTree(tree.model, tree.grids, tree.transitions[:1], tree.noise_moments, TreeMethod.RQ)
        with self.assertRaises(InvalidArgumentError):
            QuantizationTree(tree.model, tree.grids, [tree.transitions[0], tree.transitions[0].T],
                             tree.noise_moments, TreeMethod.RQ)


class TestGreedyRecursiveTree(TreeTestCase):
    """Test cases for the greedy recursive tree."""

    def test_single_points_match_recursive(self):
        model = table_one_model(4)
        greedy = build_greedy_recursive_tree(model, 1)
        lloyd = build_recursive_tree_1d(model, 1)
        for g, l in zip(greedy.grids, lloyd.grids):
            np.testing.assert_allclose(g.points, l.points, atol=1e-12)
        self.assertEqual(greedy.method, TreeMethod.GRQ)

    def test_distortion_close_to_lloyd(self):
        model = table_one_model(5)
        greedy = build_greedy_recursive_tree(model, 100)
        lloyd = build_recursive_tree_1d(model, 100)
        for k in range(model.n):
            e_greedy = distortion(greedy.grids[k + 1], mixture_law(model, k, greedy.grids[k])).value
            e_lloyd = distortion(lloyd.grids[k + 1], mixture_law(model, k, lloyd.grids[k])).value
            self.assertLessEqual(e_greedy, 1.15 * e_lloyd)
        self.assertLessEqual(greedy.diagnostics().row_sum_error, 1e-9)


class TestHybridTree(TreeTestCase):
    """Test cases for the hybrid recursive tree."""

    def test_single_noise_atom_follows_drift(self):
        model = table_one_model(4)
        tree = build_hybrid_tree(model, 1, noise_grid_size=1)
        x = 100.0
        for k in range(model.n):
            x = x * (1 + 0.05 * model.step)
            np.testing.assert_allclose(tree.grids[k + 1].points[:, 0], [x], rtol=1e-14)
            np.testing.assert_array_equal(tree.transitions[k], [[1.0]])

    def test_one_dimensional_invariants(self):
        model = table_one_model(4)
        tree = build_hybrid_tree(model, 20, noise_grid_size=60, seed=0)
        diagnostics = tree.diagnostics()
        self.assertLessEqual(diagnostics.row_sum_error, 1e-12)
        self.assertLessEqual(diagnostics.kolmogorov_error, 1e-12)
        # stationary noise grids are centered, so every row of pi sums to about zero
        self.assertLessEqual(diagnostics.noise_sum_error, 1e-7)
        self.assertEqual(tree.metadata["noise_grid_size"], 60)

    def test_two_dimensional_rows_are_exact(self):
        model = correlated_bs_2d([40.0, 36.0], 1.0, 3, r=0.0, sigma=0.2, rho=-0.8, lambda_dividend=0.05)
        with patch.object(config, "NORMAL_SAMPLE_SIZE", 20000):
            tree = build_hybrid_tree(model, 10, noise_grid_size=50, seed=1)
        self.assertEqual(tree.noise_moments[0].shape, (1, 10, 2))
        for P in tree.transitions:
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        self.assertEqual(tree.grids[1].dim, 2)

    def test_invalid_arguments(self):
        model = table_one_model(2)
        with self.assertRaises(InvalidArgumentError):
            build_hybrid_tree(model, 5, noise_grid_size=0)
        with self.assertRaises(InvalidArgumentError):
            build_hybrid_tree(model, 5, noise_grid_size=1)


if __name__ == "__main__":
    unittest.main()
