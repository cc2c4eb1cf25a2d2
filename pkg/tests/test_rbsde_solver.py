"""
Tests for the reflected BSDE solver, drivers, payoffs and end-to-end pricing.
"""

import math
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np

from app.config import config
from app.core.diffusion_models import black_scholes_euler, black_scholes_exact, cev_euler, correlated_bs_2d
from app.core.markov_tree import TreeMethod, build_recursive_tree_1d
from app.core.rbsde_solver import (BidAskDriver, CallPayoff, ExchangePayoff, PutPayoff, RBSDEProblem,
                                   american_problem, black_scholes_price, build_tree, price,
                                   romberg_extrapolate, solve_bdpp, zero_driver)
from app.utils.errors import InvalidArgumentError, NumericalError

RUN_SLOW = os.getenv("QTREE_RUN_SLOW", "0") == "1"


def identity_problem(T: float) -> RBSDEProblem:
    return RBSDEProblem(driver=zero_driver, obstacle=lambda t, x: np.zeros(len(x)),
                        terminal=lambda x: np.asarray(x)[:, 0], obstacle_enabled=False)


class SolverTestCase(unittest.TestCase):
    """Runs every test with an empty grid cache."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.cache_patch = patch.object(config, "GRID_CACHE_DIR", Path(self.temp_dir.name))
        self.cache_patch.start()

    def tearDown(self):
        self.cache_patch.stop()
        self.temp_dir.cleanup()


class TestSolveBdpp(SolverTestCase):
    """Test cases for the backward dynamic programming solver."""

    def setUp(self):
        super().setUp()
        self.model = black_scholes_exact(100.0, 1.0, 10, sigma=0.2, r=0.0)
        self.tree = build_recursive_tree_1d(self.model, 100)

    def test_martingale_mean(self):
        solution = solve_bdpp(self.tree, identity_problem(1.0))
        self.assertAlmostEqual(solution.price, 100.0, delta=0.1)

    def test_matches_transition_chain(self):
        solution = solve_bdpp(self.tree, identity_problem(1.0))
        v = self.tree.grids[-1].points[:, 0]
        for P in reversed(self.tree.transitions):
            v = P @ v
        self.assertAlmostEqual(solution.price, float(v[0]), delta=1e-12)

    def test_driver_called_once_per_layer(self):
        driver = MagicMock(side_effect=zero_driver)
        problem = american_problem(CallPayoff(100.0), 1.0, driver=driver)
        solve_bdpp(self.tree, problem)
        self.assertEqual(driver.call_count, self.model.n)
        t, x, y, z = driver.call_args_list[0].args
        self.assertEqual(x.shape, (100, 1))
        self.assertEqual(z.shape, (100, 1))

    def test_obstacle_dominance(self):
        payoff = PutPayoff(105.0)
        solution = solve_bdpp(self.tree, american_problem(payoff, 1.0))
        for k, (x, y) in enumerate(zip(solution.points, solution.y_values)):
            self.assertTrue(np.all(y >= payoff(solution.times[k], x)))

    def test_american_call_equals_european(self):
        american = solve_bdpp(self.tree, american_problem(CallPayoff(100.0), 1.0))
        european = solve_bdpp(self.tree, american_problem(CallPayoff(100.0), 1.0, obstacle_enabled=False))
        self.assertLessEqual(abs(american.price - european.price), 0.02)
        self.assertGreaterEqual(american.price, european.price)

    def test_monotone_in_payoff(self):
        low = solve_bdpp(self.tree, american_problem(PutPayoff(95.0), 1.0))
        high = solve_bdpp(self.tree, american_problem(PutPayoff(100.0), 1.0))
        for y_high, y_low in zip(high.y_values, low.y_values):
            self.assertTrue(np.all(y_high >= y_low - 1e-12))

    def test_non_finite_driver(self):
        def broken(t, x, y, z):
            out = np.zeros_like(y)
            out[3] = np.nan
            return out

        with self.assertRaises(NumericalError) as ctx:
            solve_bdpp(self.tree, american_problem(CallPayoff(100.0), 1.0, driver=broken))
        self.assertIn("k=9, i=3", str(ctx.exception))

    def test_wrong_layer_size(self):
        problem = RBSDEProblem(driver=zero_driver, obstacle=lambda t, x: np.zeros(3),
                               terminal=lambda x: np.zeros(len(x)))
        with self.assertRaises(InvalidArgumentError):
            solve_bdpp(self.tree, problem)

    def test_solution_frame(self):
        solution = solve_bdpp(self.tree, american_problem(CallPayoff(100.0), 1.0))
        frame = solution.to_frame()
        self.assertEqual(list(frame.columns), ["k", "i", "x_1", "y", "z_1"])
        self.assertEqual(len(frame), 1 + 10 * 100)
        self.assertTrue(frame[frame["k"] == 10]["z_1"].isna().all())


class TestDriversAndPayoffs(unittest.TestCase):
    """Test cases for drivers, payoffs and closed forms."""

    def test_bid_ask_driver_values(self):
        model = black_scholes_euler(100.0, 0.25, 20, mu=0.05, sigma=0.2, r=0.01)
        driver = BidAskDriver(model, 0.01, 0.06)
        x = np.array([[100.0], [100.0]])
        values = driver(0.0, x, np.array([10.0, 10.0]), np.array([[1.0], [4.0]]))
        np.testing.assert_allclose(values, [-0.3, -0.4], atol=1e-12)

    def test_bid_ask_driver_requires_1d(self):
        model = correlated_bs_2d([40.0, 36.0], 1.0, 2, r=0.0, sigma=0.2, rho=0.0)
        with self.assertRaises(InvalidArgumentError):
            BidAskDriver(model, 0.0, 0.05)

    def test_payoffs(self):
        x = np.array([[90.0], [110.0]])
        np.testing.assert_array_equal(CallPayoff(100.0)(0.0, x), [0.0, 10.0])
        np.testing.assert_array_equal(PutPayoff(100.0)(0.0, x), [10.0, 0.0])
        exchange = ExchangePayoff(1.0, 0.05)
        value = exchange(1.0, np.array([[40.0, 36.0]]))
        self.assertAlmostEqual(float(value[0]), 40.0 * math.exp(-0.05) - 36.0, delta=1e-12)

    def test_black_scholes_price(self):
        call = black_scholes_price(100.0, 100.0, 0.25, 0.2, r=0.01)
        put = black_scholes_price(100.0, 100.0, 0.25, 0.2, r=0.01, kind="put")
        self.assertAlmostEqual(call - put, 100.0 - 100.0 * math.exp(-0.0025), delta=1e-12)
        self.assertAlmostEqual(black_scholes_price(100.0, 100.0, 1.0, 0.2), 7.965567455405804, delta=1e-9)
        self.assertEqual(black_scholes_price(110.0, 100.0, 1.0, 0.0), 10.0)
        with self.assertRaises(InvalidArgumentError):
            black_scholes_price(100.0, 100.0, 1.0, 0.2, kind="digital")


class TestRomberg(unittest.TestCase):
    """Test cases for Richardson-Romberg extrapolation."""

    def test_constant(self):
        self.assertEqual(romberg_extrapolate(5.0, 5.0, 50, 100), 5.0)

    def test_cancels_second_order_term(self):
        value = romberg_extrapolate(3 + 2 / 50 ** 2, 3 + 2 / 100 ** 2, 50, 100)
        self.assertAlmostEqual(value, 3.0, delta=1e-12)

    def test_first_order_residual(self):
        value = romberg_extrapolate(3 + 2 / 50, 3 + 2 / 100, 50, 100)
        self.assertAlmostEqual(value, 3.0 + 2 / 150, delta=1e-12)

    def test_equal_sizes(self):
        with self.assertRaises(InvalidArgumentError):
            romberg_extrapolate(1.0, 2.0, 10, 10)


class TestPrice(SolverTestCase):
    """Test cases for end-to-end pricing."""

    def setUp(self):
        super().setUp()
        self.model = black_scholes_euler(100.0, 0.25, 20, mu=0.05, sigma=0.2, r=0.01)
        self.driver = BidAskDriver(self.model, 0.01, 0.06)

    def test_table_one_recursive(self):
        tree = None
        for strike, reference in ((100.0, 4.719), (120.0, 0.203)):
            result = price(self.model, american_problem(CallPayoff(strike), 0.25, driver=self.driver),
                           TreeMethod.RQ, 100, tree=tree)
            tree = result.tree
            self.assertAlmostEqual(result.price, reference, delta=0.05)
            self.assertGreaterEqual(result.build_seconds, 0.0)

    def test_greedy_recursive_column(self):
        result = price(self.model, american_problem(CallPayoff(105.0), 0.25, driver=self.driver), "grq", 100)
        self.assertAlmostEqual(result.price, 2.548, delta=0.05)

    def test_greedy_marginal_column(self):
        result = price(self.model, american_problem(CallPayoff(115.0), 0.25, driver=self.driver), "gq", 100,
                       mc_noise_paths=200000)
        self.assertAlmostEqual(result.price, 0.518, delta=0.05)

    def test_method_compatibility(self):
        model_2d = correlated_bs_2d([40.0, 36.0], 1.0, 2, r=0.0, sigma=0.2, rho=0.0)
        with self.assertRaises(InvalidArgumentError):
            build_tree(model_2d, "rq", 5)
        with self.assertRaises(InvalidArgumentError):
            build_tree(self.model, "hrq", 5)
        with self.assertRaises(ValueError):
            build_tree(self.model, "xq", 5)

    def test_tree_must_match_model(self):
        tree = build_recursive_tree_1d(black_scholes_exact(100.0, 0.25, 20, sigma=0.2), 5)
        with self.assertRaises(InvalidArgumentError):
            price(self.model, american_problem(CallPayoff(100.0), 0.25), "rq", 5, tree=tree)

    def test_tree_must_match_method(self):
        tree = build_recursive_tree_1d(self.model, 5)
        with self.assertRaises(InvalidArgumentError) as ctx:
            price(self.model, american_problem(CallPayoff(100.0), 0.25), "grq", 5, tree=tree)
        self.assertIn("built with rq", str(ctx.exception))

    @unittest.skipUnless(RUN_SLOW, "set QTREE_RUN_SLOW=1 to run")
    def test_cev_recursive(self):
        model = cev_euler(100.0, 0.25, 15, mu=0.05, vartheta=4.0, delta_exponent=0.5)
        problem = american_problem(CallPayoff(100.0), 0.25, driver=BidAskDriver(model, 0.01, 0.06))
        self.assertAlmostEqual(price(model, problem, "rq", 150).price, 8.517, delta=0.15)

    @unittest.skipUnless(RUN_SLOW, "set QTREE_RUN_SLOW=1 to run")
    def test_exchange_hybrid(self):
        model = correlated_bs_2d([40.0, 36.0], 1.0, 10, r=0.0, sigma=0.2, rho=-0.8, lambda_dividend=0.05)
        problem = american_problem(ExchangePayoff(1.0, 0.05), 1.0)
        result = price(model, problem, "hrq", 100, noise_grid_size=1000, seed=0)
        self.assertAlmostEqual(result.price, 6.975, delta=0.15)

    @unittest.skipUnless(RUN_SLOW, "set QTREE_RUN_SLOW=1 to run")
    def test_hybrid_close_to_recursive(self):
        problem = american_problem(CallPayoff(100.0), 0.25, driver=self.driver)
        hybrid = price(self.model, problem, "hrq", 100, noise_grid_size=500).price
        recursive = price(self.model, problem, "rq", 100).price
        self.assertLessEqual(abs(hybrid - recursive), 0.05)


if __name__ == "__main__":
    unittest.main()
