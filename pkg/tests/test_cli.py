"""
Tests for the command-line entry point.
"""

import io
import logging
import tempfile
import unittest
from concurrent.futures import ThreadPoolExecutor
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest.mock import patch

from pydantic import ValidationError

from app.config import Config
from app.main import load_run_config, main
from app.utils.errors import InvalidArgumentError

BS_CONFIG = """# Black-Scholes American call
model=BlackScholesExact
x0=100
T=0.25
n_steps=4
sigma=0.2
strike=100
grid_size=12
"""


class TestCommandLine(unittest.TestCase):
    """Test cases for the qtree command."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        root_logger = logging.getLogger()
        self.saved_handlers = root_logger.handlers[:]
        self.saved_level = root_logger.level
        self.patches = [
            patch.object(Config, "LOG_DIR", self.root / "logs"),
            patch.object(Config, "GRID_CACHE_DIR", self.root / "cache"),
        ]
        for p in self.patches:
            p.start()
        self.config_path = self.write_config(BS_CONFIG)

    def tearDown(self):
        self.release_logging()
        for p in self.patches:
            p.stop()
        self.temp_dir.cleanup()

    def release_logging(self):
        root_logger = logging.getLogger()
        for handler in root_logger.handlers[:]:
            if handler not in self.saved_handlers:
                handler.close()
                root_logger.removeHandler(handler)
        for handler in self.saved_handlers:
            if handler not in root_logger.handlers:
                root_logger.addHandler(handler)
        root_logger.setLevel(self.saved_level)

    def write_config(self, text: str, name: str = "run.cfg") -> str:
        path = self.root / name
        path.write_text(text)
        return str(path)

    def run_main(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = main(["--log-level", "WARNING", *argv])
        return code, out.getvalue(), err.getvalue()

    def output_values(self, text: str) -> dict:
        return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)

    def test_price(self):
        code, out, _ = self.run_main("price", "--config", self.config_path, "--method", "rq")
        self.assertEqual(code, 0)
        values = self.output_values(out)
        self.assertEqual(values["method"], "rq")
        self.assertEqual(values["tree_sizes"], "12,12,12,12")
        self.assertAlmostEqual(float(values["price"]), 3.988, delta=0.1)

    def test_saved_tree_gives_identical_price(self):
        tree_dir = str(self.root / "tree")
        code, out, _ = self.run_main("build-tree", "--config", self.config_path, "--method", "rq",
                                     "--out", tree_dir)
        self.assertEqual(code, 0)
        self.assertEqual(self.output_values(out)["tree"], tree_dir)
        _, direct, _ = self.run_main("price", "--config", self.config_path, "--method", "rq")
        _, reused, _ = self.run_main("price", "--config", self.config_path, "--method", "rq",
                                     "--tree", tree_dir)
        self.assertEqual(self.output_values(direct)["price"], self.output_values(reused)["price"])

    def test_saved_tree_must_match_method(self):
        tree_dir = str(self.root / "tree")
        self.run_main("build-tree", "--config", self.config_path, "--method", "rq", "--out", tree_dir)
        code, _, err = self.run_main("price", "--config", self.config_path, "--method", "grq",
                                     "--tree", tree_dir)
        self.assertEqual(code, 2)
        self.assertIn("error: invalid-argument: the given tree was built with rq", err)

    def test_converge_threads_key(self):
        _, serial, _ = self.run_main("converge", "--config", self.config_path, "--method", "rq",
                                     "--sizes", "4,8,12,16")
        with patch("app.core.harness.ThreadPoolExecutor", wraps=ThreadPoolExecutor) as pool:
            code, parallel, _ = self.run_main("--set", "threads=3", "converge", "--config", self.config_path,
                                              "--method", "rq", "--sizes", "4,8,12,16")
        self.assertEqual(code, 0)
        self.assertEqual(pool.call_args.kwargs["max_workers"], 3)
        self.assertEqual(serial, parallel)

    def test_log_file_handler_released(self):
        self.run_main("gen-normal-grid", "--q", "1", "--size", "3", "--out", str(self.root / "grids"))
        files = [h.baseFilename for h in logging.getLogger().handlers if hasattr(h, "baseFilename")]
        self.assertTrue(files)
        self.assertTrue(all(Path(f).parent == self.root / "logs" for f in files))
        self.release_logging()
        self.assertEqual(logging.getLogger().handlers, self.saved_handlers)

    def test_solution_output(self):
        solution = self.root / "out" / "solution.csv"
        code, _, _ = self.run_main("price", "--config", self.config_path, "--method", "rq",
                                   "--solution-out", str(solution))
        self.assertEqual(code, 0)
        with open(solution) as f:
            self.assertEqual(f.readline().strip(), "k,i,x_1,y,z_1")

    def test_override(self):
        code, out, _ = self.run_main("--set", "grid_size=5", "price", "--config", self.config_path,
                                     "--method", "rq")
        self.assertEqual(code, 0)
        self.assertEqual(self.output_values(out)["tree_sizes"], "5,5,5,5")

    def test_missing_model(self):
        path = self.write_config("x0=100\nT=1\nn_steps=2\n", "bad.cfg")
        code, _, err = self.run_main("price", "--config", path, "--method", "rq")
        self.assertEqual(code, 2)
        self.assertIn("error: config: missing required key model", err)

    def test_unknown_key(self):
        path = self.write_config(BS_CONFIG + "volatility=0.3\n", "bad.cfg")
        code, _, err = self.run_main("price", "--config", path, "--method", "rq")
        self.assertEqual(code, 2)
        self.assertIn("unknown key volatility", err)

    def test_missing_config_file(self):
        code, _, err = self.run_main("price", "--config", str(self.root / "absent.cfg"), "--method", "rq")
        self.assertEqual(code, 2)
        self.assertIn("error: io:", err)

    def test_incompatible_method(self):
        path = self.write_config("model=CorrelatedBS2D\nx0=40\nx0_2=36\nT=1\nn_steps=2\nsigma=0.2\n"
                                 "payoff=exchange\ngrid_size=4\n", "2d.cfg")
        code, _, err = self.run_main("price", "--config", path, "--method", "rq")
        self.assertEqual(code, 2)
        self.assertIn("error: invalid-argument:", err)

    def test_unknown_method_is_usage_error(self):
        code, _, _ = self.run_main("price", "--config", self.config_path, "--method", "xq")
        self.assertEqual(code, 2)

    def test_gen_normal_grid(self):
        code, out, _ = self.run_main("gen-normal-grid", "--q", "1", "--size", "10",
                                     "--out", str(self.root / "grids"))
        self.assertEqual(code, 0)
        path = Path(self.output_values(out)["grid"])
        self.assertEqual(path.name, "normal_q1_N10_seed0.csv")
        with open(path) as f:
            self.assertEqual(len(f.read().splitlines()), 11)

    def test_converge(self):
        code, out, _ = self.run_main("converge", "--config", self.config_path, "--method", "rq",
                                     "--sizes", "4,8,12,16")
        self.assertEqual(code, 0)
        lines = out.splitlines()
        self.assertEqual(lines[0], "N,price,abs_error")
        self.assertEqual([line.split(",")[0] for line in lines[1:5]], ["4", "8", "12", "16"])
        self.assertTrue(lines[5].startswith("reference="))
        self.assertTrue(lines[6].startswith("slope="))

    def test_converge_needs_increasing_sizes(self):
        code, _, _ = self.run_main("converge", "--config", self.config_path, "--method", "rq",
                                   "--sizes", "4,8,8,16")
        self.assertEqual(code, 2)


class TestLoadRunConfig(unittest.TestCase):
    """Test cases for config parsing."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = Path(self.temp_dir.name) / "run.cfg"
        self.path.write_text(BS_CONFIG)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_values_and_overrides(self):
        run = load_run_config(str(self.path), {"strike": "110"})
        self.assertEqual(run.model, "BlackScholesExact")
        self.assertEqual(run.strike, 110.0)
        self.assertEqual(run.n_steps, 4)
        self.assertTrue(run.obstacle)

    def test_empty_value(self):
        with self.assertRaises(InvalidArgumentError):
            load_run_config(str(self.path), {"sigma": ""})

    def test_bidask_requires_borrowing_rate(self):
        with self.assertRaises(ValidationError):
            load_run_config(str(self.path), {"driver": "bidask"})


if __name__ == "__main__":
    unittest.main()
