"""
Command-line entry point.

Subcommands:
    gen-normal-grid  optimal N(0, I_q) grid written as CSV
    build-tree       build a quantization tree and save it to a directory
    price            solve the reflected BSDE on a built or saved tree
    converge         convergence study in the grid size
    table            reproduce a published benchmark table
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import dotenv_values
from pydantic import ValidationError

from app import __version__
from app.config import config
from app.core import harness
from app.core.markov_tree import TreeMethod
from app.core.quantizer import stationary_normal_grid
from app.core.rbsde_solver import build_tree, price
from app.models.requests import RunConfig
from app.models.responses import PriceReport, format_float
from app.utils.cache_utils import get_grid_key, write_grid_csv
from app.utils.errors import InvalidArgumentError, NumericalError
from app.utils.logging_utils import setup_logging
from app.utils.tree_io import load_tree, save_tree

logger = logging.getLogger(__name__)

METHODS = [m.value for m in TreeMethod]


def _parse_overrides(pairs: List[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise InvalidArgumentError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(path: Optional[str], overrides: Dict[str, str]) -> RunConfig:
    """
    Read a flat key=value config file and apply ``--set`` overrides.

    Args:
        path: Config file, ``#`` comments allowed
        overrides: Keys replacing those of the file

    Returns:
        Validated RunConfig
    """
    values = {}
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(dotenv_values(path, interpolate=False))
    values.update(overrides)
    missing = [key for key, value in values.items() if value is None or value == ""]
    if missing:
        raise InvalidArgumentError(f"empty value for key(s): {', '.join(missing)}")
    return RunConfig.model_validate(values)


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"])
        if item["type"] == "extra_forbidden":
            parts.append(f"unknown key {location}")
        elif item["type"] == "missing":
            parts.append(f"missing required key {location}")
        else:
            message = item["msg"].removeprefix("Value error, ")
            parts.append(f"{location}: {message}" if location else message)
    return "; ".join(parts)


def cmd_gen_normal_grid(args: argparse.Namespace) -> int:
    grid = stationary_normal_grid(args.q, args.size, seed=args.seed)
    path = Path(args.out) / f"{get_grid_key('normal', args.q, args.size, args.seed)}.csv"
    write_grid_csv(path, grid.points, grid.cell_weights)
    print(f"grid={path}")
    return 0


def cmd_build_tree(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args.overrides)
    model = run.build_model()
    tree = build_tree(model, args.method, run.grid_size, **run.build_options())
    save_tree(tree, args.out)
    diagnostics = tree.diagnostics()
    print(f"tree={args.out}")
    print(f"tree_sizes={','.join(str(s) for s in tree.sizes)}")
    print(f"row_sum_error={format_float(diagnostics.row_sum_error)}")
    return 0


def cmd_price(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args.overrides)
    model = run.build_model()
    problem = run.build_problem(model)
    tree = load_tree(args.tree, model) if args.tree else None
    result = price(model, problem, args.method, run.grid_size, tree=tree, **run.build_options())
    report = PriceReport(method=args.method, price=result.price, build_seconds=result.build_seconds,
                         solve_seconds=result.solve_seconds, tree_sizes=result.tree.sizes)
    print("\n".join(report.to_lines()))
    if args.solution_out:
        result.solution.to_csv(args.solution_out)
    return 0


def cmd_converge(args: argparse.Namespace) -> int:
    run = load_run_config(args.config, args.overrides)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise InvalidArgumentError(f"--sizes expects comma-separated integers, got {args.sizes!r}")
    model = run.build_model()
    study = harness.convergence_study(model, run.build_problem(model), args.method, sizes,
                                      threads=run.threads, **run.build_options())
    print("N,price,abs_error")
    for N, value, error in zip(study.sizes, study.prices, study.errors):
        print(f"{N},{format_float(value)},{format_float(error)}")
    print(f"reference={format_float(study.reference)}")
    print(f"slope={'' if study.slope is None else format_float(study.slope)}")
    return 0


def cmd_table(args: argparse.Namespace) -> int:
    result = harness.reproduce_table(args.id, threads=args.threads, seed=args.seed)
    result.to_csv(args.out, with_timings=not args.no_timings)
    print(f"table={args.out}")
    print(f"mean_abs_error={format_float(result.mean_abs_error())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtree", description="Quantization trees and reflected BSDE pricing")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-normal-grid", help="Optimal quantizer of N(0, I_q)")
    p.add_argument("--q", type=int, choices=[1, 2], required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_gen_normal_grid)

    p = sub.add_parser("build-tree", help="Build and save a quantization tree")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_build_tree)

    p = sub.add_parser("price", help="Price on a quantization tree")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--tree", help="Directory of a saved tree")
    p.add_argument("--solution-out", help="Write the per-node solution as CSV")
    p.set_defaults(handler=cmd_price)

    p = sub.add_parser("converge", help="Convergence study in the grid size")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--sizes", required=True, help="Comma-separated increasing grid sizes")
    p.set_defaults(handler=cmd_converge)

    p = sub.add_parser("table", help="Reproduce a benchmark table")
    p.add_argument("--id", choices=sorted(harness.TABLE_CONFIGS), required=True)
    p.add_argument("--out", required=True, help="Output CSV file")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-timings", action="store_true", help="Leave timing columns empty")
    p.set_defaults(handler=cmd_table)
    return parser


def _fail(category: str, detail: str, code: int) -> int:
    print(f"error: {category}: {detail}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line.

    Returns:
        0 on success, 2 on invalid arguments or config, 1 on numeric failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(log_level=args.log_level)
    config.create_directories()

    try:
        args.overrides = _parse_overrides(args.overrides)
        return args.handler(args)
    except ValidationError as e:
        return _fail("config", _format_validation_error(e), 2)
    except InvalidArgumentError as e:
        return _fail(e.category, str(e), 2)
    except NumericalError as e:
        return _fail(e.category, str(e), 1)
    except OSError as e:
        return _fail("io", str(e), 2)
    except ValueError as e:
        logger.exception("Invalid value")
        return _fail("invalid-argument", str(e), 2)


if __name__ == "__main__":
    sys.exit(main())
