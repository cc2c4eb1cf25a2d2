"""
Benchmark harness.

Reproduces the bid-ask and exchange option tables, runs convergence
studies in the grid size and the European Black-Scholes sanity check.
Published reference values are embedded with their provenance tag.
"""
import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import config
from app.core.diffusion_models import EulerModel, black_scholes_euler, black_scholes_exact, cev_euler, \
    correlated_bs_2d
from app.core.markov_tree import TreeMethod
from app.core.rbsde_solver import (BidAskDriver, CallPayoff, ExchangePayoff, PutPayoff, RBSDEProblem,
                                   american_problem, black_scholes_price, build_tree, price,
                                   romberg_extrapolate, solve_bdpp)
from app.models.responses import ExperimentRow
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

CSV_HEADER = ["table", "method", "param", "computed", "reference", "abs_error", "build_s", "solve_s",
              "provenance"]
STRIKES = (100.0, 105.0, 110.0, 115.0, 120.0)

# Published values per method and strike (tables 1 and 2) or per (X0_2, rho) (table 3).
REFERENCE_VALUES: Dict[str, Dict[str, Dict]] = {
    "t1": {
        "RQ": dict(zip(STRIKES, (4.719, 2.538, 1.222, 0.526, 0.203))),
        "GRQ": dict(zip(STRIKES, (4.728, 2.548, 1.225, 0.526, 0.202))),
        "OQ": dict(zip(STRIKES, (4.747, 2.561, 1.234, 0.532, 0.206))),
        "GQ": dict(zip(STRIKES, (4.704, 2.529, 1.212, 0.518, 0.198))),
        "Romberg": dict(zip(STRIKES, (4.745, 2.55, 1.219, 0.518, 0.196))),
    },
    "t2": {
        "RQ": dict(zip(STRIKES, (8.517, 6.262, 4.479, 3.11, 2.094))),
        "GRQ": dict(zip(STRIKES, (8.524, 6.272, 4.483, 3.113, 2.1))),
        "OQ": dict(zip(STRIKES, (8.536, 6.288, 4.498, 3.125, 2.109))),
        "GQ": dict(zip(STRIKES, (8.593, 6.321, 4.522, 3.128, 2.103))),
        "Romberg": dict(zip(STRIKES, (8.591, 6.311, 4.502, 3.116, 2.091))),
    },
    "t3": {
        "OQ": {(36.0, -0.8): 7.062, (36.0, 0.0): 5.832, (36.0, 0.8): 4.076,
               (44.0, -0.8): 3.834, (44.0, 0.0): 2.453, (44.0, 0.8): 0.426},
        "HRQ": {(36.0, -0.8): 6.979, (36.0, 0.0): 5.706, (36.0, 0.8): 4.008,
                (44.0, -0.8): 3.741, (44.0, 0.0): 2.329, (44.0, 0.8): 0.282},
        "GPQ": {(36.0, -0.8): 6.926, (36.0, 0.0): 5.763, (36.0, 0.8): 4.0,
                (44.0, -0.8): 3.609, (44.0, 0.0): 2.042, (44.0, 0.8): 0.401},
    },
}
# Finite-difference benchmark of table 3, compared against every method.
EXCHANGE_BENCHMARK = {(36.0, -0.8): 6.975, (36.0, 0.0): 5.646, (36.0, 0.8): 4.0,
                      (44.0, -0.8): 3.769, (44.0, 0.0): 2.336, (44.0, 0.8): 0.359}


@dataclass(frozen=True)
class BidAskTableConfig:
    """Configuration of the bid-ask call tables."""
    table_id: str
    label: str
    model_factory: Callable[[int], EulerModel]
    grid_size: int
    romberg_steps: int = 5
    romberg_sizes: Tuple[int, int] = (1000, 500)
    marginal_mode: str = "exact"
    r: float = 0.01
    R: float = 0.06


@dataclass(frozen=True)
class ExchangeTableConfig:
    """Configuration of the two-asset exchange table."""
    table_id: str = "t3"
    label: str = "Table 3"
    x0_1: float = 40.0
    second_spots: Tuple[float, ...] = (36.0, 44.0)
    correlations: Tuple[float, ...] = (-0.8, 0.0, 0.8)
    T: float = 1.0
    n: int = 10
    r: float = 0.0
    sigma: float = 0.2
    dividend: float = 0.05
    ratio: float = 1.0
    grid_size: int = 100
    noise_grid_size: int = 1000


TABLE_CONFIGS = {
    "t1": BidAskTableConfig(
        table_id="t1", label="Table 1",
        model_factory=lambda n: black_scholes_euler(100.0, 0.25, n, mu=0.05, sigma=0.2, r=0.01),
        grid_size=100),
    "t2": BidAskTableConfig(
        table_id="t2", label="Table 2",
        model_factory=lambda n: cev_euler(100.0, 0.25, n, mu=0.05, vartheta=4.0, delta_exponent=0.5),
        grid_size=150, marginal_mode="mc"),
    "t3": ExchangeTableConfig(),
}
TABLE_STEPS = {"t1": 20, "t2": 15}


@dataclass
class ExperimentResult:
    """Rows of a reproduced table, sorted by (method, parameter)."""
    table_id: str
    rows: List[ExperimentRow] = field(default_factory=list)

    def mean_abs_error(self, method: Optional[str] = None) -> float:
        errors = [row.abs_error for row in self.rows if method is None or row.method == method]
        return float(np.mean(errors)) if errors else float("nan")

    def to_csv(self, path: Union[str, Path], with_timings: bool = True) -> Path:
        """Write the rows with header ``table,method,param,computed,reference,abs_error,build_s,solve_s,provenance``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                if not with_timings:
                    row = row.model_copy(update={"build_s": None, "solve_s": None})
                writer.writerow(row.to_record())
        logger.info(f"Wrote {len(self.rows)} rows of {self.table_id} to {path}")
        return path


class _Cell(NamedTuple):
    method: str
    sort_key: Tuple
    param: str
    computed: float
    reference: float
    build_s: float
    solve_s: float


def _provenance(label: str) -> str:
    return f"[PUBLISHED: {label}]"


def _bidask_problem(model: EulerModel, strike: float, cfg: BidAskTableConfig) -> RBSDEProblem:
    return american_problem(CallPayoff(strike), model.T, driver=BidAskDriver(model, cfg.r, cfg.R))


def _bidask_method_job(cfg: BidAskTableConfig, label: str, seed: int) -> List[_Cell]:
    """Build one tree for a method and price every strike on it."""
    refs = REFERENCE_VALUES[cfg.table_id][label]
    n = TABLE_STEPS[cfg.table_id]
    cells = []
    if label == "Romberg":
        model = cfg.model_factory(cfg.romberg_steps)
        noise_mode = "quadrature" if cfg.marginal_mode != "mc" else "mc"
        options = {"transition_mode": cfg.marginal_mode, "noise_moment_mode": noise_mode, "seed": seed}
        if cfg.marginal_mode == "mc":
            options["mc_paths"] = config.MC_NOISE_PATHS
        n1, n2 = cfg.romberg_sizes
        start = time.perf_counter()
        first = build_tree(model, TreeMethod.OQ, n1, **options)
        second = build_tree(model, TreeMethod.OQ, n2, **options)
        build_s = time.perf_counter() - start
        for strike in STRIKES:
            problem = _bidask_problem(model, strike, cfg)
            y1 = price(model, problem, TreeMethod.OQ, n1, tree=first)
            y2 = price(model, problem, TreeMethod.OQ, n2, tree=second)
            value = romberg_extrapolate(y1.price, y2.price, n1, n2)
            cells.append(_Cell(label, (strike,), f"K={strike:g}", value, refs[strike], build_s,
                               y1.solve_seconds + y2.solve_seconds))
        return cells

    model = cfg.model_factory(n)
    method = TreeMethod(label.lower())
    options = {"seed": seed}
    if method in (TreeMethod.OQ, TreeMethod.GQ):
        options["transition_mode"] = cfg.marginal_mode
    tree = None
    build_s = 0.0
    for strike in STRIKES:
        result = price(model, _bidask_problem(model, strike, cfg), method, cfg.grid_size, tree=tree, **options)
        if tree is None:
            tree, build_s = result.tree, result.build_seconds
        cells.append(_Cell(label, (strike,), f"K={strike:g}", result.price, refs[strike], build_s,
                           result.solve_seconds))
    return cells


def _exchange_job(cfg: ExchangeTableConfig, label: str, spot: float, rho: float, seed: int) -> _Cell:
    model = correlated_bs_2d([cfg.x0_1, spot], cfg.T, cfg.n, cfg.r, cfg.sigma, rho, cfg.dividend)
    problem = american_problem(ExchangePayoff(cfg.ratio, cfg.dividend), cfg.T)
    method = {"OQ": TreeMethod.OQ, "HRQ": TreeMethod.HRQ, "GPQ": TreeMethod.GQ}[label]
    options = {"seed": seed}
    if method is TreeMethod.HRQ:
        options["noise_grid_size"] = cfg.noise_grid_size
    result = price(model, problem, method, cfg.grid_size, **options)
    return _Cell(label, (spot, rho), f"X0_2={spot:g};rho={rho:g}", result.price,
                 EXCHANGE_BENCHMARK[(spot, rho)], result.build_seconds, result.solve_seconds)


def reproduce_table(table_id: str, threads: Optional[int] = None, seed: Optional[int] = None,
                    methods: Optional[Sequence[str]] = None) -> ExperimentResult:
    """
    Run every (method, parameter) cell of a table.

    Independent cells run on a thread pool; the rows are sorted by
    (method, parameter) so the output does not depend on scheduling.

    Args:
        table_id: t1 (bid-ask call, Black-Scholes), t2 (bid-ask call, CEV) or t3 (exchange option)
        threads: Worker threads (Config.THREADS)
        seed: Seed of every stochastic component (Config.DEFAULT_SEED)
        methods: Optional subset of method labels

    Returns:
        ExperimentResult
    """
    table_id = table_id.lower()
    if table_id not in TABLE_CONFIGS:
        raise InvalidArgumentError(f"unknown table id {table_id!r}; expected one of t1, t2, t3")
    threads = max(int(config.THREADS if threads is None else threads), 1)
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    cfg = TABLE_CONFIGS[table_id]
    labels = list(REFERENCE_VALUES[table_id])
    if methods is not None:
        unknown = sorted(set(methods) - set(labels))
        if unknown:
            raise InvalidArgumentError(f"unknown method(s) for {table_id}: {', '.join(unknown)}")
        labels = [label for label in labels if label in methods]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        if table_id == "t3":
            futures = [pool.submit(_exchange_job, cfg, label, spot, rho, seed)
                       for label in labels for spot in cfg.second_spots for rho in cfg.correlations]
            cells = [future.result() for future in futures]
        else:
            futures = [pool.submit(_bidask_method_job, cfg, label, seed) for label in labels]
            cells = [cell for future in futures for cell in future.result()]

    cells.sort(key=lambda c: (c.method, c.sort_key))
    rows = [ExperimentRow(table=table_id, method=c.method, param=c.param, computed=c.computed,
                          reference=c.reference, abs_error=abs(c.computed - c.reference),
                          build_s=c.build_s, solve_s=c.solve_s, provenance=_provenance(cfg.label))
            for c in cells]
    result = ExperimentResult(table_id, rows)
    logger.info(f"Reproduced {table_id}: mean absolute error {result.mean_abs_error():.4f}")
    return result


# ---------------------------------------------------------------------------
# Convergence and sanity checks
# ---------------------------------------------------------------------------

class ConvergenceResult(NamedTuple):
    """Prices per grid size and the fitted log-log slope (None when undefined)."""
    sizes: List[int]
    prices: List[float]
    reference: float
    errors: List[float]
    slope: Optional[float]


def fit_convergence_slope(sizes: Sequence[int], prices: Sequence[float],
                          reference: float, floor: float = 1e-12) -> Tuple[List[float], Optional[float]]:
    """
    Least-squares slope of log |price - reference| against log N.

    Points with an error below ``floor`` are dropped; fewer than two
    remaining points leave the slope undefined (None).
    """
    errors = [abs(p - reference) for p in prices]
    keep = [(np.log(N), np.log(e)) for N, e in zip(sizes, errors) if e > floor]
    if len(keep) < 2:
        return errors, None
    x, y = np.array(keep).T
    slope, _ = np.polyfit(x, y, 1)
    return errors, float(slope)


def _price_for_size(model: EulerModel, problem: RBSDEProblem, method: Union[str, TreeMethod], N: int,
                    build_options: Dict) -> float:
    tree = build_tree(model, method, N, **build_options)
    value = solve_bdpp(tree, problem).price
    logger.info(f"Convergence study: N={N} Y0={value:.10g}")
    return value


def convergence_study(model: EulerModel, problem: RBSDEProblem, method: Union[str, TreeMethod],
                      sizes: Sequence[int], threads: Optional[int] = None,
                      **build_options) -> ConvergenceResult:
    """
    Price with increasing grid sizes and fit the error decay rate.

    The reference is the Richardson-Romberg combination of the two largest sizes.
    Sizes are independent cells run on a thread pool; prices are collected in
    size order.

    Args:
        model: Diffusion model
        problem: Reflected BSDE
        method: Tree method
        sizes: Strictly increasing grid sizes, at least four
        threads: Worker threads (Config.THREADS)
        **build_options: Options forwarded to ``build_tree``

    Returns:
        ConvergenceResult
    """
    sizes = [int(N) for N in sizes]
    if len(sizes) < 4 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise InvalidArgumentError(f"sizes must be strictly increasing with at least 4 entries, got {sizes}")
    threads = max(int(config.THREADS if threads is None else threads), 1)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_price_for_size, model, problem, method, N, build_options) for N in sizes]
        prices = [future.result() for future in futures]
    reference = romberg_extrapolate(prices[-2], prices[-1], sizes[-2], sizes[-1])
    errors, slope = fit_convergence_slope(sizes, prices, reference)
    if slope is None:
        logger.warning("Convergence study: errors vanish, slope undefined")
    return ConvergenceResult(sizes, prices, reference, errors, slope)


class SanityResult(NamedTuple):
    tree_price: float
    reference: float
    abs_error: float
    relative_error: float


def european_sanity(strike: float, n: int, N: int, x0: float = 100.0, T: float = 0.25,
                    sigma: float = 0.2, kind: str = "call") -> SanityResult:
    """
    Price a European option on a recursive Black-Scholes tree with r = 0
    and compare it with the closed form.

    The relative error falls back to the absolute error when the reference is 0.
    """
    model = black_scholes_exact(x0, T, n, sigma=sigma, r=0.0)
    payoff = CallPayoff(strike) if kind == "call" else PutPayoff(strike)
    problem = american_problem(payoff, T, obstacle_enabled=False)
    tree_price = price(model, problem, TreeMethod.RQ, N).price
    reference = black_scholes_price(x0, strike, T, sigma, 0.0, kind=kind)
    abs_error = abs(tree_price - reference)
    relative = abs_error / reference if reference > 0.0 else abs_error
    logger.info(f"European {kind} sanity: tree {tree_price:.8g} vs closed form {reference:.8g}")
    return SanityResult(tree_price, reference, abs_error, relative)
