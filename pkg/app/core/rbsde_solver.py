"""
Reflected BSDE solver on quantization trees.

The backward dynamic programming principle computes, layer by layer,
y_k(x_i) = max(h(t_k, x_i), alpha_k(x_i) + dt f(t_k, x_i, alpha_k(x_i), beta_k(x_i)))
with alpha_k = P^k y_{k+1} and beta_k = (1/dt) sum_j pi_ij^k y_{k+1}(x_j).
"""
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd

from app.core.diffusion_models import EulerModel
from app.core.marginal_tree import build_greedy_tree, build_marginal_tree
from app.core.markov_tree import (QuantizationTree, Sizes, TreeMethod, build_greedy_recursive_tree,
                                  build_hybrid_tree, build_recursive_tree_1d)
from app.core.quadrature import normal_cdf
from app.utils.errors import InvalidArgumentError, NumericalError

logger = logging.getLogger(__name__)

Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Obstacle = Callable[[float, np.ndarray], np.ndarray]
Terminal = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RBSDEProblem:
    """A reflected BSDE on a quantization tree.

    Attributes:
        driver: f(t, x, y, z) for x of shape (N, d), y of shape (N,), z of shape (N, q); returns (N,)
        obstacle: h(t, x) returning (N,)
        terminal: g(x) returning (N,)
        obstacle_enabled: Reflect on the obstacle when True
    """
    driver: Driver
    obstacle: Obstacle
    terminal: Terminal
    obstacle_enabled: bool = True


@dataclass(frozen=True, eq=False)
class SolverSolution:
    """Value layers y_k and Z layers z_k on the tree.

    Attributes:
        y_values: n + 1 arrays aligned with the grids
        z_values: n arrays of shape (N_k, q)
        points: Grid points of every layer
        times: t_0, ..., t_n
    """
    y_values: List[np.ndarray]
    z_values: List[np.ndarray]
    points: List[np.ndarray]
    times: np.ndarray

    @property
    def price(self) -> float:
        return float(self.y_values[0][0])

    def to_frame(self) -> pd.DataFrame:
        """One row per node with columns ``k,i,x_1..x_d,y,z_1..z_q`` (z empty at k = n)."""
        d = self.points[0].shape[1]
        q = self.z_values[0].shape[1] if self.z_values else 1
        frames = []
        for k, (x, y) in enumerate(zip(self.points, self.y_values)):
            frame = pd.DataFrame(x, columns=[f"x_{c + 1}" for c in range(d)])
            frame.insert(0, "i", np.arange(len(x)))
            frame.insert(0, "k", k)
            frame["y"] = y
            z = self.z_values[k] if k < len(self.z_values) else np.full((len(x), q), np.nan)
            for c in range(q):
                frame[f"z_{c + 1}"] = z[:, c]
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def to_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", na_rep="")
        logger.info(f"Wrote solution layers to {path}")


def _layer_values(values: np.ndarray, size: int, what: str, k: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (size,):
        values = values.reshape(-1)
        if values.shape != (size,):
            raise InvalidArgumentError(f"{what} returned {values.size} values at step {k}, expected {size}")
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        logger.error(f"{what} produced a non-finite value at (k={k}, i={bad[0]})")
        raise NumericalError(f"{what} produced a non-finite value at (k={k}, i={int(bad[0])})")
    return values


def solve_bdpp(tree: QuantizationTree, problem: RBSDEProblem) -> SolverSolution:
    """
    Solve the quantized reflected BSDE backward on a tree.

    The terminal layer is g(x). The driver is evaluated once per layer on
    all nodes of that layer.

    Args:
        tree: Complete quantization tree
        problem: Driver, obstacle and terminal condition

    Returns:
        SolverSolution with price y_0(x0)
    """
    model = tree.model
    n, dt = tree.n, model.step
    times = model.times()
    points = [grid.points for grid in tree.grids]

    y = _layer_values(problem.terminal(points[n]), tree.grids[n].size, "terminal", n)
    if problem.obstacle_enabled:
        h_T = _layer_values(problem.obstacle(times[n], points[n]), tree.grids[n].size, "obstacle", n)
        if np.any(y < h_T - 1e-12):
            logger.warning("terminal condition lies below the obstacle at maturity")
    y_values: List[Optional[np.ndarray]] = [None] * (n + 1)
    z_values: List[Optional[np.ndarray]] = [None] * n
    y_values[n] = y

    for k in range(n - 1, -1, -1):
        size = tree.grids[k].size
        alpha = tree.transitions[k] @ y
        beta = np.einsum("ijq,j->iq", tree.noise_moments[k], y) / dt
        f = _layer_values(problem.driver(times[k], points[k], alpha, beta), size, "driver", k)
        candidate = alpha + dt * f
        if problem.obstacle_enabled:
            h = _layer_values(problem.obstacle(times[k], points[k]), size, "obstacle", k)
            y = np.maximum(h, candidate)
        else:
            y = candidate
        y_values[k] = _layer_values(y, size, "value", k)
        z_values[k] = beta

    logger.debug(f"Solved BDPP on {tree.method.value} tree: Y0={y_values[0][0]:.10g}")
    return SolverSolution(y_values, z_values, points, times)


# ---------------------------------------------------------------------------
# Drivers and payoffs
# ---------------------------------------------------------------------------

def zero_driver(t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.zeros_like(y)


class BidAskDriver:
    """Driver of a market with lending rate r and borrowing rate R.

    f(t, x, y, z) = -r y - theta z - (R - r) min(y - z x / sigma(t, x), 0)
    with theta = (b(t, x) - r x) / sigma(t, x). Here z x / sigma(t, x) is the
    amount held in the stock. Where sigma(t, x) <= 0 or x <= 0 both divided
    terms are set to 0.
    """

    def __init__(self, model: EulerModel, r: float, R: float):
        if model.dim != 1:
            raise InvalidArgumentError("the bid-ask driver requires a 1-D model")
        if R < r:
            logger.warning(f"borrowing rate R={R} is below lending rate r={r}")
        self.model = model
        self.r = float(r)
        self.R = float(R)

    def __call__(self, t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        spot = x[:, 0]
        vol = self.model.sigma(t, x)[:, 0, 0]
        drift = self.model.b(t, x)[:, 0]
        z1 = np.asarray(z, dtype=float).reshape(len(spot), -1)[:, 0]
        valid = (vol > 0.0) & (spot > 0.0)
        if not valid.all():
            logger.warning(f"bid-ask driver: clamped {int((~valid).sum())} nodes with non-positive "
                           f"diffusion or state at t={t:.6g}")
        safe_vol = np.where(valid, vol, 1.0)
        theta = np.where(valid, (drift - self.r * spot) / safe_vol, 0.0)
        stock = np.where(valid, z1 * spot / safe_vol, 0.0)
        return -self.r * y - theta * z1 - (self.R - self.r) * np.minimum(y - stock, 0.0)


@dataclass(frozen=True)
class CallPayoff:
    strike: float

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.maximum(np.asarray(x)[:, 0] - self.strike, 0.0)


@dataclass(frozen=True)
class PutPayoff:
    strike: float

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.maximum(self.strike - np.asarray(x)[:, 0], 0.0)


@dataclass(frozen=True)
class ExchangePayoff:
    """max(exp(-lambda t) x_1 - ratio x_2, 0)."""
    ratio: float = 1.0
    dividend: float = 0.0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.maximum(np.exp(-self.dividend * t) * x[:, 0] - self.ratio * x[:, 1], 0.0)


def american_problem(payoff: Obstacle, T: float, driver: Driver = zero_driver,
                     obstacle_enabled: bool = True) -> RBSDEProblem:
    """Problem with obstacle h = payoff and terminal condition g(x) = payoff(T, x)."""
    return RBSDEProblem(driver=driver, obstacle=payoff, terminal=lambda x: payoff(T, x),
                        obstacle_enabled=obstacle_enabled)


def black_scholes_price(x0: float, strike: float, T: float, sigma: float, r: float = 0.0,
                        kind: str = "call") -> float:
    """Black-Scholes price of a European call or put."""
    if sigma <= 0.0 or T <= 0.0:
        intrinsic = x0 - strike * np.exp(-r * T)
        return float(max(intrinsic, 0.0) if kind == "call" else max(-intrinsic, 0.0))
    vol = sigma * np.sqrt(T)
    d1 = (np.log(x0 / strike) + (r + 0.5 * sigma ** 2) * T) / vol
    d2 = d1 - vol
    discount = strike * np.exp(-r * T)
    if kind == "call":
        return float(x0 * normal_cdf(d1) - discount * normal_cdf(d2))
    if kind == "put":
        return float(discount * normal_cdf(-d2) - x0 * normal_cdf(-d1))
    raise InvalidArgumentError(f"kind must be 'call' or 'put', got {kind!r}")


# ---------------------------------------------------------------------------
# Extrapolation and end-to-end pricing
# ---------------------------------------------------------------------------

def romberg_extrapolate(y_n1: float, y_n2: float, n1: int, n2: int) -> float:
    """
    Richardson-Romberg combination of two prices computed with grid sizes n1 and n2.

    Returns:
        (n2^2 y_n2 - n1^2 y_n1) / (n2^2 - n1^2)
    """
    if n1 == n2:
        raise InvalidArgumentError(f"romberg_extrapolate needs two different sizes, got {n1} twice")
    a, b = float(n1) ** 2, float(n2) ** 2
    return (b * y_n2 - a * y_n1) / (b - a)


class PriceResult(NamedTuple):
    solution: SolverSolution
    tree: QuantizationTree
    build_seconds: float
    solve_seconds: float

    @property
    def price(self) -> float:
        return self.solution.price


def build_tree(model: EulerModel, method: Union[str, TreeMethod], sizes: Sizes,
               noise_grid_size: Optional[int] = None, transition_mode: Optional[str] = None,
               noise_moment_mode: str = "mc", seed: Optional[int] = None,
               quad_legendre: Optional[int] = None, quad_laguerre: Optional[int] = None,
               mc_paths: Optional[int] = None, mc_noise_paths: Optional[int] = None,
               lloyd_tol: Optional[float] = None,
               lloyd_max_iter: Optional[int] = None) -> QuantizationTree:
    """
    Dispatch to the builder of a tree method.

    RQ and GRQ need a 1-D model, HRQ a model of dimension at most 2 and a
    noise grid size, OQ and GQ accept every model.
    """
    method = TreeMethod(method)
    if method in (TreeMethod.RQ, TreeMethod.GRQ) and model.dim != 1:
        raise InvalidArgumentError(f"method {method.value} requires a 1-D model, got dim {model.dim}")
    if method is TreeMethod.RQ:
        return build_recursive_tree_1d(model, sizes, tol=lloyd_tol, max_iter=lloyd_max_iter)
    if method is TreeMethod.GRQ:
        return build_greedy_recursive_tree(model, sizes, tol=lloyd_tol)
    if method is TreeMethod.HRQ:
        if model.dim > 2:
            raise InvalidArgumentError(f"method hrq supports dimension <= 2, got {model.dim}")
        if noise_grid_size is None:
            raise InvalidArgumentError("method hrq requires noise_grid_size")
        return build_hybrid_tree(model, sizes, noise_grid_size, seed=seed, tol=lloyd_tol,
                                 max_iter=lloyd_max_iter)
    builder = build_marginal_tree if method is TreeMethod.OQ else build_greedy_tree
    return builder(model, sizes, transition_mode=transition_mode, noise_moment_mode=noise_moment_mode,
                   quad_legendre=quad_legendre, quad_laguerre=quad_laguerre, mc_paths=mc_paths,
                   mc_noise_paths=mc_noise_paths, seed=seed)


def price(model: EulerModel, problem: RBSDEProblem, method: Union[str, TreeMethod], sizes: Sizes,
          tree: Optional[QuantizationTree] = None, **build_options) -> PriceResult:
    """
    Build a tree with the chosen method (unless one is given) and solve the problem on it.

    Args:
        model: Diffusion model
        problem: Reflected BSDE
        method: rq, hrq, oq, gq or grq
        sizes: Grid size for every step, or a single size
        tree: Prebuilt tree to reuse
        **build_options: Options forwarded to ``build_tree``

    Returns:
        PriceResult with wall-clock build and solve times
    """
    method = TreeMethod(method)
    start = time.perf_counter()
    if tree is None:
        tree = build_tree(model, method, sizes, **build_options)
    elif tree.model.model_id is not model.model_id or tree.n != model.n:
        raise InvalidArgumentError("the given tree was built for a different model")
    elif tree.method is not method:
        raise InvalidArgumentError(f"the given tree was built with {tree.method.value}, not {method.value}")
    built = time.perf_counter()
    solution = solve_bdpp(tree, problem)
    solved = time.perf_counter()
    logger.info(f"Priced with {method.value}: Y0={solution.price:.10g} "
                f"(build {built - start:.2f}s, solve {solved - built:.3f}s)")
    return PriceResult(solution, tree, built - start, solved - built)