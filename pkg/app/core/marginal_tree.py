"""
Quantization trees built from marginal quantizers.

Grids are images of standard normal quantizers (optimal or greedy) under
the model's marginal map. Transitions are computed by Gaussian quadrature
or the one-step Gaussian approximation for the Black-Scholes model, and by
Monte Carlo simulation with nearest-neighbor projection otherwise.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.config import config
from app.core.diffusion_models import EulerModel, ModelId, euler_step, marginal_points
from app.core.markov_tree import (QuantizationTree, Sizes, TreeMethod, initial_grid,
                                  propagate_weights, resolve_sizes, steps_progress)
from app.core.quadrature import (SQRT_2PI, TailSide, integrate_closed, integrate_gaussian_tail,
                                 laguerre_rule, legendre_rule, normal_interval_mass, normal_pdf)
from app.core.quantizer import (GaussianMixture, Grid, greedy_product_grid, greedy_sequence_1d,
                                stationary_normal_grid)
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


class TransitionMode(str, Enum):
    EXACT = "exact"
    GAPPROX = "gapprox"
    MC = "mc"


class NoiseMomentMode(str, Enum):
    MC = "mc"
    QUADRATURE = "quadrature"


@dataclass
class McCompanions:
    """Monte Carlo estimates of the tree companions.

    Attributes:
        transitions: Empirical conditional frequencies per step
        noise_moments: Centered empirical conditional means of sqrt(dt) eps
        weights: Empirical marginal weights of every grid
        unvisited: (k, i) rows never reached by a path
    """
    transitions: List[np.ndarray]
    noise_moments: List[np.ndarray]
    weights: List[np.ndarray]
    unvisited: List[Tuple[int, int]] = field(default_factory=list)


def mc_companion_estimator(model: EulerModel, grids: List[Grid], n_paths: Optional[int] = None,
                           seed: Optional[int] = None,
                           chunk_size: Optional[int] = None) -> McCompanions:
    """
    Estimate transitions and noise moments by simulating Euler paths.

    Each chunk of paths draws its noise from a Philox generator keyed by
    (seed, chunk index), so the estimate only depends on the seed. States are
    projected on the grids by nearest neighbor. Noise moments are corrected
    by the control variate pi_ij - p_ij sum_l pi_il, which makes each row sum
    vanish. A source cell no path visits gets the indicator of the cell
    holding its noiseless image.

    Args:
        model: Diffusion model
        grids: n + 1 grids, grid 0 being {x0}
        n_paths: Number of paths (Config.MC_PATHS), at least 1000
        seed: Seed (Config.DEFAULT_SEED)
        chunk_size: Paths simulated at once (Config.MC_CHUNK_SIZE)

    Returns:
        McCompanions
    """
    n_paths = config.MC_PATHS if n_paths is None else int(n_paths)
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    chunk_size = config.MC_CHUNK_SIZE if chunk_size is None else int(chunk_size)
    if n_paths < 1000:
        raise InvalidArgumentError(f"n_paths must be at least 1000, got {n_paths}")
    if len(grids) != model.n + 1:
        raise InvalidArgumentError(f"expected {model.n + 1} grids, got {len(grids)}")
    q, n = model.noise_dim, model.n
    sizes = [grid.size for grid in grids]
    counts = [np.zeros(sizes[k] * sizes[k + 1]) for k in range(n)]
    sums = [np.zeros((sizes[k] * sizes[k + 1], q)) for k in range(n)]

    for chunk, start in enumerate(range(0, n_paths, chunk_size)):
        m = min(chunk_size, n_paths - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))
        x = np.repeat(model.x0[None, :], m, axis=0)
        idx = np.zeros(m, dtype=np.int64)
        for k in range(n):
            eps = rng.standard_normal((m, q))
            x = euler_step(model, k, x, eps)
            j = grids[k + 1].assign(x)
            flat = idx * sizes[k + 1] + j
            cells = sizes[k] * sizes[k + 1]
            counts[k] += np.bincount(flat, minlength=cells)
            for r in range(q):
                sums[k][:, r] += np.bincount(flat, weights=eps[:, r], minlength=cells)
            idx = j

    sqrt_dt = np.sqrt(model.step)
    transitions, noise_moments, weights, unvisited = [], [], [np.array([1.0])], []
    for k in range(n):
        C = counts[k].reshape(sizes[k], sizes[k + 1])
        S = sums[k].reshape(sizes[k], sizes[k + 1], q)
        visits = C.sum(axis=1)
        seen = visits > 0
        P = np.zeros_like(C)
        Pi = np.zeros_like(S)
        P[seen] = C[seen] / visits[seen, None]
        raw = sqrt_dt * S[seen] / visits[seen, None, None]
        Pi[seen] = raw - P[seen][:, :, None] * raw.sum(axis=1, keepdims=True)
        for i in np.flatnonzero(~seen):
            image = euler_step(model, k, grids[k].points[i], np.zeros(q))
            P[i, grids[k + 1].assign(image[None, :])[0]] = 1.0
            unvisited.append((k, int(i)))
        transitions.append(P)
        noise_moments.append(Pi)
        weights.append(C.sum(axis=0) / n_paths)
    if unvisited:
        logger.warning(f"Monte Carlo companions: {len(unvisited)} unvisited rows set to indicator transitions")
    logger.info(f"Estimated Monte Carlo companions with {n_paths} paths")
    return McCompanions(transitions, noise_moments, weights, unvisited)


# ---------------------------------------------------------------------------
# Black-Scholes quadrature transitions
# ---------------------------------------------------------------------------

class _BlackScholesKernel:
    """One-step cell probabilities of the Black-Scholes model seen from a time-t_k state."""

    def __init__(self, model: EulerModel, k: int, next_points: np.ndarray):
        self.model = model
        self.t = model.time(k)
        self.h = model.step
        self.a = model.drift_rate
        self.s = model.volatility
        self.bounds = np.concatenate(([-np.inf], 0.5 * (next_points[:-1] + next_points[1:]), [np.inf]))

    def state(self, z: np.ndarray) -> np.ndarray:
        """Time-t_k state of standard normal coordinate z."""
        x0 = self.model.x0[0]
        return x0 * np.exp((self.a - 0.5 * self.s ** 2) * self.t + self.s * np.sqrt(self.t) * z)

    def standardized_bounds(self, x: np.ndarray) -> np.ndarray:
        """Bounds of every next cell in units of the one-step innovation, shape (M, N+1)."""
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        b = self.bounds[None, :]
        vol = self.s * np.sqrt(self.h)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.model.model_id is ModelId.BLACK_SCHOLES_EXACT:
                logs = np.where(b > 0.0, np.log(np.where(b > 0.0, b, 1.0) / x), -np.inf)
                z = (logs - (self.a - 0.5 * self.s ** 2) * self.h) / vol
            else:
                z = (b / x - 1.0 - self.a * self.h) / vol
        return np.where(np.isinf(b), b, z)

    def masses(self, x: np.ndarray) -> np.ndarray:
        z = self.standardized_bounds(x)
        return normal_interval_mass(z[:, :-1], z[:, 1:])

    def noise(self, x: np.ndarray) -> np.ndarray:
        phi = normal_pdf(self.standardized_bounds(x))
        return np.sqrt(self.h) * (phi[:, :-1] - phi[:, 1:])

    def z_cells(self, points: np.ndarray) -> np.ndarray:
        """Voronoi bounds of the time-t_k grid in standard normal coordinates."""
        x0 = self.model.x0[0]
        mids = 0.5 * (points[:-1] + points[1:])
        z = (np.log(mids / x0) - (self.a - 0.5 * self.s ** 2) * self.t) / (self.s * np.sqrt(self.t))
        return np.concatenate(([-np.inf], z, [np.inf]))


def _integrate_cell(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                    legendre, laguerre) -> np.ndarray:
    """Integral of f(z) phi(z) over (lo, hi] with Legendre inside and Laguerre on unbounded ends."""
    if np.isinf(lo) and np.isinf(hi):
        return (integrate_gaussian_tail(f, 0.0, TailSide.LOWER, laguerre, legendre)
                + integrate_gaussian_tail(f, 0.0, TailSide.UPPER, laguerre, legendre)) / SQRT_2PI
    if np.isinf(lo):
        return integrate_gaussian_tail(f, hi, TailSide.LOWER, laguerre, legendre) / SQRT_2PI
    if np.isinf(hi):
        return integrate_gaussian_tail(f, lo, TailSide.UPPER, laguerre, legendre) / SQRT_2PI
    return integrate_closed(lambda z: f(z) * normal_pdf(z)[:, None], lo, hi, legendre)


def quadrature_transitions(model: EulerModel, k: int, grid: Grid, next_grid: Grid,
                           with_noise: bool, legendre_order: int,
                           laguerre_order: int) -> Tuple[np.ndarray, Optional[np.ndarray], float]:
    """
    Black-Scholes transitions integrated over the standard normal cells.

    The joint mass pbar_ij = int_{cell_i} g_j(z) phi(z) dz of being in cell i
    at t_k and cell j at t_{k+1} is integrated with Gauss-Legendre on bounded
    cells and Gauss-Laguerre on the two unbounded ones; rows are then divided
    by their sums. Step 0 uses g_j(x0) directly.

    Returns:
        (transitions, noise moments or None, largest gap between a row sum
        pbar_i and the normal mass of cell i)
    """
    kernel = _BlackScholesKernel(model, k, next_grid.points[:, 0])
    if k == 0:
        P = kernel.masses(model.x0)
        Pi = kernel.noise(model.x0)[:, :, None] if with_noise else None
        return P / P.sum(axis=1, keepdims=True), Pi, 0.0

    legendre = legendre_rule(legendre_order)
    laguerre = laguerre_rule(laguerre_order)
    cells = kernel.z_cells(grid.points[:, 0])
    joint = np.empty((grid.size, next_grid.size))
    joint_noise = np.empty_like(joint) if with_noise else None
    for i in range(grid.size):
        lo, hi = cells[i], cells[i + 1]
        joint[i] = _integrate_cell(lambda z: kernel.masses(kernel.state(z)), lo, hi, legendre, laguerre)
        if with_noise:
            joint_noise[i] = _integrate_cell(lambda z: kernel.noise(kernel.state(z)), lo, hi,
                                             legendre, laguerre)
    row_mass = joint.sum(axis=1)
    gap = float(np.max(np.abs(row_mass - normal_interval_mass(cells[:-1], cells[1:]))))
    P = np.maximum(joint, 0.0) / row_mass[:, None]
    Pi = (joint_noise / row_mass[:, None])[:, :, None] if with_noise else None
    return P, Pi, gap


def approximate_transitions(model: EulerModel, k: int, grid: Grid, next_grid: Grid,
                            with_noise: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """One-step Gaussian approximation p_ij = g_j(x_i) for the Black-Scholes model."""
    kernel = _BlackScholesKernel(model, k, next_grid.points[:, 0])
    x = grid.points[:, 0]
    P = kernel.masses(x)
    Pi = kernel.noise(x)[:, :, None] if with_noise else None
    return P / P.sum(axis=1, keepdims=True), Pi


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _marginal_grids(model: EulerModel, normal_grids: List[Grid]) -> List[Grid]:
    grids = [initial_grid(model)]
    for k, z_grid in enumerate(normal_grids, start=1):
        points = marginal_points(model, model.time(k), z_grid.points)
        weights = z_grid.cell_weights
        if model.dim == 1:
            order = np.argsort(points[:, 0], kind="stable")
            points, weights = points[order], weights[order]
        grids.append(Grid(points, weights))
    return grids


def _build_from_normal_grids(model: EulerModel, normal_grids: List[Grid], method: TreeMethod,
                             transition_mode: TransitionMode, noise_moment_mode: NoiseMomentMode,
                             quad_legendre: Optional[int], quad_laguerre: Optional[int],
                             mc_paths: Optional[int], mc_noise_paths: Optional[int],
                             seed: Optional[int]) -> QuantizationTree:
    transition_mode = TransitionMode(transition_mode)
    noise_moment_mode = NoiseMomentMode(noise_moment_mode)
    analytic = transition_mode is not TransitionMode.MC
    if (analytic or noise_moment_mode is NoiseMomentMode.QUADRATURE) and not (
            model.is_black_scholes and model.dim == 1):
        raise InvalidArgumentError(
            f"transition_mode={transition_mode.value} and noise_moment_mode={noise_moment_mode.value} "
            f"require a 1-D Black-Scholes model, got {model.model_id.value}")
    if noise_moment_mode is NoiseMomentMode.QUADRATURE and not analytic:
        raise InvalidArgumentError("noise_moment_mode=quadrature requires exact or gapprox transitions")
    quad_legendre = config.QUAD_LEGENDRE if quad_legendre is None else int(quad_legendre)
    quad_laguerre = config.QUAD_LAGUERRE if quad_laguerre is None else int(quad_laguerre)
    mc_paths = config.MC_PATHS if mc_paths is None else int(mc_paths)
    mc_noise_paths = config.MC_NOISE_PATHS if mc_noise_paths is None else int(mc_noise_paths)
    seed = config.DEFAULT_SEED if seed is None else int(seed)

    grids = _marginal_grids(model, normal_grids)
    metadata = {
        "sizes": [g.size for g in grids[1:]],
        "seed": seed,
        "transition_mode": transition_mode.value,
        "noise_moment_mode": noise_moment_mode.value,
        "quad_legendre": quad_legendre,
        "quad_laguerre": quad_laguerre,
        "mc_paths": mc_paths,
        "mc_noise_paths": mc_noise_paths,
    }
    quadrature_noise = noise_moment_mode is NoiseMomentMode.QUADRATURE

    transitions, noise_moments = [], []
    if analytic:
        gaps = [0.0]
        for k in steps_progress(model, f"{method.value} transitions"):
            if transition_mode is TransitionMode.EXACT:
                P, Pi, gap = quadrature_transitions(model, k, grids[k], grids[k + 1], quadrature_noise,
                                                    quad_legendre, quad_laguerre)
                gaps.append(gap)
            else:
                P, Pi = approximate_transitions(model, k, grids[k], grids[k + 1], quadrature_noise)
            transitions.append(P)
            noise_moments.append(Pi)
            grids[k + 1] = grids[k + 1].with_weights(propagate_weights(grids[k].cell_weights, P))
        metadata["row_mass_error"] = max(gaps)
        if not quadrature_noise:
            noise_moments = mc_companion_estimator(model, grids, mc_noise_paths, seed).noise_moments
    else:
        estimate = mc_companion_estimator(model, grids, mc_paths, seed)
        transitions = estimate.transitions
        for k in range(model.n):
            grids[k + 1] = grids[k + 1].with_weights(propagate_weights(grids[k].cell_weights,
                                                                       transitions[k]))
        noise_moments = mc_companion_estimator(model, grids, mc_noise_paths, seed).noise_moments
        metadata["unvisited_rows"] = [list(row) for row in estimate.unvisited]

    logger.info(f"Built {method.value} tree ({transition_mode.value} transitions): n={model.n}")
    return QuantizationTree(model, grids, transitions, noise_moments, method, metadata)


def _default_mode(model: EulerModel, transition_mode: Optional[str]) -> TransitionMode:
    if transition_mode is not None:
        return TransitionMode(transition_mode)
    if model.is_black_scholes and model.dim == 1:
        return TransitionMode.EXACT
    return TransitionMode.MC


def build_marginal_tree(model: EulerModel, sizes: Sizes, transition_mode: Optional[str] = None,
                        noise_moment_mode: str = NoiseMomentMode.MC,
                        quad_legendre: Optional[int] = None, quad_laguerre: Optional[int] = None,
                        mc_paths: Optional[int] = None, mc_noise_paths: Optional[int] = None,
                        seed: Optional[int] = None) -> QuantizationTree:
    """
    Build an optimal marginal quantization tree.

    Grid k is the image under the marginal map at t_k of a stationary
    quantizer of N(0, I_q).

    Args:
        model: Diffusion model (exact/gapprox need 1-D Black-Scholes)
        sizes: Grid size for every step, or a single size
        transition_mode: exact, gapprox or mc; exact for 1-D Black-Scholes by default, mc otherwise
        noise_moment_mode: mc or quadrature
        quad_legendre: Legendre order (Config.QUAD_LEGENDRE)
        quad_laguerre: Laguerre order (Config.QUAD_LAGUERRE)
        mc_paths: Paths for Monte Carlo transitions (Config.MC_PATHS)
        mc_noise_paths: Paths for Monte Carlo noise moments (Config.MC_NOISE_PATHS)
        seed: Seed of every stochastic component (Config.DEFAULT_SEED)

    Returns:
        QuantizationTree with method OQ
    """
    sizes = resolve_sizes(model, sizes)
    seed_value = config.DEFAULT_SEED if seed is None else int(seed)
    normal_grids = [stationary_normal_grid(model.noise_dim, N, seed_value) for N in sizes]
    return _build_from_normal_grids(model, normal_grids, TreeMethod.OQ,
                                    _default_mode(model, transition_mode), noise_moment_mode,
                                    quad_legendre, quad_laguerre, mc_paths, mc_noise_paths, seed)


def build_greedy_tree(model: EulerModel, sizes: Sizes, transition_mode: Optional[str] = None,
                      noise_moment_mode: str = NoiseMomentMode.MC,
                      quad_legendre: Optional[int] = None, quad_laguerre: Optional[int] = None,
                      mc_paths: Optional[int] = None, mc_noise_paths: Optional[int] = None,
                      seed: Optional[int] = None) -> QuantizationTree:
    """
    Build a marginal tree from greedy quantization sequences.

    1-D models use greedy sequences of N(0, 1); 2-D models use greedy
    product grids and Monte Carlo transitions. Arguments are those of
    ``build_marginal_tree``.

    Returns:
        QuantizationTree with method GQ
    """
    sizes = resolve_sizes(model, sizes)
    if model.noise_dim == 1:
        normal = GaussianMixture.normal()
        cache = {}
        for N in sorted(set(sizes)):
            cache[N] = greedy_sequence_1d(normal, N)
        normal_grids = [cache[N] for N in sizes]
    elif model.noise_dim == 2:
        if transition_mode not in (None, TransitionMode.MC, TransitionMode.MC.value):
            raise InvalidArgumentError("greedy product trees only support mc transitions")
        cache = {N: greedy_product_grid(N, seed=seed) for N in sorted(set(sizes))}
        normal_grids = [cache[N] for N in sizes]
    else:
        raise InvalidArgumentError(f"greedy trees support noise dimension 1 or 2, got {model.noise_dim}")
    return _build_from_normal_grids(model, normal_grids, TreeMethod.GQ,
                                    _default_mode(model, transition_mode), noise_moment_mode,
                                    quad_legendre, quad_laguerre, mc_paths, mc_noise_paths, seed)
