"""
Quantizer optimization.

One-dimensional Lloyd iterations on Gaussian mixtures with exact cell
moments, greedy point-by-point sequences, weighted k-means on discrete
atom clouds, distortion evaluation and stationary grids of N(0, I_q).
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy import optimize
from sklearn.cluster import KMeans
from sklearn.metrics import pairwise_distances_argmin, pairwise_distances_argmin_min
from threadpoolctl import threadpool_limits

from app.config import config
from app.core.quadrature import SQRT_2PI, normal_interval_mass, normal_pdf
from app.utils import cache_utils
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-10
MIXTURE_WEIGHT_TOL = 1e-9
# Relative slack when comparing distortions of two iterates.
_DISTORTION_SLACK = 1e-12
_TINY_MASS = np.finfo(float).tiny
# Mesh of the cube-root density used to place the initial Lloyd points.
_INIT_MESH = 8193


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class Grid:
    """A quantization grid.

    Attributes:
        points: Array of shape (N, d); strictly increasing when d = 1
        cell_weights: Optional Voronoi cell probabilities aligned with points
        info: Diagnostics of the optimizer that produced the grid
    """
    points: np.ndarray
    cell_weights: Optional[np.ndarray] = None
    info: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] == 0:
            raise InvalidArgumentError("grid points must be a non-empty (N, d) array")
        if not np.isfinite(points).all():
            raise InvalidArgumentError("grid points must be finite")
        if points.shape[1] == 1:
            if np.any(np.diff(points[:, 0]) <= 0.0):
                raise InvalidArgumentError("1-D grid points must be strictly increasing")
        elif len(np.unique(points, axis=0)) != len(points):
            raise InvalidArgumentError("grid points must be pairwise distinct")
        object.__setattr__(self, "points", _frozen(points))

        if self.cell_weights is not None:
            weights = np.asarray(self.cell_weights, dtype=float).reshape(-1)
            if weights.shape[0] != points.shape[0]:
                raise InvalidArgumentError(
                    f"cell_weights has {weights.shape[0]} entries for {points.shape[0]} points")
            if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
                raise InvalidArgumentError(
                    f"cell_weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
            object.__setattr__(self, "cell_weights", _frozen(weights))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    def with_weights(self, weights: np.ndarray) -> "Grid":
        """Return a copy of the grid carrying the given cell weights."""
        return Grid(self.points, weights, dict(self.info))

    def midpoints(self) -> np.ndarray:
        """Voronoi boundaries of a 1-D grid, shape (N-1,)."""
        if self.dim != 1:
            raise InvalidArgumentError("midpoints are only defined for 1-D grids")
        x = self.points[:, 0]
        return 0.5 * (x[:-1] + x[1:])

    def assign(self, values: np.ndarray) -> np.ndarray:
        """
        Index of the nearest grid point for each value; ties go to the lowest index.

        Args:
            values: Array of shape (M, d), or (M,) for 1-D grids

        Returns:
            Integer array of shape (M,)
        """
        values = np.asarray(values, dtype=float)
        if self.dim == 1:
            flat = values.reshape(-1)
            # 1-D cells are (mid_{j-1}, mid_j]
            return np.searchsorted(self.midpoints(), flat, side="left")
        values = values.reshape(-1, self.dim)
        return pairwise_distances_argmin(values, self.points)


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussian laws sum_c w_c N(m_c, S_c S_c^T).

    Attributes:
        means: Array of shape (C, d)
        scales: Array of shape (C, d, q); a zero scale is a Dirac component
        weights: Array of shape (C,) summing to one
    """
    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        scales = np.asarray(self.scales, dtype=float)
        if scales.ndim == 1:
            scales = scales[:, None, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if means.ndim != 2 or scales.ndim != 3 or len(means) == 0:
            raise InvalidArgumentError("mixture means must be (C, d) and scales (C, d, q)")
        if not (len(means) == len(scales) == len(weights)) or scales.shape[1] != means.shape[1]:
            raise InvalidArgumentError("mixture means, scales and weights are not aligned")
        if not (np.isfinite(means).all() and np.isfinite(scales).all()):
            raise InvalidArgumentError("mixture means and scales must be finite")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > MIXTURE_WEIGHT_TOL:
            raise InvalidArgumentError(
                f"mixture weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "weights", _frozen(weights / weights.sum()))

    @classmethod
    def normal(cls, mean: float = 0.0, std: float = 1.0) -> "GaussianMixture":
        """Single 1-D Gaussian component."""
        return cls(np.array([[mean]]), np.array([[[std]]]), np.array([1.0]))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.scales.shape[2]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def stds(self) -> np.ndarray:
        """Component standard deviations of a 1-D mixture, shape (C,)."""
        if self.dim != 1:
            raise InvalidArgumentError("stds are only defined for 1-D mixtures")
        return np.sqrt(np.sum(self.scales[:, 0, :] ** 2, axis=1))

    def mean(self) -> np.ndarray:
        """Mixture mean, shape (d,)."""
        return self.weights @ self.means

    def cdf(self, x: float) -> float:
        """Mixture CDF of a 1-D mixture at x."""
        m0, _, _ = _partial_moments(self, np.array([-np.inf]), np.array([x]), np.array([0.0]))
        return float(m0[0])

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``size`` points, shape (size, d)."""
        components = rng.choice(self.n_components, size=size, p=self.weights)
        noise = rng.standard_normal((size, self.noise_dim))
        return self.means[components] + np.einsum("mdq,mq->md", self.scales[components], noise)


@dataclass(frozen=True)
class AtomCloud:
    """Discrete law sum_m w_m delta_{a_m}.

    Attributes:
        points: Array of shape (M, d)
        weights: Array of shape (M,) summing to one
    """
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if points.ndim != 2 or len(points) != len(weights) or len(points) == 0:
            raise InvalidArgumentError("atom points must be (M, d) with one weight per atom")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > MIXTURE_WEIGHT_TOL:
            raise InvalidArgumentError(
                f"atom weights must be nonnegative and sum to 1, got sum {weights.sum()!r}")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights / weights.sum()))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


class Distortion(NamedTuple):
    """Quantization error e_p and the standard error of its estimate (0 when exact)."""
    value: float
    std_error: float


# ---------------------------------------------------------------------------
# Exact partial moments of 1-D mixtures
# ---------------------------------------------------------------------------

def _standardize(bounds: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """(bound - m_c)/s_c with shape (C, K); Dirac components map to +-inf."""
    diff = bounds[None, :] - means[:, None]
    dirac = np.where(diff >= 0.0, np.inf, -np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / stds[:, None]
    z = np.where(stds[:, None] > 0.0, z, dirac)
    # infinite bounds stay infinite for every component
    return np.where(np.isinf(bounds)[None, :], np.sign(bounds)[None, :] * np.inf, z)


def _pdf_terms(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    finite = np.isfinite(z)
    safe = np.where(finite, z, 0.0)
    phi = np.where(finite, np.exp(-0.5 * safe * safe) / SQRT_2PI, 0.0)
    return phi, safe * phi


def _partial_moments(mix: GaussianMixture, lower: np.ndarray, upper: np.ndarray,
                     anchor: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Moments of (X - anchor_k) restricted to (lower_k, upper_k] for a 1-D mixture.

    Args:
        mix: 1-D mixture
        lower: Lower bounds, shape (K,)
        upper: Upper bounds, shape (K,)
        anchor: Centering points, shape (K,)

    Returns:
        (M0, M1, M2), each of shape (K,)
    """
    means = mix.means[:, 0]
    stds = mix.stds()
    w = mix.weights[:, None]
    a = _standardize(np.asarray(lower, dtype=float), means, stds)
    b = _standardize(np.asarray(upper, dtype=float), means, stds)
    mass = normal_interval_mass(a, b)
    phi_a, aphi_a = _pdf_terms(a)
    phi_b, aphi_b = _pdf_terms(b)
    dphi = phi_a - phi_b
    s = stds[:, None]
    c = means[:, None] - np.asarray(anchor, dtype=float)[None, :]
    m0 = np.sum(w * mass, axis=0)
    m1 = np.sum(w * (c * mass + s * dphi), axis=0)
    m2 = np.sum(w * (c * c * mass + 2.0 * c * s * dphi + s * s * (mass + aphi_a - aphi_b)), axis=0)
    return m0, m1, np.maximum(m2, 0.0)


def _cell_moments(mix: GaussianMixture, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mids = 0.5 * (x[:-1] + x[1:])
    bounds = np.concatenate(([-np.inf], mids, [np.inf]))
    return _partial_moments(mix, bounds[:-1], bounds[1:], x)


def _require_1d(mix: GaussianMixture, name: str) -> None:
    if mix.dim != 1:
        raise InvalidArgumentError(f"{name} requires a 1-D mixture, got dim {mix.dim}")


def _check_size(N: int) -> None:
    if not isinstance(N, (int, np.integer)) or isinstance(N, bool) or N < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N!r}")


def mixture_quantiles(mix: GaussianMixture, levels: np.ndarray) -> np.ndarray:
    """
    Quantiles of a 1-D mixture by bracketed root finding on its CDF.

    Args:
        mix: 1-D mixture
        levels: Probabilities in (0, 1)

    Returns:
        Array of quantiles aligned with levels
    """
    _require_1d(mix, "mixture_quantiles")
    means = mix.means[:, 0]
    stds = mix.stds()
    lo = float(np.min(means - 40.0 * stds)) - 1.0
    hi = float(np.max(means + 40.0 * stds)) + 1.0
    quantiles = np.empty(len(levels))
    for i, level in enumerate(levels):
        quantiles[i] = optimize.brentq(lambda v: mix.cdf(v) - level, lo, hi, xtol=1e-14, rtol=1e-14)
    return quantiles


def _spread_duplicates(x: np.ndarray) -> np.ndarray:
    x = np.sort(np.asarray(x, dtype=float))
    for i in range(1, len(x)):
        if x[i] <= x[i - 1]:
            x[i] = np.nextafter(x[i - 1], np.inf) + 1e-9 * max(1.0, abs(x[i - 1]))
    return x


class _LloydState(NamedTuple):
    points: np.ndarray
    centroids: np.ndarray
    masses: np.ndarray
    distortion: float
    reseeded: int


def _lloyd_state(mix: GaussianMixture, x: np.ndarray) -> _LloydState:
    m0, m1, m2 = _cell_moments(mix, x)
    empty = m0 <= _TINY_MASS
    with np.errstate(divide="ignore", invalid="ignore"):
        centroids = x + np.where(empty, 0.0, m1 / np.where(empty, 1.0, m0))
    reseeded = int(empty.sum())
    if reseeded:
        centroids = _reseed_empty(centroids, x, empty, mix)
    return _LloydState(x, centroids, m0, float(m2.sum()), reseeded)


def _reseed_empty(centroids: np.ndarray, x: np.ndarray, empty: np.ndarray,
                  mix: GaussianMixture) -> np.ndarray:
    """Move each empty cell's point to the midpoint of the widest occupied finite cell."""
    centroids = centroids.copy()
    mids = 0.5 * (x[:-1] + x[1:])
    lower = np.concatenate(([-np.inf], mids))
    upper = np.concatenate((mids, [np.inf]))
    widths = upper - lower
    for j in np.flatnonzero(empty):
        occupied = ~empty & np.isfinite(widths)
        if occupied.any():
            widest = int(np.argmax(np.where(occupied, widths, -1.0)))
            centroids[j] = 0.5 * (lower[widest] + upper[widest])
            # split the chosen cell so two empty cells never land on the same spot
            widths[widest] *= 0.5
        else:
            centroids[j] = float(mix.mean()[0]) + (j + 1) * float(np.max(mix.stds()) or 1.0)
        logger.warning(f"Lloyd: reseeded empty cell {j} at {centroids[j]:.6g}")
    return _spread_duplicates(centroids)


def _anderson_candidate(xs: deque, gs: deque) -> Optional[np.ndarray]:
    """Type-II Anderson mixing of the stored Lloyd iterates."""
    if len(xs) < 2:
        return None
    X = np.array(xs)
    G = np.array(gs)
    F = G - X
    dF = np.diff(F, axis=0).T
    dG = np.diff(G, axis=0).T
    gamma, *_ = np.linalg.lstsq(dF, F[-1], rcond=None)
    candidate = G[-1] - dG @ gamma
    if not np.isfinite(candidate).all() or np.any(np.diff(candidate) <= 0.0):
        return None
    return candidate


def _keep_latest(xs: deque, gs: deque) -> None:
    while len(xs) > 1:
        xs.popleft()
        gs.popleft()


def cube_root_density_points(mix: GaussianMixture, N: int) -> np.ndarray:
    """
    Levels (i - 0.5)/N of the law with density proportional to f^(1/3).

    Asymptotically optimal quadratic quantizers of a density f follow this
    point density, so it is the starting grid of ``lloyd_mixture_1d``.
    Mixtures with a Dirac component fall back to quantiles of f.
    """
    _require_1d(mix, "cube_root_density_points")
    levels = (np.arange(1, N + 1) - 0.5) / N
    means = mix.means[:, 0]
    stds = mix.stds()
    if np.any(stds <= 0.0):
        return mixture_quantiles(mix, levels)
    t = np.linspace(float(np.min(means - 12.0 * stds)), float(np.max(means + 12.0 * stds)), _INIT_MESH)
    density = normal_pdf((t[:, None] - means[None, :]) / stds[None, :]) @ (mix.weights / stds)
    root = np.cbrt(density)
    mass = np.concatenate(([0.0], np.cumsum(0.5 * (root[1:] + root[:-1]) * np.diff(t))))
    return np.interp(levels, mass / mass[-1], t)


def lloyd_mixture_1d(mix: GaussianMixture, N: int, tol: Optional[float] = None,
                     max_iter: Optional[int] = None, init: Optional[np.ndarray] = None) -> Grid:
    """
    Optimize an N-point quadratic quantizer of a 1-D Gaussian mixture.

    Each step moves every point to the exact centroid of its Voronoi cell,
    computed from Gaussian partial moments. The fixed-point iteration is
    accelerated by Anderson mixing over the last Config.ANDERSON_MEMORY plain
    steps; a mixed iterate is only accepted when it keeps the points sorted
    and does not increase the distortion.

    Args:
        mix: 1-D mixture
        N: Number of points
        tol: Stationarity tolerance on max |centroid - point| (Config.LLOYD_TOL)
        max_iter: Maximum iterations (Config.LLOYD_MAX_ITER)
        init: Optional starting points; ``cube_root_density_points`` otherwise

    Returns:
        Grid with cell weights; ``info`` holds converged, iterations, residual,
        accelerated (accepted mixed steps) and distortion_history (squared
        distortion per iteration)
    """
    _require_1d(mix, "lloyd_mixture_1d")
    _check_size(N)
    tol = config.LLOYD_TOL if tol is None else float(tol)
    max_iter = config.LLOYD_MAX_ITER if max_iter is None else int(max_iter)
    if init is None:
        x = cube_root_density_points(mix, N)
    else:
        x = np.asarray(init, dtype=float).reshape(-1)
        if len(x) != N:
            raise InvalidArgumentError(f"init has {len(x)} points, expected {N}")
    state = _lloyd_state(mix, _spread_duplicates(x))

    memory = max(config.ANDERSON_MEMORY, 0) + 1
    xs: deque = deque(maxlen=memory)
    gs: deque = deque(maxlen=memory)
    history = [state.distortion]
    reseeded = state.reseeded
    accelerated = 0
    converged = False
    residual = float(np.max(np.abs(state.centroids - state.points)))
    iterations = 0

    while iterations < max_iter:
        if residual <= tol and not state.reseeded:
            converged = True
            break
        iterations += 1
        # reseeded centroids are not Lloyd images
        if state.reseeded:
            xs.clear()
            gs.clear()
        else:
            xs.append(state.points)
            gs.append(state.centroids)
        next_state = None
        candidate = _anderson_candidate(xs, gs) if memory > 1 else None
        if candidate is not None:
            trial = _lloyd_state(mix, candidate)
            if not trial.reseeded and trial.distortion <= state.distortion * (1.0 + _DISTORTION_SLACK):
                next_state = trial
                accelerated += 1
            else:
                _keep_latest(xs, gs)
        if next_state is None:
            next_state = _lloyd_state(mix, _spread_duplicates(state.centroids))
        if next_state.distortion > state.distortion * (1.0 + _DISTORTION_SLACK) + _TINY_MASS:
            logger.warning(f"Lloyd: distortion increased at iteration {iterations} "
                           f"({state.distortion:.17g} -> {next_state.distortion:.17g})")
        state = next_state
        reseeded += state.reseeded
        history.append(state.distortion)
        residual = float(np.max(np.abs(state.centroids - state.points)))
        logger.debug(f"Lloyd iteration {iterations}: residual={residual:.3e} "
                     f"distortion={state.distortion:.17g}")

    if not converged:
        converged = residual <= tol and not state.reseeded
    if not converged:
        logger.warning(f"Lloyd did not converge for N={N} after {iterations} iterations "
                       f"(residual {residual:.3e} > tol {tol:.1e})")

    masses = state.masses / state.masses.sum()
    info = {
        "converged": converged,
        "iterations": iterations,
        "residual": residual,
        "reseeded": reseeded,
        "accelerated": accelerated,
        "distortion_history": history,
    }
    return Grid(state.points, masses, info)


# ---------------------------------------------------------------------------
# Greedy sequences
# ---------------------------------------------------------------------------

def _frozen_lloyd(mix: GaussianMixture, y: float, left: float, right: float,
                  tol: float, max_iter: int) -> float:
    """Move y to the centroid of its cell between fixed neighbors until it settles."""
    for _ in range(max_iter):
        lo = -np.inf if np.isinf(left) else 0.5 * (left + y)
        hi = np.inf if np.isinf(right) else 0.5 * (y + right)
        m0, m1, _ = _partial_moments(mix, np.array([lo]), np.array([hi]), np.array([y]))
        if m0[0] <= _TINY_MASS:
            break
        step = m1[0] / m0[0]
        y = y + step
        if abs(step) <= tol:
            break
    return y


def _greedy_candidate(mix: GaussianMixture, x: np.ndarray) -> Tuple[float, float, float]:
    """
    Pick the interval of largest local inertia and the starting point inside it.

    Returns:
        (start, left neighbor, right neighbor)
    """
    n = len(x)
    mids = 0.5 * (x[:-1] + x[1:])
    # inertia of each interval: left tail, n-1 interior intervals split at the midpoint, right tail
    lower = np.concatenate(([-np.inf], x[:-1], mids, [x[-1]]))
    upper = np.concatenate(([x[0]], mids, x[1:], [np.inf]))
    anchor = np.concatenate(([x[0]], x[:-1], x[1:], [x[-1]]))
    _, m1, m2 = _partial_moments(mix, lower, upper, anchor)
    inertia = np.concatenate(([m2[0]], m2[1:n] + m2[n:2 * n - 1], [m2[-1]]))
    j = int(np.argmax(inertia))
    std = float(np.max(mix.stds())) or 1.0
    if j == 0:
        m0 = mix.cdf(x[0])
        start = x[0] + m1[0] / m0 if m0 > _TINY_MASS else x[0] - std
        return min(start, x[0] - 1e-12 * max(1.0, abs(x[0]))), -np.inf, x[0]
    if j == n:
        m0 = 1.0 - mix.cdf(x[-1])
        start = x[-1] + m1[-1] / m0 if m0 > _TINY_MASS else x[-1] + std
        return max(start, x[-1] + 1e-12 * max(1.0, abs(x[-1]))), x[-1], np.inf
    return 0.5 * (x[j - 1] + x[j]), x[j - 1], x[j]


def greedy_sequence_1d(mix: GaussianMixture, N: int, tol: Optional[float] = None,
                       max_iter: Optional[int] = None) -> Grid:
    """
    Build a greedy quantization sequence a_1, ..., a_N of a 1-D mixture.

    a_1 is the mixture mean. Each later point goes into the interval with the
    largest local inertia (midpoint of an interior interval, conditional mean
    of a tail) and is then relaxed by Lloyd steps with its neighbors frozen.

    Args:
        mix: 1-D mixture
        N: Sequence length
        tol: Stopping tolerance of the frozen Lloyd update (Config.LLOYD_TOL)
        max_iter: Iterations of the frozen Lloyd update (Config.GREEDY_MAX_ITER)

    Returns:
        Sorted grid with cell weights; ``info["sequence"]`` keeps the insertion
        order and ``info["distortion_history"]`` the quadratic distortion of
        every prefix
    """
    _require_1d(mix, "greedy_sequence_1d")
    _check_size(N)
    tol = config.LLOYD_TOL if tol is None else float(tol)
    max_iter = config.GREEDY_MAX_ITER if max_iter is None else int(max_iter)

    sequence = [float(mix.mean()[0])]
    x = np.array(sequence)
    history = [float(_cell_moments(mix, x)[2].sum())]
    for n in range(1, N):
        start, left, right = _greedy_candidate(mix, x)
        y = _frozen_lloyd(mix, start, left, right, tol, max_iter)
        if not left < y < right:
            y = start
        sequence.append(y)
        x = np.sort(np.array(sequence))
        history.append(float(_cell_moments(mix, x)[2].sum()))
        logger.debug(f"Greedy point {n + 1}: {y:.10g}, distortion {history[-1]:.17g}")

    m0, _, _ = _cell_moments(mix, x)
    return Grid(x, m0 / m0.sum(), {"sequence": sequence, "distortion_history": history})


# ---------------------------------------------------------------------------
# Weighted k-means
# ---------------------------------------------------------------------------

def _deterministic_init(points: np.ndarray, N: int) -> np.ndarray:
    """Atoms at indices floor((i - 0.5) M / N) of the lexicographically sorted distinct atoms."""
    distinct = np.unique(points, axis=0)
    idx = np.floor((np.arange(1, N + 1) - 0.5) * len(distinct) / N).astype(int)
    return distinct[idx]


def _weighted_centroids(points: np.ndarray, weights: np.ndarray, labels: np.ndarray,
                        previous: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    N = len(previous)
    mass = np.bincount(labels, weights=weights, minlength=N)
    sums = np.zeros_like(previous)
    np.add.at(sums, labels, points * weights[:, None])
    occupied = mass > 0.0
    centers = previous.copy()
    centers[occupied] = sums[occupied] / mass[occupied, None]
    return centers, mass


def weighted_kmeans(cloud: AtomCloud, N: int, tol: Optional[float] = None,
                    max_iter: Optional[int] = None) -> Grid:
    """
    Lloyd iteration on a discrete weighted law.

    Runs scikit-learn's Lloyd k-means from a deterministic initialization
    on a single thread, then reassigns every atom to its nearest center
    (lowest index on ties) and recomputes centers and cell weights.

    Args:
        cloud: Atom cloud
        N: Number of centers
        tol: Absolute center-shift tolerance (Config.LLOYD_TOL)
        max_iter: Maximum iterations (Config.KMEANS_MAX_ITER)

    Returns:
        Grid with cell weights (sorted when d = 1)
    """
    _check_size(N)
    tol = config.LLOYD_TOL if tol is None else float(tol)
    max_iter = config.KMEANS_MAX_ITER if max_iter is None else int(max_iter)
    points, weights = cloud.points, cloud.weights
    n_distinct = len(np.unique(points, axis=0))
    if n_distinct < N:
        raise InvalidArgumentError(f"cloud has {n_distinct} distinct atoms, fewer than N={N}")

    init = _deterministic_init(points, N)
    if N == n_distinct:
        centers = init
    else:
        mean_var = float(np.mean(np.var(points, axis=0)))
        # scikit-learn scales tol by the mean feature variance and compares squared shifts
        sk_tol = tol * tol / mean_var if mean_var > 0.0 else 0.0
        with threadpool_limits(limits=1):
            km = KMeans(n_clusters=N, init=init, n_init=1, max_iter=max_iter,
                        tol=sk_tol, algorithm="lloyd")
            km.fit(points, sample_weight=weights)
        centers = np.asarray(km.cluster_centers_, dtype=float)
        logger.debug(f"k-means finished after {km.n_iter_} iterations for N={N}")

    labels = pairwise_distances_argmin(points, centers)
    centers, mass = _weighted_centroids(points, weights, labels, centers)
    if len(np.unique(centers, axis=0)) < N:
        logger.warning("k-means produced coincident centers; keeping initialization for them")
        centers = np.where(mass[:, None] > 0.0, centers, init)
    labels = pairwise_distances_argmin(points, centers)
    mass = np.bincount(labels, weights=weights, minlength=N)
    shift = float(np.max(np.linalg.norm(
        _weighted_centroids(points, weights, labels, centers)[0] - centers, axis=1)))

    if centers.shape[1] == 1:
        order = np.argsort(centers[:, 0], kind="stable")
        centers, mass = centers[order], mass[order]
    info = {"converged": shift <= max(tol, 1e-12), "residual": shift}
    if not info["converged"]:
        logger.warning(f"weighted k-means stationarity residual {shift:.3e} exceeds tol {tol:.1e}")
    return Grid(centers, mass / mass.sum(), info)


# ---------------------------------------------------------------------------
# Distortion
# ---------------------------------------------------------------------------

def distortion(grid: Grid, mix: GaussianMixture, p: float = 2.0,
               n_samples: Optional[int] = None, seed: Optional[int] = None) -> Distortion:
    """
    Quantization error e_p(grid, X) = E[dist(X, grid)^p]^(1/p) for X ~ mix.

    1-D quadratic errors are exact; every other case is a Monte Carlo
    estimate whose standard error is returned alongside.

    Args:
        grid: Quantization grid
        mix: Law of X
        p: Order, p >= 1
        n_samples: Monte Carlo sample size (Config.MC_PATHS)
        seed: Monte Carlo seed (Config.DEFAULT_SEED)

    Returns:
        Distortion(value, std_error)
    """
    if grid is None or grid.size == 0:
        raise InvalidArgumentError("distortion requires a non-empty grid")
    if p < 1.0:
        raise InvalidArgumentError(f"p must be >= 1, got {p}")
    if grid.dim != mix.dim:
        raise InvalidArgumentError(f"grid dim {grid.dim} does not match mixture dim {mix.dim}")
    if mix.dim == 1 and p == 2.0:
        _, _, m2 = _cell_moments(mix, grid.points[:, 0])
        return Distortion(float(np.sqrt(m2.sum())), 0.0)

    n_samples = config.MC_PATHS if n_samples is None else int(n_samples)
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    sample = mix.sample(n_samples, rng)
    _, dist = pairwise_distances_argmin_min(sample, grid.points)
    powered = dist ** p
    g = float(powered.mean())
    se_g = float(powered.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    value = g ** (1.0 / p)
    se = se_g * value / (p * g) if g > 0.0 else 0.0
    return Distortion(value, se)


# ---------------------------------------------------------------------------
# Stationary grids of N(0, I_q)
# ---------------------------------------------------------------------------

def antithetic_normal_sample(q: int, size: int, seed: int) -> np.ndarray:
    """Standard normal sample of even size made of pairs (z, -z), shape (size, q)."""
    rng = np.random.Generator(np.random.Philox(seed))
    half = rng.standard_normal((size - size // 2, q))
    return np.concatenate((half, -half[: size // 2]))


def stationary_normal_grid(q: int, N: int, seed: Optional[int] = None,
                           use_cache: bool = True) -> Grid:
    """
    Stationary N-point quadratic grid of N(0, I_q) with cell weights.

    q = 1 uses exact Lloyd iterations with tolerance 1e-12. q = 2 runs
    weighted k-means on a fixed-seed antithetic sample of
    Config.NORMAL_SAMPLE_SIZE equally weighted atoms. Grids are cached as
    CSV files keyed by (q, N, seed).

    Args:
        q: Dimension, 1 or 2
        N: Grid size
        seed: Sample seed for q = 2 (Config.DEFAULT_SEED)
        use_cache: Read and write the grid cache

    Returns:
        Grid with cell weights
    """
    if q not in (1, 2):
        raise InvalidArgumentError(f"stationary_normal_grid supports q in {{1, 2}}, got {q!r}")
    _check_size(N)
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    key = cache_utils.get_grid_key("normal", q, N, seed)
    if use_cache:
        cached = cache_utils.load_from_cache(key)
        if cached is not None:
            points, weights = cached
            if weights is not None and points.shape == (N, q):
                return Grid(points, weights, {"cache_key": key})

    if q == 1:
        grid = lloyd_mixture_1d(GaussianMixture.normal(), N, tol=1e-12,
                                max_iter=max(config.LLOYD_MAX_ITER, 5000))
    else:
        size = config.NORMAL_SAMPLE_SIZE
        sample = antithetic_normal_sample(q, size, seed)
        logger.info(f"Quantizing N(0, I_{q}) with N={N} on {size} atoms")
        grid = weighted_kmeans(AtomCloud(sample, np.full(size, 1.0 / size)), N)
    logger.info(f"Built stationary normal grid q={q} N={N}")

    if use_cache:
        cache_utils.save_to_cache(key, grid.points, grid.cell_weights)
    return grid


def greedy_product_grid(N: int, tol: Optional[float] = None, seed: Optional[int] = None) -> Grid:
    """
    Product of two greedy N(0,1) sequences with ceil(sqrt(N)) points per axis,
    truncated to the N atoms of highest product weight.

    Cell weights are estimated on an antithetic N(0, I_2) sample drawn from
    ``seed`` (Config.DEFAULT_SEED).
    """
    _check_size(N)
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    side = int(np.ceil(np.sqrt(N)))
    axis = greedy_sequence_1d(GaussianMixture.normal(), side, tol=tol)
    x = axis.points[:, 0]
    w = axis.cell_weights
    xx, yy = np.meshgrid(x, x, indexing="ij")
    ww = np.outer(w, w).reshape(-1)
    atoms = np.column_stack((xx.reshape(-1), yy.reshape(-1)))
    keep = np.sort(np.argsort(-ww, kind="stable")[:N])
    atoms = atoms[keep]
    # weights of the truncated grid are those of its own Voronoi cells
    sample = antithetic_normal_sample(2, min(config.NORMAL_SAMPLE_SIZE, 200000), seed)
    labels = pairwise_distances_argmin(sample, atoms)
    counts = np.bincount(labels, minlength=N).astype(float)
    return Grid(atoms, counts / counts.sum(), {"axis_size": side, "seed": seed})
