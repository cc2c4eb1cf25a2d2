"""
Quantization trees built by recursive quantization.

A tree holds the weighted grids of every time step together with the
transition matrices p_ij^k and the noise moments
pi_ij^k = sqrt(dt) E[eps 1{X_{k+1} in C_j} | X_k = x_i]. This module
implements the recursive builders (closed-form, hybrid and greedy); the
marginal builders live in ``app.core.marginal_tree``.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from app.config import config
from app.core.diffusion_models import EulerModel, euler_step, mixture_law
from app.core.quadrature import normal_interval_mass, normal_pdf
from app.core.quantizer import (AtomCloud, Grid, greedy_sequence_1d, lloyd_mixture_1d,
                                stationary_normal_grid, weighted_kmeans)
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

Sizes = Union[int, Sequence[int]]


class TreeMethod(str, Enum):
    RQ = "rq"
    HRQ = "hrq"
    OQ = "oq"
    GQ = "gq"
    GRQ = "grq"


class TreeDiagnostics(NamedTuple):
    """Largest deviations from the tree invariants.

    Attributes:
        row_sum_error: max |sum_j p_ij - 1|
        kolmogorov_error: max |p^k P^k - p^{k+1}|
        noise_sum_error: max |sum_j pi_ij| / sqrt(dt)
    """
    row_sum_error: float
    kolmogorov_error: float
    noise_sum_error: float


@dataclass(frozen=True, eq=False)
class QuantizationTree:
    """Weighted grids with transitions and noise moments.

    Attributes:
        model: Diffusion model the tree approximates
        grids: n + 1 weighted grids; grid 0 is {x0}
        transitions: n row-stochastic matrices, transitions[k] of shape (N_k, N_{k+1})
        noise_moments: n arrays of shape (N_k, N_{k+1}, q)
        method: Builder that produced the tree
        metadata: Build parameters (sizes, seed, modes, orders, flagged rows)
    """
    model: EulerModel
    grids: List[Grid]
    transitions: List[np.ndarray]
    noise_moments: List[np.ndarray]
    method: TreeMethod
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = self.model.n
        if len(self.grids) != n + 1 or len(self.transitions) != n or len(self.noise_moments) != n:
            raise InvalidArgumentError(
                f"tree needs {n + 1} grids and {n} transition/noise layers, got "
                f"{len(self.grids)}/{len(self.transitions)}/{len(self.noise_moments)}")
        q = self.model.noise_dim
        for k in range(n):
            shape = (self.grids[k].size, self.grids[k + 1].size)
            if self.transitions[k].shape != shape:
                raise InvalidArgumentError(
                    f"transitions[{k}] has shape {self.transitions[k].shape}, expected {shape}")
            if self.noise_moments[k].shape != shape + (q,):
                raise InvalidArgumentError(
                    f"noise_moments[{k}] has shape {self.noise_moments[k].shape}, expected {shape + (q,)}")
        for k, grid in enumerate(self.grids):
            if grid.cell_weights is None:
                raise InvalidArgumentError(f"grid {k} has no cell weights")
            if grid.dim != self.model.dim:
                raise InvalidArgumentError(f"grid {k} has dim {grid.dim}, model has {self.model.dim}")
        object.__setattr__(self, "method", TreeMethod(self.method))

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def sizes(self) -> List[int]:
        """Grid sizes N_1, ..., N_n."""
        return [grid.size for grid in self.grids[1:]]

    def diagnostics(self) -> TreeDiagnostics:
        """Measure row-stochasticity, Kolmogorov consistency and noise-moment completeness."""
        row_error = kolmogorov_error = noise_error = 0.0
        sqrt_dt = np.sqrt(self.model.step)
        for k in range(self.n):
            P = self.transitions[k]
            row_error = max(row_error, float(np.max(np.abs(P.sum(axis=1) - 1.0))))
            propagated = self.grids[k].cell_weights @ P
            kolmogorov_error = max(kolmogorov_error,
                                   float(np.max(np.abs(propagated - self.grids[k + 1].cell_weights))))
            noise_error = max(noise_error,
                              float(np.max(np.abs(self.noise_moments[k].sum(axis=1)))) / sqrt_dt)
        return TreeDiagnostics(row_error, kolmogorov_error, noise_error)


def resolve_sizes(model: EulerModel, sizes: Sizes) -> List[int]:
    """Expand a single size to every step and check a per-step size list."""
    if isinstance(sizes, (int, np.integer)):
        sizes = [int(sizes)] * model.n
    sizes = [int(s) for s in sizes]
    if len(sizes) != model.n:
        raise InvalidArgumentError(f"sizes has {len(sizes)} entries, model has {model.n} steps")
    if any(s < 1 for s in sizes):
        raise InvalidArgumentError(f"grid sizes must be positive, got {sizes}")
    return sizes


def initial_grid(model: EulerModel) -> Grid:
    """Singleton grid {x0} with weight 1."""
    return Grid(model.x0[None, :], np.array([1.0]))


def propagate_weights(weights: np.ndarray, transitions: np.ndarray) -> np.ndarray:
    """Forward Kolmogorov step p^{k+1} = p^k P^k."""
    propagated = np.maximum(weights @ transitions, 0.0)
    return propagated / propagated.sum()


def steps_progress(model: EulerModel, desc: str):
    """Iterator over time steps with an optional progress bar."""
    return tqdm(range(model.n), desc=desc, disable=not config.SHOW_PROGRESS, leave=False)


def _require_1d(model: EulerModel, builder: str) -> None:
    if model.dim != 1:
        raise InvalidArgumentError(f"{builder} requires a 1-D model, got dim {model.dim}")


def recursive_transitions_1d(model: EulerModel, k: int, grid: Grid,
                             next_grid: Grid) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Closed-form transitions and noise moments between two 1-D grids.

    For source point x_i the Euler image is m_i + s_i eps with
    m_i = x_i + dt b(t_k, x_i) and s_i = sqrt(dt) sigma(t_k, x_i). With l, u
    the standardized bounds of cell C_j, p_ij = Phi(u) - Phi(l) and
    pi_ij = sqrt(dt) (phi(l) - phi(u)). Rows with s_i = 0 become the
    indicator of the cell holding m_i.

    Returns:
        (transitions, noise moments of shape (N_k, N_{k+1}, 1), number of degenerate rows)
    """
    t, dt = model.time(k), model.step
    x = grid.points
    means = (x + dt * model.b(t, x))[:, 0]
    signed = np.sqrt(dt) * model.sigma(t, x)[:, 0, 0]
    scales = np.abs(signed)
    bounds = np.concatenate(([-np.inf], next_grid.midpoints(), [np.inf]))

    live = scales > 0.0
    P = np.zeros((grid.size, next_grid.size))
    Pi = np.zeros((grid.size, next_grid.size, 1))
    if live.any():
        z = (bounds[None, :] - means[live, None]) / scales[live, None]
        P[live] = normal_interval_mass(z[:, :-1], z[:, 1:])
        phi = normal_pdf(z)
        Pi[live, :, 0] = np.sqrt(dt) * np.sign(signed[live])[:, None] * (phi[:, :-1] - phi[:, 1:])
    degenerate = np.flatnonzero(~live)
    if len(degenerate):
        P[degenerate, next_grid.assign(means[degenerate])] = 1.0
        logger.info(f"Step {k}: {len(degenerate)} rows with zero diffusion use indicator transitions")
    return P, Pi, len(degenerate)


def _build_recursive(model: EulerModel, sizes: Sizes, method: TreeMethod,
                     tol: Optional[float], max_iter: Optional[int]) -> QuantizationTree:
    _require_1d(model, f"{method.value} tree")
    sizes = resolve_sizes(model, sizes)
    grids = [initial_grid(model)]
    transitions, noise_moments = [], []
    degenerate = 0
    converged = True
    for k in steps_progress(model, f"{method.value} tree"):
        mix = mixture_law(model, k, grids[k])
        if method is TreeMethod.GRQ:
            candidate = greedy_sequence_1d(mix, sizes[k], tol=tol)
        else:
            candidate = lloyd_mixture_1d(mix, sizes[k], tol=tol, max_iter=max_iter)
            converged = converged and candidate.info.get("converged", False)
        P, Pi, flat = recursive_transitions_1d(model, k, grids[k], candidate)
        degenerate += flat
        grids.append(candidate.with_weights(propagate_weights(grids[k].cell_weights, P)))
        transitions.append(P)
        noise_moments.append(Pi)
        logger.debug(f"{method.value} step {k + 1}/{model.n}: N={sizes[k]}")

    logger.info(f"Built {method.value} tree: n={model.n}, sizes={sizes[0]}..{sizes[-1]}")
    metadata = {"sizes": sizes, "degenerate_rows": degenerate, "lloyd_converged": converged}
    return QuantizationTree(model, grids, transitions, noise_moments, method, metadata)


def build_recursive_tree_1d(model: EulerModel, sizes: Sizes, tol: Optional[float] = None,
                            max_iter: Optional[int] = None) -> QuantizationTree:
    """
    Build a recursive quantization tree of a 1-D model.

    Grid k+1 is the Lloyd-optimal quantizer of the Gaussian mixture
    E_k(X_k, eps); transitions and noise moments are the closed forms of
    ``recursive_transitions_1d`` and weights follow the Kolmogorov equation.

    Args:
        model: 1-D model
        sizes: Grid size for every step, or a single size
        tol: Lloyd tolerance (Config.LLOYD_TOL)
        max_iter: Maximum Lloyd iterations (Config.LLOYD_MAX_ITER)

    Returns:
        QuantizationTree with method RQ
    """
    return _build_recursive(model, sizes, TreeMethod.RQ, tol, max_iter)


def build_greedy_recursive_tree(model: EulerModel, sizes: Sizes,
                                tol: Optional[float] = None) -> QuantizationTree:
    """Recursive tree whose grids are greedy sequences of each step's mixture law."""
    return _build_recursive(model, sizes, TreeMethod.GRQ, tol, None)


def build_hybrid_tree(model: EulerModel, sizes: Sizes, noise_grid_size: int,
                      seed: Optional[int] = None, tol: Optional[float] = None,
                      max_iter: Optional[int] = None) -> QuantizationTree:
    """
    Build a hybrid recursive tree where the Gaussian innovation is quantized.

    With a stationary grid (eps_l, w_l) of N(0, I_q), the law of the next
    state is the atom cloud {E_k(x_i, eps_l)} with weights p_i w_l. Grid k+1
    comes from weighted k-means on that cloud and
    p_ij = sum_l w_l 1{E_k(x_i, eps_l) in C_j},
    pi_ij = sqrt(dt) sum_l w_l eps_l 1{E_k(x_i, eps_l) in C_j}.

    Args:
        model: Model of dimension 1 or 2
        sizes: Grid size for every step, or a single size
        noise_grid_size: Size of the innovation quantizer
        seed: Seed of the innovation quantizer (Config.DEFAULT_SEED)
        tol: k-means tolerance (Config.LLOYD_TOL)
        max_iter: Maximum k-means iterations (Config.KMEANS_MAX_ITER)

    Returns:
        QuantizationTree with method HRQ
    """
    if model.dim not in (1, 2):
        raise InvalidArgumentError(f"hybrid trees support dimension 1 or 2, got {model.dim}")
    if noise_grid_size < 1:
        raise InvalidArgumentError(f"noise_grid_size must be positive, got {noise_grid_size}")
    sizes = resolve_sizes(model, sizes)
    if noise_grid_size == 1 and any(s > 1 for s in sizes):
        raise InvalidArgumentError("noise_grid_size=1 only supports one point per step")
    seed = config.DEFAULT_SEED if seed is None else int(seed)
    q = model.noise_dim
    noise = stationary_normal_grid(q, noise_grid_size, seed)
    eps, w_eps = noise.points, noise.cell_weights
    L = noise.size
    sqrt_dt = np.sqrt(model.step)

    grids = [initial_grid(model)]
    transitions, noise_moments = [], []
    for k in steps_progress(model, "hrq tree"):
        grid = grids[k]
        Nk = grid.size
        atoms = euler_step(model, k, np.repeat(grid.points, L, axis=0), np.tile(eps, (Nk, 1)))
        weights = np.repeat(grid.cell_weights, L) * np.tile(w_eps, Nk)
        candidate = weighted_kmeans(AtomCloud(atoms, weights / weights.sum()), sizes[k],
                                    tol=tol, max_iter=max_iter)
        labels = candidate.assign(atoms)
        rows = np.repeat(np.arange(Nk), L)
        flat = rows * candidate.size + labels
        cells = Nk * candidate.size
        P = np.bincount(flat, weights=np.tile(w_eps, Nk), minlength=cells).reshape(Nk, candidate.size)
        Pi = np.empty((Nk, candidate.size, q))
        scaled = np.tile(w_eps[:, None] * eps, (Nk, 1))
        for r in range(q):
            Pi[:, :, r] = sqrt_dt * np.bincount(flat, weights=scaled[:, r],
                                                minlength=cells).reshape(Nk, candidate.size)
        grids.append(candidate.with_weights(propagate_weights(grid.cell_weights, P)))
        transitions.append(P)
        noise_moments.append(Pi)

    logger.info(f"Built hrq tree: n={model.n}, N={sizes[-1]}, N_eps={noise_grid_size}")
    metadata = {"sizes": sizes, "seed": seed, "noise_grid_size": noise_grid_size}
    return QuantizationTree(model, grids, transitions, noise_moments, TreeMethod.HRQ, metadata)
