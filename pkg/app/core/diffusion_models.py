"""
Diffusion models and the one-step Euler operator.

A model carries vectorized coefficients b(t, x) and sigma(t, x) on a
uniform time mesh t_k = k T / n. Exact log-normal steps are used for the
Black-Scholes exact form and the correlated two-asset model.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from app.core.quantizer import GaussianMixture, Grid
from app.models.params import BlackScholesParams, CEVParams, Exchange2DParams
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

CoefficientFn = Callable[[float, np.ndarray], np.ndarray]
StepFn = Callable[[float, float, np.ndarray, np.ndarray], np.ndarray]
ModelParams = Union[BlackScholesParams, CEVParams, Exchange2DParams]


class ModelId(str, Enum):
    BLACK_SCHOLES_EULER = "BlackScholesEuler"
    BLACK_SCHOLES_EXACT = "BlackScholesExact"
    CEV_EULER = "CEVEuler"
    CORRELATED_BS_2D = "CorrelatedBS2D"
    CUSTOM = "Custom"


@dataclass(frozen=True, eq=False)
class EulerModel:
    """A diffusion dX = b(t, X) dt + sigma(t, X) dW discretized on n uniform steps.

    Attributes:
        model_id: Model family
        x0: Starting point, shape (d,)
        T: Horizon in years
        n: Number of time steps
        noise_dim: Dimension q of the Brownian driver
        drift: b(t, x) for x of shape (M, d), returning (M, d)
        diffusion: sigma(t, x) for x of shape (M, d), returning (M, d, q)
        params: Validated model parameters, None for custom models
        exact_step: Optional exact transition (t, dt, x, eps) -> x'
    """
    model_id: ModelId
    x0: np.ndarray
    T: float
    n: int
    noise_dim: int
    drift: CoefficientFn
    diffusion: CoefficientFn
    params: Optional[ModelParams] = None
    exact_step: Optional[StepFn] = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.ndim != 1 or not np.isfinite(x0).all():
            raise InvalidArgumentError("x0 must be a finite vector")
        if not self.T > 0:
            raise InvalidArgumentError(f"horizon T must be positive, got {self.T}")
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidArgumentError(f"number of steps n must be a positive integer, got {self.n!r}")
        if self.noise_dim < 1:
            raise InvalidArgumentError(f"noise_dim must be positive, got {self.noise_dim}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "model_id", ModelId(self.model_id))

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    @property
    def step(self) -> float:
        return self.T / self.n

    def time(self, k: int) -> float:
        return k * self.step

    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.step

    @property
    def is_black_scholes(self) -> bool:
        return self.model_id in (ModelId.BLACK_SCHOLES_EULER, ModelId.BLACK_SCHOLES_EXACT)

    @property
    def drift_rate(self) -> float:
        """Log-normal drift rate of the Black-Scholes family (mu for Euler, r for exact)."""
        if self.model_id is ModelId.BLACK_SCHOLES_EULER:
            return self.params.mu
        if self.model_id in (ModelId.BLACK_SCHOLES_EXACT, ModelId.CORRELATED_BS_2D):
            return self.params.r
        raise InvalidArgumentError(f"model {self.model_id.value} has no log-normal drift rate")

    @property
    def volatility(self) -> float:
        if self.model_id not in (ModelId.BLACK_SCHOLES_EULER, ModelId.BLACK_SCHOLES_EXACT,
                                 ModelId.CORRELATED_BS_2D):
            raise InvalidArgumentError(f"model {self.model_id.value} has no constant volatility")
        return self.params.sigma

    def b(self, t: float, x: np.ndarray) -> np.ndarray:
        """Drift on a batch of states, shape (M, d)."""
        x = _as_states(x, self.dim)
        return np.asarray(self.drift(t, x), dtype=float).reshape(x.shape)

    def sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix on a batch of states, shape (M, d, q)."""
        x = _as_states(x, self.dim)
        return np.asarray(self.diffusion(t, x), dtype=float).reshape(x.shape[0], self.dim, self.noise_dim)


def _as_states(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x = x.reshape(-1, d)
    if x.shape[-1] != d:
        raise InvalidArgumentError(f"state dimension {x.shape[-1]} does not match model dimension {d}")
    return x


def _check_step(model: EulerModel, k: int) -> None:
    if not 0 <= k < model.n:
        raise InvalidArgumentError(f"step index k={k} outside [0, {model.n})")


def euler_step(model: EulerModel, k: int, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """
    Apply the one-step operator E_k(x, eps).

    Euler models return x + dt b(t_k, x) + sqrt(dt) sigma(t_k, x) eps; the
    exact forms return their log-normal step.

    Args:
        model: Diffusion model
        k: Step index, 0 <= k < n
        x: States, shape (d,) or (M, d)
        eps: Innovations, shape (q,) or (M, q)

    Returns:
        Next states with the shape of x
    """
    _check_step(model, k)
    single = np.ndim(x) <= 1 and np.ndim(eps) <= 1
    states = _as_states(x, model.dim)
    noise = np.asarray(eps, dtype=float).reshape(-1, model.noise_dim)
    if len(states) == 1 and len(noise) > 1:
        states = np.broadcast_to(states, (len(noise), model.dim))
    t, dt = model.time(k), model.step
    if model.exact_step is not None:
        out = model.exact_step(t, dt, states, noise)
    else:
        out = (states + dt * model.b(t, states)
               + np.sqrt(dt) * np.einsum("mdq,mq->md", model.sigma(t, states), noise))
    return out[0] if single else out


def mixture_law(model: EulerModel, k: int, grid: Grid) -> GaussianMixture:
    """
    Gaussian-mixture law of E_k(X_k, eps) when X_k is distributed on a weighted grid.

    Component i has mean x_i + dt b(t_k, x_i), scale sqrt(dt) sigma(t_k, x_i)
    and weight p_i. Exact-step models use the same Euler coefficients.
    """
    _check_step(model, k)
    if grid.cell_weights is None:
        raise InvalidArgumentError("mixture_law requires a grid with cell_weights")
    if grid.dim != model.dim:
        raise InvalidArgumentError(f"grid dim {grid.dim} does not match model dim {model.dim}")
    t, dt = model.time(k), model.step
    means = grid.points + dt * model.b(t, grid.points)
    scales = np.sqrt(dt) * model.sigma(t, grid.points)
    return GaussianMixture(means, scales, grid.cell_weights)


def marginal_points(model: EulerModel, t: float, z: np.ndarray) -> np.ndarray:
    """
    Map standard normal quantizer points to time-t grid points.

    Black-Scholes family: x0 exp((a - s^2/2) t + s sqrt(t) z) with a the
    log-normal drift rate (Cholesky-correlated for the two-asset model).
    Other models: x0 + t b(0, x0) + sqrt(t) sigma(0, x0) z.

    Args:
        model: Diffusion model
        t: Time, t >= 0
        z: Standard normal points, shape (N, q)

    Returns:
        Points of shape (N, d)
    """
    z = np.asarray(z, dtype=float).reshape(-1, model.noise_dim)
    if model.is_black_scholes:
        s, a = model.volatility, model.drift_rate
        return model.x0 * np.exp((a - 0.5 * s * s) * t + s * np.sqrt(t) * z)
    if model.model_id is ModelId.CORRELATED_BS_2D:
        s, a, rho = model.volatility, model.drift_rate, model.params.rho
        w = np.column_stack((z[:, 0], rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]))
        return model.x0 * np.exp((a - 0.5 * s * s) * t + s * np.sqrt(t) * w)
    x0 = model.x0[None, :]
    return (x0 + t * model.b(0.0, x0)
            + np.sqrt(t) * np.einsum("dq,mq->md", model.sigma(0.0, x0)[0], z))


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def black_scholes_euler(x0: float, T: float, n: int, mu: float, sigma: float,
                        r: float = 0.0) -> EulerModel:
    """Black-Scholes model dX = mu X dt + sigma X dW stepped with the Euler scheme."""
    params = BlackScholesParams(mu=mu, sigma=sigma, r=r)
    return EulerModel(
        model_id=ModelId.BLACK_SCHOLES_EULER,
        x0=np.array([x0]), T=T, n=n, noise_dim=1,
        drift=lambda t, x: params.mu * x,
        diffusion=lambda t, x: params.sigma * x[:, :, None],
        params=params,
    )


def black_scholes_exact(x0: float, T: float, n: int, sigma: float, r: float = 0.0) -> EulerModel:
    """Black-Scholes model under the pricing measure with exact log-normal steps."""
    params = BlackScholesParams(mu=r, sigma=sigma, r=r)

    def step(t: float, dt: float, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return x * np.exp((params.r - 0.5 * params.sigma ** 2) * dt + params.sigma * np.sqrt(dt) * eps)

    return EulerModel(
        model_id=ModelId.BLACK_SCHOLES_EXACT,
        x0=np.array([x0]), T=T, n=n, noise_dim=1,
        drift=lambda t, x: params.r * x,
        diffusion=lambda t, x: params.sigma * x[:, :, None],
        params=params,
        exact_step=step,
    )


def cev_euler(x0: float, T: float, n: int, mu: float, vartheta: float,
              delta_exponent: float) -> EulerModel:
    """CEV model dX = mu X dt + vartheta X^delta dW; the diffusion is vartheta max(x, 0)^delta."""
    params = CEVParams(mu=mu, vartheta=vartheta, delta_exponent=delta_exponent)
    return EulerModel(
        model_id=ModelId.CEV_EULER,
        x0=np.array([x0]), T=T, n=n, noise_dim=1,
        drift=lambda t, x: params.mu * x,
        diffusion=lambda t, x: (params.vartheta * np.maximum(x, 0.0) ** params.delta_exponent)[:, :, None],
        params=params,
    )


def correlated_bs_2d(x0: np.ndarray, T: float, n: int, r: float, sigma: float, rho: float,
                     lambda_dividend: float = 0.0) -> EulerModel:
    """
    Two Black-Scholes assets driven by correlated Brownian motions with exact steps.

    The first asset's dividend rate only enters payoffs through exp(-lambda t).
    """
    params = Exchange2DParams(r=r, sigma=sigma, rho=rho, lambda_dividend=lambda_dividend)
    chol = np.array([[1.0, 0.0], [params.rho, np.sqrt(1.0 - params.rho ** 2)]])

    def diffusion(t: float, x: np.ndarray) -> np.ndarray:
        return params.sigma * x[:, :, None] * chol[None, :, :]

    def step(t: float, dt: float, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
        w = eps @ chol.T
        return x * np.exp((params.r - 0.5 * params.sigma ** 2) * dt + params.sigma * np.sqrt(dt) * w)

    return EulerModel(
        model_id=ModelId.CORRELATED_BS_2D,
        x0=np.asarray(x0, dtype=float), T=T, n=n, noise_dim=2,
        drift=lambda t, x: params.r * x,
        diffusion=diffusion,
        params=params,
        exact_step=step,
    )


def custom_model(x0: np.ndarray, T: float, n: int, drift: CoefficientFn, diffusion: CoefficientFn,
                 noise_dim: int = 1) -> EulerModel:
    """User-supplied vectorized coefficients, stepped with the Euler scheme."""
    return EulerModel(
        model_id=ModelId.CUSTOM,
        x0=np.atleast_1d(np.asarray(x0, dtype=float)), T=T, n=n, noise_dim=noise_dim,
        drift=drift, diffusion=diffusion,
    )
