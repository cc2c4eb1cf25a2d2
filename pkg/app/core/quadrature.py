"""
Gaussian quadrature rules and standard normal helpers.

Provides Gauss-Legendre and Gauss-Laguerre rules, the standard normal
CDF/PDF, and the integration helpers used for the exact computation of
transition weights on marginal quantization trees.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
from scipy import special

from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MAX_ORDER = 256
SQRT_2PI = float(np.sqrt(2.0 * np.pi))

# Below this lower bound the x = z^2/2 substitution becomes singular at the
# origin, so the head of the tail integral is done with Gauss-Legendre.
_TAIL_SPLIT = 1.0

ArrayLike = Union[float, np.ndarray]


class QuadratureKind(str, Enum):
    LEGENDRE = "legendre"
    LAGUERRE = "laguerre"


class TailSide(str, Enum):
    UPPER = "upper"
    LOWER = "lower"


@dataclass(frozen=True)
class QuadratureRule:
    """An n-point Gauss rule.

    Attributes:
        kind: Legendre (weight 1 on [-1, 1]) or Laguerre (weight e^{-x} on [0, inf))
        nodes: Strictly increasing abscissae
        weights: Positive weights aligned with nodes
    """
    kind: QuadratureKind
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


def _check_order(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or not 1 <= n <= MAX_ORDER:
        raise InvalidArgumentError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {n!r}")


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=float)
    values.setflags(write=False)
    return values


@lru_cache(maxsize=None)
def legendre_rule(n: int) -> QuadratureRule:
    """
    Return the n-point Gauss-Legendre rule on [-1, 1].

    The rule integrates every polynomial of degree <= 2n - 1 exactly.

    Args:
        n: Number of nodes, 1 <= n <= 256

    Returns:
        QuadratureRule of kind LEGENDRE
    """
    _check_order(n)
    nodes, weights = np.polynomial.legendre.leggauss(int(n))
    order = np.argsort(nodes)
    return QuadratureRule(QuadratureKind.LEGENDRE, _frozen(nodes[order]), _frozen(weights[order]))


@lru_cache(maxsize=None)
def laguerre_rule(n: int) -> QuadratureRule:
    """
    Return the n-point Gauss-Laguerre rule for integrals of f(x) e^{-x} on [0, inf).

    Nodes are the roots of L_n; weights follow w_i = x_i / ((n+1)^2 L_{n+1}(x_i)^2).
    For very large n the outermost weights underflow to zero.

    Args:
        n: Number of nodes, 1 <= n <= 256

    Returns:
        QuadratureRule of kind LAGUERRE
    """
    _check_order(n)
    n = int(n)
    nodes, _ = np.polynomial.laguerre.laggauss(n)
    nodes = np.sort(nodes)
    coefficients = np.zeros(n + 2)
    coefficients[n + 1] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        l_next = np.polynomial.laguerre.lagval(nodes, coefficients)
        weights = nodes / ((n + 1) ** 2 * l_next ** 2)
    weights = np.where(np.isfinite(weights), weights, 0.0)
    return QuadratureRule(QuadratureKind.LAGUERRE, _frozen(nodes), _frozen(weights))


def _check_finite_input(x: ArrayLike, name: str) -> np.ndarray:
    values = np.asarray(x, dtype=float)
    if np.isnan(values).any():
        raise InvalidArgumentError(f"{name} received NaN input")
    return values


def _as_output(values: np.ndarray, original: ArrayLike) -> ArrayLike:
    return float(values) if np.ndim(original) == 0 else values


def normal_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal CDF, accurate to double precision in both tails."""
    values = _check_finite_input(x, "normal_cdf")
    return _as_output(special.ndtr(values), x)


def normal_sf(x: ArrayLike) -> ArrayLike:
    """Standard normal survival function 1 - CDF, without cancellation."""
    values = _check_finite_input(x, "normal_sf")
    return _as_output(special.ndtr(-values), x)


def normal_pdf(x: ArrayLike) -> ArrayLike:
    """Standard normal density; zero at +-inf."""
    values = _check_finite_input(x, "normal_pdf")
    with np.errstate(over="ignore", under="ignore"):
        density = np.exp(-0.5 * values * values) / SQRT_2PI
    return _as_output(density, x)


def normal_interval_mass(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """
    P(lower < Z <= upper) for standard normal Z, elementwise.

    Uses the survival function on the positive side so that masses far in
    the right tail do not cancel to zero.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    right = lower > 0.0
    mass = np.where(right, special.ndtr(-lower) - special.ndtr(-upper),
                    special.ndtr(upper) - special.ndtr(lower))
    return np.maximum(mass, 0.0)


def _scale_rows(values: np.ndarray, factor: np.ndarray) -> np.ndarray:
    return values * factor.reshape((-1,) + (1,) * (values.ndim - 1))


def integrate_closed(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                     rule: QuadratureRule) -> ArrayLike:
    """
    Integrate f over [a, b] with a Gauss-Legendre rule.

    Args:
        f: Vectorized integrand; may return extra trailing axes (one integral per entry)
        a: Lower bound
        b: Upper bound, b > a
        rule: Legendre rule

    Returns:
        ((b-a)/2) * sum_i w_i f((b-a)/2 x_i + (a+b)/2)
    """
    if rule.kind is not QuadratureKind.LEGENDRE:
        raise InvalidArgumentError("integrate_closed requires a Legendre rule")
    if not a < b:
        raise InvalidArgumentError(f"integrate_closed requires a < b, got a={a}, b={b}")
    half = 0.5 * (b - a)
    z = half * rule.nodes + 0.5 * (a + b)
    values = np.asarray(f(z), dtype=float)
    if values.ndim == 0:
        values = np.full(len(rule), float(values))
    result = half * np.tensordot(rule.weights, values, axes=(0, 0))
    return float(result) if np.ndim(result) == 0 else result


def _laguerre_tail(f: Callable[[np.ndarray], np.ndarray], a: float, rule: QuadratureRule) -> ArrayLike:
    # int_a^inf f(z) e^{-z^2/2} dz = e^{-a^2/2} sum_i w_i f(y_i)/y_i, y_i = sqrt(2 x_i + a^2)
    y = np.sqrt(2.0 * rule.nodes + a * a)
    values = np.asarray(f(y), dtype=float)
    if values.ndim == 0:
        values = np.full(len(rule), float(values))
    result = np.exp(-0.5 * a * a) * np.tensordot(rule.weights, _scale_rows(values, 1.0 / y), axes=(0, 0))
    return float(result) if np.ndim(result) == 0 else result


def integrate_gaussian_tail(f: Callable[[np.ndarray], np.ndarray], a: float, side: TailSide,
                            rule: QuadratureRule,
                            closed_rule: Optional[QuadratureRule] = None) -> ArrayLike:
    """
    Integrate f(z) e^{-z^2/2} over [a, inf) (UPPER) or (-inf, a] (LOWER).

    The upper tail uses x = (z^2 - a^2)/2 so that the integral becomes a
    Gauss-Laguerre sum. The lower tail is reflected onto an upper tail.
    When the lower bound is below 1 the substitution is close to singular,
    so [a, 1] is integrated with ``closed_rule`` (64-node Legendre by
    default) and only [1, inf) goes through Laguerre.

    Args:
        f: Vectorized integrand without the Gaussian factor
        a: Finite bound
        side: UPPER or LOWER
        rule: Laguerre rule
        closed_rule: Legendre rule for the head of the integral when split

    Returns:
        The tail integral (not normalized by sqrt(2 pi))
    """
    if rule.kind is not QuadratureKind.LAGUERRE:
        raise InvalidArgumentError("integrate_gaussian_tail requires a Laguerre rule")
    if not np.isfinite(a):
        raise InvalidArgumentError(f"integrate_gaussian_tail requires a finite bound, got {a}")
    side = TailSide(side)
    if side is TailSide.LOWER:
        return integrate_gaussian_tail(lambda u: f(-u), -a, TailSide.UPPER, rule, closed_rule)

    if a >= _TAIL_SPLIT:
        return _laguerre_tail(f, a, rule)

    if closed_rule is None:
        closed_rule = legendre_rule(64)

    def head(z: np.ndarray) -> np.ndarray:
        values = np.asarray(f(z), dtype=float)
        if values.ndim == 0:
            values = np.full(z.shape, float(values))
        return _scale_rows(values, np.exp(-0.5 * z * z))

    return integrate_closed(head, a, _TAIL_SPLIT, closed_rule) + _laguerre_tail(f, _TAIL_SPLIT, rule)
