"""Special functions, distribution helpers and KL divergences.

Everything likelihood-scaled is exposed in log form. The digamma and
log-gamma evaluations are self-contained (recurrence + asymptotic series)
so that the tracker never depends on a particular special-function backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

LOG_2PI = math.log(2.0 * math.pi)

_ASYMPTOTIC_FROM = 8.0

# Coefficients B_{2k} / (2k) for the digamma series in powers of 1/x^2.
_PSI_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# Coefficients B_{2k} / (2k (2k - 1)) for the Stirling series.
_LGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


class DomainError(ValueError):
    """Argument outside the domain of a special function or distribution."""


class DegeneracyError(np.linalg.LinAlgError):
    """A matrix that must be invertible is (numerically) singular."""


def _check_positive(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError(f"{what} requires finite positive arguments")


def _shift_up(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift x to >= 8 by integer steps; return (shifted, sum 1/x_i, sum log x_i)."""
    z = np.asarray(x, dtype=float)
    steps = np.maximum(np.ceil(_ASYMPTOTIC_FROM - z), 0.0)
    inv_sum = np.zeros_like(z)
    prod = np.ones_like(z)
    for j in range(int(steps.max(initial=0.0))):
        t = z + j
        active = j < steps
        inv_sum += np.where(active, 1.0 / t, 0.0)
        prod *= np.where(active, t, 1.0)
    return z + steps, inv_sum, np.log(prod)


def digamma(x):
    """psi(x) for x > 0 (scalar or array)."""
    arr = np.asarray(x, dtype=float)
    _check_positive(arr, "digamma")
    z, inv_sum, _ = _shift_up(arr)
    w = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_PSI_SERIES):
        series = (series + c) * w
    out = np.log(z) - 0.5 / z - series - inv_sum
    return float(out) if out.ndim == 0 else out


def log_gamma(x):
    """log Gamma(x) for x > 0 (scalar or array)."""
    arr = np.asarray(x, dtype=float)
    _check_positive(arr, "log_gamma")
    z, _, log_sum = _shift_up(arr)
    w = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_LGAMMA_SERIES[1:]):
        series = (series + c) * w
    series = (series + _LGAMMA_SERIES[0]) / z
    out = (z - 0.5) * np.log(z) - z + 0.5 * LOG_2PI + series - log_sum
    return float(out) if out.ndim == 0 else out


def special_functions(x) -> Tuple[float, float]:
    """Return (psi(x), log Gamma(x))."""
    return digamma(x), log_gamma(x)


def log_factorial(m: int) -> float:
    if m < 0:
        raise DomainError("factorial of a negative integer")
    return 0.0 if m < 2 else float(log_gamma(m + 1.0))


# --------------------------------------------------------------------------
# Parameter containers


@dataclass(frozen=True)
class GammaParams:
    """Gamma distribution in shape/scale form; mean = shape * scale."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.shape) and np.isfinite(self.scale)) or self.shape <= 0 or self.scale <= 0:
            raise DomainError("Gamma parameters must be finite and positive")

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {c.shape} does not match mean of length {m.size}")
        if not np.allclose(c, c.T, rtol=1e-9, atol=1e-9 * max(1.0, float(np.abs(c).max()))):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.mean.size


# --------------------------------------------------------------------------
# KL divergences


def kl_gamma(q: GammaParams, p: GammaParams) -> float:
    """KL(q || p) for shape/scale Gamma distributions."""
    eta, rho = q.shape, q.scale
    eta0, rho0 = p.shape, p.scale
    val = (
        -eta0 * math.log(rho)
        - log_gamma(eta)
        + (eta - eta0) * digamma(eta)
        + eta * (rho / rho0 - 1.0)
        + log_gamma(eta0)
        + eta0 * math.log(rho0)
    )
    return max(float(val), 0.0)


def kl_gamma_vec(shape_q, scale_q, shape_p, scale_p) -> float:
    """Sum of component-wise Gamma KLs (vectorised form used by the tracker)."""
    eta = np.asarray(shape_q, dtype=float)
    rho = np.asarray(scale_q, dtype=float)
    eta0 = np.asarray(shape_p, dtype=float)
    rho0 = np.asarray(scale_p, dtype=float)
    terms = (
        -eta0 * np.log(rho)
        - log_gamma(eta)
        + (eta - eta0) * digamma(eta)
        + eta * (rho / rho0 - 1.0)
        + log_gamma(eta0)
        + eta0 * np.log(rho0)
    )
    return float(np.sum(terms))


def _chol(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"{what} is not positive definite") from exc


def kl_gaussian(q: GaussianParams, p: GaussianParams) -> float:
    """KL(q || p) for multivariate normals."""
    if q.dim != p.dim:
        raise ValueError("dimension mismatch")
    lp = _chol(p.cov, "p covariance")
    lq = _chol(q.cov, "q covariance")
    a = np.linalg.solve(lp, lq)
    diff = np.linalg.solve(lp, p.mean - q.mean)
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    val = 0.5 * (np.sum(a * a) + diff @ diff - q.dim + logdet_p - logdet_q)
    return max(float(val), 0.0)


# --------------------------------------------------------------------------
# Quadratic-form summation


def sum_quadratic_forms(
    means: np.ndarray,
    covs: Optional[np.ndarray] = None,
    *,
    common_cov: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Collapse sum_i -1/2 (x-m_i)' C_i^{-1} (x-m_i) into one quadratic.

    Either pass per-term covariances ``covs`` (N, d, d) or a ``common_cov`` C
    with positive ``weights`` w_i, meaning C_i = C / w_i.  Returns (mu, Sigma,
    const) with the sum equal to -1/2 (x-mu)' Sigma^{-1} (x-mu) + const.
    """
    m = np.atleast_2d(np.asarray(means, dtype=float))
    n, d = m.shape
    if covs is not None:
        c = np.asarray(covs, dtype=float).reshape(n, d, d)
        prec = np.linalg.inv(c)
    else:
        if common_cov is None or weights is None:
            raise ValueError("pass covs, or common_cov together with weights")
        w = np.asarray(weights, dtype=float).reshape(n)
        prec = w[:, None, None] * np.linalg.inv(np.asarray(common_cov, dtype=float))[None]
    info = prec.sum(axis=0)
    eta = np.einsum("nij,nj->i", prec, m)
    if np.linalg.cond(info) > 1e14:
        raise DegeneracyError("sum of precisions is singular")
    sigma = np.linalg.inv(info)
    sigma = 0.5 * (sigma + sigma.T)
    mu = sigma @ eta
    const = 0.5 * mu @ info @ mu - 0.5 * np.einsum("ni,nij,nj->", m, prec, m)
    return mu, sigma, float(const)


# --------------------------------------------------------------------------
# Continuous Poisson CDF


def poisson_log_pmf(k: np.ndarray, lam: float) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    return k * math.log(lam) - lam - log_gamma(k + 1.0)


@dataclass
class InterpolatedPoissonCdf:
    """Monotone cubic (PCHIP) interpolant of the Poisson(lam) CDF.

    The interpolant passes through the exact CDF at the integer knots
    0..ceil(lam + 12 sqrt(lam) + 20), so it is continuous, strictly increasing
    and invertible on that range.
    """

    lam: float
    knots: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    _interp: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise DomainError("Poisson rate must be positive")
        top = int(math.ceil(self.lam + 12.0 * math.sqrt(self.lam) + 20.0))
        self.knots = np.arange(top + 1, dtype=float)
        pmf = np.exp(poisson_log_pmf(self.knots, self.lam))
        self.values = np.minimum(np.cumsum(pmf), 1.0)
        self._interp = PchipInterpolator(self.knots, self.values, extrapolate=False)

    @property
    def upper(self) -> float:
        return float(self.knots[-1])

    def evaluate(self, m):
        x = np.asarray(m, dtype=float)
        if np.any(x < 0) or np.any(~np.isfinite(x)):
            raise DomainError("CDF argument must be finite and non-negative")
        out = self._interp(np.minimum(x, self.upper))
        return float(out) if out.ndim == 0 else out

    def invert(self, p: float) -> float:
        lo_val = float(self.values[0])
        if not (lo_val < p < 1.0):
            raise DomainError(f"probability {p} outside ({lo_val}, 1)")
        if p >= self.values[-1]:
            raise DomainError(f"probability {p} beyond the interpolation range")
        i = int(np.searchsorted(self.values, p, side="left"))
        if self.values[i] == p:
            return float(self.knots[i])
        a, b = self.knots[i - 1], self.knots[i]
        return float(brentq(lambda x: float(self._interp(x)) - p, a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps))


def poisson_cdf_tools(lam: float) -> InterpolatedPoissonCdf:
    return InterpolatedPoissonCdf(lam)


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array, tolerant to rows of -inf."""
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=-1)) + m[..., 0]
