"""Domain types of the association-based NHPP measurement model.

Each object k emits Poisson(Lambda_k) measurements per frame drawn from
N(H x_k, R_k); clutter emits Poisson(Lambda_0) measurements uniform over an
axis-aligned rectangle of area V.  The exact densities here are used as
oracles by the tests and by nothing on the tracker's hot path.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .numerics import LOG_2PI, log_factorial, logsumexp_rows


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle [lo_d, hi_d] in measurement space."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("region needs hi > lo in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def square(cls, side: float, dim: int = 2) -> "Region":
        h = 0.5 * side
        return cls(np.full(dim, -h), np.full(dim, h))

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        return np.all((y >= self.lo) & (y <= self.hi), axis=1)


@dataclass(frozen=True)
class TransitionModel:
    """Independent linear-Gaussian dynamics x' = F x + B + w, w ~ N(0, Q)."""

    F: np.ndarray  # (K, n, n)
    B: np.ndarray  # (K, n)
    Q: np.ndarray  # (K, n, n)

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        B = np.asarray(self.B, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if F.ndim != 3 or F.shape[1] != F.shape[2] or Q.shape != F.shape or B.shape != F.shape[:2]:
            raise ConfigError("inconsistent transition dimensions")
        if not np.allclose(Q, np.swapaxes(Q, 1, 2)):
            raise ConfigError("Q must be symmetric")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", Q)

    @property
    def K(self) -> int:
        return self.F.shape[0]

    @property
    def state_dim(self) -> int:
        return self.F.shape[1]

    @classmethod
    def constant_velocity(cls, K: int, tau: float = 1.0, q_scale: float = 25.0, dim: int = 2) -> "TransitionModel":
        """Nearly-constant-velocity model; state order (x, vx, y, vy, ...)."""
        f1 = np.array([[1.0, tau], [0.0, 1.0]])
        q1 = q_scale * np.array([[tau**3 / 3.0, tau**2 / 2.0], [tau**2 / 2.0, tau]])
        F = np.kron(np.eye(dim), f1)
        Q = np.kron(np.eye(dim), q1)
        n = 2 * dim
        return cls(np.repeat(F[None], K, 0), np.zeros((K, n)), np.repeat(Q[None], K, 0))


def position_selector(dim: int = 2) -> np.ndarray:
    """H picking positions out of an interleaved (pos, vel) state."""
    H = np.zeros((dim, 2 * dim))
    H[np.arange(dim), 2 * np.arange(dim)] = 1.0
    return H


@dataclass(frozen=True)
class MeasurementModel:
    H: np.ndarray  # (D, n)
    R: np.ndarray  # (K, D, D)
    region: Region

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.asarray(self.R, dtype=float)
        if R.ndim != 3 or R.shape[1:] != (H.shape[0], H.shape[0]):
            raise ConfigError("R must be (K, D, D) with D = rows of H")
        if H.shape[0] != self.region.dim:
            raise ConfigError("region dimension differs from measurement dimension")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("every R_k must be symmetric positive definite") from exc
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)

    @property
    def K(self) -> int:
        return self.R.shape[0]

    @property
    def D(self) -> int:
        return self.H.shape[0]

    @property
    def V(self) -> float:
        return self.region.volume

    @property
    def log_V(self) -> float:
        return math.log(self.region.volume)


@dataclass(frozen=True)
class MeasurementFrame:
    n: int
    y: np.ndarray  # (M, D)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.size == 0:
            y = y.reshape(0, y.shape[-1] if y.ndim == 2 else 2)
        if y.ndim != 2:
            raise ValueError("measurements must be an (M, D) array")
        object.__setattr__(self, "y", y)

    @property
    def M(self) -> int:
        return self.y.shape[0]

    def to_json(self) -> str:
        return json.dumps({"n": int(self.n), "y": self.y.tolist()})

    @classmethod
    def from_json(cls, line: str, dim: int = 2) -> "MeasurementFrame":
        obj = json.loads(line)
        y = np.asarray(obj["y"], dtype=float)
        if y.size == 0:
            y = y.reshape(0, dim)
        return cls(int(obj["n"]), y)


def write_frames(path: Path, frames: Iterable[MeasurementFrame]) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            fh.write(fr.to_json() + "\n")


def read_frames(path: Path, dim: int = 2) -> List[MeasurementFrame]:
    with open(path) as fh:
        return [MeasurementFrame.from_json(line, dim) for line in fh if line.strip()]


@dataclass(frozen=True)
class RateVector:
    """Expected counts per frame: index 0 is clutter, 1..K are objects."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigError("rates must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.size - 1

    @property
    def total(self) -> float:
        return float(self.values.sum())


def check_association_weights(q: np.ndarray, atol: float = 1e-12) -> None:
    if q.ndim != 2:
        raise ValueError("association weights must be (M, K+1)")
    if np.any(q < -atol) or np.any(q > 1 + atol):
        raise ValueError("association weights outside [0, 1]")
    if q.shape[0] and not np.allclose(q.sum(axis=1), 1.0, rtol=0, atol=atol * q.shape[1]):
        raise ValueError("association rows do not sum to one")


# --------------------------------------------------------------------------
# Exact densities (oracles)


def emission_log_likelihood(y: np.ndarray, k: int, x: np.ndarray, model: MeasurementModel) -> float:
    """log l(y | x_k): uniform clutter for k=0, Gaussian N(y; H x, R_k) otherwise."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.D,):
        raise ValueError("measurement dimension mismatch")
    if k == 0:
        return -model.log_V
    R = model.R[k - 1]
    r = y - model.H @ np.asarray(x, dtype=float)
    _, logdet = np.linalg.slogdet(R)
    return float(-0.5 * (r @ np.linalg.solve(R, r) + logdet + model.D * LOG_2PI))


def _as_state_rows(states, K: int) -> np.ndarray:
    a = np.asarray(states, dtype=float)
    return a.reshape(K, -1) if K else a.reshape(0, a.shape[-1] if a.ndim > 1 else 0)


def _log_emission_matrix(y: np.ndarray, states: np.ndarray, model: MeasurementModel) -> np.ndarray:
    M = y.shape[0]
    K = states.shape[0]
    out = np.empty((M, K + 1))
    out[:, 0] = -model.log_V
    for k in range(K):
        for j in range(M):
            out[j, k + 1] = emission_log_likelihood(y[j], k + 1, states[k], model)
    return out


def joint_nhpp_log_likelihood(
    frame: MeasurementFrame, states: np.ndarray, rates: RateVector, model: MeasurementModel
) -> float:
    """log h(Y, M | X, Lambda) with associations marginalised out."""
    lam = rates.values
    if rates.total == 0:
        if frame.M > 0:
            raise ValueError("measurements observed under zero total rate")
        return 0.0
    if frame.M == 0:
        return -rates.total
    states = _as_state_rows(states, rates.K)
    with np.errstate(divide="ignore"):
        logw = np.log(lam)[None, :] + _log_emission_matrix(frame.y, states, model)
    return float(-rates.total - log_factorial(frame.M) + logsumexp_rows(logw).sum())


def joint_log_likelihood_with_associations(
    frame: MeasurementFrame,
    states: np.ndarray,
    rates: RateVector,
    model: MeasurementModel,
    theta: Sequence[int],
) -> float:
    """log p(Y, M, theta | X, Lambda) for one explicit association vector."""
    lam = rates.values
    M = frame.M
    states = _as_state_rows(states, rates.K)
    with np.errstate(divide="ignore"):
        log_lam = np.log(lam)
    val = M * math.log(rates.total) - rates.total - log_factorial(M)  # Poisson count
    val -= M * math.log(rates.total)  # categorical labels
    for j, k in enumerate(theta):
        x = states[k - 1] if k > 0 else None
        val += log_lam[k] + emission_log_likelihood(frame.y[j], k, x, model)
    return float(val)


def enumerate_marginal_log_likelihood(
    frame: MeasurementFrame, states: np.ndarray, rates: RateVector, model: MeasurementModel
) -> float:
    """Brute-force log sum_theta p(Y, M, theta | X, Lambda); exponential cost."""
    terms = [
        joint_log_likelihood_with_associations(frame, states, rates, model, th)
        for th in itertools.product(range(rates.K + 1), repeat=frame.M)
    ]
    a = np.asarray(terms)
    m = a.max()
    return float(m + math.log(np.exp(a - m).sum()))


def standard_models(
    K: int, side: float, r_scale: float = 100.0, tau: float = 1.0, q_scale: float = 25.0
) -> Tuple[TransitionModel, MeasurementModel]:
    """2-D constant-velocity dynamics with isotropic R over a centred square."""
    trans = TransitionModel.constant_velocity(K, tau, q_scale)
    meas = MeasurementModel(position_selector(2), np.repeat(r_scale * np.eye(2)[None], K, 0), Region.square(side))
    return trans, meas
