"""Per-step coordinate-ascent variational filter for the NHPP tracker.

Factors: q(X) = prod_k N(mu_k, Sigma_k), q(Lambda) = prod_k Gamma(eta_k, rho_k)
(rate-learning mode only) and q(theta) = prod_j Cat(q_j).  One call to
``tracker_step`` / ``known_rate_step`` advances the filter by one frame.

All association arithmetic is done in the log domain.  The Kalman update is
written in a weight-scaled form (A = W H Sigma H' + R) that equals the usual
pseudo-measurement update for W > 0 and degrades continuously to "no update"
as W -> 0, so no 1/W appears on the state path.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .model import MeasurementFrame, MeasurementModel, RateVector, TransitionModel
from .numerics import LOG_2PI, GaussianParams, digamma, kl_gamma_vec, log_factorial

log = logging.getLogger(__name__)

EVIDENCE_FLOOR = 1e-12


# --------------------------------------------------------------------------
# Belief containers


@dataclass
class GaussianBeliefs:
    means: np.ndarray  # (K, n)
    covs: np.ndarray  # (K, n, n)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        if self.means.ndim != 2 or self.covs.shape != self.means.shape + (self.means.shape[1],):
            raise ValueError("beliefs need means (K, n) and covs (K, n, n)")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "GaussianBeliefs":
        return GaussianBeliefs(self.means.copy(), self.covs.copy())

    def get(self, k: int) -> GaussianParams:
        return GaussianParams(self.means[k], self.covs[k])

    def set(self, k: int, g: GaussianParams) -> None:
        self.means[k] = g.mean
        self.covs[k] = g.cov


@dataclass
class RateBelief:
    """Independent Gamma(shape, scale) beliefs; index 0 is clutter."""

    shape: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.shape.shape != self.scale.shape or np.any(self.shape <= 0) or np.any(self.scale <= 0):
            raise ValueError("Gamma parameters must be positive and aligned")

    @property
    def mean(self) -> np.ndarray:
        return self.shape * self.scale

    def log_geometric_mean(self) -> np.ndarray:
        """E log Lambda = psi(eta) + log rho, the log of exp(psi(eta)) rho."""
        return digamma(self.shape) + np.log(self.scale)


def constant_forgetting(value: float = 1.0) -> Callable[[int], float]:
    return lambda n: value


def decaying_forgetting(n: int) -> float:
    """gamma_n = 1 - 0.1 max(1, n - 10)^-0.9."""
    return 1.0 - 0.1 * max(1.0, n - 10.0) ** -0.9


# --------------------------------------------------------------------------
# Prediction


def predict_states(beliefs: GaussianBeliefs, transition: TransitionModel) -> GaussianBeliefs:
    F = transition.F
    means = np.einsum("kij,kj->ki", F, beliefs.means) + transition.B
    covs = F @ beliefs.covs @ np.swapaxes(F, 1, 2) + transition.Q
    return GaussianBeliefs(means, 0.5 * (covs + np.swapaxes(covs, 1, 2)))


def predict_rates(rates: RateBelief, gamma: float) -> RateBelief:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("forgetting factor must lie in (0, 1]")
    return RateBelief(rates.shape * gamma - gamma + 1.0, rates.scale / gamma)


def predict_beliefs(
    beliefs: GaussianBeliefs,
    transition: TransitionModel,
    rates: Optional[RateBelief] = None,
    gamma: float = 1.0,
) -> Tuple[GaussianBeliefs, Optional[RateBelief]]:
    pred_rates = predict_rates(rates, gamma) if rates is not None else None
    return predict_states(beliefs, transition), pred_rates


# --------------------------------------------------------------------------
# Associations


def gaussian_logpdf_matrix(y: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(y_j; means_k, covs_k) for every (j, k); returns (M, K)."""
    D = y.shape[1]
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    diff = y[:, None, :] - means[None, :, :]
    quad = np.einsum("mkd,kde,mke->mk", diff, inv, diff)
    return -0.5 * (quad + logdet[None, :] + D * LOG_2PI)


def normalise_log_weights(logw: np.ndarray) -> np.ndarray:
    """Row-normalise exp(logw); rows with no finite entry go to clutter."""
    m = logw.max(axis=1, keepdims=True)
    dead = ~np.isfinite(m[:, 0])
    if np.any(dead):
        log.warning("%d measurement(s) have no admissible association; assigned to clutter", int(dead.sum()))
        logw = logw.copy()
        logw[dead] = -np.inf
        logw[dead, 0] = 0.0
        m[dead] = 0.0
    w = np.exp(logw - m)
    return w / w.sum(axis=1, keepdims=True)


def _safe_log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def init_associations(
    y: np.ndarray, pred: GaussianBeliefs, rate_estimate: np.ndarray, model: MeasurementModel
) -> np.ndarray:
    """q0_jk proportional to Lhat_0/V (k=0) or Lhat_k N(y_j; H mu*_k, H Sigma*_k H' + R_k)."""
    H = model.H
    log_lam = _safe_log(rate_estimate)
    M = y.shape[0]
    logw = np.empty((M, model.K + 1))
    logw[:, 0] = log_lam[0] - model.log_V
    if M:
        covs = H @ pred.covs @ H.T + model.R
        logw[:, 1:] = log_lam[None, 1:] + gaussian_logpdf_matrix(y, pred.means @ H.T, covs)
    return normalise_log_weights(logw)


def association_log_weights(
    y: np.ndarray, post: GaussianBeliefs, log_rates: np.ndarray, model: MeasurementModel
) -> np.ndarray:
    """Unnormalised log association weights with the posterior-spread penalty."""
    H = model.H
    Rinv = np.linalg.inv(model.R)
    HSH = H @ post.covs @ H.T
    trace = np.einsum("kij,kji->k", Rinv, HSH)
    logw = np.empty((y.shape[0], model.K + 1))
    logw[:, 0] = log_rates[0] - model.log_V
    if y.shape[0]:
        logw[:, 1:] = log_rates[None, 1:] + gaussian_logpdf_matrix(y, post.means @ H.T, model.R) - 0.5 * trace[None, :]
    return logw


def update_associations(
    y: np.ndarray, post: GaussianBeliefs, log_rates: np.ndarray, model: MeasurementModel
) -> np.ndarray:
    """q_jk proportional to Lbar_k N(y_j; H mu_k, R_k) exp(-tr(R_k^-1 H Sigma_k H')/2).

    ``log_rates`` is log Lbar: psi(eta) + log rho when learning rates, log Lambda otherwise.
    """
    return normalise_log_weights(association_log_weights(y, post, np.asarray(log_rates, dtype=float), model))



# --------------------------------------------------------------------------
# Pseudo-measurements and state update


@dataclass
class PseudoMeasurements:
    """Association-weighted summaries per object; R-bar_k = R_k / W_k."""

    weight: np.ndarray  # (K,)
    weighted_sum: np.ndarray  # (K, D)
    R: np.ndarray  # (K, D, D) original measurement covariances

    @property
    def evidence(self) -> np.ndarray:
        return self.weight >= EVIDENCE_FLOOR

    @property
    def mean(self) -> np.ndarray:
        out = np.full_like(self.weighted_sum, np.nan)
        ev = self.evidence
        out[ev] = self.weighted_sum[ev] / self.weight[ev, None]
        return out

    @property
    def cov(self) -> np.ndarray:
        out = np.full_like(self.R, np.inf)
        ev = self.evidence
        out[ev] = self.R[ev] / self.weight[ev, None, None]
        return out


def pseudo_measurements(y: np.ndarray, q: np.ndarray, model: MeasurementModel) -> PseudoMeasurements:
    w = q[:, 1:].sum(axis=0)
    s = q[:, 1:].T @ y
    return PseudoMeasurements(w, s, model.R)


def pseudo_measurement(y: np.ndarray, q: np.ndarray, k: int, model: MeasurementModel):
    """(Ybar_k, Rbar_k, W_k) for object k >= 1, or None when there is no evidence."""
    w = float(q[:, k].sum())
    if w < EVIDENCE_FLOOR:
        return None
    return q[:, k] @ y / w, model.R[k - 1] / w, w


@dataclass
class KalmanTerms:
    innovation: np.ndarray  # T_k (K, D), nan without evidence
    innovation_cov: np.ndarray  # S_k (K, D, D), inf without evidence
    elbo_terms: np.ndarray  # Ybar'Rbar^-1 Ybar - T'S^-1 T + log det Rbar/det S, per object


def kalman_update(
    pred_means: np.ndarray,
    pred_covs: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    weight: np.ndarray,
    weighted_sum: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Weight-scaled Kalman update, batched over the leading axis.

    Returns (means, covs, u, A, elbo_terms) where A = W H Sigma H' + R and
    u = s - W H mu; the innovation is T = u / W and S = A / W.
    """
    ev = weight >= EVIDENCE_FLOOR
    W = np.where(ev, weight, 0.0)
    PH = pred_covs @ H.T  # (B, n, D)
    P = H @ PH  # (B, D, D)
    A = W[:, None, None] * P + R
    Ainv = np.linalg.inv(A)
    s = np.where(ev[:, None], weighted_sum, 0.0)
    u = s - W[:, None] * (pred_means @ H.T)
    gain_u = np.einsum("bnd,bde,be->bn", PH, Ainv, u)
    means = pred_means + gain_u
    covs = pred_covs - W[:, None, None] * (PH @ Ainv @ np.swapaxes(PH, 1, 2))
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    Rinv = np.linalg.inv(R)
    with np.errstate(invalid="ignore", divide="ignore"):
        quad = (np.einsum("bd,bde,be->b", s, Rinv, s) - np.einsum("bd,bde,be->b", u, Ainv, u)) / W
    _, ld_A = np.linalg.slogdet(A)
    _, ld_R = np.linalg.slogdet(R)
    terms = np.where(ev, quad - (ld_A - ld_R), 0.0)
    return means, covs, u, A, terms


def update_states(
    pred: GaussianBeliefs, pseudo: PseudoMeasurements, model: MeasurementModel
) -> Tuple[GaussianBeliefs, KalmanTerms]:
    means, covs, u, A, terms = kalman_update(
        pred.means, pred.covs, model.H, model.R, pseudo.weight, pseudo.weighted_sum
    )
    ev = pseudo.evidence
    T = np.full_like(u, np.nan)
    S = np.full_like(A, np.inf)
    T[ev] = u[ev] / pseudo.weight[ev, None]
    S[ev] = A[ev] / pseudo.weight[ev, None, None]
    return GaussianBeliefs(means, covs), KalmanTerms(T, S, terms)


def update_rates(pred: RateBelief, q: np.ndarray) -> RateBelief:
    counts = q.sum(axis=0) if q.shape[0] else np.zeros_like(pred.shape)
    return RateBelief(pred.shape + counts, pred.scale / (pred.scale + 1.0))


# --------------------------------------------------------------------------
# ELBO


def measurement_norms(y: np.ndarray, model: MeasurementModel) -> np.ndarray:
    """y_j' R_k^-1 y_j + log det R_k for every (j, k); (M, K)."""
    Rinv = np.linalg.inv(model.R)
    _, ld = np.linalg.slogdet(model.R)
    return np.einsum("md,kde,me->mk", y, Rinv, y) + ld[None, :]


def _xlogy_sum(q: np.ndarray, logv: np.ndarray) -> float:
    """sum q * logv with 0 * (-inf) treated as 0."""
    with np.errstate(invalid="ignore"):
        prod = q * logv
    return float(np.where(q > 0, prod, 0.0).sum())


def compute_elbo(
    y: np.ndarray,
    q: np.ndarray,
    kalman: KalmanTerms,
    model: MeasurementModel,
    *,
    post_rates: Optional[RateBelief] = None,
    pred_rates: Optional[RateBelief] = None,
    known_rates: Optional[np.ndarray] = None,
    norms: Optional[np.ndarray] = None,
) -> float:
    """Closed-form ELBO, valid right after the state update.

    Rate-learning mode needs ``post_rates`` and ``pred_rates``; known-rate
    mode passes ``known_rates`` and the Gamma KL / expected-rate terms are
    replaced by log Lambda_k and -Lambda_sum.
    """
    M = y.shape[0]
    D = model.D
    if known_rates is not None:
        log_rates = _safe_log(known_rates)
        rate_terms = -float(np.sum(known_rates))
    else:
        log_rates = post_rates.log_geometric_mean()
        rate_terms = -float(np.sum(post_rates.mean)) - kl_gamma_vec(
            post_rates.shape, post_rates.scale, pred_rates.shape, pred_rates.scale
        )
    val = rate_terms + 0.5 * float(kalman.elbo_terms.sum()) - log_factorial(M) - 0.5 * D * M * LOG_2PI
    if M == 0:
        return val
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    val += _xlogy_sum(q, log_rates[None, :]) - _xlogy_sum(q, logq)
    if norms is None:
        norms = measurement_norms(y, model)
    val -= 0.5 * float(np.sum(q[:, 1:] * norms))
    val += (0.5 * D * LOG_2PI - model.log_V) * float(q[:, 0].sum())
    return val


# --------------------------------------------------------------------------
# Algorithm driver


@dataclass
class CaviSettings:
    max_iter: int = 100
    tol: float = 0.01

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("need max_iter >= 1 and tol > 0")


@dataclass
class TrackerState:
    n: int
    beliefs: GaussianBeliefs
    rate_belief: Optional[RateBelief] = None
    rates: Optional[RateVector] = None
    weights: Optional[np.ndarray] = None


@dataclass
class StepDiagnostics:
    iterations: int
    elbo_trace: List[float]
    converged: bool
    duration_s: float
    pseudo_weights: np.ndarray
    elbo_note: str = ""


def _run_cavi(
    state: TrackerState,
    frame: MeasurementFrame,
    transition: TransitionModel,
    model: MeasurementModel,
    settings: CaviSettings,
    learn_rates: bool,
    gamma: float,
) -> Tuple[TrackerState, StepDiagnostics]:
    t0 = time.perf_counter()
    y = frame.y
    pred = predict_states(state.beliefs, transition)
    if learn_rates:
        if state.rate_belief is None:
            raise ValueError("rate learning needs a rate belief")
        pred_rates = predict_rates(state.rate_belief, gamma)
        q = init_associations(y, pred, state.rate_belief.mean, model)
        known = None
    else:
        if state.rates is None:
            raise ValueError("known-rate mode needs a RateVector")
        pred_rates = None
        known = state.rates.values
        q = init_associations(y, pred, known, model)
    norms = measurement_norms(y, model) if y.shape[0] else None
    log_known = _safe_log(known) if known is not None else None

    trace: List[float] = []
    converged = False
    post_rates = None
    post = pred
    for i in range(1, settings.max_iter + 1):
        if learn_rates:
            post_rates = update_rates(pred_rates, q)
        pseudo = pseudo_measurements(y, q, model)
        post, kal = update_states(pred, pseudo, model)
        F = compute_elbo(y, q, kal, model, post_rates=post_rates, pred_rates=pred_rates,
                         known_rates=known, norms=norms)
        trace.append(F)
        if i >= 2 and F - trace[-2] < settings.tol:
            converged = True
            break
        log_rates = post_rates.log_geometric_mean() if learn_rates else log_known
        q = update_associations(y, post, log_rates, model)

    new_state = TrackerState(frame.n, post, post_rates, state.rates, q)
    diag = StepDiagnostics(
        iterations=len(trace),
        elbo_trace=trace,
        converged=converged,
        duration_s=time.perf_counter() - t0,
        pseudo_weights=q.sum(axis=0) if q.shape[0] else np.zeros(model.K + 1),
        elbo_note="" if learn_rates else "known rates: Gamma KL and expected-rate terms replaced by log Lambda and -Lambda_sum",
    )
    return new_state, diag


def tracker_step(
    state: TrackerState,
    frame: MeasurementFrame,
    transition: TransitionModel,
    model: MeasurementModel,
    settings: CaviSettings = CaviSettings(),
    gamma: float = 1.0,
) -> Tuple[TrackerState, StepDiagnostics]:
    """One frame of the rate-learning tracker; ``gamma`` flattens the previous rate posterior."""
    return _run_cavi(state, frame, transition, model, settings, True, gamma)


def known_rate_step(
    state: TrackerState,
    frame: MeasurementFrame,
    transition: TransitionModel,
    model: MeasurementModel,
    settings: CaviSettings = CaviSettings(),
) -> Tuple[TrackerState, StepDiagnostics]:
    """One frame with the Poisson rates fixed to ``state.rates``."""
    return _run_cavi(state, frame, transition, model, settings, False, 1.0)


@dataclass
class VBTracker:
    """Convenience wrapper binding models, settings and a forgetting schedule."""

    transition: TransitionModel
    model: MeasurementModel
    settings: CaviSettings = field(default_factory=CaviSettings)
    learn_rates: bool = False
    forgetting: Callable[[int], float] = field(default_factory=constant_forgetting)

    def initial_state(
        self,
        means: np.ndarray,
        covs: np.ndarray,
        rates: Optional[RateVector] = None,
        rate_prior: Optional[RateBelief] = None,
    ) -> TrackerState:
        return TrackerState(0, GaussianBeliefs(means, covs), rate_prior, rates)

    def step(self, state: TrackerState, frame: MeasurementFrame) -> Tuple[TrackerState, StepDiagnostics]:
        if self.learn_rates:
            return tracker_step(state, frame, self.transition, self.model, self.settings,
                                self.forgetting(frame.n - 1))
        return known_rate_step(state, frame, self.transition, self.model, self.settings)
