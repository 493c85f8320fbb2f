"""Multi-initialisation variational localisation and relocation of missed objects.

A missed object h is searched for under a broad prior p~(X_h).  Its
association column is initialised from a lattice of Gaussians N(m_s, C)
covering the prior's 95% region; each initialisation runs its own CAVI
(other objects held fixed) and the candidate with the largest ELBO wins.

Only object h's association column changes during these runs, so every
quantity involving the other components collapses to a per-measurement
constant.  This lets all initialisations run as one batched (S, M)
computation rather than S separate loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import chi2

from .cavi import (
    CaviSettings,
    GaussianBeliefs,
    gaussian_logpdf_matrix,
    kalman_update,
    update_associations,
)
from .model import MeasurementModel, Region
from .numerics import LOG_2PI, GaussianParams


def confidence_radius(prob: float = 0.95, dim: int = 2) -> float:
    """Mahalanobis radius of the central ``prob`` region of a dim-variate normal."""
    return math.sqrt(chi2.ppf(prob, dim))


R95 = confidence_radius(0.95, 2)


# --------------------------------------------------------------------------
# Initialisation grid


@dataclass
class InitGrid:
    centers: np.ndarray  # (N, D)
    C: np.ndarray  # (D, D)
    prior_mean: np.ndarray  # (D,)
    prior_cov: np.ndarray  # (D, D)
    radius: float = R95

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def covered(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies inside at least one init ellipse."""
        L = np.linalg.cholesky(self.C)
        pw = np.linalg.solve(L, np.atleast_2d(points).T).T
        cw = np.linalg.solve(L, self.centers.T).T
        d, _ = cKDTree(cw).query(pw)
        return d <= self.radius * (1 + 1e-9)


def _hex_lattice(half_w: float, half_h: float, spacing: float) -> np.ndarray:
    row_gap = spacing * math.sqrt(3.0) / 2.0
    n_rows = int(math.ceil(half_h / row_gap)) + 1
    n_cols = int(math.ceil(half_w / spacing)) + 2
    pts = []
    for i in range(-n_rows, n_rows + 1):
        off = 0.5 * spacing if i % 2 else 0.0
        for j in range(-n_cols, n_cols + 1):
            pts.append((j * spacing + off, i * row_gap))
    return np.asarray(pts)


def build_init_grid(
    prior_mean: np.ndarray, prior_cov: np.ndarray, C: np.ndarray, prob: float = 0.95
) -> InitGrid:
    """Hexagonal covering of the prior's ``prob`` ellipse by N(m_s, C) ellipses.

    Works in coordinates whitened by C, where every init ellipse is a disc of
    radius r; lattice spacing r*sqrt(3) makes the discs cover the plane.
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_cov = np.asarray(prior_cov, dtype=float)
    C = np.asarray(C, dtype=float)
    if prior_mean.shape != (2,) or C.shape != (2, 2) or prior_cov.shape != (2, 2):
        raise ValueError("the initialisation grid is defined for 2-D positions")
    r = confidence_radius(prob, 2)
    L = np.linalg.cholesky(C)
    Linv = np.linalg.inv(L)
    Pw = Linv @ prior_cov @ Linv.T
    evals = np.linalg.eigvalsh(Pw)
    if evals.max() <= 1.0:
        return InitGrid(prior_mean[None, :].copy(), C, prior_mean, prior_cov, r)
    half = r * np.sqrt(np.diag(Pw)) + r
    lattice = _hex_lattice(half[0], half[1], r * math.sqrt(3.0) * (1 - 1e-12))
    # keep lattice points whose disc reaches the prior ellipse
    Lp = np.linalg.cholesky(Pw)
    inside = np.einsum("ni,ij,nj->n", lattice, np.linalg.inv(Pw), lattice) <= r * r
    t = np.linspace(0.0, 2 * math.pi, 4096, endpoint=False)
    boundary = r * (Lp @ np.stack([np.cos(t), np.sin(t)])).T
    dist, _ = cKDTree(boundary).query(lattice)
    slack = 1e-3 * r
    keep = inside | (dist <= r + slack)
    pts = lattice[keep]
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    centers = (L @ pts[order].T).T + prior_mean
    return InitGrid(centers, C, prior_mean, prior_cov, r)


def filter_eligible_inits(grid: InitGrid, y: np.ndarray, m_init: float) -> np.ndarray:
    """Indices of inits whose ellipse holds at least ``m_init`` measurements."""
    if m_init <= 0:
        return np.arange(grid.size)
    if y.shape[0] == 0:
        return np.zeros(0, dtype=int)
    L = np.linalg.cholesky(grid.C)
    yw = np.linalg.solve(L, y.T).T
    cw = np.linalg.solve(L, grid.centers.T).T
    counts = cKDTree(yw).query_ball_point(cw, grid.radius, return_length=True)
    return np.flatnonzero(np.asarray(counts) >= m_init)


# --------------------------------------------------------------------------
# Relocation prior


def relocation_prior(
    anchor: np.ndarray,
    pos_std: float,
    region: Region,
    vel_var: float = 1600.0,
    prob: float = 0.95,
) -> GaussianParams:
    """Broad prior centred at ``anchor`` whose ``prob`` box is kept inside ``region``.

    Per axis, the interval anchor +- r*std is intersected with the region and
    the prior is recentred on (and rescaled to) the intersection.
    """
    r = confidence_radius(prob, 2)
    lo, hi = region.lo, region.hi
    c = np.clip(np.asarray(anchor, dtype=float), lo, hi)
    a = np.maximum(c - r * pos_std, lo)
    b = np.minimum(c + r * pos_std, hi)
    centre = 0.5 * (a + b)
    std = 0.5 * (b - a) / r
    mean = np.array([centre[0], 0.0, centre[1], 0.0])
    cov = np.diag([std[0] ** 2, vel_var, std[1] ** 2, vel_var])
    return GaussianParams(mean, cov)


# --------------------------------------------------------------------------
# Relocation ELBO


def _expected_loglik_terms(y: np.ndarray, means: np.ndarray, covs: np.ndarray, model: MeasurementModel,
                           R: np.ndarray) -> np.ndarray:
    """E_q log N(y_j; H x_k, R_k) for Gaussian q(x_k); (M, K')."""
    H = model.H
    Rinv = np.linalg.inv(R)
    trace = np.einsum("kij,kji->k", Rinv, H @ covs @ H.T)
    return gaussian_logpdf_matrix(y, means @ H.T, R) - 0.5 * trace[None, :]


def _kl_gauss_batch(means: np.ndarray, covs: np.ndarray, prior: GaussianParams) -> np.ndarray:
    P = prior.cov
    Pinv = np.linalg.inv(P)
    _, ld_p = np.linalg.slogdet(P)
    _, ld_q = np.linalg.slogdet(covs)
    d = means - prior.mean
    tr = np.einsum("ij,bji->b", Pinv, covs)
    quad = np.einsum("bi,ij,bj->b", d, Pinv, d)
    return np.maximum(0.5 * (tr + quad - P.shape[0] + ld_p - ld_q), 0.0)


def reloc_elbo(
    h: int,
    y: np.ndarray,
    q: np.ndarray,
    q_xh: GaussianParams,
    fixed: GaussianBeliefs,
    prior: GaussianParams,
    rates: np.ndarray,
    model: MeasurementModel,
) -> float:
    """E log p(Y|theta,X) - KL(q(theta)||p(theta|M,Lambda)) - KL(q(X_h)||p~(X_h)).

    Objects k != h enter through their fixed beliefs in ``fixed``; entry h of
    ``fixed`` is ignored.  ``h`` is 1-based.
    """
    K = model.K
    M = y.shape[0]
    kl = float(_kl_gauss_batch(q_xh.mean[None], q_xh.cov[None], prior)[0])
    if M == 0:
        return -kl
    means = fixed.means.copy()
    covs = fixed.covs.copy()
    means[h - 1] = q_xh.mean
    covs[h - 1] = q_xh.cov
    e = np.empty((M, K + 1))
    e[:, 0] = -model.log_V
    e[:, 1:] = _expected_loglik_terms(y, means, covs, model, model.R)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lam = np.log(rates)
        log_total = math.log(float(np.sum(rates)))
        terms = q * (log_lam[None, :] + e - np.log(q))
    return float(np.where(q > 0, terms, 0.0).sum() - M * log_total - kl)


# --------------------------------------------------------------------------
# Batched localisation of one object


@dataclass
class LocalisationRun:
    """Converged results for a batch of initialisations."""

    means: np.ndarray  # (S, n)
    covs: np.ndarray  # (S, n, n)
    elbo: np.ndarray  # (S,)
    evidence: np.ndarray  # (S,) sum_j q(theta_j = h)
    q_h: np.ndarray  # (S, M)
    iterations: np.ndarray  # (S,)
    traces: List[List[float]]
    rest_log: np.ndarray  # (M,) log-normaliser of the non-h components after the theta update
    rest_log_init: np.ndarray  # (M,) same at initialisation
    rest_probs: np.ndarray  # (M, K+1) fixed conditional split over k != h (column h zero)
    rest_probs_init: np.ndarray
    updated: np.ndarray  # (S,) True when the final q_h came from a theta update


def _xlogx(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def _rest_components(log_b: np.ndarray, mask_h: int) -> Tuple[np.ndarray, np.ndarray]:
    """Log-normaliser and conditional probabilities over the components k != h."""
    lb = log_b.copy()
    lb[:, mask_h] = -np.inf
    m = lb.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(lb - m)
    tot = w.sum(axis=1, keepdims=True)
    L = (np.log(tot) + m)[:, 0]
    r = w / tot
    return L, r


def localise_batch(
    h: int,
    y: np.ndarray,
    centers: np.ndarray,
    C: np.ndarray,
    fixed: GaussianBeliefs,
    init_beliefs: GaussianBeliefs,
    prior: GaussianParams,
    rates: np.ndarray,
    model: MeasurementModel,
    settings: CaviSettings = CaviSettings(),
) -> LocalisationRun:
    """Run the localisation CAVI for object ``h`` (1-based) from every centre.

    ``fixed`` supplies the other objects' posteriors used in the theta update
    and ELBO; ``init_beliefs`` supplies the (predictive) beliefs used for
    the other objects when initialising the associations.
    """
    K = model.K
    M, D = y.shape
    S = centers.shape[0]
    H = model.H
    Rh = model.R[h - 1]
    with np.errstate(divide="ignore"):
        log_lam = np.log(np.asarray(rates, dtype=float))
    log_total = math.log(float(np.sum(rates)))

    # other components: CAVI-update form (fixed posteriors) and initialisation form
    e_fixed = np.empty((M, K + 1))
    e_fixed[:, 0] = -model.log_V
    e_fixed[:, 1:] = _expected_loglik_terms(y, fixed.means, fixed.covs, model, model.R)
    log_b = log_lam[None, :] + e_fixed
    log_b0 = np.empty((M, K + 1))
    log_b0[:, 0] = log_lam[0] - model.log_V
    pred_cov = H @ init_beliefs.covs @ H.T + model.R
    log_b0[:, 1:] = log_lam[None, 1:] + gaussian_logpdf_matrix(y, init_beliefs.means @ H.T, pred_cov)

    L_rest, r_rest = _rest_components(log_b, h)
    L_rest0, r_rest0 = _rest_components(log_b0, h)
    # sum_k r_k (log Lambda_k + e_k - log r_k) over k != h
    with np.errstate(invalid="ignore"):
        B_upd = np.where(r_rest > 0, r_rest * (log_b), 0.0).sum(axis=1) - _xlogx(r_rest).sum(axis=1)
        B_init = np.where(r_rest0 > 0, r_rest0 * (log_b), 0.0).sum(axis=1) - _xlogx(r_rest0).sum(axis=1)

    # initial association column for h
    lb_h = log_lam[h] + gaussian_logpdf_matrix(y, centers, np.repeat((C + Rh)[None], S, 0)).T  # (S, M)
    qh = np.exp(lb_h - np.logaddexp(L_rest0[None, :], lb_h))
    use_init = np.ones(S, dtype=bool)

    n = prior.mean.size
    means = np.repeat(prior.mean[None], S, 0)
    covs = np.repeat(prior.cov[None], S, 0)
    elbo = np.full(S, -np.inf)
    iters = np.zeros(S, dtype=int)
    active = np.ones(S, dtype=bool)
    traces: List[List[float]] = [[] for _ in range(S)]
    Rinv = np.linalg.inv(Rh)
    _, ld_R = np.linalg.slogdet(Rh)

    for i in range(1, settings.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        qa = qh[idx]
        W = qa.sum(axis=1)
        s = qa @ y
        mu, Sg, _, _, _ = kalman_update(
            np.repeat(prior.mean[None], idx.size, 0),
            np.repeat(prior.cov[None], idx.size, 0),
            H, np.repeat(Rh[None], idx.size, 0), W, s,
        )
        means[idx], covs[idx] = mu, Sg
        # expected log-likelihood of each measurement under q(X_h)
        diff = y[None, :, :] - (mu @ H.T)[:, None, :]
        quad = np.einsum("smd,de,sme->sm", diff, Rinv, diff)
        tr = np.einsum("de,sed->s", Rinv, H @ Sg @ H.T)
        e_h = -0.5 * (quad + tr[:, None] + ld_R + D * LOG_2PI)
        B = np.where(use_init[idx, None], B_init[None, :], B_upd[None, :])
        one_m = 1.0 - qa
        F = ((one_m * B - _xlogx(one_m)) + (qa * (log_lam[h] + e_h) - _xlogx(qa))).sum(axis=1)
        F = F - M * log_total - _kl_gauss_batch(mu, Sg, prior)
        prev = elbo[idx]
        elbo[idx] = F
        iters[idx] = i
        for a, v in zip(idx, F):
            traces[a].append(float(v))
        done = (i >= 2) & (F - prev < settings.tol)
        active[idx[done]] = False
        upd = idx[~done]
        if upd.size == 0:
            break
        lb = log_lam[h] + e_h[~done]
        qh[upd] = np.exp(lb - np.logaddexp(L_rest[None, :], lb))
        use_init[upd] = False

    evidence = qh.sum(axis=1)
    return LocalisationRun(means, covs, elbo, evidence, qh, iters, traces,
                           L_rest, L_rest0, r_rest, r_rest0, ~use_init)


def full_weights(run: LocalisationRun, s: int, h: int) -> np.ndarray:
    """Reassemble the (M, K+1) association matrix of initialisation ``s``."""
    qh = run.q_h[s]
    r = run.rest_probs if run.updated[s] else run.rest_probs_init
    q = r * (1.0 - qh)[:, None]
    q[:, h] = qh
    return q


def localise_single(
    h: int,
    y: np.ndarray,
    fixed: GaussianBeliefs,
    init_beliefs: GaussianBeliefs,
    prior: GaussianParams,
    rates: np.ndarray,
    model: MeasurementModel,
    m_s: np.ndarray,
    C: np.ndarray,
    settings: CaviSettings = CaviSettings(),
) -> Tuple[GaussianParams, np.ndarray, float, List[float]]:
    """Localise object h from a single initialisation centre ``m_s``.

    Returns (q(X_h), association weights, final ELBO, ELBO trace).
    """
    run = localise_batch(h, y, np.atleast_2d(m_s), C, fixed, init_beliefs, prior, rates, model, settings)
    g = GaussianParams(run.means[0], run.covs[0])
    return g, full_weights(run, 0, h), float(run.elbo[0]), run.traces[0]


# --------------------------------------------------------------------------
# Relocation of all missed objects


@dataclass
class RelocationOutcome:
    h: int
    elbos: np.ndarray  # (N,) -inf for ineligible inits
    winner: int  # -1 when nothing was eligible
    gaussian: Optional[GaussianParams]
    evidence: float
    accepted: bool
    grid: Optional[InitGrid] = None
    eligible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class RelocationResult:
    beliefs: GaussianBeliefs
    weights: np.ndarray
    relocated: List[int]
    outcomes: Dict[int, RelocationOutcome]


def select_winner(elbos: np.ndarray) -> int:
    """Index of the largest ELBO, lowest index on ties; -1 if none is finite."""
    if elbos.size == 0 or not np.any(np.isfinite(elbos)):
        return -1
    return int(np.argmax(elbos))


def relocate_object(
    h: int,
    y: np.ndarray,
    fixed: GaussianBeliefs,
    init_beliefs: GaussianBeliefs,
    prior: GaussianParams,
    rates: np.ndarray,
    model: MeasurementModel,
    C: np.ndarray,
    m_init: float,
    m_reloc: float,
    settings: CaviSettings = CaviSettings(),
) -> RelocationOutcome:
    H = model.H
    grid = build_init_grid(H @ prior.mean, H @ prior.cov @ H.T, C)
    eligible = filter_eligible_inits(grid, y, m_init)
    elbos = np.full(grid.size, -np.inf)
    if eligible.size == 0:
        return RelocationOutcome(h, elbos, -1, None, 0.0, False, grid, eligible)
    run = localise_batch(h, y, grid.centers[eligible], C, fixed, init_beliefs, prior, rates, model, settings)
    elbos[eligible] = run.elbo
    w = select_winner(elbos)
    s = int(np.searchsorted(eligible, w))
    g = GaussianParams(run.means[s], run.covs[s])
    evidence = float(run.evidence[s])
    return RelocationOutcome(h, elbos, w, g, evidence, evidence >= m_reloc, grid, eligible)


def relocate_all(
    missed: Sequence[int],
    y: np.ndarray,
    posterior: GaussianBeliefs,
    predictive: GaussianBeliefs,
    rates: np.ndarray,
    m_init: np.ndarray,
    m_reloc: np.ndarray,
    prior_builder: Callable[[int], GaussianParams],
    model: MeasurementModel,
    C: np.ndarray,
    settings: CaviSettings = CaviSettings(),
) -> RelocationResult:
    """Relocate each missed object (1-based indices) in index order.

    Beliefs are updated as soon as an object is handled, so later searches
    see earlier recoveries.  Objects whose beliefs were rewritten in this
    call also use the rewritten belief when initialising associations.
    """
    beliefs = posterior.copy()
    init_beliefs = predictive.copy()
    relocated: List[int] = []
    outcomes: Dict[int, RelocationOutcome] = {}
    for h in sorted(missed):
        prior = prior_builder(h)
        out = relocate_object(h, y, beliefs, init_beliefs, prior, rates, model, C,
                              float(m_init[h - 1]), float(m_reloc[h - 1]), settings)
        outcomes[h] = out
        chosen = out.gaussian if out.accepted else prior
        beliefs.set(h - 1, chosen)
        init_beliefs.set(h - 1, chosen)
        if out.accepted:
            relocated.append(h)
    with np.errstate(divide="ignore"):
        log_lam = np.log(np.asarray(rates, dtype=float))
    weights = update_associations(y, beliefs, log_lam, model)
    return RelocationResult(beliefs, weights, relocated, outcomes)
