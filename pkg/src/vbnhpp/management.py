"""Track-loss detection, automatic thresholds and the relocating tracker.

An object is declared lost when the association mass it collected over its
last tau_k frames is implausibly small for a Poisson(Lambda_k) emitter.
Lost objects are searched for with the multi-initialisation localiser and
re-admitted when the winning candidate carries enough evidence.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Set, Tuple

import numpy as np

from .cavi import (
    CaviSettings,
    GaussianBeliefs,
    StepDiagnostics,
    TrackerState,
    known_rate_step,
    predict_states,
)
from .localisation import RelocationOutcome, relocate_all, relocation_prior
from .model import MeasurementFrame, MeasurementModel, RateVector, TransitionModel
from .numerics import poisson_cdf_tools


# --------------------------------------------------------------------------
# Thresholds


def select_loss_params(lam: float, p_los: float) -> Tuple[int, float]:
    """Window tau (minimal with exp(-tau*lam) <= p_los) and loss threshold M_los."""
    if lam <= 0 or not 0 < p_los < 1:
        raise ValueError("need lam > 0 and p_los in (0, 1)")
    tau = max(1, int(math.ceil(math.log(1.0 / p_los) / lam)))
    while math.exp(-tau * lam) > p_los:  # guard against rounding in the ceil
        tau += 1
    cdf = poisson_cdf_tools(tau * lam)
    m_los = 0.0 if p_los <= cdf.values[0] else cdf.invert(p_los)
    return tau, m_los


def select_reloc_thresholds(lam: float, p_reloc: float, gap: float = 1.0) -> Tuple[float, float]:
    """(M_reloc, M_init): P(count > M_reloc) = p_reloc, and M_init = max(0, M_reloc - gap)."""
    if lam <= 0 or not 0 < p_reloc < 1:
        raise ValueError("need lam > 0 and p_reloc in (0, 1)")
    if gap <= 0:
        raise ValueError("gap must be positive so that M_init < M_reloc")
    cdf = poisson_cdf_tools(lam)
    target = 1.0 - p_reloc
    m_reloc = 0.0 if target <= cdf.values[0] else cdf.invert(target)
    return m_reloc, max(0.0, m_reloc - gap)


@dataclass
class LossDetectorConfig:
    tau: np.ndarray  # (K,) ints
    m_los: np.ndarray
    m_reloc: np.ndarray
    m_init: np.ndarray
    p_los: float
    p_reloc: float
    gap: float = 1.0

    @classmethod
    def from_rates(cls, object_rates, p_los: float = 7e-4, p_reloc: float = 0.5, gap: float = 1.0) -> "LossDetectorConfig":
        taus, los, rel, ini = [], [], [], []
        for lam in np.asarray(object_rates, dtype=float):
            t, m = select_loss_params(lam, p_los)
            r, i = select_reloc_thresholds(lam, p_reloc, gap)
            taus.append(t), los.append(m), rel.append(r), ini.append(i)
        return cls(np.array(taus, dtype=int), np.array(los), np.array(rel), np.array(ini), p_los, p_reloc, gap)


# --------------------------------------------------------------------------
# Health bookkeeping


def estimate_counts(weights: np.ndarray) -> np.ndarray:
    """M-hat_k = sum_j q(theta_j = k) for k = 1..K."""
    return weights[:, 1:].sum(axis=0)


@dataclass
class TrackHealth:
    history: List[Deque[float]]
    tracked: Set[int]
    missed: Set[int]

    @classmethod
    def seeded(cls, config: LossDetectorConfig, object_rates) -> "TrackHealth":
        rates = np.asarray(object_rates, dtype=float)
        hist = [deque([float(r)] * (int(t) - 1), maxlen=int(t)) for r, t in zip(rates, config.tau)]
        K = len(hist)
        return cls(hist, set(range(1, K + 1)), set())

    def check(self) -> None:
        K = len(self.history)
        if self.tracked | self.missed != set(range(1, K + 1)) or self.tracked & self.missed:
            raise AssertionError("tracked and missed sets must partition the objects")


def window_sum(buf: Deque[float]) -> float:
    return float(sum(buf))


def detect_loss(health: TrackHealth, config: LossDetectorConfig) -> Set[int]:
    """Tracked objects whose full window sums to at most M_los (inclusive)."""
    lost = set()
    for k in sorted(health.tracked):
        buf = health.history[k - 1]
        if len(buf) == config.tau[k - 1] and window_sum(buf) <= config.m_los[k - 1]:
            lost.add(k)
    return lost


def backfill(buf: Deque[float], lam: float, current: float) -> None:
    """Reset a freshly relocated object's window to (Lambda, ..., Lambda, current)."""
    buf.clear()
    buf.extend([lam] * (buf.maxlen - 1))
    buf.append(current)


# --------------------------------------------------------------------------
# Relocating tracker


@dataclass
class ReloSettings:
    C: np.ndarray = field(default_factory=lambda: 35.0**2 * np.eye(2))
    p_los: float = 7e-4
    p_reloc: float = 0.5
    gap: float = 1.0
    new_miss_std: float = 200.0
    old_miss_std: float = 700.0
    vel_var: float = 1600.0
    cavi: CaviSettings = field(default_factory=CaviSettings)


@dataclass
class ReloState:
    tracker: TrackerState
    health: TrackHealth
    config: LossDetectorConfig
    anchors: np.ndarray  # (K, 2) positions the relocation priors are centred on
    recent: List[Deque[np.ndarray]]  # recent posterior positions per object


@dataclass
class ReloDiagnostics:
    step: StepDiagnostics
    lost: List[int]
    missed: List[int]
    relocated: List[int]
    pre_relocation: GaussianBeliefs
    post_relocation: GaussianBeliefs
    outcomes: Dict[int, RelocationOutcome] = field(default_factory=dict)

    @property
    def n_lost(self) -> int:
        return len(self.missed)

    @property
    def n_relocated(self) -> int:
        return len(self.relocated)


def initial_relo_state(
    means: np.ndarray, covs: np.ndarray, rates: RateVector, settings: ReloSettings
) -> ReloState:
    config = LossDetectorConfig.from_rates(rates.values[1:], settings.p_los, settings.p_reloc, settings.gap)
    health = TrackHealth.seeded(config, rates.values[1:])
    tracker = TrackerState(0, GaussianBeliefs(means, covs), None, rates)
    pos = np.asarray(means)[:, [0, 2]]
    depth = int(config.tau.max()) + 1
    recent = [deque([p.copy()], maxlen=depth) for p in pos]
    return ReloState(tracker, health, config, pos.copy(), recent)


def relo_step(
    state: ReloState,
    frame: MeasurementFrame,
    transition: TransitionModel,
    model: MeasurementModel,
    settings: ReloSettings = ReloSettings(),
) -> Tuple[ReloState, ReloDiagnostics]:
    """Known-rate tracking step followed by loss detection and relocation."""
    y = frame.y
    rates = state.tracker.rates.values
    predictive = predict_states(state.tracker.beliefs, transition)
    tracker, diag = known_rate_step(state.tracker, frame, transition, model, settings.cavi)
    health = state.health
    cfg = state.config
    counts = estimate_counts(tracker.weights) if y.shape[0] else np.zeros(model.K)
    for k in health.tracked:
        health.history[k - 1].append(float(counts[k - 1]))
    lost = detect_loss(health, cfg)
    previously_missed = set(health.missed)
    missed = previously_missed | lost
    anchors = state.anchors.copy()
    for h in lost:
        # last position before the low-count window began
        past = state.recent[h - 1]
        anchors[h - 1] = past[max(0, len(past) - int(cfg.tau[h - 1]))]
    pre = tracker.beliefs.copy()
    relocated: List[int] = []
    outcomes: Dict[int, RelocationOutcome] = {}
    if missed:

        def prior_builder(h: int):
            std = settings.old_miss_std if h in previously_missed else settings.new_miss_std
            return relocation_prior(anchors[h - 1], std, model.region, settings.vel_var)

        res = relocate_all(sorted(missed), y, tracker.beliefs, predictive, rates,
                           cfg.m_init, cfg.m_reloc, prior_builder, model, settings.C, settings.cavi)
        relocated = res.relocated
        outcomes = res.outcomes
        tracker = TrackerState(tracker.n, res.beliefs, None, tracker.rates, res.weights)
        refined = estimate_counts(res.weights) if y.shape[0] else np.zeros(model.K)
        for k in health.tracked - lost:
            health.history[k - 1][-1] = float(refined[k - 1])
        for k in relocated:
            backfill(health.history[k - 1], float(rates[k]), float(refined[k - 1]))
    health.tracked = (health.tracked - lost) | set(relocated)
    health.missed = missed - set(relocated)
    health.check()
    pos = tracker.beliefs.means[:, [0, 2]]
    for k in health.tracked:
        state.recent[k - 1].append(pos[k - 1].copy())
        anchors[k - 1] = pos[k - 1]
    new_state = ReloState(tracker, health, cfg, anchors, state.recent)
    return new_state, ReloDiagnostics(diag, sorted(lost), sorted(missed), relocated, pre,
                                      tracker.beliefs, outcomes)
