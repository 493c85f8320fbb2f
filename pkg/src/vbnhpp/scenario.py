"""Seeded synthetic scenarios: ground-truth trajectories and NHPP frames."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .model import (
    ConfigError,
    MeasurementFrame,
    MeasurementModel,
    RateVector,
    Region,
    TransitionModel,
    position_selector,
)

# Average clutter rates of the moderate-clutter family, keyed by object count.
MODERATE_CLUTTER_RATES = {5: 775.0, 10: 1175.0, 20: 1761.0, 30: 1967.0, 50: 2521.0}
COALESCENCE_CLUTTER_RATES = {8: 3038.0, 20: 6916.0}
RATE_ESTIMATION_CLUTTER_RATE = 5240.0

PRESETS = ("moderate", "coalescence", "rate_estimation")


@dataclass
class ScenarioConfig:
    K: int
    steps: int = 50
    tau: float = 1.0
    initial_radius: float = 750.0
    initial_speed: float = 30.0
    heading: str = "inward"  # "inward" or "outward"
    angle_law: str = "random"  # "random" (uniform i.i.d.) or "equal" (equally spaced)
    object_rates: List[float] = field(default_factory=list)
    clutter_density: float = 1e-4
    clutter_rate: float = 775.0
    r_scale: float = 100.0
    q_scale: float = 25.0
    init_pos_var: float = 25.0
    init_vel_var: float = 4.0

    def __post_init__(self):
        if not self.object_rates:
            self.object_rates = [5.0] * self.K
        self.object_rates = [float(v) for v in self.object_rates]
        self.validate()

    def validate(self) -> None:
        if self.K < 1 or self.steps < 1:
            raise ConfigError("K and steps must be positive")
        if len(self.object_rates) != self.K:
            raise ConfigError("object_rates must have K entries")
        if self.tau <= 0 or self.clutter_density <= 0 or self.clutter_rate < 0:
            raise ConfigError("tau and clutter density must be positive, clutter rate non-negative")
        if min(self.object_rates) < 0 or self.r_scale <= 0 or self.q_scale < 0:
            raise ConfigError("rates, R and Q scales must be non-negative")
        if self.heading not in ("inward", "outward"):
            raise ConfigError(f"unknown heading {self.heading!r}")
        if self.angle_law not in ("random", "equal"):
            raise ConfigError(f"unknown angle law {self.angle_law!r}")

    @property
    def region_side(self) -> float:
        return math.sqrt(self.clutter_rate / self.clutter_density) if self.clutter_rate > 0 else 1.0 / math.sqrt(self.clutter_density)

    @property
    def rates(self) -> RateVector:
        return RateVector(np.array([self.clutter_rate] + list(self.object_rates)))

    def transition(self) -> TransitionModel:
        return TransitionModel.constant_velocity(self.K, self.tau, self.q_scale)

    def measurement_model(self) -> MeasurementModel:
        R = np.repeat(self.r_scale * np.eye(2)[None], self.K, 0)
        return MeasurementModel(position_selector(2), R, Region.square(self.region_side))

    def initial_covariance(self) -> np.ndarray:
        return np.diag([self.init_pos_var, self.init_vel_var, self.init_pos_var, self.init_vel_var])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        if "K" not in d:
            raise ConfigError("scenario needs K")
        return cls(**d)


@dataclass
class GroundTruth:
    states: np.ndarray  # (steps + 1, K, 4); row 0 is the initial state
    labels: List[np.ndarray] = field(default_factory=list)  # per frame, origin of each measurement

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def positions(self, n: int) -> np.ndarray:
        return self.states[n][:, [0, 2]]


def child_seed(base_seed: int, index: int) -> int:
    """Stable 64-bit seed for dataset ``index`` (SeedSequence entropy mixing)."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return v * np.sqrt(np.clip(w, 0.0, None))


def generate_truth(config: ScenarioConfig, seed: int) -> GroundTruth:
    rng = _rng(seed, 0)
    K = config.K
    if config.angle_law == "random":
        angles = rng.uniform(0.0, 2.0 * math.pi, size=K)
    else:
        angles = 2.0 * math.pi * np.arange(K) / K
    sign = -1.0 if config.heading == "inward" else 1.0
    c, s = np.cos(angles), np.sin(angles)
    x0 = np.stack(
        [
            config.initial_radius * c,
            sign * config.initial_speed * c,
            config.initial_radius * s,
            sign * config.initial_speed * s,
        ],
        axis=1,
    )
    trans = config.transition()
    states = np.empty((config.steps + 1, K, 4))
    states[0] = x0
    roots = np.stack([_psd_sqrt(q) for q in trans.Q])
    for n in range(1, config.steps + 1):
        noise = np.einsum("kij,kj->ki", roots, rng.standard_normal((K, 4)))
        states[n] = np.einsum("kij,kj->ki", trans.F, states[n - 1]) + trans.B + noise
    return GroundTruth(states)


def generate_frames(truth: GroundTruth, config: ScenarioConfig, seed: int) -> List[MeasurementFrame]:
    rng = _rng(seed, 1)
    meas = config.measurement_model()
    region = meas.region
    lam = config.rates.values
    roots = np.stack([_psd_sqrt(r) for r in meas.R])
    frames: List[MeasurementFrame] = []
    truth.labels = []
    for n in range(1, truth.steps + 1):
        parts, labels = [], []
        for k in range(config.K):
            m = rng.poisson(lam[k + 1])
            centre = meas.H @ truth.states[n, k]
            parts.append(centre + rng.standard_normal((m, 2)) @ roots[k].T)
            labels.append(np.full(m, k + 1))
        m0 = rng.poisson(lam[0])
        parts.append(rng.uniform(region.lo, region.hi, size=(m0, 2)))
        labels.append(np.zeros(m0, dtype=int))
        y = np.concatenate(parts, axis=0)
        lab = np.concatenate(labels).astype(int)
        perm = rng.permutation(y.shape[0])
        frames.append(MeasurementFrame(n, y[perm]))
        truth.labels.append(lab[perm])
    return frames


def preset_config(name: str, K: Optional[int] = None, seed: int = 0) -> ScenarioConfig:
    if name == "moderate":
        K = 5 if K is None else K
        if K not in MODERATE_CLUTTER_RATES:
            raise ConfigError(f"moderate preset defined for K in {sorted(MODERATE_CLUTTER_RATES)}")
        return ScenarioConfig(K=K, steps=50, initial_speed=30.0, angle_law="random",
                              object_rates=[5.0] * K, clutter_density=1e-4,
                              clutter_rate=MODERATE_CLUTTER_RATES[K])
    if name == "coalescence":
        K = 8 if K is None else K
        if K not in COALESCENCE_CLUTTER_RATES:
            raise ConfigError("coalescence preset defined for K in {8, 20}")
        return ScenarioConfig(K=K, steps=50, initial_speed=50.0, angle_law="equal",
                              object_rates=[6.0] * K, clutter_density=3e-4,
                              clutter_rate=COALESCENCE_CLUTTER_RATES[K])
    if name == "rate_estimation":
        if K not in (None, 10):
            raise ConfigError("rate_estimation preset has K = 10")
        rng = _rng(seed, 2)
        rates = rng.uniform(1.5, 10.0, size=10)
        return ScenarioConfig(K=10, steps=200, initial_radius=100.0, initial_speed=30.0,
                              heading="outward", angle_law="equal", object_rates=list(rates),
                              clutter_density=1e-5, clutter_rate=RATE_ESTIMATION_CLUTTER_RATE)
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def preset(name: str, K: Optional[int] = None, seed: int = 0) -> Tuple[ScenarioConfig, GroundTruth, List[MeasurementFrame]]:
    config = preset_config(name, K, seed)
    truth = generate_truth(config, seed)
    frames = generate_frames(truth, config, seed)
    return config, truth, frames


# --------------------------------------------------------------------------
# Serialisation


def write_truth(path: Path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "k", "x", "vx", "y", "vy"])
        for n in range(truth.states.shape[0]):
            for k in range(truth.states.shape[1]):
                w.writerow([n, k + 1] + [repr(float(v)) for v in truth.states[n, k]])


def read_truth(path: Path) -> GroundTruth:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["n"]), int(r["k"]), [float(r[c]) for c in ("x", "vx", "y", "vy")]))
    N = max(r[0] for r in rows) + 1
    K = max(r[1] for r in rows)
    states = np.empty((N, K, 4))
    for n, k, v in rows:
        states[n, k - 1] = v
    return GroundTruth(states)


# --------------------------------------------------------------------------
# Single-object localisation demo


@dataclass
class LocalisationDemo:
    frame: MeasurementFrame
    truth_position: np.ndarray
    prior_mean: np.ndarray  # full 4-d state
    prior_cov: np.ndarray
    rates: RateVector
    model: MeasurementModel


DEMO_PRIOR_STD = 300.0


def localisation_demo(
    seed: int,
    object_rate: float = 4.0,
    clutter_density: float = 1e-4,
    prior_std: float = DEMO_PRIOR_STD,
    r_scale: float = 100.0,
    offset_fraction: float = 0.5,
) -> LocalisationDemo:
    """One object at the origin under a broad positional prior.

    The prior mean is displaced uniformly within ``offset_fraction`` of the
    prior's 95% radius; clutter fills the square circumscribing that circle.
    """
    rng = _rng(seed, 3)
    r95 = prior_std * math.sqrt(-2.0 * math.log(0.05))
    ang = rng.uniform(0, 2 * math.pi)
    rad = offset_fraction * r95 * math.sqrt(rng.uniform())
    centre = np.array([rad * math.cos(ang), rad * math.sin(ang)])
    region = Region(centre - r95, centre + r95)
    lam0 = clutter_density * region.volume
    model = MeasurementModel(position_selector(2), r_scale * np.eye(2)[None], region)
    truth = np.zeros(2)
    m1 = rng.poisson(object_rate)
    y1 = truth + math.sqrt(r_scale) * rng.standard_normal((m1, 2))
    y0 = rng.uniform(region.lo, region.hi, size=(rng.poisson(lam0), 2))
    y = np.concatenate([y1, y0])
    y = y[rng.permutation(y.shape[0])]
    prior_mean = np.array([centre[0], 0.0, centre[1], 0.0])
    prior_cov = np.diag([prior_std**2, 1600.0, prior_std**2, 1600.0])
    return LocalisationDemo(MeasurementFrame(1, y), truth, prior_mean, prior_cov,
                            RateVector(np.array([lam0, object_rate])), model)
