"""Seeded Monte-Carlo experiments: configuration, execution and persistence."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cavi import (
    CaviSettings,
    GaussianBeliefs,
    RateBelief,
    TrackerState,
    constant_forgetting,
    decaying_forgetting,
    known_rate_step,
    tracker_step,
)
from .management import ReloSettings, initial_relo_state, relo_step
from .metrics import OspaConfig, ospa, summarize
from .model import ConfigError, MeasurementFrame
from .scenario import (
    GroundTruth,
    ScenarioConfig,
    child_seed,
    generate_frames,
    generate_truth,
    preset_config,
)

MODES = ("vb", "vb-rate-learning", "vb-relo")


@dataclass
class ExperimentConfig:
    preset: Optional[str] = "moderate"
    K: Optional[int] = None
    scenario: Optional[dict] = None  # explicit ScenarioConfig fields; overrides preset
    mode: str = "vb-relo"
    datasets: int = 1
    seed: int = 0
    max_iter: int = 100
    tol: float = 0.01
    c_std: Optional[float] = None  # init covariance C = c_std^2 I
    p_los: Optional[float] = None
    p_reloc: float = 0.5
    gap: float = 1.0
    new_miss_std: float = 200.0
    old_miss_std: float = 700.0
    vel_var: float = 1600.0
    rate_prior_shape: float = 1.0
    rate_prior_scale: float = 5.0
    forgetting: str = "decaying"  # "decaying" or a constant in (0, 1]
    ospa_c: float = 50.0
    ospa_p: float = 1.0
    record_timing: bool = True
    out: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.datasets < 1:
            raise ConfigError("datasets must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.scenario is None and self.preset is None:
            raise ConfigError("give a preset or an explicit scenario")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            CaviSettings(self.max_iter, self.tol)
            OspaConfig(self.ospa_p, self.ospa_c)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.forgetting_schedule()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def forgetting_schedule(self):
        if self.forgetting == "decaying":
            return decaying_forgetting
        try:
            v = float(self.forgetting)
        except ValueError as exc:
            raise ConfigError("forgetting must be 'decaying' or a number in (0, 1]") from exc
        if not 0 < v <= 1:
            raise ConfigError("forgetting must lie in (0, 1]")
        return constant_forgetting(v)

    def scenario_config(self, seed: int) -> ScenarioConfig:
        if self.scenario is not None:
            return ScenarioConfig.from_dict(dict(self.scenario))
        return preset_config(self.preset, self.K, seed)

    def relo_settings(self, scenario: ScenarioConfig) -> ReloSettings:
        heavy = scenario.clutter_density >= 3e-4
        c_std = self.c_std if self.c_std is not None else (20.0 if heavy else 35.0)
        p_los = self.p_los if self.p_los is not None else (5e-4 if heavy else 7e-4)
        return ReloSettings(
            C=c_std**2 * np.eye(2), p_los=p_los, p_reloc=self.p_reloc, gap=self.gap,
            new_miss_std=self.new_miss_std, old_miss_std=self.old_miss_std, vel_var=self.vel_var,
            cavi=CaviSettings(self.max_iter, self.tol),
        )


@dataclass
class DatasetResult:
    index: int
    seed: int
    ospa: List[float] = field(default_factory=list)
    cpu_ms: List[float] = field(default_factory=list)
    n_lost: List[int] = field(default_factory=list)
    n_relocated: List[int] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    elbo_traces: List[List[float]] = field(default_factory=list)
    events: List[Tuple[int, str, int]] = field(default_factory=list)
    final_means: Optional[np.ndarray] = None
    final_rates: Optional[np.ndarray] = None
    error: Optional[str] = None


def run_tracker(
    config: ExperimentConfig,
    scenario: ScenarioConfig,
    truth: GroundTruth,
    frames: Sequence[MeasurementFrame],
    result: DatasetResult,
) -> DatasetResult:
    """Run the configured tracker over ``frames`` and fill ``result`` in place."""
    trans, meas = scenario.transition(), scenario.measurement_model()
    K = scenario.K
    means0 = truth.states[0]
    covs0 = np.repeat(scenario.initial_covariance()[None], K, 0)
    cavi = CaviSettings(config.max_iter, config.tol)
    ocfg = OspaConfig(config.ospa_p, config.ospa_c)
    mode = config.mode
    if mode == "vb-relo":
        settings = config.relo_settings(scenario)
        state = initial_relo_state(means0, covs0, scenario.rates, settings)
    elif mode == "vb":
        state = TrackerState(0, GaussianBeliefs(means0, covs0), None, scenario.rates)
    else:
        prior = RateBelief(np.full(K + 1, config.rate_prior_shape), np.full(K + 1, config.rate_prior_scale))
        state = TrackerState(0, GaussianBeliefs(means0, covs0), prior, None)
        schedule = config.forgetting_schedule()
    for frame in frames:
        t0 = time.perf_counter()
        if mode == "vb-relo":
            state, d = relo_step(state, frame, trans, meas, settings)
            beliefs = state.tracker.beliefs
            step_diag = d.step
            result.n_lost.append(d.n_lost)
            result.n_relocated.append(d.n_relocated)
            result.events += [(frame.n, "lost", k) for k in d.lost]
            result.events += [(frame.n, "relocated", k) for k in d.relocated]
        elif mode == "vb":
            state, step_diag = known_rate_step(state, frame, trans, meas, cavi)
            beliefs = state.beliefs
            result.n_lost.append(0)
            result.n_relocated.append(0)
        else:
            state, step_diag = tracker_step(state, frame, trans, meas, cavi, schedule(frame.n - 1))
            beliefs = state.beliefs
            result.n_lost.append(0)
            result.n_relocated.append(0)
        elapsed = (time.perf_counter() - t0) * 1e3
        result.cpu_ms.append(elapsed if config.record_timing else float("nan"))
        result.ospa.append(ospa(truth.positions(frame.n), beliefs.means[:, [0, 2]], ocfg))
        result.iterations.append(step_diag.iterations)
        result.elbo_traces.append(list(step_diag.elbo_trace))
    result.final_means = beliefs.means.copy()
    if mode == "vb-rate-learning":
        result.final_rates = state.rate_belief.mean.copy()
    return result


def run_dataset(config: ExperimentConfig, index: int) -> DatasetResult:
    seed = child_seed(config.seed, index)
    result = DatasetResult(index, seed)
    try:
        scenario = config.scenario_config(seed)
        truth = generate_truth(scenario, seed)
        frames = generate_frames(truth, scenario, seed)
        run_tracker(config, scenario, truth, frames, result)
    except ConfigError:
        raise
    except Exception:  # isolate a failing dataset, keep the rest of the run
        result.error = traceback.format_exc()
    return result


def _run_one(args):
    config, index = args
    return run_dataset(config, index)


def run_datasets(config: ExperimentConfig) -> List[DatasetResult]:
    jobs = [(config, d) for d in range(config.datasets)]
    if config.threads == 1 or config.datasets == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(_run_one, jobs))


def _fmt(v: float) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_results(out: Path, config: ExperimentConfig, results: Sequence[DatasetResult]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    ok = [r for r in results if r.error is None]
    failed = [{"dataset": r.index, "error": r.error} for r in results if r.error is not None]
    with open(out / "ospa.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "step", "ospa", "cpu_ms"])
        for r in ok:
            for n, (o, c) in enumerate(zip(r.ospa, r.cpu_ms), start=1):
                w.writerow([r.index, n, _fmt(o), _fmt(c)])
    for r in ok:
        with open(out / f"dataset_{r.index:04d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "step", "ospa", "cpu_ms", "n_lost", "n_relocated", "iterations", "final_elbo"])
            for n in range(len(r.ospa)):
                w.writerow([r.index, n + 1, _fmt(r.ospa[n]), _fmt(r.cpu_ms[n]), r.n_lost[n],
                            r.n_relocated[n], r.iterations[n], _fmt(r.elbo_traces[n][-1])])
    with open(out / "elbo_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "step", "iteration", "elbo"])
        for r in ok:
            for n, tr in enumerate(r.elbo_traces, start=1):
                for i, v in enumerate(tr, start=1):
                    w.writerow([r.index, n, i, _fmt(v)])
    with open(out / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "step", "event", "object"])
        for r in ok:
            for n, kind, k in r.events:
                w.writerow([r.index, n, kind, k])
    summary: Dict = {"mode": config.mode, "K": None, "D": len(ok), "ospa_mean": None, "ospa_std": None,
                     "cpu_ms_mean": None, "per_step": [], "failed": failed}
    if ok:
        s = summarize([r.ospa for r in ok], [r.cpu_ms for r in ok])
        summary.update(
            K=len(ok[0].final_means), ospa_mean=s.ospa_mean, ospa_std=s.ospa_std,
            cpu_ms_mean=None if math.isnan(s.cpu_ms_mean) else s.cpu_ms_mean,
            per_step=s.per_step, per_dataset=s.per_dataset,
        )
        with open(out / "per_step_mean.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "ospa_mean"])
            for n, v in enumerate(s.per_step, start=1):
                w.writerow([n, _fmt(v)])
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def run_experiment(config: ExperimentConfig) -> dict:
    """Generate D datasets, track them, persist artefacts and return the summary."""
    results = run_datasets(config)
    if config.out is None:
        ok = [r for r in results if r.error is None]
        s = summarize([r.ospa for r in ok], [r.cpu_ms for r in ok])
        return {"mode": config.mode, "D": len(ok), **s.as_dict(),
                "failed": [r.index for r in results if r.error is not None]}
    return write_results(Path(config.out), config, results)


def read_ospa_csv(path: Path) -> Dict[int, List[float]]:
    out: Dict[int, List[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["dataset"]), []).append(float(row["ospa"]))
    return out
