"""Command-line entry point: simulate, track, experiment, relocate-demo, params."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .cavi import GaussianBeliefs
from .experiment import MODES, DatasetResult, ExperimentConfig, run_experiment, run_tracker
from .localisation import build_init_grid, filter_eligible_inits, localise_batch, select_winner
from .management import select_loss_params, select_reloc_thresholds
from .model import ConfigError, read_frames, write_frames
from .numerics import DomainError, GaussianParams
from .scenario import (
    PRESETS,
    DEMO_PRIOR_STD,
    ScenarioConfig,
    generate_frames,
    generate_truth,
    localisation_demo,
    preset_config,
    read_truth,
    write_truth,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


def _add_common(p: argparse.ArgumentParser, *, mode: bool = False, threads: bool = False) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    if mode:
        p.add_argument("--mode", choices=MODES)
    if threads:
        p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vbnhpp", description="Variational NHPP multi-object tracking experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate one dataset (frames, truth, scenario)")
    _add_common(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--k", type=int)

    p = sub.add_parser("track", help="run one tracker over a simulated dataset directory")
    _add_common(p, mode=True)
    p.add_argument("data", help="directory written by `simulate`")

    p = sub.add_parser("experiment", help="seeded Monte-Carlo experiment from a JSON config")
    _add_common(p, mode=True, threads=True)

    p = sub.add_parser("relocate-demo", help="single-object multi-initialisation localisation dump")
    _add_common(p)
    p.add_argument("--object-rate", type=float, default=4.0)
    p.add_argument("--clutter-density", type=float, default=1e-4)
    p.add_argument("--prior-std", type=float, default=DEMO_PRIOR_STD)
    p.add_argument("--c-std", type=float, default=35.0)
    p.add_argument("--m-init", type=float, default=0.0)

    p = sub.add_parser("params", help="automatic loss/relocation thresholds as JSON")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--p-los", type=float, required=True)
    p.add_argument("--p-reloc", type=float, required=True)
    p.add_argument("--gap", type=float, default=1.0)
    p.add_argument("--out", help="optional JSON output file")
    return parser


# --------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.pop("seed", 0))
    cfg.pop("seed", None)
    if args.preset is not None:
        scenario = preset_config(args.preset, args.k, seed)
    elif cfg:
        scenario = ScenarioConfig.from_dict(cfg)
    else:
        raise ConfigError("simulate needs --preset or --config")
    if args.out is None:
        raise ConfigError("simulate needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = generate_truth(scenario, seed)
    frames = generate_frames(truth, scenario, seed)
    write_frames(out / "frames.jsonl", frames)
    write_truth(out / "truth.csv", truth)
    with open(out / "scenario.json", "w") as fh:
        json.dump({"seed": seed, "scenario": scenario.to_dict()}, fh, indent=2)
    return 0


def cmd_track(args) -> int:
    data = Path(args.data)
    try:
        with open(data / "scenario.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {data / 'scenario.json'}: {exc}") from exc
    scenario = ScenarioConfig.from_dict(meta["scenario"])
    overrides = _load_json(args.config)
    overrides.update(scenario=scenario.to_dict(), preset=None, datasets=1, out=None)
    if args.mode:
        overrides["mode"] = args.mode
    config = ExperimentConfig.from_dict(overrides)
    truth = read_truth(data / "truth.csv")
    frames = read_frames(data / "frames.jsonl")
    result = run_tracker(config, scenario, truth, frames, DatasetResult(0, int(meta.get("seed", 0))))
    out = Path(args.out) if args.out else data
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"track_{config.mode}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "ospa", "cpu_ms", "n_lost", "n_relocated"])
        for n in range(len(result.ospa)):
            w.writerow([frames[n].n, repr(result.ospa[n]), repr(result.cpu_ms[n]),
                        result.n_lost[n], result.n_relocated[n]])
    print(json.dumps({"mode": config.mode, "ospa_mean": float(np.mean(result.ospa)),
                      "cpu_ms_mean": float(np.mean(result.cpu_ms))}))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_json(args.config)
    for key in ("seed", "out", "mode", "threads"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    config = ExperimentConfig.from_dict(cfg)
    summary = run_experiment(config)
    keys = ("mode", "K", "D", "ospa_mean", "ospa_std", "cpu_ms_mean", "failed")
    print(json.dumps({k: summary.get(k) for k in keys}))
    return 0


def cmd_relocate_demo(args) -> int:
    if args.out is None:
        raise ConfigError("relocate-demo needs --out")
    seed = args.seed if args.seed is not None else 0
    demo = localisation_demo(seed, object_rate=args.object_rate, clutter_density=args.clutter_density,
                             prior_std=args.prior_std)
    H, y = demo.model.H, demo.frame.y
    prior = GaussianParams(demo.prior_mean, demo.prior_cov)
    C = args.c_std**2 * np.eye(2)
    grid = build_init_grid(H @ prior.mean, H @ prior.cov @ H.T, C)
    eligible = filter_eligible_inits(grid, y, args.m_init)
    bel = GaussianBeliefs(demo.prior_mean[None], demo.prior_cov[None])
    t0 = time.perf_counter()
    run = localise_batch(1, y, grid.centers[eligible], C, bel, bel, prior, demo.rates.values, demo.model)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    elbos = np.full(grid.size, -np.inf)
    elbos[eligible] = run.elbo
    winner = select_winner(elbos)
    pos = {int(s): i for i, s in enumerate(eligible)}
    with open(out / "inits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "m_x", "m_y", "eligible", "elbo", "iterations", "evidence",
                    "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy"])
        for s, c in enumerate(grid.centers):
            row = [s, repr(float(c[0])), repr(float(c[1])), int(s in pos)]
            if s in pos:
                i = pos[s]
                P = H @ run.covs[i] @ H.T
                mu = H @ run.means[i]
                row += [repr(float(run.elbo[i])), run.iterations[i], repr(float(run.evidence[i])),
                        repr(float(mu[0])), repr(float(mu[1])), repr(float(P[0, 0])),
                        repr(float(P[0, 1])), repr(float(P[1, 1]))]
            else:
                row += ["", "", "", "", "", "", "", ""]
            w.writerow(row)
    with open(out / "traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "iteration", "elbo"])
        for i, s in enumerate(eligible):
            for it, v in enumerate(run.traces[i], start=1):
                w.writerow([int(s), it, repr(float(v))])
    with open(out / "measurements.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in y])
    summary = {"seed": seed, "N": grid.size, "eligible": int(eligible.size), "winner": winner,
               "truth": demo.truth_position.tolist(), "seconds": elapsed}
    if winner >= 0:
        i = pos[winner]
        summary.update(winner_mean=(H @ run.means[i]).tolist(), winner_elbo=float(run.elbo[i]),
                       winner_evidence=float(run.evidence[i]))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return 0


def threshold_table(lam: float, p_los: float, p_reloc: float, gap: float = 1.0) -> dict:
    try:
        tau, m_los = select_loss_params(lam, p_los)
        m_reloc, m_init = select_reloc_thresholds(lam, p_reloc, gap)
    except (ValueError, DomainError) as exc:
        raise ConfigError(str(exc)) from exc
    return {"lambda": lam, "P_los": p_los, "tau": tau, "M_los": m_los,
            "P_reloc": p_reloc, "M_reloc": m_reloc, "M_init": m_init}


def cmd_params(args) -> int:
    table = threshold_table(args.lam, args.p_los, args.p_reloc, args.gap)
    text = json.dumps(table)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "experiment": cmd_experiment,
    "relocate-demo": cmd_relocate_demo,
    "params": cmd_params,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
