"""End-to-end acceptance criteria; each test reports one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy import stats

from helpers import random_instance, random_spd
from oracles import converged_factors, mc_association_log_ratios, mc_elbo, mc_init_log_ratios
from vbnhpp.cavi import (
    CaviSettings,
    GaussianBeliefs,
    RateBelief,
    TrackerState,
    compute_elbo,
    init_associations,
    known_rate_step,
    tracker_step,
    update_associations,
)
from vbnhpp.experiment import ExperimentConfig, run_datasets
from vbnhpp.localisation import relocate_object
from vbnhpp.management import ReloSettings, initial_relo_state, relo_step, select_loss_params, select_reloc_thresholds
from vbnhpp.model import (
    MeasurementFrame,
    MeasurementModel,
    RateVector,
    Region,
    TransitionModel,
    enumerate_marginal_log_likelihood,
    joint_nhpp_log_likelihood,
    position_selector,
)
from vbnhpp.numerics import GaussianParams, poisson_cdf_tools, sum_quadratic_forms
from vbnhpp.scenario import ScenarioConfig, generate_frames, generate_truth, localisation_demo, preset


def _within(a, est, se):
    """|a - est| <= 3 SE, with a 1e-9 relative floor for integrands that are (near) deterministic."""
    return np.abs(a - est) <= 3 * se + 1e-9 * np.maximum(1.0, np.abs(a))


def _identity(K):
    return TransitionModel(np.repeat(np.eye(4)[None], K, 0), np.zeros((K, 4)), np.zeros((K, 4, 4)))


def test_1_elbo_ascent(report):
    rng = np.random.default_rng(1001)
    settings = CaviSettings(100, 0.01)
    worst, sweeps, elapsed = np.inf, 0, 0.0
    for i in range(1000):
        inst = random_instance(rng, int(rng.integers(1, 4)), int(rng.integers(0, 31)))
        for learn in (True, False):
            state = TrackerState(0, inst.pred, inst.rate_belief if learn else None, RateVector(inst.rates))
            step = tracker_step if learn else known_rate_step
            frame, ident = MeasurementFrame(1, inst.y), _identity(inst.model.K)
            t0 = time.perf_counter()
            _, d = step(state, frame, ident, inst.model, settings)
            elapsed += time.perf_counter() - t0
            tr = np.array(d.elbo_trace)
            slack = tr[1:] - (tr[:-1] - 1e-8 * np.abs(tr[:-1]))
            if slack.size:
                worst = min(worst, slack.min())
                sweeps += slack.size
    ok = worst >= 0 and elapsed < 10
    report(1, ok, f"2000 runs, {sweeps} sweeps, min slack {worst:.3g}, CAVI time {elapsed:.1f} s (< 10 s)")
    assert ok


def test_2_oracle_equivalence(report, request):
    rng = np.random.default_rng(2002)
    S = 100_000 if request.config.getoption("--quick") else 1_000_000
    bad, z = [], []

    def check(i, kind, a, est, se):
        a, est, se = np.atleast_1d(a), np.atleast_1d(est), np.atleast_1d(se)
        if not np.all(_within(a, est, se)):
            bad.append((i, kind))
        live = se > 1e-9 * np.maximum(1.0, np.abs(a))  # skip (near) deterministic integrands
        z.extend(((a - est) / se)[live])

    t0 = time.perf_counter()
    for i in range(50):
        inst = random_instance(rng, int(rng.integers(1, 3)), int(rng.integers(1, 6)))
        learn = bool(i % 2)
        q, post, kal, post_rates = converged_factors(inst, learn)
        kw = dict(post_rates=post_rates, pred_rates=inst.rate_belief) if learn else dict(known_rates=inst.rates)
        F = compute_elbo(inst.y, q, kal, inst.model, **kw)
        check(i, "elbo", F, *mc_elbo(inst, q, post, post_rates, rng, S=S))
        logr = post_rates.log_geometric_mean() if learn else np.log(inst.rates)
        qa = update_associations(inst.y, post, logr, inst.model)
        est, se = mc_association_log_ratios(inst, post, post_rates, rng, S=S)
        check(i, "association", (np.log(qa[:, 1:]) - np.log(qa[:, [0]])).ravel(), est.ravel(), se.ravel())
        q0 = init_associations(inst.y, inst.pred, inst.rates, inst.model)
        est, se = mc_init_log_ratios(inst, inst.rates, rng, S=S)
        check(i, "init", (np.log(q0[:, 1:]) - np.log(q0[:, [0]])).ravel(), est.ravel(), se.ravel())
    elapsed = time.perf_counter() - t0
    z = np.array(z)
    ks = stats.kstest(z, "norm").pvalue
    ok = not bad and elapsed < 300
    # every comparison must sit within 3 SE; the z-score summary shows whether misses are MC noise
    report(2, ok, f"50 instances at S={S}: {len(z)} stochastic comparisons, outside 3 SE {bad}, "
                  f"max |z| {np.abs(z).max():.2f}, z mean {z.mean():+.2f} sd {z.std():.2f}, "
                  f"KS-vs-N(0,1) p={ks:.2f}, {elapsed:.0f} s (< 300 s)")
    assert ok


def test_3_enumeration_identity(report):
    rng = np.random.default_rng(3003)
    worst = 0.0
    for _ in range(100):
        K, M = int(rng.integers(0, 3)), int(rng.integers(0, 7))
        R = np.stack([random_spd(rng, 2, 5.0) for _ in range(K)]) if K else np.zeros((0, 2, 2))
        model = MeasurementModel(position_selector(2), R, Region.square(30.0))
        frame = MeasurementFrame(1, rng.uniform(-15, 15, size=(M, 2)))
        states = rng.normal(0, 5, size=(K, 4))
        rates = RateVector(rng.uniform(0.1, 5.0, size=K + 1))
        # compare likelihoods (not logs): relative error of h itself
        exact = joint_nhpp_log_likelihood(frame, states, rates, model)
        brute = enumerate_marginal_log_likelihood(frame, states, rates, model)
        worst = max(worst, abs(math.expm1(exact - brute)))
    ok = worst <= 1e-10
    report(3, ok, f"100 instances, max relative error {worst:.2e} (<= 1e-10)")
    assert ok


def test_4_quadratic_sum_identity(report):
    rng = np.random.default_rng(4004)
    worst = 0.0
    for _ in range(100):
        N, d = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        m = rng.normal(size=(N, d))
        C = np.stack([random_spd(rng, d) for _ in range(N)])
        mu, sig, const = sum_quadratic_forms(m, C)
        for x in rng.normal(size=(20, d)):
            lhs = sum(-0.5 * (x - mi) @ np.linalg.solve(Ci, x - mi) for mi, Ci in zip(m, C))
            rhs = -0.5 * (x - mu) @ np.linalg.solve(sig, x - mu) + const
            worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-10
    report(4, ok, f"100 instances x 20 points, max residual {worst:.2e} (<= 1e-10)")
    assert ok


def test_5_threshold_recipes(report):
    tau, m_los = select_loss_params(5.0, 7e-4)
    cdf = poisson_cdf_tools(tau * 5.0)
    k = np.arange(cdf.values.size)
    knot_err = float(np.max(np.abs(cdf.evaluate(k) - stats.poisson.cdf(k, tau * 5.0))))
    checks = [tau == 2, 1 < m_los < 2, knot_err <= 1e-12]
    # the bracketing integers of M_los, from direct pmf sums
    pmf = lambda n, lam: sum(math.exp(-lam) * lam**i / math.factorial(i) for i in range(n + 1))
    checks.append(pmf(1, 10.0) < 7e-4 < pmf(2, 10.0))
    m_reloc = {}
    for lam, lo in ((5.0, 4), (6.0, 5)):
        m_reloc[lam], _ = select_reloc_thresholds(lam, 0.5)
        checks += [lo < m_reloc[lam] < lo + 1, pmf(lo, lam) < 0.5 < pmf(lo + 1, lam)]
    ok = all(checks)
    report(5, ok, f"tau={tau}, M_los={m_los:.4f}, knot error {knot_err:.1e}, "
                  f"M_reloc(5)={m_reloc[5.0]:.4f}, M_reloc(6)={m_reloc[6.0]:.4f}")
    assert ok


def test_6_localisation_demo(report):
    C = 35.0**2 * np.eye(2)
    hits = 0
    t0 = time.perf_counter()
    for seed in range(100):
        demo = localisation_demo(seed)
        prior = GaussianParams(demo.prior_mean, demo.prior_cov)
        bel = GaussianBeliefs(demo.prior_mean[None], demo.prior_cov[None])
        out = relocate_object(1, demo.frame.y, bel, bel, prior, demo.rates.values, demo.model, C, 0.0, 0)
        g = out.gaussian
        P = g.cov[np.ix_([0, 2], [0, 2])]
        e = g.mean[[0, 2]] - demo.truth_position
        hits += math.sqrt(e @ np.linalg.solve(P, e)) <= 3.0
    elapsed = time.perf_counter() - t0
    ok = hits >= 80 and elapsed < 300
    report(6, ok, f"winner within 3 posterior std in {hits}/100 datasets (>= 80), {elapsed:.0f} s (< 300 s)")
    assert ok


def _grand_mean(results):
    assert all(r.error is None for r in results), [r.error for r in results if r.error]
    return float(np.mean([np.mean(r.ospa) for r in results]))


def test_7_table_reproduction(report, request):
    t0 = time.perf_counter()
    k5 = _grand_mean(run_datasets(ExperimentConfig(K=5, mode="vb-relo", datasets=20, seed=7)))
    reps = 4 if request.config.getoption("--quick") else 10
    pairs = []
    for base in range(reps):
        vb = _grand_mean(run_datasets(ExperimentConfig(K=10, mode="vb", datasets=20, seed=100 + base)))
        relo = _grand_mean(run_datasets(ExperimentConfig(K=10, mode="vb-relo", datasets=20, seed=100 + base)))
        pairs.append((vb, relo))
    elapsed = time.perf_counter() - t0
    wins = sum(vb > relo for vb, relo in pairs)
    p = np.array(pairs)
    ok = 5.0 <= k5 <= 7.0 and wins >= 0.8 * reps and elapsed < 1200
    report(7, ok, f"K=5 vb-relo grand mean {k5:.2f} (in [5, 7]); K=10 vb > vb-relo in {wins}/{reps} seeds "
                  f"(>= 80%), means vb {p[:, 0].mean():.2f} / vb-relo {p[:, 1].mean():.2f}, {elapsed:.0f} s")
    assert ok


def test_8_coalescence(report):
    kw = dict(preset="coalescence", K=8, datasets=10, seed=8)
    vb = run_datasets(ExperimentConfig(mode="vb", **kw))
    relo = run_datasets(ExperimentConfig(mode="vb-relo", **kw))
    wins = sum(np.mean(b.ospa[-10:]) <= np.mean(a.ospa[-10:]) for a, b in zip(vb, relo))
    ok = wins >= 8
    report(8, ok, f"vb-relo final-10-step OSPA <= vb in {wins}/10 paired datasets (>= 8)")
    assert ok


def test_9_rate_estimation(report):
    t0 = time.perf_counter()
    config = ExperimentConfig(preset="rate_estimation", mode="vb-rate-learning", datasets=5, seed=9)
    good, detail = 0, []
    for r in run_datasets(config):
        assert r.error is None, r.error
        truth = config.scenario_config(r.seed).rates.values
        est = r.final_rates
        objects = int(np.sum(np.abs(est[1:] - truth[1:]) <= np.maximum(0.5, 0.15 * truth[1:])))
        clutter = abs(est[0] - 5240.0) / 5240.0
        good += objects >= 9 and clutter <= 0.01
        detail.append(f"{objects}/10,{100 * clutter:.2f}%")
    elapsed = time.perf_counter() - t0
    ok = good >= 4 and elapsed < 600
    report(9, ok, f"{good}/5 datasets pass (>= 4) [{'; '.join(detail)}], {elapsed:.0f} s (< 600 s)")
    assert ok


def test_10_step_time(report):
    cfg, truth, frames = preset("moderate", 10, 10)
    trans, meas = cfg.transition(), cfg.measurement_model()
    state = TrackerState(0, GaussianBeliefs(truth.states[0], np.repeat(cfg.initial_covariance()[None], 10, 0)),
                         None, cfg.rates)
    times = []
    for f in frames:
        t0 = time.perf_counter()
        state, _ = known_rate_step(state, f, trans, meas)
        times.append((time.perf_counter() - t0) * 1e3)
    M = np.mean([f.y.shape[0] for f in frames])
    worst = max(times[1:])  # the first call pays one-off import/cache costs
    ok = worst < 50.0
    report(10, ok, f"K=10, mean M={M:.0f}: median {np.median(times):.1f} ms, max {worst:.1f} ms (< 50 ms)")
    assert ok


def test_11_false_alarms(report):
    scenario = ScenarioConfig(K=5, steps=20, angle_law="equal", clutter_rate=775.0, clutter_density=1e-4)
    settings = ReloSettings()
    alarms = object_steps = 0
    for seed in range(100):
        truth = generate_truth(scenario, seed)
        frames = generate_frames(truth, scenario, seed)
        covs = np.repeat(scenario.initial_covariance()[None], 5, 0)
        state = initial_relo_state(truth.states[0], covs, scenario.rates, settings)
        for f in frames:
            state, d = relo_step(state, f, scenario.transition(), scenario.measurement_model(), settings)
            alarms += len(d.lost)
            object_steps += scenario.K
    rate = alarms / object_steps
    ok = rate <= 5 * settings.p_los
    report(11, ok, f"{alarms} loss detections in {object_steps} object-steps, rate {rate:.1e} "
                   f"(<= {5 * settings.p_los:.1e})")
    assert ok
