import csv
import json
from pathlib import Path

import numpy as np
import pytest

from vbnhpp import experiment as exp_mod
from vbnhpp.cli import main
from vbnhpp.experiment import DatasetResult, ExperimentConfig, read_ospa_csv, run_tracker
from vbnhpp.metrics import ospa
from vbnhpp.model import ConfigError, MeasurementFrame, read_frames, write_frames
from vbnhpp.scenario import generate_frames, generate_truth, preset_config, read_truth, write_truth


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestParams:
    def test_table(self, capsys):
        assert main(["params", "--lambda", "5", "--p-los", "7e-4", "--p-reloc", "0.5"]) == 0
        t = _json_out(capsys)
        assert t["tau"] == 2 and 1 < t["M_los"] < 2
        assert 4 < t["M_reloc"] < 5 and t["M_init"] == pytest.approx(t["M_reloc"] - 1)

    def test_bad_probability(self, capsys):
        assert main(["params", "--lambda", "5", "--p-los", "2", "--p-reloc", "0.5"]) == 2


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["nope"], ["params", "--bogus"], ["track"],
                                      ["experiment", "--mode", "magic"]])
    def test_exit_2(self, argv, capsys):
        assert main(argv) == 2

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"preset": "moderate", "unknown_field": 1}))
        assert main(["experiment", "--config", str(cfg)]) == 2
        cfg.write_text("{not json")
        assert main(["experiment", "--config", str(cfg)]) == 2
        assert main(["experiment", "--config", str(tmp_path / "missing.json")]) == 2

    def test_config_validation(self):
        for bad in ({"mode": "x"}, {"datasets": 0}, {"forgetting": "sometimes"}, {"forgetting": 1.5},
                    {"tol": 0.0}, {"preset": None}):
            with pytest.raises(ConfigError):
                ExperimentConfig.from_dict(bad)


class TestSimulateTrack:
    def test_files_and_schema(self, tmp_path, capsys):
        d = tmp_path / "d"
        assert main(["simulate", "--preset", "coalescence", "--k", "8", "--seed", "1", "--out", str(d)]) == 0
        for name in ("frames.jsonl", "truth.csv", "scenario.json"):
            assert (d / name).is_file()
        frames = read_frames(d / "frames.jsonl")
        truth = read_truth(d / "truth.csv")
        assert truth.states.shape[1] == 8 and len(frames) == truth.steps
        assert main(["track", str(d), "--mode", "vb-relo"]) == 0
        with open(d / "track_vb-relo.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "ospa", "cpu_ms", "n_lost", "n_relocated"]
        assert len(rows) == len(frames) + 1
        assert all(0 <= float(r[1]) <= 50 for r in rows[1:])

    def test_round_trip(self, tmp_path):
        cfg = preset_config("moderate", 5)
        truth = generate_truth(cfg, 4)
        frames = generate_frames(truth, cfg, 4)[:5] + [MeasurementFrame(6, np.zeros((0, 2)))]
        write_frames(tmp_path / "f.jsonl", frames)
        write_truth(tmp_path / "t.csv", truth)
        back = read_frames(tmp_path / "f.jsonl")
        assert [f.n for f in back] == [f.n for f in frames]
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(read_truth(tmp_path / "t.csv").states, truth.states)

    def test_relocate_demo(self, tmp_path, capsys):
        assert main(["relocate-demo", "--seed", "3", "--out", str(tmp_path)]) == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["winner"] >= 0 and s["eligible"] <= s["N"]
        for name in ("inits.csv", "traces.csv", "measurements.csv"):
            assert (tmp_path / name).is_file()


class TestExperiment:
    def _config(self, tmp_path, name, **kw):
        cfg = dict(preset="moderate", K=5, mode="vb-relo", datasets=1, seed=7, record_timing=False)
        cfg.update(kw)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_deterministic(self, tmp_path, capsys):
        cfg = self._config(tmp_path, "c")
        for out in ("a", "b"):
            assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        for name in ("ospa.csv", "dataset_0000.csv", "elbo_traces.csv", "events.csv", "summary.json",
                     "per_step_mean.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        runs = read_ospa_csv(tmp_path / "a" / "ospa.csv")
        s = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert s["ospa_mean"] == pytest.approx(np.mean(runs[0]))

    def test_threads_match_serial(self, tmp_path, capsys):
        cfg = self._config(tmp_path, "c", datasets=2, mode="vb")
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "p"), "--threads", "2"]) == 0
        assert (tmp_path / "s" / "ospa.csv").read_bytes() == (tmp_path / "p" / "ospa.csv").read_bytes()

    def test_failed_dataset_isolated(self, tmp_path, monkeypatch):
        real = exp_mod.run_tracker

        def flaky(config, scenario, truth, frames, result):
            if result.index == 1:
                raise FloatingPointError("injected")
            return real(config, scenario, truth, frames, result)

        monkeypatch.setattr(exp_mod, "run_tracker", flaky)
        config = ExperimentConfig(K=5, mode="vb", datasets=3, seed=2, record_timing=False, out=str(tmp_path))
        summary = exp_mod.run_experiment(config)
        assert summary["D"] == 2 and [f["dataset"] for f in summary["failed"]] == [1]
        assert "injected" in summary["failed"][0]["error"]
        assert sorted(read_ospa_csv(tmp_path / "ospa.csv")) == [0, 2]

    def test_empty_frames_follow_prediction(self):
        scenario = preset_config("moderate", 5)
        truth = generate_truth(scenario, 0)
        frames = [MeasurementFrame(n, np.zeros((0, 2))) for n in range(1, 21)]
        config = ExperimentConfig(K=5, mode="vb", record_timing=False)
        res = run_tracker(config, scenario, truth, frames, DatasetResult(0, 0))
        tr = scenario.transition()
        x = truth.states[0].copy()
        expected = []
        for n in range(1, 21):
            x = np.einsum("kij,kj->ki", tr.F, x) + tr.B
            expected.append(ospa(truth.positions(n), x[:, [0, 2]]))
        np.testing.assert_allclose(res.ospa, expected, rtol=1e-12, atol=1e-9)
