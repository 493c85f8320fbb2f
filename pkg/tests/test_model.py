import math

import numpy as np
import pytest

from helpers import random_spd
from vbnhpp.model import (
    ConfigError,
    MeasurementFrame,
    MeasurementModel,
    RateVector,
    Region,
    TransitionModel,
    check_association_weights,
    emission_log_likelihood,
    enumerate_marginal_log_likelihood,
    joint_nhpp_log_likelihood,
    position_selector,
    read_frames,
    standard_models,
    write_frames,
)


def _model(side=1000.0, K=1, r=100.0):
    return MeasurementModel(position_selector(2), np.repeat(r * np.eye(2)[None], K, 0), Region.square(side))


class TestEmission:
    def test_clutter(self):
        assert abs(emission_log_likelihood(np.zeros(2), 0, None, _model()) + math.log(1e6)) < 1e-12

    def test_gaussian_mode_and_offset(self):
        x = np.array([3.0, 1.0, -4.0, 2.0])
        mode = emission_log_likelihood(np.array([3.0, -4.0]), 1, x, _model())
        assert abs(mode + math.log(2 * math.pi * 100)) < 1e-12
        off = emission_log_likelihood(np.array([13.0, -4.0]), 1, x, _model())
        assert abs(off - (mode - 0.5)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            emission_log_likelihood(np.zeros(3), 1, np.zeros(4), _model())


class TestJointLikelihood:
    def test_empty_frame(self):
        rates = RateVector(np.array([3.0, 2.0]))
        assert joint_nhpp_log_likelihood(MeasurementFrame(1, np.zeros((0, 2))), np.zeros((1, 4)), rates, _model()) == -5.0

    def test_clutter_only(self):
        model = MeasurementModel(position_selector(2), np.zeros((0, 2, 2)), Region.square(10.0))
        val = joint_nhpp_log_likelihood(MeasurementFrame(1, np.zeros((2, 2))), np.zeros((0, 4)),
                                        RateVector(np.array([3.0])), model)
        assert abs(val - (-3 - math.log(2) + 2 * math.log(3 / 100))) < 1e-12

    def test_zero_total_rate(self):
        with pytest.raises(ValueError):
            joint_nhpp_log_likelihood(MeasurementFrame(1, np.zeros((1, 2))), np.zeros((1, 4)),
                                      RateVector(np.zeros(2)), _model())

    def test_enumeration_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            K, M = rng.integers(0, 3), rng.integers(0, 7)
            R = np.stack([random_spd(rng, 2, 5.0) for _ in range(K)]) if K else np.zeros((0, 2, 2))
            model = MeasurementModel(position_selector(2), R, Region.square(30.0))
            frame = MeasurementFrame(1, rng.uniform(-15, 15, size=(M, 2)))
            states = rng.normal(0, 5, size=(K, 4))
            rates = RateVector(rng.uniform(0.1, 5.0, size=K + 1))
            exact = joint_nhpp_log_likelihood(frame, states, rates, model)
            brute = enumerate_marginal_log_likelihood(frame, states, rates, model)
            assert abs(exact - brute) <= 1e-10 * max(1.0, abs(exact))


class TestTypes:
    def test_region(self):
        r = Region.square(4.0)
        assert r.volume == 16.0
        np.testing.assert_array_equal(r.contains(np.array([[0, 0], [2.5, 0]])), [True, False])
        with pytest.raises(ValueError):
            Region(np.array([1.0, 0.0]), np.array([0.0, 1.0]))

    def test_transition(self):
        tr = TransitionModel.constant_velocity(2, 1.0, 25.0)
        np.testing.assert_allclose(tr.F[0] @ np.array([0, 30, 0, 0.0]), [30, 30, 0, 0])
        np.testing.assert_allclose(tr.Q[0][:2, :2], 25 * np.array([[1 / 3, 1 / 2], [1 / 2, 1]]))

    def test_rate_vector(self):
        rv = RateVector(np.array([10.0, 2.0, 3.0]))
        assert rv.K == 2 and rv.total == 15.0
        with pytest.raises(ValueError):
            RateVector(np.array([-1.0, 2.0]))

    def test_association_weights(self):
        check_association_weights(np.full((3, 4), 0.25))
        with pytest.raises(ValueError):
            check_association_weights(np.full((3, 4), 0.3))

    def test_frames_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = [MeasurementFrame(n, rng.normal(size=(m, 2))) for n, m in [(1, 3), (2, 0), (3, 5)]]
        write_frames(tmp_path / "f.jsonl", frames)
        back = read_frames(tmp_path / "f.jsonl")
        assert [f.n for f in back] == [1, 2, 3]
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.y, b.y)

    def test_standard_models(self):
        trans, meas = standard_models(3, 100.0)
        assert meas.K == 3 and meas.D == 2 and trans.K == 3
        assert abs(meas.V - 1e4) < 1e-9
