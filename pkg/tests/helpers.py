"""Random small instances shared by the test modules."""

from dataclasses import dataclass

import numpy as np

from vbnhpp.cavi import GaussianBeliefs, RateBelief
from vbnhpp.model import MeasurementModel, Region, TransitionModel, position_selector


def random_spd(rng, d, scale=1.0, floor=0.2):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + floor * np.eye(d))


@dataclass
class Instance:
    y: np.ndarray
    pred: GaussianBeliefs
    rates: np.ndarray  # (K+1,) known rates
    rate_belief: RateBelief  # predictive Gamma factors
    model: MeasurementModel
    transition: TransitionModel


def random_instance(rng, K, M, side=40.0):
    """K objects in a side x side square with spread-out predictive beliefs."""
    half = side / 2
    R = np.stack([random_spd(rng, 2, 4.0) for _ in range(K)])
    model = MeasurementModel(position_selector(2), R, Region.square(side))
    trans = TransitionModel.constant_velocity(K, 1.0, rng.uniform(0.5, 5.0))
    means = np.zeros((K, 4))
    means[:, [0, 2]] = rng.uniform(-half / 2, half / 2, size=(K, 2))
    means[:, [1, 3]] = rng.normal(0, 1, size=(K, 2))
    covs = np.stack([random_spd(rng, 4, 6.0) for _ in range(K)])
    n_obj = rng.integers(0, M + 1)
    src = rng.integers(0, K, size=n_obj)
    pos = means[src][:, [0, 2]] + rng.normal(0, 2.5, size=(n_obj, 2))
    clutter = rng.uniform(-half, half, size=(M - n_obj, 2))
    y = np.clip(np.concatenate([pos, clutter]), -half, half)
    rates = np.concatenate([[rng.uniform(0.5, 6.0)], rng.uniform(0.5, 6.0, size=K)])
    belief = RateBelief(rng.uniform(1.0, 8.0, size=K + 1), rng.uniform(0.3, 2.0, size=K + 1))
    return Instance(y, GaussianBeliefs(means, covs), rates, belief, model, trans)
