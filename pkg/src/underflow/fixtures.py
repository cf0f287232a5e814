"""Bundled problem instances and random instance generators."""
from __future__ import annotations

from importlib import resources

import numpy as np

from .model import (ChannelModel, LinearHolding, PowerRateCurve, ProblemSpec, Receiver,
                    single_receiver)

BUNDLED = ("two_state", "example2", "three_state_iid")


def bundled_path(name):
    return resources.files("underflow") / "data" / f"{name}.json"


def bundled(name) -> ProblemSpec:
    """Load one of the shipped specs by short name."""
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled spec {name!r}; have {BUNDLED}")
    return ProblemSpec.loads(bundled_path(name).read_text())


def two_state(N=3, alpha=1.0, h=0.0):
    """c in {1, 2} with equal odds, d = 1, P = 2."""
    return single_receiver([1.0, 2.0], [0.5, 0.5], 1.0, 2.0, alpha=alpha, horizon=N, h=h,
                           name="two_state")


def example2(N=3):
    costs = (1.750, 2.000, 2.001, 2.100)
    probs = (0.4, 0.4, 0.1, 0.1)
    ch = ChannelModel.iid([PowerRateCurve.linear(c) for c in costs], probs)
    rcv = Receiver(ch, 1.0, LinearHolding(0.0))
    return ProblemSpec((rcv, rcv), 4.2, 1.0, N, name="example2")


def three_state_iid(N=6):
    """Three IID states whose peak-power transmissions cover 3, 2 and 1 slots."""
    return single_receiver([2.0, 3.0, 6.0], [0.3, 0.5, 0.2], 1.0, 6.0, alpha=0.95,
                           horizon=N, h=0.1, name="three_state_iid")


def single_state(c=2.0, d=1.0, h=0.0, alpha=0.9, horizon="discounted", P=None):
    P = 2 * c * d if P is None else P
    return single_receiver([c], [1.0], d, P, alpha=alpha, horizon=horizon, h=h,
                           name="single_state")


def random_threshold_instance(rng, max_states=4, max_N=8, max_K=2, linear=False):
    """Random one-receiver instance meeting the closed-form preconditions.

    IID channel, linear holding cost, and every segment end an integer
    number of slots of demand.
    """
    S = int(rng.integers(1, max_states + 1))
    N = int(rng.integers(1, max_N + 1))
    d = float(rng.choice([0.5, 1.0, 2.0]))
    P = float(rng.uniform(2.0, 6.0))
    curves = []
    for _ in range(S):
        l_max = int(rng.integers(1, 5))
        K = 0 if linear else int(rng.integers(0, min(max_K, l_max - 1) + 1))
        ends = np.sort(rng.choice(np.arange(1, l_max), size=K, replace=False)) \
            if K else np.array([], dtype=int)
        knots = np.concatenate([[0], ends, [l_max]]) * d
        raw = np.cumsum(rng.uniform(0.2, 1.5, size=K + 1))
        scale = P / float(np.sum(raw * np.diff(knots)))
        slopes = tuple(float(c) for c in raw * scale)
        curves.append(PowerRateCurve(slopes, tuple(float(e) for e in ends * d)))
    probs = rng.dirichlet(np.ones(S))
    h = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.0, 0.6))
    alpha = 1.0 if rng.random() < 0.3 else float(rng.uniform(0.8, 1.0))
    return single_receiver(curves, probs, d, P, alpha=alpha, horizon=N, h=h,
                           name="random_threshold")


def random_two_rx_instance(rng, max_states=3, N=3):
    """Random two-receiver instance with linear curves and d = 1."""
    rcvs = []
    for _ in range(2):
        S = int(rng.integers(1, max_states + 1))
        costs = np.sort(rng.uniform(1.0, 2.5, size=S))
        probs = rng.dirichlet(np.ones(S))
        h = float(rng.uniform(0.0, 0.3))
        ch = ChannelModel.iid([PowerRateCurve.linear(float(c)) for c in costs], probs)
        rcvs.append(Receiver(ch, 1.0, LinearHolding(h)))
    worst = sum(max(cv.slopes[0] for cv in r.channel.curves) for r in rcvs)
    P = float(worst * rng.uniform(1.05, 1.6))
    alpha = float(rng.uniform(0.85, 1.0))
    return ProblemSpec(tuple(rcvs), P, alpha, N, name="random_two_rx")
