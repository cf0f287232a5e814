"""Problem primitives: channels, power-rate curves, holding costs, specs.

Everything here is immutable once built.  ``validate`` checks a
:class:`ProblemSpec` and returns a :class:`ValidatedSpec` carrying the
derived quantities (effective curves clipped at peak power, IID flags,
stationary channel probabilities) that the solvers need.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (BadStochasticMatrix, InfeasiblePower, NonConvexCurve,
                     OutOfRange, SpecError)

DEFAULT_TOL = 1e-12


# --------------------------------------------------------------------------
# power-rate curves
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerRateCurve:
    """Convex piecewise-linear map from packets sent to power used.

    ``slopes[k]`` is the power per packet on segment k, ``breakpoints[k]``
    the packet count where segment k ends.  A linear curve is the K=0 case.
    """

    slopes: tuple
    breakpoints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(float(c) for c in self.slopes))
        object.__setattr__(self, "breakpoints",
                           tuple(float(z) for z in self.breakpoints))

    @classmethod
    def linear(cls, slope):
        return cls((slope,), ())

    @property
    def kind(self):
        return "linear" if len(self.slopes) == 1 else "pwl"

    @property
    def K(self):
        return len(self.slopes) - 1

    def check(self, tol=DEFAULT_TOL):
        c, z = self.slopes, self.breakpoints
        if len(z) != len(c) - 1:
            raise NonConvexCurve(
                f"{len(c)} slopes need {len(c) - 1} breakpoints, got {len(z)}")
        if not c or c[0] <= 0:
            raise NonConvexCurve(f"first slope must be positive, got {c[:1]}")
        if any(c[k + 1] < c[k] - tol for k in range(len(c) - 1)):
            raise NonConvexCurve(f"slopes must be nondecreasing: {c}")
        if z and (z[0] <= 0 or any(z[k + 1] <= z[k] for k in range(len(z) - 1))):
            raise NonConvexCurve(
                f"breakpoints must be positive and increasing: {z}")

    def to_dict(self):
        if self.kind == "linear":
            return {"kind": "linear", "slope": self.slopes[0]}
        return {"kind": "pwl", "slopes": list(self.slopes),
                "breakpoints": list(self.breakpoints)}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "linear")
        if kind == "linear":
            return cls.linear(d["slope"])
        if kind == "pwl":
            return cls(tuple(d["slopes"]), tuple(d.get("breakpoints", ())))
        raise SpecError(f"unknown curve kind {kind!r}")


@dataclass(frozen=True)
class EffectiveCurve:
    """A power-rate curve with the peak power folded in as ``z_max``.

    Breakpoints at or beyond ``z_max`` are dropped, so the stored segments
    are exactly those reachable within one slot's power budget.
    """

    slopes: np.ndarray
    breakpoints: np.ndarray
    z_max: float
    P: float
    # knots[k] is where segment k starts; cum[k] the power used up to there
    knots: np.ndarray = field(repr=False)
    cum: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, curve: PowerRateCurve, P: float):
        c = np.asarray(curve.slopes, dtype=float)
        z = np.asarray(curve.breakpoints, dtype=float)
        knots = np.concatenate([[0.0], z])
        cum = np.concatenate([[0.0], np.cumsum(c[:-1] * np.diff(knots))])
        # last segment that starts strictly below the peak-power level
        k = int(np.searchsorted(cum, P, side="left")) - 1
        k = max(k, 0)
        z_max = knots[k] + (P - cum[k]) / c[k]
        return cls(slopes=c[:k + 1].copy(), breakpoints=z[:k].copy(),
                   z_max=float(z_max), P=float(P),
                   knots=knots[:k + 1].copy(), cum=cum[:k + 1].copy())

    @property
    def K(self):
        return len(self.slopes) - 1

    def segment_ends(self):
        """Packet counts ending each segment: z_0, ..., z_{K-1}, z_max."""
        return np.concatenate([self.breakpoints, [self.z_max]])


def power_of(curve: EffectiveCurve, z):
    """Power needed to send ``z`` packets (scalar or array)."""
    za = np.asarray(z, dtype=float)
    if np.any(za > curve.z_max + 1e-12) or np.any(za < -1e-12):
        raise OutOfRange(f"z outside [0, {curve.z_max}]")
    za = np.clip(za, 0.0, curve.z_max)
    k = np.searchsorted(curve.knots, za, side="right") - 1
    out = curve.cum[k] + curve.slopes[k] * (za - curve.knots[k])
    return float(out) if np.ndim(out) == 0 else out


def rate_of(curve: EffectiveCurve, power):
    """Packets sendable with ``power`` units; inverse of :func:`power_of`."""
    pa = np.asarray(power, dtype=float)
    if np.any(pa > curve.P + 1e-12) or np.any(pa < -1e-12):
        raise OutOfRange(f"power outside [0, {curve.P}]")
    pa = np.clip(pa, 0.0, curve.P)
    k = np.searchsorted(curve.cum, pa, side="right") - 1
    out = curve.knots[k] + (pa - curve.cum[k]) / curve.slopes[k]
    out = np.minimum(out, curve.z_max)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# holding costs
# --------------------------------------------------------------------------

class HoldingCost:
    """Convex, nonnegative, nondecreasing cost on leftover packets."""

    kind = "abstract"

    def __call__(self, x):
        raise NotImplementedError

    @property
    def linear_rate(self):
        """Per-packet rate if the cost is linear, otherwise ``None``."""
        return None

    @staticmethod
    def from_dict(d):
        kind = d.get("kind", "linear")
        if kind == "linear":
            return LinearHolding(d.get("h", 0.0))
        if kind == "barrier":
            return BarrierHolding(d["mu"], d["kappa"])
        if kind == "tabulated":
            return TabulatedHolding(tuple(map(tuple, d["points"])))
        raise SpecError(f"unknown holding kind {kind!r}")


@dataclass(frozen=True)
class LinearHolding(HoldingCost):
    h: float = 0.0
    kind = "linear"

    def __post_init__(self):
        if self.h < 0:
            raise SpecError(f"holding rate must be >= 0, got {self.h}")

    def __call__(self, x):
        return self.h * np.maximum(np.asarray(x, dtype=float), 0.0)

    @property
    def linear_rate(self):
        return self.h

    def to_dict(self):
        return {"kind": "linear", "h": self.h}


@dataclass(frozen=True)
class BarrierHolding(HoldingCost):
    """Zero up to ``mu`` packets, ``kappa`` per packet above (finite buffer)."""

    mu: float
    kappa: float
    kind = "barrier"

    def __post_init__(self):
        if self.mu < 0 or self.kappa < 0:
            raise SpecError("barrier needs mu >= 0 and kappa >= 0")

    def __call__(self, x):
        return self.kappa * np.maximum(np.asarray(x, dtype=float) - self.mu, 0.0)

    @property
    def linear_rate(self):
        return 0.0 if self.kappa == 0 else None

    def to_dict(self):
        return {"kind": "barrier", "mu": self.mu, "kappa": self.kappa}


@dataclass(frozen=True)
class TabulatedHolding(HoldingCost):
    """Piecewise-linear cost through ``points`` [(x, h), ...], starting at (0, 0).

    Extended linearly past the last point with the last slope.
    """

    points: tuple
    kind = "tabulated"

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        object.__setattr__(self, "points", pts)
        xs = np.array([p[0] for p in pts])
        hs = np.array([p[1] for p in pts])
        if len(pts) < 2 or xs[0] != 0 or hs[0] != 0:
            raise SpecError("tabulated holding needs >= 2 points starting at (0, 0)")
        if np.any(np.diff(xs) <= 0):
            raise SpecError("tabulated holding x values must increase")
        slopes = np.diff(hs) / np.diff(xs)
        if np.any(slopes < -1e-12) or np.any(np.diff(slopes) < -1e-12):
            raise SpecError("tabulated holding must be convex and nondecreasing")

    def __call__(self, x):
        xs = np.array([p[0] for p in self.points])
        hs = np.array([p[1] for p in self.points])
        xa = np.maximum(np.asarray(x, dtype=float), 0.0)
        out = np.interp(xa, xs, hs)
        last = (hs[-1] - hs[-2]) / (xs[-1] - xs[-2])
        return np.where(xa > xs[-1], hs[-1] + last * (xa - xs[-1]), out)

    @property
    def linear_rate(self):
        xs = np.array([p[0] for p in self.points])
        hs = np.array([p[1] for p in self.points])
        slopes = np.diff(hs) / np.diff(xs)
        return float(slopes[0]) if np.allclose(slopes, slopes[0]) else None

    def to_dict(self):
        return {"kind": "tabulated", "points": [list(p) for p in self.points]}


# --------------------------------------------------------------------------
# channels and specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelState:
    id: int
    label: str = ""


@dataclass(frozen=True)
class ChannelModel:
    """Finite Markov chain of channel states, one power-rate curve per state."""

    states: tuple
    transition: np.ndarray
    curves: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "curves", tuple(self.curves))
        T = np.array(self.transition, dtype=float)
        T.setflags(write=False)
        object.__setattr__(self, "transition", T)

    @classmethod
    def iid(cls, curves, probs, labels=None):
        """Channel whose state is drawn afresh from ``probs`` every slot."""
        curves = [c if isinstance(c, PowerRateCurve) else PowerRateCurve.linear(c)
                  for c in curves]
        labels = labels or [f"s{i}" for i in range(len(curves))]
        states = [ChannelState(i, lab) for i, lab in enumerate(labels)]
        T = np.tile(np.asarray(probs, dtype=float), (len(curves), 1))
        return cls(tuple(states), T, tuple(curves))

    @property
    def n_states(self):
        return len(self.states)

    def check(self, tol=DEFAULT_TOL):
        T = self.transition
        n = len(self.states)
        if [s.id for s in self.states] != list(range(n)):
            raise SpecError("channel state ids must be 0..|S|-1")
        if T.shape != (n, n):
            raise BadStochasticMatrix(f"transition shape {T.shape} != ({n}, {n})")
        if np.any(T < 0):
            raise BadStochasticMatrix("transition has negative entries")
        if np.any(np.abs(T.sum(axis=1) - 1.0) > tol):
            raise BadStochasticMatrix(
                f"transition rows must sum to 1, got {T.sum(axis=1)}")
        if len(self.curves) != n:
            raise SpecError(f"{n} states but {len(self.curves)} curves")
        for cv in self.curves:
            cv.check(tol)

    def is_iid(self, tol=DEFAULT_TOL):
        T = self.transition
        return bool(np.max(np.abs(T - T[0])) < tol)

    def stationary(self):
        """Stationary distribution of the chain (row vector)."""
        T = self.transition
        n = T.shape[0]
        A = np.vstack([T.T - np.eye(n), np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, b, rcond=None)
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()

    def to_dict(self):
        return {"states": [s.label for s in self.states],
                "transition": self.transition.tolist(),
                "curve": [c.to_dict() for c in self.curves]}

    @classmethod
    def from_dict(cls, d):
        labels = list(d["states"])
        states = tuple(ChannelState(i, str(lab)) for i, lab in enumerate(labels))
        curves = tuple(PowerRateCurve.from_dict(c) for c in d["curve"])
        return cls(states, np.array(d["transition"], dtype=float), curves)


@dataclass(frozen=True)
class Receiver:
    channel: ChannelModel
    demand: float
    holding: HoldingCost = field(default_factory=LinearHolding)
    initial_x: float = 0.0

    def to_dict(self):
        return {"channel": self.channel.to_dict(), "demand": self.demand,
                "holding": self.holding.to_dict(), "initial_x": self.initial_x}

    @classmethod
    def from_dict(cls, d):
        return cls(ChannelModel.from_dict(d["channel"]), float(d["demand"]),
                   HoldingCost.from_dict(d.get("holding", {"kind": "linear", "h": 0.0})),
                   float(d.get("initial_x", 0.0)))


Horizon = Union[int, str]


@dataclass(frozen=True)
class ProblemSpec:
    """Full problem: receivers sharing a per-slot peak power budget.

    ``horizon`` is a slot count for finite problems, or ``"discounted"`` /
    ``"average"`` for the infinite-horizon criteria.
    """

    receivers: tuple
    peak_power: float
    alpha: float = 1.0
    horizon: Horizon = 1
    tolerance: float = DEFAULT_TOL
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(self.receivers))

    @property
    def M(self):
        return len(self.receivers)

    @property
    def N(self):
        return self.horizon if isinstance(self.horizon, int) else None

    def replace(self, **kw):
        d = dict(receivers=self.receivers, peak_power=self.peak_power,
                 alpha=self.alpha, horizon=self.horizon,
                 tolerance=self.tolerance, name=self.name)
        d.update(kw)
        return ProblemSpec(**d)

    def to_dict(self):
        out = {"receivers": [r.to_dict() for r in self.receivers],
               "peak_power": self.peak_power, "alpha": self.alpha,
               "horizon": self.horizon, "tolerance": self.tolerance}
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_dict(cls, d):
        horizon = d.get("horizon", 1)
        if not isinstance(horizon, (int, str)) or isinstance(horizon, bool):
            raise SpecError(f"horizon must be an int or a string, got {horizon!r}")
        return cls(tuple(Receiver.from_dict(r) for r in d["receivers"]),
                   float(d["peak_power"]), float(d.get("alpha", 1.0)), horizon,
                   float(d.get("tolerance", DEFAULT_TOL)), str(d.get("name", "")))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"malformed JSON: {exc}") from exc
        try:
            return cls.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"bad spec field: {exc!r}") from exc

    def spec_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_spec(path) -> ProblemSpec:
    return ProblemSpec.loads(Path(path).read_text())


def save_spec(spec: ProblemSpec, path):
    Path(path).write_text(spec.dumps() + "\n")


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidatedSpec:
    """A checked spec plus cached derived quantities, per receiver m."""

    spec: ProblemSpec
    curves: tuple        # curves[m][s] -> EffectiveCurve
    iid: tuple           # iid[m] -> bool
    probs: tuple         # probs[m] -> stationary (or IID) state distribution
    c_min: tuple         # first-segment slope of the best state, per receiver
    c_max: tuple         # last-segment slope of the worst state, per receiver

    # convenience pass-throughs
    @property
    def M(self):
        return self.spec.M

    @property
    def P(self):
        return self.spec.peak_power

    @property
    def alpha(self):
        return self.spec.alpha

    @property
    def N(self):
        return self.spec.N

    def demand(self, m=0):
        return self.spec.receivers[m].demand

    def holding(self, m=0):
        return self.spec.receivers[m].holding

    def transition(self, m=0):
        return self.spec.receivers[m].channel.transition

    def n_states(self, m=0):
        return self.spec.receivers[m].channel.n_states

    def z_max(self, m=0):
        return np.array([cv.z_max for cv in self.curves[m]])

    def max_demand_power(self, m=0):
        """Largest power needed to send one slot's demand, over states."""
        d = self.demand(m)
        return max(power_of(cv, d) for cv in self.curves[m])


def validate(spec: ProblemSpec) -> ValidatedSpec:
    """Check every invariant of ``spec`` and cache derived quantities."""
    tol = spec.tolerance
    if spec.M < 1:
        raise SpecError("need at least one receiver")
    if spec.peak_power <= 0:
        raise InfeasiblePower(f"peak power must be positive, got {spec.peak_power}")
    if not 0.0 <= spec.alpha <= 1.0:
        raise SpecError(f"alpha must lie in [0, 1], got {spec.alpha}")
    h = spec.horizon
    if isinstance(h, int):
        if h < 1:
            raise SpecError(f"horizon must be >= 1, got {h}")
    elif h == "discounted":
        if spec.alpha >= 1.0:
            raise SpecError("infinite-horizon discounted problems need alpha < 1")
    elif h != "average":
        raise SpecError(f"unknown horizon {h!r}")

    curves, iid, probs, cmin, cmax = [], [], [], [], []
    worst_total = 0.0
    for m, rcv in enumerate(spec.receivers):
        rcv.channel.check(tol)
        if rcv.demand <= 0:
            raise SpecError(f"receiver {m}: demand must be positive")
        if rcv.initial_x < 0:
            raise SpecError(f"receiver {m}: initial buffer must be >= 0")
        hc = rcv.holding
        if float(np.asarray(hc(0.0))) != 0.0:
            raise SpecError(f"receiver {m}: holding cost must vanish at 0")
        eff = tuple(EffectiveCurve.build(cv, spec.peak_power)
                    for cv in rcv.channel.curves)
        for s, e in enumerate(eff):
            if e.z_max < rcv.demand - tol * max(1.0, rcv.demand):
                raise InfeasiblePower(
                    f"receiver {m} state {s}: at most {e.z_max:g} packets fit in "
                    f"peak power {spec.peak_power:g}, demand is {rcv.demand:g}")
        worst_total += max(power_of(e, rcv.demand) for e in eff)
        curves.append(eff)
        is_iid = rcv.channel.is_iid(tol)
        iid.append(is_iid)
        probs.append(rcv.channel.transition[0].copy() if is_iid
                     else rcv.channel.stationary())
        cmin.append(min(e.slopes[0] for e in eff))
        cmax.append(max(e.slopes[-1] for e in eff))
    if worst_total > spec.peak_power * (1 + 1e-12) + tol:
        raise InfeasiblePower(
            f"worst-case joint demand needs {worst_total:g} > P={spec.peak_power:g}")
    return ValidatedSpec(spec, tuple(curves), tuple(iid), tuple(probs),
                         tuple(cmin), tuple(cmax))


def single_receiver(curves: Sequence, probs, demand, peak_power, alpha=1.0,
                    horizon=1, h=0.0, transition=None, name=""):
    """Shorthand for a one-receiver spec with linear holding cost."""
    curves = [c if isinstance(c, PowerRateCurve) else PowerRateCurve.linear(c)
              for c in curves]
    if transition is None:
        ch = ChannelModel.iid(curves, probs)
    else:
        states = tuple(ChannelState(i, f"s{i}") for i in range(len(curves)))
        ch = ChannelModel(states, np.asarray(transition, dtype=float), tuple(curves))
    rcv = Receiver(ch, float(demand), LinearHolding(float(h)))
    return ProblemSpec((rcv,), float(peak_power), float(alpha), horizon, name=name)
