"""Closed-form thresholds and base-stock policies for one receiver.

When the channel is IID, the holding cost is linear and every segment end
of the effective power-rate curve is a whole number of slots of demand,
the optimal finite-horizon policy is a (generalized) base-stock policy.
Its targets follow from a table of per-packet cost thresholds gamma[n, j]
that is built stage by stage without solving the dynamic program.

gamma[n, j] is the marginal power cost at which covering j - 1 rather
than j future slots is a break-even decision with n slots to go.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PreconditionViolated
from .model import ValidatedSpec

INTEGER_RTOL = 1e-9


def _as_int(v, what):
    r = round(v)
    if abs(v - r) > INTEGER_RTOL * max(1.0, abs(v)) or r < 1:
        raise PreconditionViolated(f"{what} = {v!r} is not a positive integer")
    return int(r)


def _check_preconditions(vspec: ValidatedSpec, linear_only):
    if vspec.M != 1:
        raise PreconditionViolated(f"single receiver required, spec has {vspec.M}")
    if not vspec.iid[0]:
        raise PreconditionViolated("IID channel required (transition rows differ)")
    h = vspec.holding(0).linear_rate
    if h is None:
        raise PreconditionViolated("linear holding cost required")
    if vspec.N is None:
        raise PreconditionViolated("finite horizon N required")
    d = vspec.demand(0)
    slots = []
    for s, cv in enumerate(vspec.curves[0]):
        if linear_only and cv.K > 0:
            raise PreconditionViolated(
                f"state {s}: curve has {cv.K} breakpoints below peak power; "
                "use compute_gamma_pwl")
        L = [_as_int(e / d, f"state {s}: segment end / demand") for e in cv.segment_ends()]
        slots.append(tuple(L))
    return h, d, slots


@dataclass
class ThresholdTable:
    """gamma[n, j] for n = 1..N, j = 1..N+1 (row/column 0 unused).

    ``slots[s]`` holds (L_0, ..., L_{K-1}, L_max): the segment ends of state
    s measured in slots of demand.  ``+inf`` entries are IEEE infinities.
    """

    gamma: np.ndarray
    slots: tuple
    slopes: tuple
    probs: np.ndarray
    demand: float
    h: float
    alpha: float
    restricted: bool = True

    @property
    def N(self):
        return self.gamma.shape[0] - 1

    def g(self, n, j):
        """gamma[n, j] with the boundary conventions for j outside 1..n."""
        if j <= 1:
            return np.inf
        if j > n:
            return 0.0
        return self.gamma[n, j]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "j", "gamma"])
        for n in range(1, self.N + 1):
            for j in range(1, self.N + 2):
                w.writerow([n, j, repr(float(self.gamma[n, j]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _stage_value(c, L, G, j):
    """Contribution of one channel state to gamma[n, j] (before p weighting).

    ``c`` are the segment slopes, ``L`` the segment ends in slots (last is
    L_max) and ``G(i)`` returns gamma[n-1, i].  Exactly one of the cases
    below holds because G is nonincreasing in i and c is nondecreasing.
    """
    K = len(c) - 1
    Lk = lambda k: 0 if k < 0 else L[k]  # noqa: E731
    hits = []
    if c[0] >= G(j - 1):
        hits.append(G(j - 1))
    for k in range(K):
        if G(j - 1 + Lk(k)) <= c[k] < G(j - 1 + Lk(k - 1)):
            hits.append(c[k])
        if c[k] < G(j - 1 + Lk(k)) <= c[k + 1]:
            hits.append(G(j - 1 + Lk(k)))
    if G(j - 1 + L[K]) <= c[K] < G(j - 1 + Lk(K - 1)):
        hits.append(c[K])
    if c[K] < G(j - 1 + L[K]):
        hits.append(G(j - 1 + L[K]))
    if len(hits) != 1:
        raise AssertionError(f"threshold cases overlap or miss: {len(hits)} hits")
    return hits[0]


def _build(vspec, slots, restricted=True):
    h, d = vspec.holding(0).linear_rate, vspec.demand(0)
    alpha, N = vspec.alpha, vspec.N
    p = np.asarray(vspec.probs[0], dtype=float)
    slopes = tuple(tuple(float(c) for c in cv.slopes) for cv in vspec.curves[0])
    gamma = np.zeros((N + 1, N + 2))
    gamma[:, 1] = np.inf
    tab = ThresholdTable(gamma, tuple(slots), slopes, p, d, h, alpha, restricted)
    for n in range(2, N + 1):
        G = lambda i: tab.g(n - 1, i)  # noqa: E731
        for j in range(2, n + 1):
            total = 0.0
            for s, (c, L) in enumerate(zip(slopes, slots)):
                if restricted:
                    v = _stage_value(c, L, G, j)
                else:
                    # without the power cap: pay at most c[0] per packet
                    v = G(j - 1) if c[0] >= G(j - 1) else c[0]
                total += p[s] * v
            gamma[n, j] = -h + alpha * total
    return tab


def compute_gamma_linear(vspec: ValidatedSpec, restricted=True) -> ThresholdTable:
    """Threshold table for linear power-rate curves.

    ``restricted=False`` drops the peak-power term; the result is then the
    table of the problem without a power cap, which is never above the
    restricted one.
    """
    _, _, slots = _check_preconditions(vspec, linear_only=True)
    return _build(vspec, slots, restricted)


def compute_gamma_pwl(vspec: ValidatedSpec) -> ThresholdTable:
    """Threshold table for piecewise-linear curves (any number of segments)."""
    _, _, slots = _check_preconditions(vspec, linear_only=False)
    return _build(vspec, slots, True)


# --------------------------------------------------------------------------
# critical numbers and the policy
# --------------------------------------------------------------------------

@dataclass
class CriticalNumbers:
    """b[n, s, k] target levels; states with fewer segments repeat their last."""

    b: np.ndarray
    K: tuple

    @property
    def N(self):
        return self.b.shape[0] - 1

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "s", "k", "b"])
        for n in range(1, self.N + 1):
            for s, K in enumerate(self.K):
                for k in range(K + 1):
                    w.writerow([n, s, k, repr(float(self.b[n, s, k]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def criticals_from_gamma(table: ThresholdTable) -> CriticalNumbers:
    """b[n, s, k] = j*d for the j with gamma[n, j+1] <= c_k(s) < gamma[n, j]."""
    N = table.N
    S = len(table.slopes)
    Kmax = max(len(c) for c in table.slopes) - 1
    b = np.full((N + 1, S, Kmax + 1), np.nan)
    for n in range(1, N + 1):
        for s, cs in enumerate(table.slopes):
            for k, c in enumerate(cs):
                for j in range(1, n + 1):
                    if table.g(n, j + 1) <= c < table.g(n, j):
                        b[n, s, k] = j * table.demand
                        break
            b[n, s, len(cs):] = b[n, s, len(cs) - 1]
    return CriticalNumbers(b, tuple(len(c) - 1 for c in table.slopes))


@dataclass
class BaseStockPolicy:
    """Finite generalized base-stock policy built from critical numbers.

    With n slots to go in state s, the target for the k-th slope segment is
    b[n, s, k].  Starting at the cheapest segment, the policy transmits up
    to the target as long as the marginal segment cost justifies it.
    """

    criticals: CriticalNumbers
    curves: tuple
    demand: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_spec(cls, vspec: ValidatedSpec):
        tab = compute_gamma_pwl(vspec)
        return cls(criticals_from_gamma(tab), vspec.curves[0], vspec.demand(0),
                   {"table": tab})

    @property
    def M(self):
        return 1

    def on_grid(self, x):
        """True when x is a multiple of the demand (where optimality holds)."""
        q = x / self.demand
        return abs(q - round(q)) <= INTEGER_RTOL * max(1.0, q)

    def action(self, n, x, s):
        """(z, y) for n slots to go, buffer x and channel state s."""
        if x < 0:
            raise ValueError("buffer must be nonnegative")
        cv = self.curves[s]
        b = self.criticals.b[n, s]
        ends = cv.segment_ends()
        z_prev = 0.0
        for k in range(cv.K + 1):
            if x + z_prev > b[k]:
                z = z_prev
                break
            if x + ends[k] > b[k]:
                z = b[k] - x
                break
            z_prev = ends[k]
        else:
            z = cv.z_max
        return z, x + z

    def heuristic(self, x):
        """Label for reports: off-grid buffers carry no optimality claim."""
        return "optimal" if self.on_grid(x) else "heuristic off-grid"

    def act(self, n, x, s):
        """Vectorised action over episodes: x[E, 1], s[E, 1] -> z[E, 1]."""
        x = np.asarray(x, dtype=float).reshape(-1)
        s = np.asarray(s, dtype=int).reshape(-1)
        z = np.array([self.action(n, xi, si)[0] for xi, si in zip(x, s)])
        return z[:, None]


def gamma_from_values(vg, n, j):
    """gamma[n, j] from a solved DP via the value-difference identity.

    gamma[n, j] = -h + (alpha / d) * E[V_{n-1}((j-2)d) - V_{n-1}((j-1)d)].
    Needs (j - 1) * d on the grid; used as an independent check.
    """
    vspec = vg.vspec
    d = vspec.demand(0)
    h = vspec.holding(0).linear_rate
    grid = vg.grids[0]
    p = np.asarray(vspec.probs[0])
    i0 = grid.index_of((j - 2) * d)
    i1 = grid.index_of((j - 1) * d)
    dv = vg.V[n - 1][:, i0] - vg.V[n - 1][:, i1]
    return -h + vspec.alpha / d * float(p @ dv)
