"""Monte Carlo and exact evaluation of scheduling policies.

A policy is any object with ``M`` (receiver count) and a vectorised
``act(n, x, s) -> z`` taking buffers ``x[E, M]`` and channel states
``s[E, M]`` for E parallel episodes, with n slots to go.

Randomness comes from numpy's Philox counter-based generator.  Each
episode gets its own stream keyed by ``SeedSequence((seed, episode))``,
so results do not depend on how episodes are batched or ordered.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dp import Grid1D, TwoRxOperator, ValueGrid, _interp
from .errors import PolicyInfeasibleAction
from .model import ValidatedSpec, power_of

FEAS_TOL = 1e-9


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def episode_rng(seed, episode):
    """Independent Philox stream for one episode."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, episode))))


def stage_power(vspec: ValidatedSpec, m, z, s):
    """Power used by receiver m for transmissions z[E] in states s[E]."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    for k, cv in enumerate(vspec.curves[m]):
        mask = s == k
        if mask.any():
            out[mask] = power_of(cv, np.clip(z[mask], 0.0, cv.z_max))
    return out


def z_max_of(vspec, m, s):
    return vspec.z_max(m)[s]


def check_action(vspec, x, z, s, tol=FEAS_TOL):
    """Per-episode feasibility: (ok[E], power[E])."""
    E, M = x.shape
    ok = np.ones(E, dtype=bool)
    power = np.zeros(E)
    for m in range(M):
        d = vspec.demand(m)
        ok &= z[:, m] >= -tol
        ok &= x[:, m] + z[:, m] >= d - tol * max(1.0, d)
        ok &= z[:, m] <= z_max_of(vspec, m, s[:, m]) * (1 + tol) + tol
        power += stage_power(vspec, m, np.clip(z[:, m], 0, None), s[:, m])
    ok &= power <= vspec.P * (1 + tol) + tol
    return ok, power


# --------------------------------------------------------------------------
# baseline and DP-derived policies
# --------------------------------------------------------------------------

class JustInTime:
    """Send exactly what the next playout needs: z = max(0, d - x)."""

    def __init__(self, vspec):
        self.vspec = vspec
        self.M = vspec.M
        self.d = np.array([vspec.demand(m) for m in range(self.M)])

    def act(self, n, x, s):
        return np.maximum(self.d[None, :] - x, 0.0)


class OpportunisticGreedy:
    """Fill up to ``fill`` slots of demand in the best channel state, else just in time.

    ``fill`` defaults to the slots remaining.  With several receivers the
    leftover power after everyone's demand is handed out in receiver order.
    """

    def __init__(self, vspec, fill=None):
        self.vspec = vspec
        self.M = vspec.M
        self.d = np.array([vspec.demand(m) for m in range(self.M)])
        self.fill = fill
        self.best = [int(np.argmin([cv.slopes[0] for cv in vspec.curves[m]]))
                     for m in range(self.M)]

    def act(self, n, x, s):
        z = np.maximum(self.d[None, :] - x, 0.0)
        left = self.vspec.P - sum(stage_power(self.vspec, m, z[:, m], s[:, m])
                                  for m in range(self.M))
        slots = n if self.fill is None else self.fill
        for m in range(self.M):
            good = s[:, m] == self.best[m]
            if not good.any():
                continue
            cv = self.vspec.curves[m][self.best[m]]
            want = np.maximum(slots * self.d[m] - x[:, m], z[:, m])
            cur = power_of(cv, np.minimum(z[:, m], cv.z_max))
            budget = np.clip(left + cur, 0, None)
            cap = np.array([_rate(cv, b) for b in budget])
            new = np.where(good, np.maximum(np.minimum(want, cap), z[:, m]), z[:, m])
            left = left - np.where(good, power_of(cv, np.minimum(new, cv.z_max)) - cur, 0)
            z[:, m] = new
        return z


def _rate(cv, p):
    from .model import rate_of
    return rate_of(cv, min(p, cv.P))


class DPGreedy1:
    """Greedy policy of a one-receiver value table (finite or stationary).

    On grid buffers the stored argmin is used directly; off the grid the
    one-step minimisation is redone with the stored g table.
    """

    def __init__(self, vspec, grid: Grid1D, y_tables, g_tables, m=0, power_weight=1.0,
                 stationary=False):
        self.vspec, self.grid, self.m = vspec, grid, m
        self.y = y_tables
        self.g = g_tables
        self.power_weight = power_weight
        self.stationary = stationary
        self.M = 1
        self.d = vspec.demand(m)

    @classmethod
    def from_valuegrid(cls, vg: ValueGrid):
        return cls(vg.vspec, vg.grids[0], vg.y, vg.g, vg.receivers[0], vg.power_weight)

    def _tables(self, n):
        if self.stationary:
            return self.y, self.g
        return self.y[n], self.g[n]

    def point(self, n, x, s):
        """Optimal y at an arbitrary buffer x (scalar)."""
        _, g = self._tables(n)
        cv = self.vspec.curves[self.m][s]
        lo = max(x, self.d)
        hi = min(x + cv.z_max, self.grid.x_max)
        gx = self.grid.x
        ys = np.concatenate([[lo], gx[(gx > lo) & (gx <= hi + 1e-12)],
                             x + cv.segment_ends()])
        ys = ys[(ys >= lo - 1e-12) & (ys <= hi + 1e-12)]
        ys = np.clip(ys, lo, hi)
        cost = self.power_weight * power_of(cv, np.clip(ys - x, 0, cv.z_max)) \
            + _interp(g[s], ys / self.grid.step)
        best = cost.min()
        tie = cost <= best + 1e-12 * max(1.0, abs(best))
        return float(ys[tie].min())

    def act(self, n, x, s):
        x1 = np.asarray(x, dtype=float).reshape(-1)
        s1 = np.asarray(s, dtype=int).reshape(-1)
        Y, _ = self._tables(n)
        q = x1 / self.grid.step
        idx = np.rint(q).astype(int)
        on = (np.abs(q - idx) <= 1e-9 * np.maximum(1.0, q)) & (idx < self.grid.n)
        y = np.empty_like(x1)
        if on.any():
            y[on] = Y[s1[on], idx[on]]
        for e in np.nonzero(~on)[0]:
            y[e] = self.point(n, x1[e], s1[e])
        return (y - x1)[:, None]


class DPGreedy2:
    """Greedy policy of a two-receiver value table."""

    def __init__(self, vg: ValueGrid):
        self.vg = vg
        self.op = TwoRxOperator(vg.vspec, vg.grids)
        self.M = 2

    def act(self, n, x, s):
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=int)
        g1, g2 = self.vg.grids
        z = np.empty_like(x)
        for e in range(x.shape[0]):
            q1, q2 = x[e, 0] / g1.step, x[e, 1] / g2.step
            i1, i2 = int(round(q1)), int(round(q2))
            if (abs(q1 - i1) <= 1e-9 * max(1, q1) and abs(q2 - i2) <= 1e-9 * max(1, q2)
                    and i1 < g1.n and i2 < g2.n):
                y = self.vg.y[n, s[e, 0], s[e, 1], i1, i2]
            else:
                c1, c2 = self.op.c[0][s[e, 0]], self.op.c[1][s[e, 1]]
                _, y = self.op.solve_point(self.vg.g[n][s[e, 0], s[e, 1]], c1, c2, x[e])
            z[e] = y - x[e]
        return np.maximum(z, 0.0)


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    """One episode: per-slot records plus totals."""

    seed: int
    episode: int
    records: list = field(default_factory=list)
    discounted: float = 0.0
    undiscounted: float = 0.0
    slots: int = 0
    aborted: str = ""

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "s", "x", "z", "power", "holding"])
        for r in self.records:
            w.writerow([r["n"], " ".join(map(str, r["s"])),
                        " ".join(repr(float(v)) for v in r["x"]),
                        " ".join(repr(float(v)) for v in r["z"]),
                        repr(float(r["power"])), repr(float(r["holding"]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class CostStats:
    """Summary of a batch of episodes (aborted episodes excluded)."""

    episodes: int
    mean: float
    stderr: float
    min: float
    max: float
    average_per_slot: float
    slots: int
    aborted: int = 0
    power_violations: int = 0
    underflow_violations: int = 0
    costs: np.ndarray = field(default=None, repr=False)
    trajectories: list = field(default_factory=list, repr=False)

    def ci(self, z=1.96):
        return self.mean - z * self.stderr, self.mean + z * self.stderr

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        cols = ["episodes", "mean", "stderr", "min", "max", "average_per_slot", "slots",
                "aborted", "power_violations", "underflow_violations"]
        w.writerow(cols)
        w.writerow([repr(getattr(self, c)) if isinstance(getattr(self, c), float)
                    else getattr(self, c) for c in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def sample_paths(vspec: ValidatedSpec, episodes, slots, seed, s0=None, first_episode=0):
    """Channel states s[E, slots, M] from per-episode Philox streams."""
    M = vspec.M
    out = np.empty((episodes, slots, M), dtype=int)
    for e in range(episodes):
        u = episode_rng(seed, first_episode + e).random((slots, M))
        for m in range(M):
            T = np.asarray(vspec.transition(m))
            cum = np.cumsum(T, axis=1)
            cum[:, -1] = 1.0
            if s0 is None:
                p0 = np.cumsum(vspec.probs[m])
                p0[-1] = 1.0
                cur = int(np.searchsorted(p0, u[0, m], side="right"))
            else:
                cur = int(np.atleast_1d(s0)[m])
            out[e, 0, m] = cur
            for t in range(1, slots):
                cur = int(np.searchsorted(cum[cur], u[t, m], side="right"))
                out[e, t, m] = cur
    return out


def simulate(policy, vspec: ValidatedSpec, episodes, slots, seed=0, x0=None, s0=None,
             alpha=None, stationary=False, record=0, strict=False) -> CostStats:
    """Run ``episodes`` independent episodes of ``slots`` slots.

    Slot t (t = 0 first) is decided with n = slots - t slots to go (or
    n = 0 for stationary policies) and discounted by alpha**t.  Infeasible
    actions abort the episode (``strict`` raises instead); the counts are
    reported in the stats.  ``record`` keeps full trajectories for that
    many leading episodes.
    """
    M = vspec.M
    alpha = vspec.alpha if alpha is None else alpha
    if x0 is None:
        x0 = [r.initial_x for r in vspec.spec.receivers]
    S = sample_paths(vspec, episodes, slots, seed, s0)
    x = np.tile(np.asarray(x0, dtype=float), (episodes, 1))
    d = np.array([vspec.demand(m) for m in range(M)])
    alive = np.ones(episodes, dtype=bool)
    disc = np.zeros(episodes)
    undisc = np.zeros(episodes)
    trajs = [Trajectory(seed, e) for e in range(min(record, episodes))]
    p_viol = u_viol = 0
    w = 1.0
    for t in range(slots):
        n = 0 if stationary else slots - t
        s = S[:, t, :]
        z = np.asarray(policy.act(n, x, s), dtype=float).reshape(episodes, M)
        ok, power = check_action(vspec, x, z, s)
        bad = alive & ~ok
        if bad.any():
            if strict:
                raise PolicyInfeasibleAction(
                    f"slot {t}: infeasible action in {int(bad.sum())} episodes")
            under = bad & np.any(x + z < d[None, :] - FEAS_TOL, axis=1)
            u_viol += int(under.sum())
            p_viol += int((bad & ~under).sum())
            for e in np.nonzero(bad)[0]:
                if e < len(trajs):
                    trajs[e].aborted = f"slot {t}"
            alive &= ok
        z = np.maximum(z, 0.0)
        y = x + z
        hold = np.zeros(episodes)
        for m in range(M):
            hold += np.asarray(vspec.holding(m)(np.maximum(y[:, m] - d[m], 0.0)))
        cost = power + hold
        disc += np.where(alive, w * cost, 0.0)
        undisc += np.where(alive, cost, 0.0)
        for e, tr in enumerate(trajs):
            if alive[e]:
                tr.records.append(dict(n=n, s=s[e].tolist(), x=x[e].copy(), z=z[e].copy(),
                                       power=float(power[e]), holding=float(hold[e])))
        x = np.maximum(y - d[None, :], 0.0)
        w *= alpha
    for e, tr in enumerate(trajs):
        tr.discounted, tr.undiscounted, tr.slots = float(disc[e]), float(undisc[e]), slots
    costs = disc[alive]
    k = costs.size
    mean = float(np.sum(costs) / k) if k else float("nan")
    std = float(np.std(costs, ddof=1)) if k > 1 else 0.0
    avg = float(np.sum(undisc[alive]) / (k * slots)) if k else float("nan")
    return CostStats(k, mean, std / math.sqrt(k) if k else float("nan"),
                     float(costs.min()) if k else float("nan"),
                     float(costs.max()) if k else float("nan"), avg, slots,
                     int((~alive).sum()), p_viol, u_viol, costs, trajs)


# --------------------------------------------------------------------------
# exact evaluation
# --------------------------------------------------------------------------

def _stage_cost(vspec, x, z, s):
    M = vspec.M
    xa = np.asarray(x, dtype=float)[None, :]
    za = np.asarray(z, dtype=float).reshape(1, M)
    sa = np.asarray(s, dtype=int)[None, :]
    ok, power = check_action(vspec, xa, za, sa)
    if not ok[0]:
        raise PolicyInfeasibleAction(f"infeasible action z={z} at x={x}, s={s}")
    hold = sum(float(vspec.holding(m)(max(xa[0, m] + za[0, m] - vspec.demand(m), 0.0)))
               for m in range(M))
    return float(power[0]) + hold, np.maximum(xa[0] + za[0] - [vspec.demand(m) for m in range(M)], 0)


def exhaustive_expectation(policy, vspec: ValidatedSpec, N, x0, s0, alpha=None):
    """Expected discounted N-slot cost by enumerating every channel path.

    Path probabilities and costs are accumulated with ``math.fsum``.
    Practical for |S|^N up to about 1e4 paths.
    """
    alpha = vspec.alpha if alpha is None else alpha
    M = vspec.M
    Ts = [np.asarray(vspec.transition(m)) for m in range(M)]
    sizes = [vspec.n_states(m) for m in range(M)]
    joint = list(itertools.product(*[range(k) for k in sizes]))
    terms = []
    s0 = tuple(np.atleast_1d(s0))
    for rest in itertools.product(joint, repeat=N - 1):
        path = (s0,) + rest
        prob = 1.0
        for a, b in zip(path[:-1], path[1:]):
            for m in range(M):
                prob *= Ts[m][a[m], b[m]]
        if prob == 0.0:
            continue
        x = np.asarray(x0, dtype=float)
        total = []
        w = 1.0
        for t, s in enumerate(path):
            n = N - t
            z = np.asarray(policy.act(n, x[None, :], np.asarray(s)[None, :]),
                           dtype=float).reshape(M)
            c, x = _stage_cost(vspec, x, z, s)
            total.append(w * c)
            w *= alpha
        terms.append(prob * math.fsum(total))
    return math.fsum(terms)


def policy_value(policy, vspec: ValidatedSpec, N, x0, s0, alpha=None):
    """Exact expected cost by memoised recursion over (n, x, s).

    Equivalent to path enumeration but shares sub-paths, so long horizons
    on small state sets stay cheap.
    """
    alpha = vspec.alpha if alpha is None else alpha
    M = vspec.M
    Ts = [np.asarray(vspec.transition(m)) for m in range(M)]
    sizes = [vspec.n_states(m) for m in range(M)]
    joint = list(itertools.product(*[range(k) for k in sizes]))
    memo = {}

    def J(n, x, s):
        if n == 0:
            return 0.0
        key = (n, tuple(np.round(x, 12)), s)
        if key in memo:
            return memo[key]
        z = np.asarray(policy.act(n, np.asarray(x)[None, :], np.asarray(s)[None, :]),
                       dtype=float).reshape(M)
        c, xn = _stage_cost(vspec, x, z, s)
        fut = []
        for s2 in joint:
            p = 1.0
            for m in range(M):
                p *= Ts[m][s[m], s2[m]]
            if p:
                fut.append(p * J(n - 1, xn, s2))
        v = c + alpha * math.fsum(fut)
        memo[key] = v
        return v

    return J(N, np.asarray(x0, dtype=float), tuple(np.atleast_1d(s0)))
