"""Lower bounds for many receivers and the greedy policies built on them.

Both bounds split the problem into one-receiver problems.

* separable: every receiver may use the full peak power P on its own.
* Lagrangian: the joint per-slot budget sum_m power_m <= P is priced at
  lambda per unit of power.  Receiver m then pays (1 + lambda) per unit
  (still capped at P), and the bound is
  L(lambda) = sum_m V^m_lambda - lambda * P * sum_{t<N} alpha^t.
  L is concave in lambda and L(0) is the separable bound.

``greedy_feasible`` turns either bound into a feasible policy by a one-step
lookahead over the true joint action set with the per-receiver bound
tables standing in for the cost-to-go.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dp import Grid1D, _interp, solve_1rx, solve_2rx
from .errors import DualSearchDiverged, PreconditionViolated
from .model import ValidatedSpec, power_of, validate
from .two_rx import golden_section

GOLDEN_TOL = 1e-4


def receiver_spec(vspec: ValidatedSpec, m) -> ValidatedSpec:
    """One-receiver problem of receiver m with the full peak power."""
    sp = vspec.spec
    return validate(sp.replace(receivers=(sp.receivers[m],), name=f"{sp.name}[{m}]"))


def _joint_states(vspec):
    return list(itertools.product(*[range(vspec.n_states(m)) for m in range(vspec.M)]))


def _initial_weights(vspec):
    w = {}
    for s in _joint_states(vspec):
        w[s] = float(np.prod([vspec.probs[m][s[m]] for m in range(vspec.M)]))
    return w


def _discount_sum(alpha, N):
    return float(N) if alpha == 1.0 else (1 - alpha ** N) / (1 - alpha)


@dataclass
class BoundReport:
    """Lower bound on V_N(x, s) for every joint initial state s.

    ``values[s]`` is the bound per joint state and ``value`` its average
    under the initial state distribution.  ``per_receiver[m][s_m]`` are the
    one-receiver values (before the Lagrangian constant).  ``exact`` and
    ``gap`` are filled when the exact DP was computed (M <= 2).
    """

    kind: str
    lam: float
    value: float
    values: dict
    per_receiver: list
    x: tuple
    exact: dict = None
    gap: float = None
    trace: list = field(default_factory=list)
    tables: list = field(default_factory=list, repr=False)
    vspec: ValidatedSpec = field(default=None, repr=False)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["kind", "lambda", "state", "value", "per_receiver", "exact", "gap"])
        for s, v in self.values.items():
            per = " ".join(repr(float(self.per_receiver[m][s[m]])) for m in range(len(s)))
            ex = "" if self.exact is None else repr(float(self.exact[s]))
            gap = "" if self.exact is None else repr(float(self.exact[s] - v))
            w.writerow([self.kind, repr(self.lam), " ".join(map(str, s)), repr(float(v)),
                        per, ex, gap])
        for lam, val in self.trace:
            w.writerow(["trace", repr(lam), "", repr(val), "", "", ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _receiver_tables(vspec, lam, step=None, N=None):
    """Solve every receiver's one-receiver problem with power priced 1 + lam."""
    N = vspec.N if N is None else N
    out = []
    for m in range(vspec.M):
        sub = receiver_spec(vspec, m)
        d = sub.demand(0)
        grid = Grid1D.for_demand(d, N, step if step is not None else d / 10)
        out.append(solve_1rx(sub, grid, N=N, power_weight=1.0 + lam))
    return out


def _per_receiver_values(tables, x, N):
    return [np.array([vg.value(N, x[m], s) for s in range(vg.V.shape[1])])
            for m, vg in enumerate(tables)]


def _threshold_values(vspec, x, N):
    """Fast path: one-receiver values from base-stock policies, or None."""
    from .sim import policy_value
    from .threshold import BaseStockPolicy

    out = []
    try:
        for m in range(vspec.M):
            sub = receiver_spec(vspec, m)
            pol = BaseStockPolicy.from_spec(sub)
            if not pol.on_grid(x[m]):
                return None
            out.append(np.array([policy_value(pol, sub, N, [x[m]], [s])
                                 for s in range(sub.n_states(0))]))
    except PreconditionViolated:
        return None
    return out


def _assemble(vspec, kind, lam, per, const, x, tables=()):
    vals = {s: float(sum(per[m][s[m]] for m in range(vspec.M)) - const)
            for s in _joint_states(vspec)}
    w = _initial_weights(vspec)
    value = float(sum(w[s] * v for s, v in vals.items()))
    return BoundReport(kind, lam, value, vals, per, tuple(x), tables=list(tables),
                       vspec=vspec)


def separable_bound(vspec: ValidatedSpec, x=None, step=None, use_threshold=True,
                    exact=False) -> BoundReport:
    """Sum of one-receiver values, each receiver allowed the full power P.

    Uses the closed-form base-stock policy for a receiver when its
    preconditions hold and x is a whole number of slots, else the DP.
    The DP tables are always kept (the greedy policy needs them).
    """
    N = _need_N(vspec)
    x = _initial_x(vspec, x)
    tables = _receiver_tables(vspec, 0.0, step, N)
    per = _threshold_values(vspec, x, N) if use_threshold else None
    kind = "separable-threshold"
    if per is None:
        per = _per_receiver_values(tables, x, N)
        kind = "separable"
    rep = _assemble(vspec, kind, 0.0, per, 0.0, x, tables)
    if exact:
        attach_exact(rep, step)
    return rep


def lagrangian_value(vspec, lam, x=None, step=None):
    N = _need_N(vspec)
    x = _initial_x(vspec, x)
    tables = _receiver_tables(vspec, lam, step, N)
    per = _per_receiver_values(tables, x, N)
    const = lam * vspec.P * _discount_sum(vspec.alpha, N)
    return _assemble(vspec, "lagrangian", lam, per, const, x, tables)


def lagrangian_bound(vspec: ValidatedSpec, x=None, step=None, lam_max=None,
                     tol=GOLDEN_TOL, exact=False) -> BoundReport:
    """Best Lagrangian bound over lambda in [0, lam_max] by golden-section.

    The dual is concave in lambda, so golden-section finds its maximum;
    the trace of (lambda, L) pairs is kept for the concavity check.
    Raises DualSearchDiverged if the maximum sits at lam_max.
    """
    lam_max = 10 * max(vspec.c_max) if lam_max is None else lam_max
    cache = {}

    def L(lam):
        if lam not in cache:
            cache[lam] = lagrangian_value(vspec, lam, x, step)
        return cache[lam].value

    lam = golden_section(lambda t: -L(t), 0.0, lam_max, tol=tol * max(1.0, lam_max))
    cands = {0.0: L(0.0), lam: L(lam)}
    best = max(cands, key=lambda t: (cands[t], -t))
    if best >= lam_max * (1 - 1e-3) and L(lam_max) > L(lam_max * 0.99) + 1e-12:
        raise DualSearchDiverged(f"dual still increasing at lambda_max = {lam_max:g}")
    rep = cache[best]
    rep.trace = sorted((t, r.value) for t, r in cache.items())
    if exact:
        attach_exact(rep, step)
    return rep


def dual_is_concave(trace, tol=1e-9):
    """Second differences of the (lambda, L) trace are all <= tol."""
    t = np.array([a for a, _ in trace])
    v = np.array([b for _, b in trace])
    if t.size < 3:
        return True
    s = np.diff(v) / np.diff(t)
    return bool(np.all(np.diff(s) <= tol * max(1.0, np.max(np.abs(v)))))


def attach_exact(rep: BoundReport, step=None, vg=None):
    """Compare against the exact DP (two receivers, or one)."""
    vspec = rep.vspec
    N = vspec.N
    if vspec.M == 1:
        d = vspec.demand(0)
        vg = vg or solve_1rx(vspec, Grid1D.for_demand(d, N, step if step else d / 10))
        ex = {s: vg.value(N, rep.x[0], s[0]) for s in rep.values}
    elif vspec.M == 2:
        if vg is None:
            from .dp import default_grids_2rx
            vg = solve_2rx(vspec, default_grids_2rx(vspec, step))
        ex = {s: float(vg.value(N, np.array(rep.x), s)) for s in rep.values}
    else:
        return rep
    rep.exact = ex
    w = _initial_weights(vspec)
    rep.gap = float(sum(w[s] * (ex[s] - rep.values[s]) for s in ex))
    return rep


def _need_N(vspec):
    if vspec.N is None:
        raise PreconditionViolated("bounds need a finite horizon N")
    return vspec.N


def _initial_x(vspec, x):
    if x is None:
        return tuple(float(r.initial_x) for r in vspec.spec.receivers)
    return tuple(float(v) for v in np.atleast_1d(x))


# --------------------------------------------------------------------------
# greedy policy
# --------------------------------------------------------------------------

class GreedyFeasible:
    """One-step lookahead on per-receiver bound tables over the joint action set.

    With n slots to go the action minimises
    sum_m [c^m(y_m - x_m) + g^m_n(y_m)] subject to sum_m c^m <= P and
    y_m >= max(x_m, d_m), where g^m_n = h^m + alpha E V^m_{n-1} comes from
    the bound's one-receiver tables (terminal V_0 = 0).  Two receivers are
    solved exactly over the candidate sets; more receivers use a price on
    power found by bisection, which is feasible but may be suboptimal.
    """

    def __init__(self, vspec: ValidatedSpec, tables):
        self.vspec = vspec
        self.tables = tables
        self.M = vspec.M
        self.d = [vspec.demand(m) for m in range(self.M)]
        self._memo = {}

    def _candidates(self, m, n, x, s):
        vg = self.tables[m]
        grid = vg.grids[0]
        cv = self.vspec.curves[m][s]
        lo = max(x, self.d[m])
        hi = min(x + cv.z_max, grid.x_max)
        if lo > hi + 1e-12:
            hi = lo
        gx = grid.x
        ys = np.concatenate([[lo], gx[(gx > lo) & (gx <= hi + 1e-12)], x + cv.segment_ends()])
        ys = np.clip(ys[(ys >= lo - 1e-12) & (ys <= hi + 1e-12)], lo, hi)
        ys = np.unique(ys)
        p = power_of(cv, np.clip(ys - x, 0, cv.z_max))
        val = p + _interp(vg.g[n][s], ys / grid.step)
        return ys, p, val

    def action(self, n, x, s):
        P = self.vspec.P * (1 + 1e-12)
        C = [self._candidates(m, n, x[m], s[m]) for m in range(self.M)]
        if self.M == 1:
            ys, p, val = C[0]
            val = np.where(p <= P, val, np.inf)
            return np.array([ys[int(np.argmin(val))] - x[0]])
        if self.M == 2:
            (y1, p1, v1), (y2, p2, v2) = C
            # p2 is nondecreasing along y2, so a prefix minimum answers
            # "best receiver-2 choice within the leftover power"
            pref = np.minimum.accumulate(v2)
            new = np.r_[True, v2[1:] < pref[:-1]]
            arg = np.maximum.accumulate(np.where(new, np.arange(v2.size), 0))
            k = np.searchsorted(p2, P - p1, side="right") - 1
            ok = k >= 0
            tot = np.where(ok, v1 + pref[np.maximum(k, 0)], np.inf)
            i = int(np.argmin(tot))
            j = arg[k[i]]
            return np.array([y1[i] - x[0], y2[j] - x[1]])
        return self._priced(C, x, P)

    def _priced(self, C, x, P):
        def pick(mu):
            idx = [int(np.argmin(v + mu * p)) for _, p, v in C]
            return idx, sum(C[m][1][i] for m, i in enumerate(idx))

        idx, used = pick(0.0)
        if used > P:
            lo, hi = 0.0, 1.0
            while pick(hi)[1] > P:
                hi *= 2
                if hi > 1e12:
                    break
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                if pick(mid)[1] > P:
                    lo = mid
                else:
                    hi = mid
            idx, used = pick(hi)
        return np.array([C[m][0][i] - x[m] for m, i in enumerate(idx)])

    def act(self, n, x, s):
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=int)
        out = np.empty_like(x)
        for e in range(x.shape[0]):
            key = (n, tuple(np.round(x[e], 12)), tuple(s[e]))
            z = self._memo.get(key)
            if z is None:
                z = self._memo[key] = self.action(n, x[e], s[e])
            out[e] = z
        return out


def greedy_feasible(vspec: ValidatedSpec, report: BoundReport) -> GreedyFeasible:
    """Feasible policy from a bound's one-receiver tables."""
    if not report.tables:
        report.tables = _receiver_tables(vspec, report.lam)
    return GreedyFeasible(vspec, report.tables)
