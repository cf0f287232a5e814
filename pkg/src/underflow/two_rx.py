"""Seven-region structured policy for two receivers.

Built from the stored G_n tables of a two-receiver DP solve.  For each
stage n and joint channel state s:

* b = the lexicographically smallest global minimiser of G_n(., s),
* f1(x2) = smallest minimiser of G_n(., x2, s) over y1 (f2 symmetric),

and the buffer plane splits into seven regions:

    R_I     x >= (f1(x2), f2(x1)), x != b      no transmission
    R_II    x <= b, b affordable               fill to b
    R_IIIA  x2 > b2, f1 affordable             raise y1 to f1(x2)
    R_IIIB  x1 > b1, f2 affordable             raise y2 to f2(x1)
    R_IVA/B/C  as above but unaffordable       spend the whole budget

Inside R_IV the split of the budget is found numerically on the
full-power segment; the structure itself says nothing about it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .dp import TwoRxOperator, ValueGrid, interp2
from .errors import PreconditionViolated

LABELS = ("R_I", "R_II", "R_IIIA", "R_IIIB", "R_IVA", "R_IVB", "R_IVC")
_GOLD = (np.sqrt(5.0) - 1) / 2


def golden_section(f, a, b, tol=1e-6):
    """Minimiser of a unimodal f on [a, b] to within ``tol``."""
    if b - a <= tol:
        return 0.5 * (a + b)
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def simplex_search(f, y0, step, tol=1e-8, restarts=1):
    """Nelder-Mead minimisation of a convex, possibly nonsmooth f on the plane.

    Axis-wise or stencil searches stall in narrow diagonal valleys (the
    descent cone at a kink can be a few degrees wide); the simplex adapts
    its shape to the valley.  One restart guards against early collapse.
    """
    y = np.asarray(y0, dtype=float)
    for _ in range(restarts + 1):
        simplex = [y, y + [step, 0.0], y + [0.0, step]]
        r = minimize(f, y, method="Nelder-Mead",
                     options=dict(xatol=tol, fatol=1e-14, initial_simplex=simplex,
                                  maxfev=4000))
        if f(r.x) <= f(y):
            y = r.x
        step = max(step / 10, 10 * tol)
    return y, f(y)


@dataclass
class RegionPolicy:
    """Structured policy read off a solved two-receiver grid.

    ``mode="table"`` uses the interpolated G_n tables throughout, so it
    agrees with the DP oracle's own minimisation.  ``mode="refined"``
    evaluates G_n off the grid by a fresh one-step minimisation (see
    :meth:`TwoRxOperator.G_point`), refines b with a simplex search and
    the full-power split with golden-section search.
    """

    vg: ValueGrid
    mode: str = "table"
    b_grid: dict = field(default_factory=dict)
    f1_grid: dict = field(default_factory=dict)
    f2_grid: dict = field(default_factory=dict)
    _b_ref: dict = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vg.M != 2:
            raise PreconditionViolated("region policy needs a two-receiver grid")
        self.op = TwoRxOperator(self.vg.vspec, self.vg.grids)
        self.eps = 0.5 * max(g.step for g in self.vg.grids)
        self.meta.setdefault("fallbacks", 0)

    # ---- tables -----------------------------------------------------------

    @property
    def states(self):
        S1, S2 = self.vg.V.shape[1:3]
        return [(a, b) for a in range(S1) for b in range(S2)]

    def _G(self, n, s):
        return self.vg.g[n][s[0], s[1]]

    def _ensure(self, n, s):
        key = (n, tuple(s))
        if key in self.b_grid:
            return
        G = self._G(n, s)
        g1, g2 = self.vg.grids
        m = np.min(G)
        tol = 1e-12 * max(1.0, abs(m))
        # lexicographically smallest minimiser: row-major order of the grid
        i, j = np.argwhere(G <= m + tol)[0]
        self.b_grid[key] = np.array([g1.x[i], g2.x[j]])
        # f1 along every row x2 = grid value, f2 along every column
        self.f1_grid[key] = np.array([self._line_argmin(n, s, 0, v) for v in g2.x])
        self.f2_grid[key] = np.array([self._line_argmin(n, s, 1, v) for v in g1.x])

    def _line_argmin(self, n, s, axis, level):
        """Smallest minimiser of the interpolated G_n along a grid-parallel line.

        ``axis=0``: minimise over y1 with y2 = level (gives f1).  Levels
        below the demand are clamped to it.
        """
        g = self.vg.grids
        d = self.op.d
        other = 1 - axis
        level = max(level, d[other])
        mine = g[axis]
        cand = mine.x[mine.x >= d[axis] - 1e-12]
        # crossings with cell anti-diagonals y1/D1 + y2/D2 = k
        k = np.arange(np.ceil(level / g[other].step), np.floor(
            level / g[other].step + mine.x_max / mine.step) + 1)
        cross = (k - level / g[other].step) * mine.step
        cand = np.concatenate([cand, cross[(cross >= d[axis]) & (cross <= mine.x_max)]])
        cand = np.unique(cand)
        pts = np.empty((cand.size, 2))
        pts[:, axis] = cand
        pts[:, other] = level
        vals = interp2(self._G(n, s), g, pts)
        best = vals.min()
        return float(cand[np.nonzero(vals <= best + 1e-12 * max(1.0, abs(best)))[0][0]])

    def G_value(self, n, s, y):
        """G_n(y, s) with the evaluator of this policy's mode."""
        y = np.asarray(y, dtype=float)
        if self.mode == "table":
            return float(interp2(self._G(n, s), self.vg.grids, y))
        return self.op.G_point(self.vg.g[n - 1] if n > 1 else None, y, s,
                               first_stage=(n == 1))

    def b(self, n, s):
        """Target vector b_n(s)."""
        self._ensure(n, s)
        key = (n, tuple(s))
        if self.mode == "table":
            return self.b_grid[key]
        if key not in self._b_ref:
            step = min(g.step for g in self.vg.grids)
            f = lambda y: self.G_value(n, s, np.maximum(y, self.op.d))  # noqa: E731
            y, _ = simplex_search(f, self.b_grid[key], step)
            self._b_ref[key] = np.maximum(y, self.op.d)
        return self._b_ref[key]

    def f1(self, n, s, x2):
        """f1_n(x2, s): best y1 when y2 is held at x2."""
        self._ensure(n, s)
        if self.mode == "table":
            return self._line_argmin(n, s, 0, float(x2))
        return self._refine_line(n, s, 0, float(x2))

    def f2(self, n, s, x1):
        self._ensure(n, s)
        if self.mode == "table":
            return self._line_argmin(n, s, 1, float(x1))
        return self._refine_line(n, s, 1, float(x1))

    def _refine_line(self, n, s, axis, level):
        level = max(level, self.op.d[1 - axis])
        start = self._line_argmin(n, s, axis, level)
        h = self.vg.grids[axis].step
        lo = max(self.op.d[axis], start - h)
        hi = min(self.vg.grids[axis].x_max, start + h)

        def f(t):
            y = np.empty(2)
            y[axis], y[1 - axis] = t, level
            return self.G_value(n, s, y)
        return golden_section(f, lo, hi)

    # ---- classification ---------------------------------------------------

    def classify(self, n, x, s):
        """Region label of buffer pair x at stage n, joint state s."""
        x = np.asarray(x, dtype=float)
        s = tuple(s)
        b = self.b(n, s)
        c = np.array([self.op.c[0][s[0]], self.op.c[1][s[1]]])
        P = self.op.P
        eps = self.eps
        ptol = 1e-9 * max(1.0, P)
        below = np.all(x <= b + eps)
        if below and c @ np.maximum(b - x, 0) <= P + ptol:
            return "R_II"
        f1 = self.f1(n, s, x[1])
        f2 = self.f2(n, s, x[0])
        if x[0] >= f1 - eps and x[1] >= f2 - eps:
            return "R_I"
        if x[1] > b[1] + eps and f1 - P / c[0] - eps <= x[0] < f1:
            return "R_IIIA"
        if x[0] > b[0] + eps and f2 - P / c[1] - eps <= x[1] < f2:
            return "R_IIIB"
        if below:
            return "R_IVB"
        if x[1] > b[1] + eps and x[0] < f1 - P / c[0]:
            return "R_IVA"
        if x[0] > b[0] + eps and x[1] < f2 - P / c[1]:
            return "R_IVC"
        # boundary slivers left by the tolerances; the neighbouring actions
        # coincide there, so pick the tracking region on the larger side
        self.meta["fallbacks"] += 1
        if x[1] - b[1] >= x[0] - b[0]:
            return "R_IIIA" if c[0] * max(f1 - x[0], 0) <= P + ptol else "R_IVA"
        return "R_IIIB" if c[1] * max(f2 - x[1], 0) <= P + ptol else "R_IVC"

    # ---- actions ----------------------------------------------------------

    def full_power_search(self, n, x, s):
        """Best y on {y >= max(x, d), c.(y - x) = P}."""
        g1, g2 = self.vg.grids
        c1, c2 = self.op.c[0][s[0]], self.op.c[1][s[1]]
        P = self.op.P
        lo = np.maximum(x, self.op.d)
        t_hi = x[0] + (P - c2 * (lo[1] - x[1])) / c1
        t_lo = lo[0]
        if t_hi < t_lo:
            t_hi = t_lo

        def y_of(t):
            return np.array([t, x[1] + (P - c1 * (t - x[0])) / c2])

        # segment breakpoints of the table interpolant: grid lines, anti-diagonals
        ts = [t_lo, t_hi]
        ts += list(g1.x[(g1.x > t_lo) & (g1.x < t_hi)])
        y2 = g2.x[(g2.x > lo[1]) & (g2.x < y_of(t_lo)[1])]
        ts += list(x[0] + (P - c2 * (y2 - x[1])) / c1)
        den = c1 * g1.step - c2 * g2.step
        if abs(den) > 1e-12 * max(c1 * g1.step, c2 * g2.step):
            base = P + c1 * x[0] + c2 * x[1]
            k0 = np.floor(t_lo / g1.step + y_of(t_hi)[1] / g2.step) - 1
            k1 = np.ceil(t_hi / g1.step + y_of(t_lo)[1] / g2.step) + 1
            for k in np.arange(min(k0, k1), max(k0, k1) + 1):
                u = (base - c2 * g2.step * k) / den
                if t_lo < u * g1.step < t_hi:
                    ts.append(u * g1.step)
        ts = np.unique(np.clip(ts, t_lo, t_hi))
        Y = np.array([y_of(t) for t in ts])
        Y[:, 1] = np.maximum(Y[:, 1], lo[1])
        vals = interp2(self._G(n, s), self.vg.grids, Y)
        k = int(np.argmin(vals))
        if self.mode == "table":
            return Y[k]
        a = ts[max(k - 1, 0)]
        b = ts[min(k + 1, len(ts) - 1)]
        t = golden_section(lambda t: self.G_value(n, s, y_of(t)), a, b)
        cands = [y_of(t), Y[k]]
        vals = [self.G_value(n, s, y) for y in cands]
        return cands[int(np.argmin(vals))]

    def structured_action(self, n, x, s, label=None):
        """Post-transmission buffers y for buffer x, stage n, state s."""
        x = np.asarray(x, dtype=float)
        s = tuple(s)
        label = self.classify(n, x, s) if label is None else label
        d = np.asarray(self.op.d)
        c = np.array([self.op.c[0][s[0]], self.op.c[1][s[1]]])
        P = self.op.P
        if label == "R_I":
            y = np.maximum(x, d)
        elif label == "R_II":
            y = np.maximum(self.b(n, s), x)
        elif label == "R_IIIA":
            y = np.array([max(self.f1(n, s, x[1]), x[0]), x[1]])
        elif label == "R_IIIB":
            y = np.array([x[0], max(self.f2(n, s, x[0]), x[1])])
        else:
            y = self.full_power_search(n, x, s)
        y = np.maximum(y, np.maximum(x, d))
        spend = c @ (y - x)
        if spend > P:
            # tolerance overshoot at a region edge: scale back onto the budget
            extra = np.maximum(y - np.maximum(x, d), 0)
            need = c @ (np.maximum(x, d) - x)
            lam = (P - need) / max(c @ extra, 1e-300)
            y = np.maximum(x, d) + lam * extra
        return y

    def act(self, n, x, s):
        """Vectorised transmissions: x[E, 2], s[E, 2] -> z[E, 2]."""
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=int)
        z = np.empty_like(x)
        for e in range(x.shape[0]):
            z[e] = self.structured_action(n, x[e], s[e]) - x[e]
        return np.maximum(z, 0.0)

    @property
    def M(self):
        return 2

    # ---- export -----------------------------------------------------------

    def region_map(self, n, s, stride=1):
        """Rows (x1, x2, label, y1, y2) over the grid."""
        g1, g2 = self.vg.grids
        rows = []
        for x1 in g1.x[::stride]:
            for x2 in g2.x[::stride]:
                lab = self.classify(n, (x1, x2), s)
                y = self.structured_action(n, (x1, x2), s, label=lab)
                rows.append((float(x1), float(x2), lab, float(y[0]), float(y[1])))
        return rows

    def region_csv(self, n, s, path=None, stride=1):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["x1", "x2", "label", "y1", "y2"])
        for r in self.region_map(n, s, stride):
            w.writerow([repr(r[0]), repr(r[1]), r[2], repr(r[3]), repr(r[4])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def build_region_policy(vg: ValueGrid, mode="table") -> RegionPolicy:
    """Region policy for every (n, s) of a solved two-receiver grid."""
    pol = RegionPolicy(vg, mode=mode)
    for n in range(1, vg.N + 1):
        for s in pol.states:
            pol._ensure(n, s)
    return pol
