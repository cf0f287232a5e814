"""Brute-force finite-horizon dynamic programming on a buffer grid.

The value function is tabulated on ``x = i * step`` for one or two
receivers.  Actions are searched exhaustively over grid-aligned
post-transmission levels ``y``, plus the exact off-grid points where the
power budget or a curve breakpoint is hit.  Off-grid values come from
linear (1-D) or triangulated piecewise-linear (2-D) interpolation.

These tables are the ground truth that the closed-form threshold policies
and the structural checks are compared against.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import GridMisaligned, MemoryBudgetExceeded, PreconditionViolated
from .model import ValidatedSpec, power_of

# relative tolerance used for grid alignment and argmin ties
_ALIGN = 1e-9
_TIE = 1e-12
DEFAULT_MEMORY_CAP = 2 * 1024**3


@dataclass(frozen=True)
class Grid1D:
    """Uniform buffer grid 0, step, 2*step, ..., x_max."""

    step: float
    x_max: float

    @property
    def n(self):
        return int(round(self.x_max / self.step)) + 1

    @property
    def x(self):
        return np.arange(self.n) * self.step

    def index_of(self, v):
        """Grid index of an aligned value ``v``; raises if not aligned."""
        q = v / self.step
        i = int(round(q))
        if abs(q - i) > _ALIGN * max(1.0, abs(q)):
            raise GridMisaligned(f"{v} is not a multiple of step {self.step}")
        return i

    @classmethod
    def for_demand(cls, d, slots, step=None):
        """Grid covering ``slots`` slots of demand, plus one step."""
        step = d / 10 if step is None else step
        g = cls(step, slots * d + step)
        g.check(d)
        return g

    def check(self, d):
        q = d / self.step
        if abs(q - round(q)) > _ALIGN * max(1.0, q) or round(q) < 1:
            raise GridMisaligned(f"step {self.step} does not divide demand {d}")
        r = self.x_max / self.step
        if abs(r - round(r)) > _ALIGN * max(1.0, r):
            raise GridMisaligned(f"x_max {self.x_max} is not on the grid")


def _interp(table, pos):
    """Linear interpolation of ``table`` (last axis) at fractional index pos."""
    q = np.floor(pos).astype(int)
    q = np.clip(q, 0, table.shape[-1] - 1)
    f = pos - q
    q1 = np.minimum(q + 1, table.shape[-1] - 1)
    lo = np.take(table, q, axis=-1)
    hi = np.take(table, q1, axis=-1)
    # avoid inf * 0 when f == 0 and the upper node is infeasible
    with np.errstate(invalid="ignore"):
        return np.where(f > 0, (1 - f) * lo + f * hi, lo)


# --------------------------------------------------------------------------
# value tables
# --------------------------------------------------------------------------

@dataclass
class ValueGrid:
    """Solved value tables.

    One receiver: ``V[n, s, i]``, ``y[n, s, i]`` (optimal post-transmission
    level) and ``g[n, s, j]`` = h(y - d) + alpha * E V_{n-1}(y - d), i.e.
    the cost-to-go of a post-transmission level without the power term.

    Two receivers: ``V[n, s1, s2, i1, i2]``, ``y[n, s1, s2, i1, i2, 2]`` and
    ``g[n, s1, s2, j1, j2]`` = G_n(y, s), which *includes* the linear
    power term c_s . y.

    Entries with ``y < d`` in ``g`` are ``inf``; stage 0 rows are unused
    except ``V[0] == 0``.
    """

    vspec: ValidatedSpec
    grids: tuple
    V: np.ndarray
    y: np.ndarray
    g: np.ndarray
    receivers: tuple = (0,)
    power_weight: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def M(self):
        return len(self.grids)

    @property
    def N(self):
        return self.V.shape[0] - 1

    @property
    def alpha(self):
        return self.vspec.alpha

    def z(self, n):
        """Optimal transmissions at stage n (same layout as ``V[n]``)."""
        if self.M == 1:
            return self.y[n] - self.grids[0].x[None, :]
        x1 = self.grids[0].x[:, None]
        x2 = self.grids[1].x[None, :]
        return np.stack([self.y[n, ..., 0] - x1, self.y[n, ..., 1] - x2], axis=-1)

    def value(self, n, x, s):
        """V_n at (possibly off-grid) buffer ``x`` and state ``s``."""
        if self.M == 1:
            g = self.grids[0]
            return float(_interp(self.V[n, s], np.asarray(x) / g.step))
        return float(interp2(self.V[n][tuple(s)], self.grids, x))

    def to_csv(self, path=None):
        """Rows (n, s, x[, x2], V, z[, z2]); returns text when no path given."""
        buf = io.StringIO()
        w = csv.writer(buf)
        if self.M == 1:
            w.writerow(["n", "s", "x", "V", "z"])
            x = self.grids[0].x
            for n in range(1, self.N + 1):
                z = self.z(n)
                for s in range(self.V.shape[1]):
                    for i in range(len(x)):
                        w.writerow([n, s, repr(float(x[i])), repr(float(self.V[n, s, i])),
                                    repr(float(z[s, i]))])
        else:
            w.writerow(["n", "s1", "s2", "x1", "x2", "V", "z1", "z2"])
            x1, x2 = self.grids[0].x, self.grids[1].x
            for n in range(1, self.N + 1):
                z = self.z(n)
                S1, S2 = self.V.shape[1:3]
                for a in range(S1):
                    for b in range(S2):
                        for i in range(len(x1)):
                            for j in range(len(x2)):
                                w.writerow([n, a, b, repr(float(x1[i])), repr(float(x2[j])),
                                            repr(float(self.V[n, a, b, i, j])),
                                            repr(float(z[a, b, i, j, 0])),
                                            repr(float(z[a, b, i, j, 1]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def cache_key(self):
        parts = [self.vspec.spec.spec_hash()]
        parts += [f"{g.step!r}:{g.x_max!r}" for g in self.grids]
        parts += [str(self.N), repr(self.power_weight), ",".join(map(str, self.receivers))]
        import hashlib
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    def save(self, directory):
        """Compact binary cache, file name keyed by spec hash + grid params."""
        path = Path(directory) / f"valuegrid-{self.cache_key()}.npz"
        np.savez_compressed(path, V=self.V, y=self.y, g=self.g)
        return path

    @classmethod
    def load(cls, directory, template: "ValueGrid"):
        path = Path(directory) / f"valuegrid-{template.cache_key()}.npz"
        with np.load(path) as f:
            return cls(template.vspec, template.grids, f["V"], f["y"], f["g"],
                       template.receivers, template.power_weight, dict(template.meta))


def interp2(table, grids, x):
    """Piecewise-linear interpolation of a 2-D grid table at points x[..., 2].

    Each cell is split along its anti-diagonal, from (i+1, j) to (i, j+1).
    With this split the interpolant of convex, supermodular node data is a
    convex function, so minimising it over a convex action set keeps the
    value function convex.  Entries outside the table are clamped.
    """
    g1, g2 = grids
    x = np.asarray(x, dtype=float)
    p1 = np.clip(x[..., 0] / g1.step, 0, g1.n - 1)
    p2 = np.clip(x[..., 1] / g2.step, 0, g2.n - 1)
    q1 = np.minimum(np.floor(p1).astype(int), g1.n - 2)
    q2 = np.minimum(np.floor(p2).astype(int), g2.n - 2)
    f1 = p1 - q1
    f2 = p2 - q2
    v00 = table[q1, q2]
    v10 = table[q1 + 1, q2]
    v01 = table[q1, q2 + 1]
    v11 = table[q1 + 1, q2 + 1]
    with np.errstate(invalid="ignore"):
        lower = v00 + _lin(f1, v10 - v00) + _lin(f2, v01 - v00)
        upper = v11 + _lin(1 - f1, v01 - v11) + _lin(1 - f2, v10 - v11)
    return np.where(f1 + f2 <= 1.0, lower, upper)


def _lin(w, dv):
    # w * dv, but exact zero when w == 0 (dv may be inf - inf)
    return np.where(w > 0, w * np.where(np.isfinite(dv), dv, np.inf), 0.0)


# --------------------------------------------------------------------------
# one receiver
# --------------------------------------------------------------------------

class OneRxOperator:
    """Bellman operator of a single receiver on a fixed grid.

    ``apply(V_prev)`` returns (V, y, g) for the next stage.  The per-state
    transmission-cost matrices are built once, so value iteration can call
    ``apply`` thousands of times cheaply.
    """

    def __init__(self, vspec: ValidatedSpec, grid: Grid1D, m=0, power_weight=1.0,
                 alpha=None):
        d = vspec.demand(m)
        grid.check(d)
        self.vspec, self.grid, self.m = vspec, grid, m
        self.alpha = vspec.alpha if alpha is None else alpha
        self.power_weight = power_weight
        self.T = np.asarray(vspec.transition(m))
        self.S = self.T.shape[0]
        self.id = grid.index_of(d)
        x = grid.x
        n = grid.n
        self.hold = np.asarray(vspec.holding(m)(np.maximum(x - d, 0.0)), dtype=float)
        self.cost = np.full((self.S, n, n), np.inf)
        inj_y, inj_c = [], []
        dz = x[None, :] - x[:, None]
        for s, cv in enumerate(vspec.curves[m]):
            ok = (dz >= -1e-15) & (dz <= cv.z_max * (1 + 1e-12) + 1e-12)
            ok &= (np.arange(n)[None, :] >= self.id)
            c = np.full((n, n), np.inf)
            c[ok] = power_weight * power_of(cv, np.clip(dz[ok], 0.0, cv.z_max))
            self.cost[s] = c
            # off-grid budget and breakpoint targets
            ends = cv.segment_ends()
            ys, cs = [], []
            for e in ends:
                q = e / grid.step
                if abs(q - round(q)) <= _ALIGN * max(1.0, q):
                    continue
                yv = x + e
                cval = np.full(n, power_weight * power_of(cv, e))
                bad = (yv > grid.x_max + 1e-12) | (yv < d)
                cval[bad] = np.inf
                ys.append(np.where(bad, x, yv))
                cs.append(cval)
            inj_y.append(np.array(ys).T if ys else np.zeros((n, 0)))
            inj_c.append(np.array(cs).T if cs else np.zeros((n, 0)))
        self.inj_y, self.inj_c = inj_y, inj_c

    def g_table(self, V_prev):
        """h(y - d) + alpha * E[V_prev(y - d, S') | s] on the y grid."""
        n = self.grid.n
        g = np.full((self.S, n), np.inf)
        EV = self.T @ V_prev
        g[:, self.id:] = self.hold[None, self.id:] + self.alpha * EV[:, :n - self.id]
        return g

    def apply(self, V_prev):
        g = self.g_table(V_prev)
        n = self.grid.n
        x = self.grid.x
        V = np.empty((self.S, n))
        Y = np.empty((self.S, n))
        for s in range(self.S):
            tot = self.cost[s] + g[s][None, :]
            ycand = np.broadcast_to(x[None, :], (n, n))
            if self.inj_y[s].shape[1]:
                iv = self.inj_c[s] + _interp(g[s], self.inj_y[s] / self.grid.step)
                tot = np.concatenate([tot, iv], axis=1)
                ycand = np.concatenate([ycand, self.inj_y[s]], axis=1)
            best = tot.min(axis=1)
            tie = tot <= best[:, None] + _TIE * np.maximum(1.0, np.abs(best))[:, None]
            yb = np.where(tie, ycand, np.inf).min(axis=1)
            V[s] = best
            Y[s] = yb
        return V, Y, g


def _check_memory(n_bytes, cap):
    if n_bytes > cap:
        raise MemoryBudgetExceeded(
            f"value tables need ~{n_bytes / 1e6:.0f} MB, cap is {cap / 1e6:.0f} MB")


def solve_1rx(vspec: ValidatedSpec, grid: Grid1D, N=None, m=0, power_weight=1.0,
              memory_cap=DEFAULT_MEMORY_CAP) -> ValueGrid:
    """Backward induction for one receiver (receiver ``m`` of the spec).

    ``power_weight`` scales the transmission cost; the Lagrangian bound uses
    it to price power.  Ties in the argmin go to the smallest ``y``.
    """
    N = vspec.N if N is None else N
    if N is None:
        raise PreconditionViolated("finite horizon N required")
    if vspec.M != 1 and m == 0 and power_weight == 1.0 and vspec.M > 1:
        # solving one receiver of a multi-receiver spec is allowed, but
        # then the caller is responsible for the power split
        pass
    op = OneRxOperator(vspec, grid, m=m, power_weight=power_weight)
    S, n = op.S, grid.n
    _check_memory(3 * (N + 1) * S * n * 8 + 2 * S * n * n * 8, memory_cap)
    V = np.zeros((N + 1, S, n))
    Y = np.full((N + 1, S, n), np.nan)
    G = np.full((N + 1, S, n), np.nan)
    for k in range(1, N + 1):
        V[k], Y[k], G[k] = op.apply(V[k - 1])
    return ValueGrid(vspec, (grid,), V, Y, G, (m,), power_weight)


def slope_levels(g, grid, curves, d, power_weight=1.0, tol=1e-9):
    """Levels [s, k]: smallest grid y >= d where the right slope of g[s] is >= -c_k(s).

    ``nan`` marks a segment whose level lies beyond the grid.
    """
    idd = grid.index_of(d)
    with np.errstate(invalid="ignore"):
        slope = np.diff(g, axis=1) / grid.step
    K = max(cv.K for cv in curves)
    out = np.full((len(curves), K + 1), np.nan)
    for s, cv in enumerate(curves):
        for k, c in enumerate(cv.slopes * power_weight):
            hit = np.nonzero(slope[s, idd:] >= -c - tol * max(1.0, abs(c)))[0]
            if hit.size:
                out[s, k] = grid.x[idd + hit[0]]
        out[s, cv.K + 1:] = out[s, cv.K]
    return out


def critical_levels(vg: ValueGrid, n, tol=1e-9):
    """Critical numbers b_{n,k}(s) read off a solved one-receiver table.

    b_{n,k}(s) is the smallest grid level y >= d where the right slope of
    g_n(., s) reaches -c_k(s).  Returns an array [s, k]; ``nan`` marks a
    segment whose level lies beyond the grid.
    """
    m = vg.receivers[0]
    return slope_levels(vg.g[n], vg.grids[0], vg.vspec.curves[m], vg.vspec.demand(m),
                        vg.power_weight, tol)


# --------------------------------------------------------------------------
# two receivers
# --------------------------------------------------------------------------

class _RangeMin:
    """Sparse table for range-minimum queries along the last axis.

    Ties resolve to the smallest index.
    """

    def __init__(self, a):
        self.levels = [a]
        self.args = [np.broadcast_to(np.arange(a.shape[-1]), a.shape).copy()]
        L = 1
        while 2 * L <= a.shape[-1]:
            prev, parg = self.levels[-1], self.args[-1]
            left, right = prev[..., :-L], prev[..., L:]
            take_right = right < left
            self.levels.append(np.where(take_right, right, left))
            self.args.append(np.where(take_right, parg[..., L:], parg[..., :-L]))
            L *= 2
        n = a.shape[-1]
        self.val = np.full((len(self.levels),) + a.shape, np.inf)
        self.arg = np.zeros((len(self.levels),) + a.shape, dtype=int)
        for l, (v, ag) in enumerate(zip(self.levels, self.args)):
            self.val[l, ..., :v.shape[-1]] = v
            self.arg[l, ..., :v.shape[-1]] = ag
        self.log = np.zeros(n + 1, dtype=int)
        for k in range(2, n + 1):
            self.log[k] = self.log[k // 2] + 1

    def query(self, rows, lo, hi):
        """min over a[rows, lo..hi] (inclusive); arrays broadcast together."""
        length = np.maximum(hi - lo + 1, 1)
        lev = self.log[length]
        v1 = self.val[lev, rows, lo]
        a1 = self.arg[lev, rows, lo]
        start2 = hi - (1 << lev) + 1
        v2 = self.val[lev, rows, start2]
        a2 = self.arg[lev, rows, start2]
        take2 = v2 < v1
        return np.where(take2, v2, v1), np.where(take2, a2, a1)


def lower_convex_envelope(V):
    """Largest convex function on the grid lying below the 2-D table ``V``.

    The grid DP over-estimates the true value function (interpolating
    convex data from above, minimising over the exact action set), and the
    true value function is convex.  So the envelope sits between the two
    and is never a worse approximation than ``V`` itself.
    """
    n1, n2 = V.shape
    I, J = np.meshgrid(np.arange(n1, dtype=float), np.arange(n2, dtype=float),
                       indexing="ij")
    pts = np.column_stack([I.ravel(), J.ravel(), V.ravel()])
    try:
        eq = ConvexHull(pts).equations
    except QhullError:
        # all points coplanar: V is affine, hence already convex
        return V.copy()
    low = eq[eq[:, 2] < -1e-12]
    a = -low[:, 0] / low[:, 2]
    b = -low[:, 1] / low[:, 2]
    c = -low[:, 3] / low[:, 2]
    env = np.empty(pts.shape[0])
    for k in range(0, pts.shape[0], 4096):
        p = pts[k:k + 4096]
        env[k:k + 4096] = np.max(a[None, :] * p[:, :1] + b[None, :] * p[:, 1:2]
                                 + c[None, :], axis=1)
    return np.minimum(env.reshape(n1, n2), V)


class TwoRxOperator:
    """Bellman operator for two receivers with linear power-rate curves.

    The feasible post-transmission set is the triangle
    {y >= max(d, x), c_s . (y - x) <= P}.  Candidates are every grid point
    in the triangle plus every crossing of the full-power edge with a grid
    line; on those crossings G is linear along the grid line.
    """

    def __init__(self, vspec: ValidatedSpec, grids, alpha=None, convexify=True):
        self.convexify = convexify
        if vspec.M != 2:
            raise PreconditionViolated("two-receiver operator needs M = 2")
        for m in range(2):
            if any(cv.K > 0 for cv in vspec.curves[m]):
                raise PreconditionViolated(
                    "two-receiver solver supports linear power-rate curves only")
        self.vspec = vspec
        self.grids = tuple(grids)
        self.alpha = vspec.alpha if alpha is None else alpha
        self.P = vspec.P
        self.d = [vspec.demand(m) for m in range(2)]
        for g, d in zip(self.grids, self.d):
            g.check(d)
        self.id = [g.index_of(d) for g, d in zip(self.grids, self.d)]
        self.c = [np.array([cv.slopes[0] for cv in vspec.curves[m]]) for m in range(2)]
        self.T = [np.asarray(vspec.transition(m)) for m in range(2)]
        self.S = (len(self.c[0]), len(self.c[1]))
        x1, x2 = self.grids[0].x, self.grids[1].x
        self.hold = (np.asarray(vspec.holding(0)(np.maximum(x1 - self.d[0], 0.0)))[:, None]
                     + np.asarray(vspec.holding(1)(np.maximum(x2 - self.d[1], 0.0)))[None, :])

    def G_table(self, V_prev):
        """G_n(y, s) on the y grid for all joint states; inf where y < d."""
        n1, n2 = self.grids[0].n, self.grids[1].n
        i1, i2 = self.id
        EV = np.einsum("ia,jb,abxy->ijxy", self.T[0], self.T[1], V_prev)
        x1, x2 = self.grids[0].x, self.grids[1].x
        G = np.full(self.S + (n1, n2), np.inf)
        for a in range(self.S[0]):
            for b in range(self.S[1]):
                lin = self.c[0][a] * x1[:, None] + self.c[1][b] * x2[None, :]
                G[a, b, i1:, i2:] = (lin[i1:, i2:] + self.hold[i1:, i2:]
                                     + self.alpha * EV[a, b, :n1 - i1, :n2 - i2])
        return G

    def minimize(self, Gs, c1, c2):
        """Minimise one joint state's G over the action triangle of every x."""
        g1, g2 = self.grids
        n1, n2 = g1.n, g2.n
        D1, D2 = g1.step, g2.step
        id1, id2 = self.id
        P = self.P
        I1 = np.arange(n1)[:, None]
        I2 = np.arange(n2)[None, :]
        best = np.full((n1, n2), np.inf)
        by1 = np.full((n1, n2), np.inf)
        by2 = np.full((n1, n2), np.inf)
        scale = np.nanmax(np.abs(Gs[np.isfinite(Gs)])) if np.isfinite(Gs).any() else 1.0
        tol = _TIE * max(1.0, scale)

        def offer(val, y1, y2):
            nonlocal best, by1, by2
            with np.errstate(invalid="ignore"):
                better = (val < best - tol) | ((np.abs(val - best) <= tol) & (
                    (y1 < by1 - 1e-12) | ((np.abs(y1 - by1) <= 1e-12) & (y2 < by2 - 1e-12))))
            better &= np.isfinite(val)
            best = np.where(better, val, best)
            by1 = np.where(better, y1, by1)
            by2 = np.where(better, y2, by2)

        rmq = _RangeMin(Gs)
        K1 = int(np.floor(P / (c1 * D1) + _ALIGN))
        for k1 in range(K1 + 1):
            rows = I1 + k1
            w2 = int(np.floor((P - c1 * k1 * D1) / (c2 * D2) + _ALIGN))
            lo = np.maximum(I2, id2)
            hi = np.minimum(I2 + w2, n2 - 1)
            valid = (rows >= id1) & (rows <= n1 - 1) & (lo <= hi)
            r = np.minimum(rows, n1 - 1)
            lo_b = np.broadcast_to(lo, (n1, n2))
            hi_b = np.broadcast_to(np.maximum(hi, lo), (n1, n2))
            r_b = np.broadcast_to(r, (n1, n2))
            v, a = rmq.query(r_b, lo_b, hi_b)
            v = np.where(valid, v, np.inf)
            offer(v, np.broadcast_to((I1 + k1) * D1, (n1, n2)), a * D2)

        # crossings of the full-power edge with horizontal grid lines (y2 on grid)
        K2 = int(np.floor(P / (c2 * D2) + _ALIGN))
        for k2 in range(K2 + 1):
            off = (P - c2 * k2 * D2) / c1 / D1
            q = int(np.floor(off + _ALIGN))
            f = off - q
            if f <= _ALIGN * max(1.0, off):
                continue
            rows, col = I1 + q, I2 + k2
            valid = (rows >= id1) & (rows + 1 <= n1 - 1) & (col >= id2) & (col <= n2 - 1)
            rr = np.clip(rows, 0, n1 - 2)
            cc = np.clip(col, 0, n2 - 1)
            v = (1 - f) * Gs[rr, cc] + f * Gs[rr + 1, cc]
            v = np.where(valid, v, np.inf)
            offer(v, np.broadcast_to((I1 + off) * D1, (n1, n2)),
                  np.broadcast_to((I2 + k2) * D2, (n1, n2)))
        # crossings with vertical grid lines (y1 on grid)
        for k1 in range(K1 + 1):
            off = (P - c1 * k1 * D1) / c2 / D2
            q = int(np.floor(off + _ALIGN))
            f = off - q
            if f <= _ALIGN * max(1.0, off):
                continue
            row, cols = I1 + k1, I2 + q
            valid = (row >= id1) & (row <= n1 - 1) & (cols >= id2) & (cols + 1 <= n2 - 1)
            rr = np.clip(row, 0, n1 - 1)
            cc = np.clip(cols, 0, n2 - 2)
            v = (1 - f) * Gs[rr, cc] + f * Gs[rr, cc + 1]
            v = np.where(valid, v, np.inf)
            offer(v, np.broadcast_to((I1 + k1) * D1, (n1, n2)),
                  np.broadcast_to((I2 + off) * D2, (n1, n2)))
        # crossings with the anti-diagonals of the interpolation cells:
        # u + v = k and c1*D1*u + c2*D2*v = P in step units from x
        A, B = c1 * D1, c2 * D2
        if abs(A - B) > 1e-12 * max(A, B):
            for k in range(int(np.floor(P / A + P / B)) + 2):
                u = (P - B * k) / (A - B)
                v = k - u
                if u < 0 or v < 0:
                    continue
                q1 = int(np.floor(u + _ALIGN))
                f = u - q1
                if f <= _ALIGN * max(1.0, u) or f >= 1 - _ALIGN * max(1.0, u):
                    continue
                q2 = k - q1 - 1
                rows, cols = I1 + q1, I2 + q2
                valid = ((rows >= id1) & (rows + 1 <= n1 - 1)
                         & (cols >= id2) & (cols + 1 <= n2 - 1))
                rr = np.clip(rows, 0, n1 - 2)
                cc = np.clip(cols, 0, n2 - 2)
                val = (1 - f) * Gs[rr, cc + 1] + f * Gs[rr + 1, cc]
                val = np.where(valid, val, np.inf)
                offer(val, np.broadcast_to((I1 + u) * D1, (n1, n2)),
                      np.broadcast_to((I2 + v) * D2, (n1, n2)))
        return best, by1, by2

    def solve_point(self, Gs, c1, c2, x):
        """min of the interpolated G over the action set of an off-grid x.

        Candidates are the vertices of the action triangle cut by the
        interpolation mesh (grid lines and cell anti-diagonals); the
        interpolant is linear on each piece, so the minimum is among them.
        Returns (value of G, y).
        """
        g1, g2 = self.grids
        D1, D2 = g1.step, g2.step
        lo1 = max(x[0], self.d[0])
        lo2 = max(x[1], self.d[1])
        P = self.P - c1 * (lo1 - x[0]) - c2 * (lo2 - x[1])
        if P < -1e-12:
            return np.inf, None
        P = max(P, 0.0)
        hi1 = min(lo1 + P / c1, g1.x_max)
        hi2 = min(lo2 + P / c2, g2.x_max)
        pts = [(lo1, lo2)]
        # grid nodes inside the triangle
        a1 = g1.x[(g1.x >= lo1 - 1e-12) & (g1.x <= hi1 + 1e-12)]
        a2 = g2.x[(g2.x >= lo2 - 1e-12) & (g2.x <= hi2 + 1e-12)]
        if a1.size and a2.size:
            Y1, Y2 = np.meshgrid(a1, a2, indexing="ij")
            ok = c1 * (Y1 - lo1) + c2 * (Y2 - lo2) <= P * (1 + 1e-12) + 1e-12
            pts += list(zip(Y1[ok], Y2[ok]))
        # the two lower edges, the hypotenuse, crossed by grid lines
        for v in a2:
            pts.append((lo1, v))
            pts.append((lo1 + (P - c2 * (v - lo2)) / c1, v))
        for u in a1:
            pts.append((u, lo2))
            pts.append((u, lo2 + (P - c1 * (u - lo1)) / c2))
        pts += [(hi1, lo2), (lo1, hi2)]
        # ... and by anti-diagonals y1/D1 + y2/D2 = k
        kmin = int(np.floor(lo1 / D1 + lo2 / D2))
        kmax = int(np.ceil(hi1 / D1 + hi2 / D2))
        for k in range(kmin, kmax + 1):
            pts.append((lo1, (k - lo1 / D1) * D2))
            pts.append(((k - lo2 / D2) * D1, lo2))
            den = c1 * D1 - c2 * D2
            if abs(den) > 1e-12 * max(c1 * D1, c2 * D2):
                # c1*(y1 - lo1) + c2*(y2 - lo2) = P with y1 = u*D1, y2 = (k-u)*D2
                u = (P + c1 * lo1 + c2 * lo2 - c2 * D2 * k) / den
                pts.append((u * D1, (k - u) * D2))
        Y = np.array(pts, dtype=float)
        ok = ((Y[:, 0] >= lo1 - 1e-12) & (Y[:, 1] >= lo2 - 1e-12)
              & (c1 * (Y[:, 0] - lo1) + c2 * (Y[:, 1] - lo2) <= P * (1 + 1e-12) + 1e-12)
              & (Y[:, 0] <= g1.x_max + 1e-12) & (Y[:, 1] <= g2.x_max + 1e-12))
        Y = Y[ok]
        Y[:, 0] = np.maximum(Y[:, 0], lo1)
        Y[:, 1] = np.maximum(Y[:, 1], lo2)
        vals = interp2(Gs, self.grids, Y)
        best = vals.min()
        tie = vals <= best + _TIE * max(1.0, abs(best))
        order = np.lexsort((Y[tie, 1], Y[tie, 0]))
        return float(best), Y[tie][order[0]]

    def value_at(self, G_prev, x, s, n_prev_zero=False):
        """V_{n-1}(x, s) at an off-grid x from the stage n-1 table G_prev."""
        if n_prev_zero:
            return 0.0
        c1, c2 = self.c[0][s[0]], self.c[1][s[1]]
        val, _ = self.solve_point(G_prev[s[0], s[1]], c1, c2, x)
        return val - c1 * x[0] - c2 * x[1]

    def G_point(self, G_prev, y, s, first_stage=False):
        """G_n(y, s) at an off-grid y, evaluating V_{n-1} by a fresh minimisation.

        More accurate than interpolating the stage-n table: V_{n-1} has
        kinks off the grid that interpolation of G_n would smooth over.
        ``G_prev`` is the stage n-1 table (ignored when ``first_stage``).
        """
        y = np.asarray(y, dtype=float)
        c = (self.c[0][s[0]], self.c[1][s[1]])
        out = c[0] * y[0] + c[1] * y[1]
        out += float(self.vspec.holding(0)(max(y[0] - self.d[0], 0.0)))
        out += float(self.vspec.holding(1)(max(y[1] - self.d[1], 0.0)))
        if first_stage:
            return out
        xn = (y[0] - self.d[0], y[1] - self.d[1])
        T1, T2 = self.T
        ev = 0.0
        for a in range(self.S[0]):
            if T1[s[0], a] == 0:
                continue
            for b in range(self.S[1]):
                if T2[s[1], b] == 0:
                    continue
                ev += T1[s[0], a] * T2[s[1], b] * self.value_at(G_prev, xn, (a, b))
        return out + self.alpha * ev

    def apply(self, V_prev):
        G = self.G_table(V_prev)
        n1, n2 = self.grids[0].n, self.grids[1].n
        x1, x2 = self.grids[0].x, self.grids[1].x
        V = np.empty(self.S + (n1, n2))
        Y = np.empty(self.S + (n1, n2, 2))
        for a in range(self.S[0]):
            for b in range(self.S[1]):
                c1, c2 = self.c[0][a], self.c[1][b]
                best, y1, y2 = self.minimize(G[a, b], c1, c2)
                V[a, b] = best - c1 * x1[:, None] - c2 * x2[None, :]
                if self.convexify:
                    V[a, b] = lower_convex_envelope(V[a, b])
                Y[a, b, ..., 0] = y1
                Y[a, b, ..., 1] = y2
        return V, Y, G


def default_grids_2rx(vspec, step=None, slots=None):
    slots = vspec.N if slots is None else slots
    return tuple(Grid1D.for_demand(vspec.demand(m), slots,
                                   None if step is None else step)
                 for m in range(2))


def solve_2rx(vspec: ValidatedSpec, grids=None, N=None,
              memory_cap=DEFAULT_MEMORY_CAP, convexify=True) -> ValueGrid:
    """Backward induction for two receivers; keeps every stage's G_n table.

    With ``convexify`` each stage's values are replaced by their lower
    convex envelope on the grid (see :func:`lower_convex_envelope`).  The
    stored actions are still the grid minimisers, so at the few nodes the
    envelope moves, V sits slightly below the cost of the stored action.
    """
    N = vspec.N if N is None else N
    if N is None:
        raise PreconditionViolated("finite horizon N required")
    grids = default_grids_2rx(vspec) if grids is None else tuple(grids)
    S1, S2 = vspec.n_states(0), vspec.n_states(1)
    n1, n2 = grids[0].n, grids[1].n
    _check_memory(4 * (N + 1) * S1 * S2 * n1 * n2 * 8 + 12 * n1 * n2 * 8 * 10, memory_cap)
    op = TwoRxOperator(vspec, grids, convexify=convexify)
    V = np.zeros((N + 1, S1, S2, n1, n2))
    Y = np.full((N + 1, S1, S2, n1, n2, 2), np.nan)
    G = np.full((N + 1, S1, S2, n1, n2), np.nan)
    for k in range(1, N + 1):
        V[k], Y[k], G[k] = op.apply(V[k - 1])
    return ValueGrid(vspec, grids, V, Y, G, (0, 1), meta={"convexify": convexify})


# --------------------------------------------------------------------------
# structural checks
# --------------------------------------------------------------------------

@dataclass
class CheckReport:
    """Violations found by a structural check; empty means it passed."""

    name: str
    violations: list = field(default_factory=list)
    worst: float = 0.0
    checked: int = 0

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        state = "ok" if self.ok else f"{len(self.violations)} violations"
        return f"{self.name}: {state} ({self.checked} checked, worst {self.worst:.3g})"


def _second_diffs(A, axis_steps):
    """Second differences of a 2-D array along a lattice direction."""
    a, b = axis_steps
    n1, n2 = A.shape
    # index ranges so that i - a, i + a and j - b, j + b stay inside
    i0, i1 = abs(a), n1 - abs(a)
    j0, j1 = abs(b), n2 - abs(b)
    if i1 <= i0 or j1 <= j0:
        return np.zeros((0, 0))
    mid = A[i0:i1, j0:j1]
    up = A[i0 + a:i1 + a, j0 + b:j1 + b]
    dn = A[i0 - a:i1 - a, j0 - b:j1 - b]
    with np.errstate(invalid="ignore"):
        return up - 2 * mid + dn


def check_convexity(vg: ValueGrid, eps=None, tables="V", stages=None) -> CheckReport:
    """Discrete convexity of V_n (or G_n with ``tables='g'``) in x.

    One receiver: second differences along x.  Two receivers: along both
    axes and both diagonals.  Violation when a second difference is below
    ``-eps``; the default is 1e-9 times the table's magnitude.
    """
    arr = vg.V if tables == "V" else vg.g
    rep = CheckReport(f"convexity[{tables}]")
    stages = range(1, vg.N + 1) if stages is None else stages
    for n in stages:
        A = arr[n]
        fin = np.isfinite(A)
        scale = max(1.0, float(np.max(np.abs(A[fin])))) if fin.any() else 1.0
        e = 1e-9 * scale if eps is None else eps
        if vg.M == 1:
            for s in range(A.shape[0]):
                row = A[s][np.isfinite(A[s])]
                dd = row[:-2] - 2 * row[1:-1] + row[2:]
                rep.checked += dd.size
                bad = np.nonzero(dd < -e)[0]
                for i in bad:
                    rep.violations.append((n, s, int(i + 1), float(dd[i])))
                if dd.size:
                    rep.worst = min(rep.worst, float(dd.min()))
        else:
            for a in range(A.shape[0]):
                for b in range(A.shape[1]):
                    T = A[a, b]
                    for direction in ((1, 0), (0, 1), (1, 1), (1, -1)):
                        dd = _second_diffs(T, direction)
                        dd = dd[np.isfinite(dd)]
                        rep.checked += dd.size
                        if dd.size:
                            rep.worst = min(rep.worst, float(dd.min()))
                            nb = int(np.sum(dd < -e))
                            if nb:
                                rep.violations.append((n, (a, b), direction, nb,
                                                       float(dd.min())))
    return rep


def check_supermodularity(vg: ValueGrid, eps=None, tables="V", stages=None) -> CheckReport:
    """Cross differences V(i+1,j+1) - V(i+1,j) - V(i,j+1) + V(i,j) >= -eps."""
    if vg.M != 2:
        raise PreconditionViolated("supermodularity check needs a two-receiver grid")
    arr = vg.V if tables == "V" else vg.g
    rep = CheckReport(f"supermodularity[{tables}]")
    stages = range(1, vg.N + 1) if stages is None else stages
    for n in stages:
        A = arr[n]
        fin = np.isfinite(A)
        scale = max(1.0, float(np.max(np.abs(A[fin])))) if fin.any() else 1.0
        e = 1e-9 * scale if eps is None else eps
        for a in range(A.shape[0]):
            for b in range(A.shape[1]):
                T = A[a, b]
                with np.errstate(invalid="ignore"):
                    cross = T[1:, 1:] - T[1:, :-1] - T[:-1, 1:] + T[:-1, :-1]
                cross = cross[np.isfinite(cross)]
                rep.checked += cross.size
                if cross.size:
                    rep.worst = min(rep.worst, float(cross.min()))
                    nb = int(np.sum(cross < -e))
                    if nb:
                        rep.violations.append((n, (a, b), nb, float(cross.min())))
    return rep
