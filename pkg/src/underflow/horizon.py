"""Infinite-horizon limits: discounted value iteration and average cost.

Time runs backwards in the finite-horizon solver, so V_n is literally the
n-th value-iteration iterate from V_0 = 0.  ``value_iterate`` just keeps
applying the same one-stage operator until the sup-norm change is below
``tol``.  ``estimate_rho`` runs it for a ladder of discount factors and
extrapolates (1 - alpha) * min V to alpha = 1.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .dp import (Grid1D, OneRxOperator, TwoRxOperator, ValueGrid, default_grids_2rx,
                 slope_levels)
from .errors import MaxIterExceeded, PreconditionViolated
from .model import ValidatedSpec, power_of, validate

STABLE_ITERS = 5


@dataclass
class InfiniteSolution:
    """Converged discounted value function and its greedy policy.

    ``V_inf`` is a two-stage ValueGrid whose stage 1 holds the limit: V,
    the greedy targets y and the post-decision table g.  ``b_inf`` are the
    limit critical numbers ([s, k] for one receiver, [s1, s2, 2] grid
    minimisers of G for two).  ``b_stable_at`` is the first iteration
    from which b stayed within one grid step for STABLE_ITERS iterations
    (None if it never settled).
    """

    V_inf: ValueGrid
    b_inf: np.ndarray
    iterations: int
    residual: float
    alpha: float
    b_stable_at: int = None
    trace: list = field(default_factory=list, repr=False)

    @property
    def V(self):
        return self.V_inf.V[1]

    @property
    def y(self):
        return self.V_inf.y[1]

    def tail_bound(self):
        """Sup-norm distance to the fixed point implied by the last residual."""
        a = self.alpha
        return a * self.residual / (1 - a)

    def trace_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["iter", "residual", "b"])
        for it, res, b in self.trace:
            w.writerow([it, repr(res), " ".join(repr(float(v)) for v in np.ravel(b))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def policy(self):
        """Stationary greedy policy usable by the simulator."""
        from .sim import DPGreedy1, DPGreedy2

        vg = self.V_inf
        if vg.M == 1:
            return DPGreedy1(vg.vspec, vg.grids[0], vg.y[1], vg.g[1], vg.receivers[0],
                             vg.power_weight, stationary=True)
        return _Stationary2(DPGreedy2(vg))


class _Stationary2:
    def __init__(self, inner):
        self.inner, self.M = inner, 2

    def act(self, n, x, s):
        return self.inner.act(1, x, s)


def _b_two_rx(G, grids):
    S1, S2 = G.shape[:2]
    out = np.empty((S1, S2, 2))
    for a in range(S1):
        for b in range(S2):
            flat = int(np.argmin(G[a, b]))  # first minimiser in row-major order
            i, j = np.unravel_index(flat, G[a, b].shape)
            out[a, b] = grids[0].x[i], grids[1].x[j]
    return out


def value_iterate(vspec: ValidatedSpec, grids=None, tol=1e-8, max_iter=100_000,
                  slots=20, step=None, convexify=True, check_monotone=True,
                  alpha=None) -> InfiniteSolution:
    """Iterate the one-stage operator from V = 0 until the change is below tol.

    ``grids`` is a Grid1D (one receiver) or a pair (two receivers); by
    default the buffer axis covers ``slots`` slots of demand.  Raises
    MaxIterExceeded with the partial solution as ``partial``.
    """
    alpha = vspec.alpha if alpha is None else alpha
    if not alpha < 1:
        raise PreconditionViolated("value iteration needs alpha < 1")
    if vspec.M == 1:
        grid = grids if grids is not None else Grid1D.for_demand(vspec.demand(0), slots, step)
        if isinstance(grid, (tuple, list)):
            grid = grid[0]
        op = OneRxOperator(vspec, grid, alpha=alpha)
        gr = (grid,)
        V = np.zeros((op.S, grid.n))
    elif vspec.M == 2:
        gr = tuple(grids) if grids is not None else default_grids_2rx(vspec, step, slots)
        op = TwoRxOperator(vspec, gr, alpha=alpha, convexify=convexify)
        V = np.zeros(op.S + (gr[0].n, gr[1].n))
    else:
        raise PreconditionViolated("value iteration supports one or two receivers")
    step_min = min(g.step for g in gr)
    trace, hist = [], []
    stable_at = None
    residual = math.inf
    it = 0
    Y = g = None
    while it < max_iter:
        it += 1
        Vn, Y, g = op.apply(V)
        if check_monotone:
            scale = max(1.0, float(np.max(np.abs(Vn))))
            drop = float(np.min(Vn - V))
            if drop < -1e-12 * scale:
                raise AssertionError(f"iteration {it}: value decreased by {-drop:.3g}")
        residual = float(np.max(np.abs(Vn - V)))
        V = Vn
        if vspec.M == 1:
            b = slope_levels(g, grid, vspec.curves[0], vspec.demand(0))
        else:
            b = _b_two_rx(g, gr)
        hist.append(b)
        if len(hist) > STABLE_ITERS:
            hist.pop(0)
        settled = len(hist) == STABLE_ITERS and all(
            np.array_equal(np.isnan(h), np.isnan(b)) and
            np.nanmax(np.abs(h - b), initial=0.0) < step_min * (1 - 1e-9) for h in hist)
        if settled and stable_at is None:
            stable_at = it - STABLE_ITERS + 1
        elif not settled:
            stable_at = None
        trace.append((it, residual, b))
        if residual < tol:
            break
    sol = _pack(vspec, gr, V, Y, g, b, it, residual, alpha, stable_at, trace, convexify)
    if residual >= tol:
        raise MaxIterExceeded(f"no convergence after {it} iterations "
                              f"(residual {residual:.3g})", sol)
    return sol


def _pack(vspec, gr, V, Y, g, b, it, residual, alpha, stable_at, trace, convexify):
    vs = vspec if alpha == vspec.alpha else validate(vspec.spec.replace(alpha=alpha))
    Vs = np.stack([np.zeros_like(V), V])
    Ys = np.stack([np.full_like(Y, np.nan), Y])
    gs = np.stack([np.full_like(g, np.nan), g])
    vg = ValueGrid(vs, gr, Vs, Ys, gs, tuple(range(len(gr))),
                   meta={"infinite": True, "convexify": convexify})
    return InfiniteSolution(vg, b, it, residual, alpha, stable_at, trace)


# --------------------------------------------------------------------------
# policy evaluation
# --------------------------------------------------------------------------

def _weights1(grid, pos):
    q = np.clip(np.floor(pos).astype(int), 0, grid.n - 1)
    f = pos - q
    q1 = np.minimum(q + 1, grid.n - 1)
    return np.stack([q, q1], -1)[..., None], np.stack([1 - f, f], -1)


def _weights2(grids, y):
    """Node indices and weights reproducing ``interp2`` at points y[..., 2]."""
    g1, g2 = grids
    p1 = np.clip(y[..., 0] / g1.step, 0, g1.n - 1)
    p2 = np.clip(y[..., 1] / g2.step, 0, g2.n - 1)
    q1 = np.minimum(np.floor(p1).astype(int), g1.n - 2)
    q2 = np.minimum(np.floor(p2).astype(int), g2.n - 2)
    f1, f2 = p1 - q1, p2 - q2
    low = f1 + f2 <= 1.0
    i1 = np.where(low[..., None], np.stack([q1, q1 + 1, q1], -1),
                  np.stack([q1 + 1, q1, q1 + 1], -1))
    i2 = np.where(low[..., None], np.stack([q2, q2, q2 + 1], -1),
                  np.stack([q2 + 1, q2 + 1, q2], -1))
    w = np.where(low[..., None], np.stack([1 - f1 - f2, f1, f2], -1),
                 np.stack([f1 + f2 - 1, 1 - f1, 1 - f2], -1))
    return np.stack([i1, i2], -1), w


def evaluate_policy(sol: InfiniteSolution):
    """Exact discounted cost of the stored greedy policy on the grid.

    Solves (I - alpha P_pi) J = r_pi, where P_pi moves each grid state to
    the interpolation nodes of its post-decision level, exactly as the
    operator reads values between nodes.  Returns J shaped like ``V``.
    """
    vg = sol.V_inf
    vspec, alpha = vg.vspec, sol.alpha
    Y = sol.y
    if vg.M == 1:
        grid = vg.grids[0]
        S, n = Y.shape
        d = vspec.demand(0)
        T = np.asarray(vspec.transition(0))
        x = grid.x[None, :]
        r = np.empty((S, n))
        for s, cv in enumerate(vspec.curves[0]):
            r[s] = power_of(cv, np.clip(Y[s] - x[0], 0, cv.z_max))
        r += np.asarray(vspec.holding(0)(np.maximum(Y - d, 0.0)))
        idx, w = _weights1(grid, (Y - d) / grid.step)
        nodes = idx[..., 0]                                     # [S, n, 2]
        rows, cols, vals = [], [], []
        for s in range(S):
            for s2 in range(S):
                if T[s, s2] == 0:
                    continue
                for k in range(2):
                    rows.append(s * n + np.arange(n))
                    cols.append(s2 * n + nodes[s, :, k])
                    vals.append(T[s, s2] * w[s, :, k])
        size = S * n
    else:
        g1, g2 = vg.grids
        S1, S2 = Y.shape[:2]
        n1, n2 = g1.n, g2.n
        d = [vspec.demand(m) for m in range(2)]
        T1, T2 = (np.asarray(vspec.transition(m)) for m in range(2))
        c = [np.array([cv.slopes[0] for cv in vspec.curves[m]]) for m in range(2)]
        X1, X2 = np.meshgrid(g1.x, g2.x, indexing="ij")
        r = np.empty((S1, S2, n1, n2))
        for a in range(S1):
            for b in range(S2):
                y = Y[a, b]
                r[a, b] = (c[0][a] * (y[..., 0] - X1) + c[1][b] * (y[..., 1] - X2)
                           + np.asarray(vspec.holding(0)(np.maximum(y[..., 0] - d[0], 0)))
                           + np.asarray(vspec.holding(1)(np.maximum(y[..., 1] - d[1], 0))))
        nxt = Y - np.array(d)
        idx, w = _weights2(vg.grids, nxt)                       # [..., 3, 2], [..., 3]
        base = np.arange(n1 * n2)
        rows, cols, vals = [], [], []
        for a in range(S1):
            for b in range(S2):
                src = (a * S2 + b) * n1 * n2 + base
                for a2 in range(S1):
                    for b2 in range(S2):
                        p = T1[a, a2] * T2[b, b2]
                        if p == 0:
                            continue
                        for k in range(3):
                            node = (idx[a, b, ..., k, 0] * n2 + idx[a, b, ..., k, 1]).ravel()
                            rows.append(src)
                            cols.append((a2 * S2 + b2) * n1 * n2 + node)
                            vals.append(p * w[a, b, ..., k].ravel())
        size = S1 * S2 * n1 * n2
    Pm = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(size, size))
    A = sparse.identity(size, format="csr") - alpha * Pm
    J = spsolve(A.tocsc(), r.ravel())
    return J.reshape(r.shape)


def fixed_point_gap(sol: InfiniteSolution):
    """sup |J_greedy - V_inf| over grid states."""
    return float(np.max(np.abs(evaluate_policy(sol) - sol.V)))


# --------------------------------------------------------------------------
# vanishing discount
# --------------------------------------------------------------------------

@dataclass
class AverageCostEstimate:
    alphas: tuple
    m: dict
    rho_points: dict
    rho_star: float
    fit_residual: float
    w_samples: dict
    iterations: dict
    simulated: float = None
    simulated_stderr: float = None
    sim_alpha: float = None
    solutions: dict = field(default_factory=dict, repr=False)

    def gaps(self):
        r = [self.rho_points[a] for a in self.alphas]
        return [abs(b - a) for a, b in zip(r[:-1], r[1:])]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["alpha", "m", "rho_point", "iterations"])
        for a in self.alphas:
            w.writerow([repr(a), repr(self.m[a]), repr(self.rho_points[a]),
                        self.iterations[a]])
        w.writerow(["limit", "", repr(self.rho_star), ""])
        if self.simulated is not None:
            w.writerow(["simulated", "", repr(self.simulated), ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def extrapolate(alphas, rho_points, last=3):
    """Intercept at alpha = 1 of a least-squares line in (1 - alpha)."""
    a = np.asarray(alphas[-last:], dtype=float)
    r = np.asarray(rho_points[-last:], dtype=float)
    t = 1 - a
    if t.size == 1:
        return float(r[0]), 0.0
    coef, res, *_ = np.polyfit(t, r, 1, full=True)
    resid = float(np.sqrt(res[0] / t.size)) if res.size else 0.0
    return float(coef[1]), resid


def _vi_job(job):
    vspec, grids, tol, max_iter, slots, step, a = job
    return value_iterate(vspec, grids, tol, max_iter, slots, step, alpha=a)


def estimate_rho(vspec: ValidatedSpec, grids=None, alphas=(0.9, 0.95, 0.99, 0.995),
                 tol=1e-9, max_iter=200_000, slots=20, step=None, probes=None,
                 sim_slots=0, sim_episodes=10, seed=0, sim_alpha=None,
                 workers=1) -> AverageCostEstimate:
    """Vanishing-discount estimate of the optimal average cost.

    m[alpha] is the minimum of V_inf over grid states.  With ``sim_slots``
    > 0 the stationary greedy policy of ``sim_alpha`` (default: the largest
    alpha) is simulated for that many slots in total, split over
    ``sim_episodes`` episodes, and its long-run average cost is reported
    alongside.  ``workers`` > 1 runs the
    alphas in separate processes.
    """
    alphas = tuple(float(a) for a in alphas)
    if any(not 0 < a < 1 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly increasing in (0, 1)")
    m, rho, its, w, sols = {}, {}, {}, {}, {}
    jobs = [(vspec, grids, tol, max_iter, slots, step, a) for a in alphas]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_vi_job, jobs))
    else:
        results = [_vi_job(j) for j in jobs]
    for a, sol in zip(alphas, results):
        V = sol.V
        m[a] = float(V.min())
        rho[a] = (1 - a) * m[a]
        its[a] = sol.iterations
        if probes is None:
            w[a] = V[..., 0] - m[a] if V.ndim == 2 else V[..., 0, 0] - m[a]
        else:
            w[a] = np.array([sol.V_inf.value(1, x, s) for x, s in probes]) - m[a]
        sols[a] = sol
    star, resid = extrapolate(alphas, [rho[a] for a in alphas])
    est = AverageCostEstimate(alphas, m, rho, max(star, 0.0), resid, w, its, solutions=sols)
    if sim_slots:
        from .sim import simulate

        pol = sols[alphas[-1] if sim_alpha is None else float(sim_alpha)].policy()
        L = sim_slots // sim_episodes
        st = simulate(pol, vspec, sim_episodes, L, seed=seed, alpha=1.0, stationary=True)
        per = st.costs / L
        est.simulated = float(np.mean(per))
        est.sim_alpha = alphas[-1] if sim_alpha is None else float(sim_alpha)
        est.simulated_stderr = float(np.std(per, ddof=1) / math.sqrt(per.size)) \
            if per.size > 1 else 0.0
    return est
