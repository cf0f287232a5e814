"""Executable structural checks on solved problems.

Every check returns a :class:`~underflow.dp.CheckReport`; ``run_all``
collects the ones that apply to a spec.
"""
from __future__ import annotations

import numpy as np

from .dp import (CheckReport, Grid1D, ValueGrid, check_convexity, check_supermodularity,
                 critical_levels, default_grids_2rx, interp2, solve_1rx, solve_2rx)
from .errors import MaxIterExceeded, PreconditionViolated

LEVEL_TOL = 1e-9


def _note(rep, ok, item, amount=0.0):
    rep.checked += 1
    if not ok:
        rep.violations.append(item)
        rep.worst = min(rep.worst, -abs(amount))


def criticals_table(vg: ValueGrid):
    """b[n, s, k] from a one-receiver DP (row 0 unused)."""
    b = np.full((vg.N + 1,) + critical_levels(vg, 1).shape, np.nan)
    for n in range(1, vg.N + 1):
        b[n] = critical_levels(vg, n)
    return b


def check_criticals(vg: ValueGrid, b=None):
    """Shape claims on one-receiver critical numbers.

    * b_1(s) = d for every state and segment;
    * the state with the largest last slope has b_n = d on its last segment;
    * within a state, costlier segments have lower targets;
    * under an IID channel, targets are nonincreasing in the slope across
      all states and segments;
    * b_n <= b_{n+1}.
    """
    vspec = vg.vspec
    m = vg.receivers[0]
    d = vspec.demand(m)
    curves = vspec.curves[m]
    b = criticals_table(vg) if b is None else b
    tol = LEVEL_TOL * max(1.0, d)
    first = CheckReport("b_1 = d")
    worst = CheckReport("b_n(worst state) = d")
    chain = CheckReport("segment chain b_n,k >= b_n,k+1")
    chan = CheckReport("channel monotonicity")
    time = CheckReport("time monotonicity b_n <= b_n+1")
    sw = int(np.argmax([cv.slopes[-1] for cv in curves]))
    for n in range(1, vg.N + 1):
        for s, cv in enumerate(curves):
            for k in range(cv.K + 1):
                v = b[n, s, k]
                if n == 1:
                    _note(first, abs(v - d) <= tol, (s, k, v), v - d)
                if k < cv.K:
                    w = b[n, s, k + 1]
                    _note(chain, v >= w - tol, (n, s, k, v, w), v - w)
                if n < vg.N:
                    w = b[n + 1, s, k]
                    _note(time, v <= w + tol, (n, s, k, v, w), v - w)
        _note(worst, abs(b[n, sw, curves[sw].K] - d) <= tol, (n, sw, b[n, sw, -1]),
              b[n, sw, -1] - d)
        if vspec.iid[m]:
            pairs = [(float(c), b[n, s, k]) for s, cv in enumerate(curves)
                     for k, c in enumerate(cv.slopes)]
            pairs.sort(key=lambda t: t[0])
            for (c1, b1), (c2, b2) in zip(pairs[:-1], pairs[1:]):
                if c2 > c1:
                    _note(chan, b1 >= b2 - tol, (n, c1, b1, c2, b2), b1 - b2)
    reps = [first, worst, chain, time]
    if vspec.iid[m]:
        reps.append(chan)
    return reps


def check_value_monotone(vg: ValueGrid, eps=1e-12):
    """V_n(x, s) nondecreasing in n."""
    rep = CheckReport("V_n nondecreasing in n")
    for n in range(1, vg.N + 1):
        diff = vg.V[n] - vg.V[n - 1]
        scale = max(1.0, float(np.max(np.abs(vg.V[n]))))
        rep.checked += diff.size
        rep.worst = min(rep.worst, float(diff.min()))
        bad = int(np.sum(diff < -eps * scale))
        if bad:
            rep.violations.append((n, bad, float(diff.min())))
    return rep


def check_threshold_agreement(vg: ValueGrid, rtol=1e-9):
    """Closed-form thresholds versus the DP (only when preconditions hold)."""
    from .threshold import compute_gamma_pwl, criticals_from_gamma, gamma_from_values

    rep = CheckReport("threshold = DP")
    try:
        tab = compute_gamma_pwl(vg.vspec)
    except PreconditionViolated:
        return None
    cr = criticals_from_gamma(tab)
    b = criticals_table(vg)
    for n in range(1, vg.N + 1):
        diff = np.nanmax(np.abs(cr.b[n] - b[n]))
        _note(rep, diff <= LEVEL_TOL * max(1.0, tab.demand), ("b", n, diff), diff)
        for j in range(2, n + 1):
            g = tab.gamma[n, j]
            ref = gamma_from_values(vg, n, j)
            err = abs(g - ref)
            _note(rep, err <= rtol * max(1.0, abs(ref)), ("gamma", n, j, g, ref), err)
    return rep


def check_region_policy(pol, stages=None, stride=1, rtol=1e-9):
    """Structured action of the region policy costs no more than the DP's.

    At every grid buffer the interpolated G_n of the structured target is
    compared with the DP's minimum (V_n + c.x).
    """
    vg = pol.vg
    rep = CheckReport(f"region policy = DP [{pol.mode}]")
    g1, g2 = vg.grids
    stages = range(1, vg.N + 1) if stages is None else stages
    for n in stages:
        for s in pol.states:
            c1, c2 = pol.op.c[0][s[0]], pol.op.c[1][s[1]]
            G = vg.g[n][s[0], s[1]]
            for i in range(0, g1.n, stride):
                for j in range(0, g2.n, stride):
                    x = np.array([g1.x[i], g2.x[j]])
                    y = pol.structured_action(n, x, s)
                    val = float(interp2(G, vg.grids, y))
                    opt = float(interp2(G, vg.grids, vg.y[n, s[0], s[1], i, j]))
                    spend = c1 * (y[0] - x[0]) + c2 * (y[1] - x[1])
                    ok = val <= opt + rtol * max(1.0, abs(opt)) and \
                        spend <= pol.op.P * (1 + 1e-9)
                    _note(rep, ok, (n, s, tuple(x), val, opt), val - opt)
    return rep


def check_infinite(vspec, step=None, slots=20, tol=1e-10, finite_N=(5, 10, 20)):
    """Value iteration converges, b_inf dominates finite b_N, greedy is a fixed point."""
    from .horizon import fixed_point_gap, value_iterate

    conv = CheckReport("value iteration converges")
    dom = CheckReport("b_inf >= b_N")
    fp = CheckReport("greedy fixed point")
    try:
        sol = value_iterate(vspec, tol=tol, slots=slots, step=step)
    except MaxIterExceeded as exc:
        _note(conv, False, str(exc), exc.partial.residual)
        return [conv]
    _note(conv, sol.residual < tol, sol.residual, sol.residual)
    gap = fixed_point_gap(sol)
    lim = max(1e-7, 2 * sol.tail_bound())
    _note(fp, gap <= lim, gap, gap)
    if vspec.M == 1:
        grid = sol.V_inf.grids[0]
        for N in finite_N:
            vg = solve_1rx(vspec, grid, N=N)
            bN = critical_levels(vg, N)
            diff = np.nanmin(sol.b_inf - bN)
            _note(dom, diff >= -LEVEL_TOL, (N, diff), diff)
        return [conv, dom, fp]
    return [conv, fp]


def _with_alpha(vspec, alpha):
    from .model import validate
    return vspec if vspec.alpha == alpha else validate(vspec.spec.replace(alpha=alpha))


def run_all(vspec, step=None, N=None, eps=1e-9, infinite_alpha=None, region_stride=1):
    """Every check that applies to ``vspec``; returns a list of reports."""
    N = vspec.N if N is None else N
    if N is None:
        raise PreconditionViolated("structural checks need a finite horizon")
    reps = []
    if vspec.M == 1:
        d = vspec.demand(0)
        vg = solve_1rx(vspec, Grid1D.for_demand(d, N, step if step else d / 10), N=N)
        reps += check_criticals(vg)
        reps.append(check_convexity(vg, eps=eps))
        reps.append(check_value_monotone(vg))
        t = check_threshold_agreement(vg)
        if t is not None:
            reps.append(t)
    elif vspec.M == 2:
        from .two_rx import build_region_policy

        vg = solve_2rx(vspec, default_grids_2rx(vspec, step), N=N)
        reps.append(check_convexity(vg, eps=eps))
        reps.append(check_convexity(vg, eps=eps, tables="g"))
        reps.append(check_supermodularity(vg, eps=eps))
        reps.append(check_supermodularity(vg, eps=eps, tables="g"))
        reps.append(check_value_monotone(vg))
        reps.append(check_region_policy(build_region_policy(vg), stride=region_stride))
    else:
        raise PreconditionViolated("structural checks cover one or two receivers")
    alpha = infinite_alpha if infinite_alpha is not None else (
        vspec.alpha if vspec.alpha < 1 else None)
    if alpha is not None and vspec.M == 1:
        reps += check_infinite(_with_alpha(vspec, alpha), step=step)
    return reps
