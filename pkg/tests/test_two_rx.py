import numpy as np
import pytest

from underflow import validate
from underflow.dp import Grid1D, default_grids_2rx, solve_1rx, solve_2rx
from underflow.errors import PreconditionViolated
from underflow.fixtures import random_two_rx_instance, two_state
from underflow.two_rx import LABELS, RegionPolicy, build_region_policy, golden_section, simplex_search
from underflow.verify import check_region_policy

# ---- independent closed form for Example 2, stage 3 --------------------------
C = np.array([1.75, 2.0, 2.001, 2.1])
PR = np.array([0.4, 0.4, 0.1, 0.1])
P = 4.2
EB = PR @ C


def _v2(x1, x2, c1, c2):
    """V_2 of Example 2: a two-item fractional knapsack on the budget."""
    y1, y2 = max(x1, 1.0), max(x2, 1.0)
    R = P - c1 * (y1 - x1) - c2 * (y2 - x2)
    val = c1 * y1 + c2 * y2 + EB * max(2 - y1, 0) + EB * max(2 - y2, 0)
    ys = {1: y1, 2: y2}
    for r, i, c in sorted([((EB - c1) / c1, 1, c1), ((EB - c2) / c2, 2, c2)], reverse=True):
        if r <= 0:
            continue
        amt = min(max(2 - ys[i], 0), max(R, 0) / c)
        val -= (EB - c) * amt
        R -= c * amt
        ys[i] += amt
    return val - c1 * x1 - c2 * x2


def g3(y1, y2, c1=2.0, c2=2.001):
    tot = c1 * y1 + c2 * y2
    for a in range(4):
        for b in range(4):
            tot += PR[a] * PR[b] * _v2(y1 - 1, y2 - 1, C[a], C[b])
    return tot


S = (1, 2)          # channel costs (2.0, 2.001)


def test_golden_and_simplex():
    assert golden_section(lambda t: (t - 0.3) ** 2, 0.0, 1.0, tol=1e-9) == pytest.approx(0.3, abs=1e-8)
    f = lambda y: abs(y[0] - 1) + 10 * abs(y[1] - y[0])  # noqa: E731  kinked valley
    y, val = simplex_search(f, np.array([0.0, 0.5]), 0.1)
    np.testing.assert_allclose(y, [1.0, 1.0], atol=1e-6)
    assert val == pytest.approx(0.0, abs=1e-6)


def test_needs_two_receivers():
    v = validate(two_state(N=2))
    vg = solve_1rx(v, Grid1D.for_demand(1.0, 2, 0.5))
    with pytest.raises(PreconditionViolated):
        RegionPolicy(vg)


def test_example2_grid_table_matches_closed_form(example2_vg):
    G = example2_vg.g[3][S]
    g1, g2 = example2_vg.grids
    for y in [(1.44, 1.24), (1.0, 1.0), (1.3, 1.5), (2.0, 1.6)]:
        i, j = g1.index_of(y[0]), g2.index_of(y[1])
        assert G[i, j] == pytest.approx(g3(*y), abs=1e-9)


def test_example2_targets(example2_vg):
    table = build_region_policy(example2_vg)
    np.testing.assert_allclose(table.b(3, S), [1.44, 1.24], atol=1e-12)
    ref = RegionPolicy(example2_vg, mode="refined")
    b = ref.b(3, S)
    np.testing.assert_allclose(b, [101 / 75, 101 / 75], atol=1e-6)
    assert g3(*b) <= g3(1.44, 1.24)
    assert ref.G_value(3, S, b) == pytest.approx(g3(*b), abs=1e-9)


def test_example2_counterintuitive_jump(example2_vg):
    pol = build_region_policy(example2_vg)
    x = (0.2, 0.2)
    assert pol.classify(3, x, S) == "R_IVB"
    y = pol.structured_action(3, x, S)
    np.testing.assert_allclose(y, [1.4996, 1.0], atol=1e-9)
    # full budget spent, and receiver 1 ends above its target
    assert 2.0 * (y[0] - 0.2) + 2.001 * (y[1] - 0.2) == pytest.approx(P)
    assert y[0] > RegionPolicy(example2_vg, mode="refined").b(3, S)[0]
    # the closed form agrees that this point of the budget line is best
    t = np.linspace(1.0, 2.0, 20001)
    seg = [g3(0.2 + (P - 2.001 * (u - 0.2)) / 2.0, u) for u in t]
    assert g3(*y) <= min(seg) + 1e-9


def test_all_seven_regions_appear(example2_vg):
    pol = build_region_policy(example2_vg)
    seen = set()
    for s in pol.states:
        seen |= {r[2] for r in pol.region_map(3, s, stride=5)}
    assert seen == set(LABELS)
    assert pol.meta["fallbacks"] == 0


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_structured_policy_matches_dp(seed):
    v = validate(random_two_rx_instance(np.random.default_rng(seed), N=3))
    vg = solve_2rx(v, default_grids_2rx(v, 0.25))
    pol = build_region_policy(vg)
    rep = check_region_policy(pol)
    assert rep.ok, rep.violations[:3]


def test_structured_action_respects_constraints():
    v = validate(random_two_rx_instance(np.random.default_rng(4), N=3))
    vg = solve_2rx(v, default_grids_2rx(v, 0.25))
    pol = build_region_policy(vg)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.uniform(0, 3, 2)
        s = (int(rng.integers(v.n_states(0))), int(rng.integers(v.n_states(1))))
        y = pol.structured_action(3, x, s)
        assert np.all(y >= np.maximum(x, 1.0) - 1e-12)
        assert pol.op.c[0][s[0]] * (y[0] - x[0]) + pol.op.c[1][s[1]] * (y[1] - x[1]) \
            <= v.P * (1 + 1e-9)


def test_region_csv_header(example2_vg):
    pol = build_region_policy(example2_vg)
    lines = pol.region_csv(1, S, stride=20).splitlines()
    assert lines[0] == "x1,x2,label,y1,y2"
    assert len(lines) > 1
