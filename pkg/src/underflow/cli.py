"""Command-line experiment runner.

    underflow --spec two_state --cmd verify-all --out results/

``--spec`` takes a JSON spec file or the name of a bundled spec.  Every
flag can also be set through an environment variable named after it with
prefix ``UNDERFLOW_`` (``--grid-step`` -> ``UNDERFLOW_GRID_STEP``); flags
on the command line win.

Each run writes ``<cmd>-<spechash>.csv`` (plus a few companion CSVs for
some commands) and a ``manifest-<cmd>-<spechash>.json`` with inputs,
versions, seeds and timings.  CSVs are byte-identical across reruns with
the same inputs; only the manifest carries timestamps.

Exit codes: 0 ok, 1 invariant violation, 2 config error, 3 resource cap.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (DualSearchDiverged, GridMisaligned, MaxIterExceeded,
                     MemoryBudgetExceeded, PolicyInfeasibleAction, PreconditionViolated,
                     SpecError)
from .model import ProblemSpec, ValidatedSpec, validate

COMMANDS = ("solve-finite", "thresholds", "two-rx", "infinite", "average-cost", "bounds",
            "simulate", "verify-all")
EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_RESOURCE = 0, 1, 2, 3
ENV_PREFIX = "UNDERFLOW_"


class ConfigError(Exception):
    pass


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def build_parser():
    p = argparse.ArgumentParser(prog="underflow", description=__doc__.split("\n")[0])
    p.add_argument("--spec", default=_env("spec"),
                   help="spec JSON file or bundled name (two_state, example2, three_state_iid)")
    p.add_argument("--cmd", default=_env("cmd"), choices=COMMANDS)
    p.add_argument("--grid-step", type=float, default=_env("grid_step"),
                   help="buffer grid step (must divide every demand)")
    p.add_argument("--out", default=_env("out", "."), help="output directory")
    p.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    p.add_argument("--workers", type=int, default=int(_env("workers", 1)))
    p.add_argument("--alpha-ladder", default=_env("alpha_ladder", "0.9,0.95,0.99,0.995"),
                   help="comma-separated discount factors for average-cost")
    p.add_argument("--episodes", type=int, default=int(_env("episodes", 1000)))
    p.add_argument("--slots", type=int, default=_env("slots"),
                   help="slots per episode (default: the horizon)")
    p.add_argument("--sim-slots", type=int, default=int(_env("sim_slots", 0)),
                   help="average-cost: total simulated slots (0 = skip)")
    p.add_argument("--infinite-alpha", type=float, default=_env("infinite_alpha"),
                   help="discount for infinite-horizon runs when the spec has alpha = 1")
    p.add_argument("--stride", type=int, default=_env("stride"),
                   help="two-rx: export every stride-th grid point")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def load_any_spec(ref) -> ProblemSpec:
    from .fixtures import BUNDLED, bundled

    if ref is None:
        raise ConfigError("no spec given (--spec or UNDERFLOW_SPEC)")
    if ref in BUNDLED:
        return bundled(ref)
    path = Path(ref)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {ref}: {exc}") from None
    return ProblemSpec.loads(text)


def _write(out, name, text, written):
    path = Path(out) / name
    path.write_text(text)
    written.append(str(path))
    return path


def _step(args, vspec, m=0):
    return args.grid_step if args.grid_step is not None else vspec.demand(m) / 10


def _need_N(vspec):
    if vspec.N is None:
        raise ConfigError("this command needs a finite horizon")
    return vspec.N


def _alpha_inf(args, vspec):
    a = args.infinite_alpha if args.infinite_alpha is not None else vspec.alpha
    if not a < 1:
        raise ConfigError("spec has alpha = 1; pass --infinite-alpha for infinite runs")
    return a


def _with_alpha(vspec, a):
    return vspec if vspec.alpha == a else validate(vspec.spec.replace(alpha=a))


# --------------------------------------------------------------------------
# commands; each returns (exit status, summary dict)
# --------------------------------------------------------------------------

def cmd_solve_finite(args, vspec, tag, written):
    from .dp import Grid1D, critical_levels, default_grids_2rx, solve_1rx, solve_2rx

    N = _need_N(vspec)
    if vspec.M == 1:
        vg = solve_1rx(vspec, Grid1D.for_demand(vspec.demand(0), N, _step(args, vspec)))
        rows = ["n,s,k,b"]
        for n in range(1, N + 1):
            b = critical_levels(vg, n)
            for s in range(b.shape[0]):
                for k in range(b.shape[1]):
                    rows.append(f"{n},{s},{k},{float(b[s, k])!r}")
        _write(args.out, f"solve-finite-criticals-{tag}.csv", "\n".join(rows) + "\n", written)
    elif vspec.M == 2:
        vg = solve_2rx(vspec, default_grids_2rx(vspec, args.grid_step))
    else:
        raise ConfigError("solve-finite handles one or two receivers; use bounds for more")
    _write(args.out, f"solve-finite-{tag}.csv", vg.to_csv(), written)
    return EXIT_OK, {"V_N(x0)": _value_at_start(vg, vspec)}


def _value_at_start(vg, vspec):
    x0 = [r.initial_x for r in vspec.spec.receivers]
    N = vg.N
    if vg.M == 1:
        return {str(s): vg.value(N, x0[0], s) for s in range(vg.V.shape[1])}
    return {f"{a} {b}": vg.value(N, np.array(x0), (a, b))
            for a in range(vg.V.shape[1]) for b in range(vg.V.shape[2])}


def cmd_thresholds(args, vspec, tag, written):
    from .threshold import compute_gamma_pwl, criticals_from_gamma

    tab = compute_gamma_pwl(vspec)
    cr = criticals_from_gamma(tab)
    _write(args.out, f"thresholds-{tag}.csv", tab.to_csv(), written)
    _write(args.out, f"thresholds-criticals-{tag}.csv", cr.to_csv(), written)
    return EXIT_OK, {"N": tab.N}


def cmd_two_rx(args, vspec, tag, written):
    from .dp import default_grids_2rx, solve_2rx
    from .two_rx import build_region_policy

    if vspec.M != 2:
        raise ConfigError("two-rx needs a two-receiver spec")
    N = _need_N(vspec)
    grids = default_grids_2rx(vspec, args.grid_step)
    vg = solve_2rx(vspec, grids)
    pol = build_region_policy(vg)
    stride = args.stride or max(1, int(round(0.1 * min(vspec.demand(m) for m in range(2))
                                             / min(g.step for g in grids))))
    lines = ["n,s1,s2,x1,x2,label,y1,y2"]
    summary = ["n,s1,s2,b1,b2"]
    for n in range(1, N + 1):
        for s in pol.states:
            b = pol.b(n, s)
            summary.append(f"{n},{s[0]},{s[1]},{float(b[0])!r},{float(b[1])!r}")
    for s in pol.states:
        for x1, x2, lab, y1, y2 in pol.region_map(N, s, stride):
            lines.append(f"{N},{s[0]},{s[1]},{x1!r},{x2!r},{lab},{y1!r},{y2!r}")
    _write(args.out, f"two-rx-{tag}.csv", "\n".join(lines) + "\n", written)
    _write(args.out, f"two-rx-targets-{tag}.csv", "\n".join(summary) + "\n", written)
    return EXIT_OK, {"fallbacks": pol.meta["fallbacks"], "stride": stride}


def cmd_infinite(args, vspec, tag, written):
    from .horizon import fixed_point_gap, value_iterate

    a = _alpha_inf(args, vspec)
    vs = _with_alpha(vspec, a)
    sol = value_iterate(vs, tol=1e-10, step=args.grid_step)
    _write(args.out, f"infinite-{tag}.csv", sol.trace_csv(), written)
    gap = fixed_point_gap(sol)
    return EXIT_OK, {"alpha": a, "iterations": sol.iterations, "residual": sol.residual,
                     "b_inf": np.asarray(sol.b_inf).tolist(), "fixed_point_gap": gap}


def cmd_average_cost(args, vspec, tag, written):
    from .horizon import estimate_rho

    try:
        alphas = tuple(float(a) for a in str(args.alpha_ladder).split(","))
    except ValueError:
        raise ConfigError(f"bad --alpha-ladder {args.alpha_ladder!r}") from None
    try:
        est = estimate_rho(vspec, alphas=alphas, step=args.grid_step,
                           sim_slots=args.sim_slots, seed=args.seed, workers=args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write(args.out, f"average-cost-{tag}.csv", est.to_csv(), written)
    return EXIT_OK, {"rho_star": est.rho_star, "simulated": est.simulated}


def cmd_bounds(args, vspec, tag, written):
    from .bounds import attach_exact, lagrangian_bound, separable_bound

    step = args.grid_step
    sep = separable_bound(vspec, step=step)
    lag = lagrangian_bound(vspec, step=step)
    if vspec.M <= 2:
        from .dp import Grid1D, default_grids_2rx, solve_1rx, solve_2rx

        if vspec.M == 1:
            d = vspec.demand(0)
            vg = solve_1rx(vspec, Grid1D.for_demand(d, vspec.N, step or d / 10))
        else:
            vg = solve_2rx(vspec, default_grids_2rx(vspec, step))
        attach_exact(sep, vg=vg)
        attach_exact(lag, vg=vg)
    text = sep.to_csv()
    text += "".join(lag.to_csv().splitlines(True)[1:])
    _write(args.out, f"bounds-{tag}.csv", text, written)
    status = EXIT_OK
    if sep.exact is not None:
        slack = min(min(r.exact[s] - r.values[s] for s in r.values) for r in (sep, lag))
        if slack < -1e-8:
            status = EXIT_VIOLATION
    return status, {"separable": sep.value, "lagrangian": lag.value, "lambda": lag.lam}


def cmd_simulate(args, vspec, tag, written):
    from .sim import DPGreedy1, DPGreedy2, JustInTime, OpportunisticGreedy, simulate

    N = _need_N(vspec)
    slots = int(args.slots) if args.slots is not None else N
    if slots > N:
        raise ConfigError(f"--slots {slots} exceeds the horizon {N}")
    policies = {"just-in-time": JustInTime(vspec), "opportunistic": OpportunisticGreedy(vspec)}
    if vspec.M == 1:
        from .dp import Grid1D, solve_1rx
        from .threshold import BaseStockPolicy

        vg = solve_1rx(vspec, Grid1D.for_demand(vspec.demand(0), N, _step(args, vspec)))
        policies["dp-greedy"] = DPGreedy1.from_valuegrid(vg)
        try:
            policies["base-stock"] = BaseStockPolicy.from_spec(vspec)
        except PreconditionViolated:
            pass
    elif vspec.M == 2:
        from .bounds import greedy_feasible, lagrangian_bound
        from .dp import default_grids_2rx, solve_2rx
        from .two_rx import build_region_policy

        vg = solve_2rx(vspec, default_grids_2rx(vspec, args.grid_step))
        policies["dp-greedy"] = DPGreedy2(vg)
        policies["region"] = build_region_policy(vg)
        policies["greedy-feasible"] = greedy_feasible(vspec, lagrangian_bound(vspec))
    else:
        from .bounds import greedy_feasible, lagrangian_bound

        policies["greedy-feasible"] = greedy_feasible(vspec, lagrangian_bound(vspec))
    lines = []
    status = EXIT_OK
    for i, (name, pol) in enumerate(policies.items()):
        st = simulate(pol, vspec, args.episodes, slots, seed=args.seed)
        rows = st.to_csv().splitlines()
        if i == 0:
            lines.append("policy," + rows[0])
        lines.append(f"{name}," + rows[1])
        if st.aborted and name != "opportunistic":
            status = EXIT_VIOLATION
    _write(args.out, f"simulate-{tag}.csv", "\n".join(lines) + "\n", written)
    return status, {"policies": list(policies)}


def cmd_verify_all(args, vspec, tag, written):
    from .verify import run_all

    _need_N(vspec)
    alpha = args.infinite_alpha
    if alpha is None:
        alpha = vspec.alpha if vspec.alpha < 1 else 0.9
    reps = run_all(vspec, step=args.grid_step, infinite_alpha=alpha)
    lines = ["check,ok,violations,checked,worst"]
    for r in reps:
        lines.append(f"{r.name},{int(r.ok)},{len(r.violations)},{r.checked},{r.worst!r}")
    _write(args.out, f"verify-all-{tag}.csv", "\n".join(lines) + "\n", written)
    bad = [r.name for r in reps if not r.ok]
    return (EXIT_VIOLATION if bad else EXIT_OK), {"failed": bad, "checks": len(reps)}


HANDLERS = {"solve-finite": cmd_solve_finite, "thresholds": cmd_thresholds,
            "two-rx": cmd_two_rx, "infinite": cmd_infinite,
            "average-cost": cmd_average_cost, "bounds": cmd_bounds,
            "simulate": cmd_simulate, "verify-all": cmd_verify_all}


def _versions():
    import scipy
    return {"underflow": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def run(args) -> int:
    """Execute one configured command; returns the exit status."""
    t0 = time.perf_counter()
    written = []
    try:
        if args.cmd not in HANDLERS:
            raise ConfigError(f"unknown or missing command {args.cmd!r}; "
                              f"choose from {', '.join(COMMANDS)}")
        spec = load_any_spec(args.spec)
        vspec: ValidatedSpec = validate(spec)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        tag = spec.spec_hash()
        status, summary = HANDLERS[args.cmd](args, vspec, tag, written)
    except (ConfigError, SpecError, GridMisaligned, PreconditionViolated) as exc:
        print(f"underflow: config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MemoryBudgetExceeded, MaxIterExceeded) as exc:
        print(f"underflow: resource cap: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (AssertionError, DualSearchDiverged, PolicyInfeasibleAction) as exc:
        print(f"underflow: invariant violation: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_VIOLATION
    manifest = {
        "command": args.cmd, "spec": str(args.spec), "spec_hash": tag,
        "spec_name": spec.name, "grid_step": args.grid_step, "seed": args.seed,
        "workers": args.workers, "alpha_ladder": args.alpha_ladder,
        "episodes": args.episodes, "versions": _versions(), "outputs": written,
        "status": status, "summary": summary,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    path = Path(args.out) / f"manifest-{args.cmd}-{tag}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    print(f"{args.cmd}: status {status}; wrote {', '.join(written)}")
    return status


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except ValueError as exc:
        print(f"underflow: config error: bad environment value: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
