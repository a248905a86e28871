"""Command-line front end: one subcommand per experiment.

Every run that names ``--out`` writes that file plus ``<out>.manifest.json``.
Without ``--out`` the JSON summary goes to stdout.  Output files contain no
timestamps or timings, so equal argv and seed give byte-identical files;
the manifest carries the wall-clock bookkeeping.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from coalflow import oracles
from coalflow.direct import (
    cluster_size_estimate,
    direct_batch,
    pair_meeting_batch,
    sandwich_batch,
    write_meeting_csv,
)
from coalflow.estimators import (
    SIGMAS,
    StreamStats,
    bm_diagnostics,
    ks_against_cdf,
    ks_two_sample,
    prop1_sum_estimate,
    two_proportion_z,
)
from coalflow.model import DriftModel, RunManifest, make_uniform_partition
from coalflow.splitting import trotter_batch
from coalflow.web import SCHEMA_HEADER, Birth, flow_batch

COMMANDS = ("oracle", "meet", "cluster", "trotter", "prop1", "sandwich", "webtest")
ORACLES = ("phi", "survival", "never", "hitting", "l", "lbound", "cluster", "cluster-limit",
           "normcdf", "prop1")


class CommandError(Exception):
    """A runtime failure reported with exit code 1."""


# --------------------------------------------------------------------------
# parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--reps", type=int, default=10000, help="replicas")
    common.add_argument("--dt", type=float, default=None, help="time step (default 1e-4)")
    common.add_argument("--horizon", type=float, default=1.0)
    common.add_argument("--out", type=Path, default=None, help="output file")
    common.add_argument("--format", choices=("csv", "json"), default="json")

    p = argparse.ArgumentParser(prog="coalflow",
                                description="Coalescing Brownian flows with drift.")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("oracle", parents=[common], help="closed forms and quadratures")
    o.add_argument("--what", choices=ORACLES, required=True)
    o.add_argument("--C", type=float, default=0.0)
    o.add_argument("--t", type=float, nargs="+", default=[1.0])
    o.add_argument("--u1", type=float, default=0.0)
    o.add_argument("--u2", type=float, default=0.5)
    o.add_argument("--x", type=float, default=0.0, help="argument of normcdf")
    o.add_argument("--n", type=int, default=1)
    o.add_argument("--s", type=float, default=0.0)
    o.add_argument("--r", type=float, default=0.0)
    o.add_argument("--scale", type=float, default=1.0,
                   help="factor on the meeting-clock exponent (1 for the simulated dynamics)")
    o.add_argument("--method", default="closed", choices=("closed", "hitting", "density"))

    m = sub.add_parser("meet", parents=[common], help="pair meeting-time law")
    m.add_argument("--u1", type=float, default=0.0)
    m.add_argument("--u2", type=float, default=0.5)
    m.add_argument("--drift", default=None, help="zero | linear | cosine | tanh:k")
    m.add_argument("--C", type=float, nargs="+", default=None,
                   help="linear drift coefficients (one experiment each)")
    m.add_argument("--t", type=float, nargs="*", default=[],
                   help="times at which to compare survival with the oracle")

    c = sub.add_parser("cluster", parents=[common], help="expected cluster size of 0")
    c.add_argument("--drift", default="linear")
    c.add_argument("--C", type=float, default=1.0)
    c.add_argument("--t", type=float, nargs="+", default=[0.01])
    c.add_argument("--grid-m", type=int, default=200)
    c.add_argument("--method", choices=("pair-quadrature", "fan"), default="pair-quadrature")
    c.add_argument("--steps", type=int, default=400, help="dt = t/steps when --dt is absent")

    t = sub.add_parser("trotter", parents=[common], help="splitting scheme diagnostics")
    t.add_argument("--drift", nargs="+", default=["cosine"])
    t.add_argument("--C", type=float, default=None)
    t.add_argument("--u1", type=float, default=0.0)
    t.add_argument("--u2", type=float, default=0.3)
    t.add_argument("--partition-N", type=int, nargs="+", default=[16])
    t.add_argument("--compare-direct", action="store_true",
                   help="also run the direct simulator and compare terminal laws")

    q = sub.add_parser("prop1", parents=[common], help="correlation sums over blocks")
    q.add_argument("--n", type=int, nargs="+", default=[4, 16, 64])
    q.add_argument("--s", type=float, default=0.25)
    q.add_argument("--t", type=float, default=0.75)
    q.add_argument("--r", type=float, default=0.5)
    q.add_argument("--sanity", action="store_true",
                   help="add the n=1, r=0, s=0, t=1 case (expected value 1)")

    s = sub.add_parser("sandwich", parents=[common], help="linear bounds on a coupled gap")
    s.add_argument("--drift", default="cosine")
    s.add_argument("--C", type=float, default=None)
    s.add_argument("--c-alpha", type=float, default=None,
                   help="bounding rate (default: the drift's Lipschitz constant)")
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--u1", type=float, default=0.0)
    s.add_argument("--u2", type=float, default=0.5)

    w = sub.add_parser("webtest", parents=[common], help="web engine moments and oracle checks")
    w.add_argument("--u1", type=float, default=0.0)
    w.add_argument("--u2", type=float, default=1.0)
    w.add_argument("--t", type=float, default=1.0)
    return p


# --------------------------------------------------------------------------
# output helpers


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _z(value: float, target: float, se: float) -> float:
    if se > 0:
        return (value - target) / se
    return 0.0 if value == target else math.inf


def _dt(args) -> float:
    dt = 1e-4 if args.dt is None else args.dt
    if not dt > 0:
        raise CommandError("--dt must be positive")
    return dt


def _reps(args) -> int:
    if args.reps < 2:
        raise CommandError("--reps must be at least 2")
    return args.reps


def _drift(text: str | None, C: float | None) -> DriftModel:
    if text is None:
        return DriftModel.zero() if C is None else DriftModel.linear(C)
    try:
        return DriftModel.parse(text, C=C)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands; each returns (summary dict, csv text or None)


def cmd_oracle(args) -> tuple[dict, str | None]:
    what = args.what
    gap = abs(args.u2 - args.u1)
    params: dict[str, Any] = {}

    def each(f: Callable[[float], float]):
        vals = [f(t) for t in args.t]
        return vals[0] if len(vals) == 1 else vals

    if what == "phi":
        params = {"C": args.C, "t": args.t, "scale": args.scale}
        value = each(lambda t: oracles.phi_C(args.C, t, args.scale))
    elif what == "survival":
        params = {"C": args.C, "u1": args.u1, "u2": args.u2, "t": args.t, "scale": args.scale}
        value = each(lambda t: oracles.meeting_survival_linear(args.C, args.u1, args.u2, t,
                                                               args.scale))
    elif what == "never":
        params = {"C": args.C, "u1": args.u1, "u2": args.u2, "scale": args.scale}
        value = oracles.meeting_never_prob_linear(args.C, args.u1, args.u2, args.scale)
    elif what == "hitting":
        params = {"gap": gap, "t": args.t}
        value = each(lambda t: oracles.hitting_cdf_zero_drift(gap, t))
    elif what == "l":
        params = {"gap": gap, "t": args.t, "method": args.method}
        value = each(lambda t: oracles.l_defect(t, gap, args.method))
    elif what == "lbound":
        params = {"gap": gap, "t": args.t}
        value = each(lambda t: oracles.l_upper_bound(t, gap))
    elif what == "cluster":
        params = {"C": args.C, "t": args.t, "scale": args.scale}
        value = each(lambda t: oracles.expected_cluster_size_linear(args.C, t, args.scale))
    elif what == "cluster-limit":
        value = oracles.cluster_size_limit_constant()
    elif what == "normcdf":
        params = {"x": args.x}
        value = oracles.normal_cdf(args.x)
    else:
        t = args.t[0]
        params = {"n": args.n, "s": args.s, "t": t, "r": args.r}
        value = oracles.correlation_sum_expected(args.n, args.s, t, args.r)
    summary = {"command": "oracle", "what": what, "params": params, "value": value}
    vals = value if isinstance(value, list) else [value]
    rows = [[what, i, v] for i, v in enumerate(vals)]
    return summary, _csv_text(["what", "index", "value"], rows)


def cmd_meet(args) -> tuple[dict, str | None]:
    dt, reps = _dt(args), _reps(args)
    if args.u2 < args.u1:
        raise CommandError("need --u1 <= --u2")
    gap = args.u2 - args.u1
    models = ([_drift(args.drift, c) for c in args.C] if args.C is not None
              else [_drift(args.drift, None)])
    horizon = args.horizon
    experiments = []
    csv_parts = []
    for k, model in enumerate(models):
        times = pair_meeting_batch(args.u1, args.u2, model, horizon, dt, args.seed, reps,
                                   purpose="meet", sub=k)
        exp: dict[str, Any] = {"drift": model.to_dict(), "reps": reps}
        cdf = _meeting_cdf(model, gap)
        if cdf is not None:
            ks = ks_against_cdf(times, cdf, horizon)
            exp["ks"] = ks.to_dict()
            exp["survival"] = []
            for t in args.t:
                emp = float(np.mean(times > t))
                orc = 1.0 - cdf(t)
                se = math.sqrt(orc * (1 - orc) / reps)
                exp["survival"].append({"t": t, "empirical": emp, "oracle": orc, "stderr": se,
                                        "z": _z(emp, orc, se)})
        else:
            exp["meet_fraction"] = float(np.mean(np.isfinite(times)))
        experiments.append(exp)
        buf = io.StringIO()
        _write_meeting_rows(buf, times, model if len(models) > 1 else None)
        csv_parts.append(buf.getvalue())
    summary = {"command": "meet", "u1": args.u1, "u2": args.u2, "horizon": horizon, "dt": dt,
               "seed": args.seed, "experiments": experiments}
    text = SCHEMA_HEADER + "\n" + ("drift," if len(models) > 1 else "") + "replica,met,time\n"
    text += "".join(csv_parts)
    return summary, text


def _write_meeting_rows(buf, times, model: DriftModel | None) -> None:
    w = csv.writer(buf, lineterminator="\n")
    tag = [] if model is None else [_drift_label(model)]
    for i, t in enumerate(times):
        met = bool(t < math.inf)
        w.writerow(tag + [i, int(met), repr(float(t)) if met else "inf"])


def _drift_label(model: DriftModel) -> str:
    if model.kind == "linear":
        return f"linear:{model.C!r}"
    if model.kind == "named":
        return model.name + "".join(f":{p!r}" for p in model.params)
    return "zero"


def _meeting_cdf(model: DriftModel, gap: float) -> Callable[[float], float] | None:
    if model.kind == "zero":
        return lambda t: oracles.hitting_cdf_zero_drift(gap, t)
    if model.kind == "linear":
        return lambda t: oracles.meeting_cdf_linear(model.C, gap, t)
    return None


def cmd_cluster(args) -> tuple[dict, str | None]:
    reps = _reps(args)
    model = _drift(args.drift, args.C)
    rows = []
    results = []
    for t in args.t:
        dt = args.dt if args.dt is not None else t / args.steps
        est = cluster_size_estimate(model, t, args.grid_m, reps, dt, args.seed, args.method)
        res: dict[str, Any] = {"t": t, "dt": dt, "method": est.method, "value": est.value,
                               "stderr": est.stderr, "reps": est.reps, "grid_m": est.grid_m,
                               "ratio_sqrt_t": est.value / math.sqrt(t)}
        if model.kind == "linear":
            orc = oracles.expected_cluster_size_linear(model.C, t)
            res["oracle"] = orc
            res["z"] = _z(est.value, orc, est.stderr)
        results.append(res)
        rows.append([t, est.method, est.value, est.stderr, est.reps])
    summary = {"command": "cluster", "drift": model.to_dict(), "seed": args.seed,
               "estimates": results,
               "limit_constant": oracles.cluster_size_limit_constant()}
    return summary, _csv_text(["t", "method", "value", "stderr", "reps"], rows)


def cmd_trotter(args) -> tuple[dict, str | None]:
    dt, reps = _dt(args), _reps(args)
    if args.u2 < args.u1:
        raise CommandError("need --u1 <= --u2")
    starts = [args.u1, args.u2]
    runs = []
    rows = []
    for d_idx, dtext in enumerate(args.drift):
        model = _drift(dtext, args.C)
        direct = None
        if args.compare_direct:
            direct = direct_batch(starts, model, 1.0, dt, args.seed, reps,
                                  purpose=f"direct/{d_idx}")[:, 0, :]
            direct_met = int(np.sum(direct[:, 0] == direct[:, 1]))
        for N in args.partition_N:
            part = make_uniform_partition(N)
            if dt > part.mesh:
                raise CommandError(f"--dt {dt} exceeds the mesh 1/{N}")
            b = trotter_batch(starts, part, model, dt, args.seed, reps)
            inc = np.column_stack([b.m_increments.reshape(-1),
                                   np.tile(b.spans, reps),
                                   np.repeat(np.arange(reps), N)])
            bm = bm_diagnostics(inc)
            run: dict[str, Any] = {
                "drift": model.to_dict(), "N": N, "reps": reps,
                "jump_bound_pass_fraction": float(np.mean(np.all(b.jump_ok, axis=1))),
                "met_fraction": float(np.mean(b.met)),
                "terminal_mean": [float(x) for x in b.final.mean(axis=0)],
                "martingale": bm.to_dict(),
            }
            row = [_drift_label(model), N, reps, run["jump_bound_pass_fraction"],
                   run["met_fraction"], bm.mean_z, bm.var_ratio, bm.lag1, bm.qv_ratio]
            if direct is not None:
                ks = [ks_two_sample(b.final[:, p], direct[:, p]) for p in range(2)]
                z = two_proportion_z(int(np.sum(b.met)), reps, direct_met, reps)
                run["direct"] = {"ks": ks, "met_fraction": direct_met / reps, "met_z": z}
                row += [ks[0], ks[1], direct_met / reps, z]
            runs.append(run)
            rows.append(row)
    header = ["drift", "N", "reps", "jump_bound_pass_fraction", "met_fraction", "m_mean_z",
              "m_var_ratio", "m_lag1", "m_qv_ratio"]
    if args.compare_direct:
        header += ["ks_direct_p0", "ks_direct_p1", "direct_met_fraction", "met_z"]
    summary = {"command": "trotter", "starts": starts, "dt": dt, "seed": args.seed, "runs": runs}
    return summary, _csv_text(header, rows)


def cmd_prop1(args) -> tuple[dict, str | None]:
    dt, reps = _dt(args), _reps(args)
    cases = [(n, args.s, args.t, args.r) for n in args.n]
    if args.sanity:
        cases.append((1, 0.0, 1.0, 0.0))
    results = []
    rows = []
    for n, s, t, r in cases:
        est = prop1_sum_estimate(n, s, t, r, reps, dt, args.seed)
        exact = oracles.correlation_sum_expected(n, s, t, r)
        results.append({"n": n, "s": s, "t": t, "r": r, "reps": reps, "value": est.value,
                        "stderr": est.stderr, "expected": exact,
                        "z_expected": _z(est.value, exact, est.stderr),
                        "z_zero": _z(est.value, 0.0, est.stderr)})
        rows.append([n, s, t, r, reps, est.value, est.stderr, exact])
    summary = {"command": "prop1", "dt": dt, "seed": args.seed, "estimates": results}
    return summary, _csv_text(["n", "s", "t", "r", "reps", "estimate", "stderr", "expected"], rows)


def cmd_sandwich(args) -> tuple[dict, str | None]:
    dt, reps = _dt(args), _reps(args)
    model = _drift(args.drift, args.C)
    cases = [("bounds", model, args.c_alpha), ("equality", DriftModel.zero(), 0.0)]
    results = []
    rows = []
    for name, mdl, c in cases:
        try:
            sb = sandwich_batch(mdl, args.u1, args.u2, args.horizon, dt, args.seed, reps,
                                c_alpha=c, gamma=args.gamma)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        c_used = mdl.lipschitz_constant if c is None else c
        res = {"case": name, "drift": mdl.to_dict(), "c_alpha": c_used, "reps": reps,
               "violating_replicas": int(np.sum(sb.violations > 0)),
               "violations": int(np.sum(sb.violations)),
               "mismatching_replicas": int(np.sum(sb.mismatches > 0)),
               "met_fraction": float(np.mean(np.isfinite(sb.tau)))}
        results.append(res)
        rows.append([name, _drift_label(mdl), c_used, reps, res["violating_replicas"],
                     res["violations"], res["mismatching_replicas"]])
    summary = {"command": "sandwich", "u1": args.u1, "u2": args.u2, "dt": dt,
               "horizon": args.horizon, "seed": args.seed, "cases": results}
    return summary, _csv_text(["case", "drift", "c_alpha", "reps", "violating_replicas",
                               "violations", "mismatching_replicas"], rows)


def oracle_selfcheck() -> list[dict[str, Any]]:
    """Cross-route consistency checks of the closed forms (no simulation)."""
    from scipy import integrate as si

    checks = []
    ts = (0.1, 0.3, 0.5, 1.0, 2.0)
    us = (0.0005, 0.05, 0.3, 1.0, 2.5)
    worst_route = 0.0
    worst_bound = -math.inf
    for t in ts:
        for u in us:
            a = oracles.l_defect(t, u, "density")
            b = oracles.l_defect(t, u, "hitting")
            worst_route = max(worst_route, abs(a - b))
            cap = min(t, oracles.l_upper_bound(t, u))
            worst_bound = max(worst_bound, a - cap)
    checks.append({"name": "l_dual_routes", "value": worst_route, "tolerance": 1e-8,
                   "pass": worst_route <= 1e-8})
    checks.append({"name": "l_below_min_t_bound", "value": worst_bound, "tolerance": 0.0,
                   "pass": worst_bound <= 0.0})
    worst_phi = 0.0
    for C in (-1.0, 0.5, 1.0, 2.0):
        for t in (0.01, 0.25, 1.0, 3.0):
            q = si.quad(lambda s: math.exp(-2.0 * C * s), 0.0, t, epsabs=1e-13, epsrel=1e-12)[0]
            worst_phi = max(worst_phi, abs(oracles.phi_C(C, t) - q))
    checks.append({"name": "phi_vs_quadrature", "value": worst_phi, "tolerance": 1e-10,
                   "pass": worst_phi <= 1e-10})
    worst_cl = 0.0
    for C in (-1.0, 0.5, 1.0):
        for t in (0.0025, 0.04, 0.5):
            sd = math.sqrt(2.0 * oracles.phi_C(C, t))
            # P{tau(0, r) <= t} = P{|N(0, 2 phi)| >= r}; integrate the density over r and z
            q = si.dblquad(lambda z, r: math.exp(-0.5 * (z / sd) ** 2) / (sd * math.sqrt(2 * math.pi)),
                           0.0, 1.0, lambda r: r, lambda r: r + 40.0 * sd,
                           epsabs=1e-13, epsrel=1e-13)[0]
            worst_cl = max(worst_cl, abs(oracles.expected_cluster_size_linear(C, t) - 2.0 * q))
    checks.append({"name": "cluster_vs_2d_quadrature", "value": worst_cl, "tolerance": 1e-8,
                   "pass": worst_cl <= 1e-8})
    return checks


def cmd_webtest(args) -> tuple[dict, str | None]:
    dt, reps = _dt(args), _reps(args)
    if args.t > args.horizon:
        raise CommandError("--t beyond --horizon")
    births = [Birth(args.u1, 0.0), Birth(args.u2, 0.0)]
    pos = flow_batch(births, [args.t], args.horizon, dt, args.seed, reps, purpose="webtest")[:, 0, :]
    prod = StreamStats.from_values(pos[:, 0] * pos[:, 1])
    gap = abs(args.u2 - args.u1)
    l_val = oracles.l_defect(args.t, gap, "closed")
    cov = prod.mean - args.u1 * args.u2
    checks = [{"name": "product_moment", "value": cov, "target": l_val, "stderr": prod.stderr,
               "z": _z(cov, l_val, prod.stderr)}]
    for p, u in enumerate((args.u1, args.u2)):
        st = StreamStats.from_values(pos[:, p])
        checks.append({"name": f"martingale_mean_{p}", "value": st.mean, "target": u,
                       "stderr": st.stderr, "z": _z(st.mean, u, st.stderr)})
        checks.append({"name": f"variance_{p}", "value": st.variance, "target": args.t})
    for c in checks:
        if "z" in c:
            c["pass"] = abs(c["z"]) <= SIGMAS
    oracle_checks = oracle_selfcheck()
    summary = {"command": "webtest", "u1": args.u1, "u2": args.u2, "t": args.t, "dt": dt,
               "reps": reps, "seed": args.seed, "engine": checks, "oracles": oracle_checks}
    rows = [[c["name"], c["value"], c.get("target", ""), c.get("stderr", ""),
             c.get("pass", "")] for c in checks]
    rows += [[c["name"], c["value"], 0.0, c["tolerance"], c["pass"]] for c in oracle_checks]
    return summary, _csv_text(["check", "value", "target", "stderr_or_tolerance", "pass"], rows)


HANDLERS: dict[str, Callable] = {
    "oracle": cmd_oracle, "meet": cmd_meet, "cluster": cmd_cluster, "trotter": cmd_trotter,
    "prop1": cmd_prop1, "sandwich": cmd_sandwich, "webtest": cmd_webtest,
}


# --------------------------------------------------------------------------
# entry points


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def run_command(argv: Sequence[str]) -> int:
    """Run one subcommand; 0 on success, 1 on runtime failure, 2 on bad flags."""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    started = RunManifest.now()
    try:
        summary, csv_text = HANDLERS[args.command](args)
    except (CommandError, ValueError) as exc:
        print(f"coalflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    text = _json_text(summary) if args.format == "json" else csv_text
    if args.out is None:
        sys.stdout.write(text)
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    RunManifest(command=args.command, argv=argv, params=params, master_seed=args.seed,
                started=started, finished=RunManifest.now(),
                outputs=[str(args.out)]).write(manifest_path(args.out))
    return 0


def replay(manifest: str | Path | RunManifest, out: str | Path | None = None) -> int:
    """Re-run a recorded command, optionally redirecting its output file."""
    m = manifest if isinstance(manifest, RunManifest) else RunManifest.read(manifest)
    argv = list(m.argv)
    if out is not None:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = str(out)
        else:
            argv += ["--out", str(out)]
    return run_command(argv)


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
