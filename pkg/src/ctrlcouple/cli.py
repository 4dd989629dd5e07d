"""Command-line front end: ``ctrlcouple <subcommand> --scenario file.yaml``.

Subcommands write CSV/JSON artifacts into ``--out``. The exit status is 0
only when every requested check passes; scenario errors exit with 2 and
numerical failures with 3, each with a JSON message on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import __version__
from .coupling import controlled_reflection_coupling, reflection_coupling
from .dissipativity import QuadratureError, check_in_K
from .hjb import HJBError, value_diagnostics
from .metrics import fit_exponential_rate
from .model import MinimizationError, uncontrolled_drift
from .rates import RateError, gradient_bounds
from .scenario import Scenario, load_scenario, scenario_from_dict
from .verify import Context, clean, dumps_report, run_checks, select_ids, turnpike_curve

log = logging.getLogger("ctrlcouple")

EXIT_FAIL, EXIT_SCENARIO, EXIT_NUMERIC = 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="ctrlcouple", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("rates", "rate bundle of the drift profile and the constant ledger"),
        ("hjb", "value function on the grid with gradient/Hessian diagnostics"),
        ("ergodic", "ergodic constant and corrector"),
        ("coupling", "reflection and controlled reflection coupling runs"),
        ("turnpike", "W1 distance of the optimal process to the invariant measure"),
        ("verify", "acceptance checks, machine-readable report"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scenario", help="YAML scenario file (defaults built in when omitted)")
        s.add_argument("--seed", type=int, help="override sim.seed")
        s.add_argument("--out", help="output directory (overrides the scenario's)")
        s.add_argument("--paths", type=int, help="number of simulated paths")
        s.add_argument("--dt", type=float, help="SDE time step")
        s.add_argument("--workers", type=int, help="worker threads for path simulation")
        s.add_argument("--smoke", action="store_true", help="use the reduced problem sizes")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            s.add_argument("--checks", help="comma-separated check ids (default: the scenario's list)")
    return p


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario, smoke=args.smoke) if args.scenario else scenario_from_dict({}, smoke=args.smoke)
    if args.seed is not None:
        sc.sim.seed = args.seed
    if args.paths is not None:
        sc.sim.n_paths = args.paths
    if args.dt is not None:
        sc.sim.dt = args.dt
    if args.workers is not None:
        sc.sim.n_workers = args.workers
    if args.out:
        sc.output = args.out
    if getattr(args, "checks", None):
        sc.checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    select_ids(sc.checks)
    if args.command == "turnpike":
        if args.paths is not None:
            sc.verify.turnpike_paths = args.paths
        if args.dt is not None:
            sc.verify.turnpike_dt = args.dt
    return sc


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(clean(obj), indent=2) + "\n")


def _header(sc, ctx=None):
    return {"version": __version__, "scenario": sc.to_dict()}


def cmd_rates(sc, ctx, out):
    b = ctx.base
    mem = check_in_K(b.profile)
    b.to_csv(os.path.join(out, "bundle.csv"))
    _write_json(os.path.join(out, "rates.json"), {
        **_header(sc, ctx), "bundle": b.summary(), "invariants": b.check_invariants(),
        "membership": vars(mem), "ledger": ctx.ledger.to_dict()})
    return all(b.check_invariants().values()) and mem.in_K


def cmd_hjb(sc, ctx, out):
    vf = ctx.vf(1, sc.horizon)
    every = max(1, vf.times.size // 20)
    vf.to_csv(os.path.join(out, "value.csv"), every=every)
    c = ctx.model.constants
    bound, _ = gradient_bounds(c.M_F_x, c.M_g_x, ctx.base, sc.horizon - vf.times)
    rows = []
    for k, t in enumerate(vf.times):
        d = value_diagnostics(vf, k)
        rows.append({"t": t, "lip_norm": d["lip_norm"], "lip_bound": bound[k], "hess_sup": d["hess_sup"]})
    ok = all(r["lip_norm"] <= r["lip_bound"] + 1e-2 for r in rows)
    _write_json(os.path.join(out, "hjb.json"), {
        **_header(sc, ctx), "terminal": vf.terminal_tag, "steps": vf.n_steps, "clamp_hits": vf.clamp_hits,
        "diagnostics": rows, "gradient_bound_holds": ok})
    return ok


def cmd_ergodic(sc, ctx, out):
    sol = ctx.ergodic
    sol.to_csv(os.path.join(out, "phi_inf.csv"))
    ok = sol.residual < 1e-6
    _write_json(os.path.join(out, "ergodic.json"), {
        **_header(sc, ctx), "alpha_inf": sol.alpha_inf, "alpha_convention": sol.alpha_convention,
        "residual": sol.residual, "iterations": sol.iterations, "increments_sup": sol.increments_sup,
        "increments_lip": sol.increments_lip, "ratios": sol.ratios})
    return ok


def cmd_coupling(sc, ctx, out):
    s = sc.sim
    T = sc.horizon
    cfg = ctx.cfg(dt=s.dt, n_paths=s.n_paths, horizon=T, out_every=max(1, int(round(0.05 / s.dt))))
    b = ctx.base
    drift0 = uncontrolled_drift(ctx.model)
    ref = reflection_coupling(lambda t, x: drift0(x), sc.model.sigma, s.x0, s.x1, cfg, bundle=b)
    ref.to_csv(os.path.join(out, "coupling_reflection.csv"))
    vf = ctx.vf(1, T)
    ctl = controlled_reflection_coupling(ctx.model, vf, s.x0, s.x1, cfg, bundle=b)
    ctl.to_csv(os.path.join(out, "coupling_controlled.csv"))
    env = float(b.f_eval(abs(s.x1 - s.x0))) * np.exp(-b.lam * ref.times)
    ok = bool(np.all(ref.mean_f <= env + 3 * ref.f_se + 1e-12))
    _write_json(os.path.join(out, "coupling.json"), {
        **_header(sc, ctx), "bundle": b.summary(), "reflection_envelope_holds": ok,
        "cost_gap_mean": ctl.extra["cost_gap_mean"], "cost_gap_se": ctl.extra["cost_gap_se"],
        "value_difference": float(vf.value_at(0, s.x1) - vf.value_at(0, s.x0)),
        "delta_merge": ref.extra["delta_merge"], "flagged": ref.flagged + ctl.flagged})
    return ok


def cmd_turnpike(sc, ctx, out):
    cur = turnpike_curve(ctx)
    with open(os.path.join(out, "turnpike.csv"), "w") as fh:
        fh.write("s,w1_to_mu_inf,envelope,stderr\n")
        for row in zip(cur["s"], cur["w1"], cur["envelope"], cur["se"]):
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    w1 = cur["w1"]
    j = int(np.argmin(w1))
    fits = {}
    if j >= 2:
        fits["entry"] = vars(fit_exponential_rate(cur["s"][: j + 1], w1[: j + 1]))
    if w1.size - j >= 3:
        fits["exit"] = vars(fit_exponential_rate(cur["T"] - cur["s"][j:], w1[j:]))
    sel = cur["s"] <= cur["T"] - cur["tau"] + 1e-12
    ok = bool(np.all(w1[sel] <= cur["envelope"][sel] + 3 * cur["se"][sel]))
    _write_json(os.path.join(out, "turnpike.json"), {
        **_header(sc, ctx), "constants": ctx.ledger.turnpike, "w1_start": cur["w1_start"],
        "lip_gap": cur["lip_gap"], "s_min": cur["s"][j], "w1_min": w1[j], "fits": fits,
        "envelope_holds": ok})
    return ok


def cmd_verify(sc, ctx, out):
    report = run_checks(sc, ctx=ctx)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(dumps_report(report))
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['id']:>2} {c['name']}")
    return report["passed"]


COMMANDS = {"rates": cmd_rates, "hjb": cmd_hjb, "ergodic": cmd_ergodic, "coupling": cmd_coupling,
            "turnpike": cmd_turnpike, "verify": cmd_verify}

_NUMERIC = (HJBError, RateError, QuadratureError, MinimizationError, FloatingPointError)


def _fail(kind, exc, code):
    msg = {"error": str(exc), "kind": kind, "type": type(exc).__name__, "module": type(exc).__module__}
    sys.stderr.write(json.dumps(msg) + "\n")
    return code


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = _scenario(args)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        return _fail("scenario", exc, EXIT_SCENARIO)
    out = sc.output
    os.makedirs(out, exist_ok=True)
    ctx = Context(sc)
    try:
        ok = COMMANDS[args.command](sc, ctx, out)
    except _NUMERIC as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    return 0 if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
