"""Command-line front door.

Every run writes its outputs plus one ``manifest.json`` into the output
directory.  Exit codes: 0 success, 1 assumption or verification failure
(with a JSON diagnosis), 2 usage error.
"""
import argparse
import hashlib
import json
import os
import platform
import sys
import tempfile
import time

import numpy as np

from . import __version__, _accel, jsonio, mkvg, scenarios
from .errors import MkvError, ParamOutOfRange, UnknownScenario


class UsageError(Exception):
    pass


def _versions():
    import scipy
    out = {"mkvflow": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "numba_path": _accel.USE_NUMBA}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    return out


def _out_dir(arg):
    root = os.environ.get("MKV_DATA_DIR")
    path = arg or "mkv_out"
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    os.makedirs(path, exist_ok=True)
    return path


def _load_scenario(arg, seed=None, cells=None):
    if arg is None:
        raise UsageError("--scenario is required")
    if os.path.exists(arg):
        doc = jsonio.load(arg)
    elif arg in scenarios.LIBRARY:
        doc = {"name": arg}
    else:
        raise UsageError(f"scenario file or library name not found: {arg}")
    if seed is not None:
        doc["seed"] = seed
    if cells:
        doc["cells"] = cells
    return doc, scenarios.from_dict(doc)


def _hash(doc):
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


class Run:
    def __init__(self, args, command):
        self.args, self.command = args, command
        self.out = _out_dir(args.out)
        self.outputs = []
        self.doc = None
        self.t0 = time.perf_counter()

    def path(self, name):
        p = os.path.join(self.out, name)
        self.outputs.append(os.path.basename(p))
        return p

    def manifest(self, status, extra=None):
        echo = {k: v for k, v in vars(self.args).items() if k != "func"}
        man = {"command": self.command, "status": status,
               "scenario_hash": _hash(self.doc) if self.doc is not None else None,
               "config": echo, "scenario": self.doc, "versions": _versions(),
               "seed": getattr(self.args, "seed", None), "outputs": self.outputs,
               "wallclock_s": time.perf_counter() - self.t0}
        if extra:
            man.update(extra)
        jsonio.dump(man, os.path.join(self.out, "manifest.json"))


# ---------------------------------------------------------------------------
# Subcommands.  Each returns (exit_code, summary dict).

def cmd_kernel(run, a):
    from .verify import scenario_kernel
    run.doc, sc = _load_scenario(a.scenario, a.seed, a.cells)
    t_nodes = np.arange(1, a.n_t + 1) / a.n_t
    k = scenario_kernel(sc, n_x=a.n_x, t_nodes=t_nodes)
    out = a.kernel_out or "kernel.mkvg"
    target = out if os.path.isabs(out) else run.path(out)
    if os.path.isabs(out):
        run.outputs.append(out)
    k.write(target)
    mass_ok = k.meta["mass_defect"] <= sc.series.mass_tol
    meta = {k_: v for k_, v in k.meta.items() if k_ != "config"}
    jsonio.dump(meta, run.path("kernel_meta.json"))
    return (0 if mass_ok else 1), {"mass_defect": k.meta["mass_defect"], "mass_ok": mass_ok,
                                   "term_ratio": k.meta["term_ratio"]}


def cmd_fixpoint(run, a):
    from .mkv import picard_iterate
    run.doc, sc = _load_scenario(a.scenario, a.seed)
    if a.tol is not None:
        sc.picard["tol_dphi"] = a.tol
    if a.max_iter:
        sc.picard["max_iter"] = a.max_iter
    tr = picard_iterate(sc, log=None if a.quiet else (lambda s: print(s, flush=True)))
    mkvg.write_flow(run.path("flow.mkvg"), tr.final_flow)
    tr.to_csv(run.path("residuals.csv"))
    jsonio.dump(tr.to_dict(), run.path("trace.json"))
    return (0 if tr.converged else 1), tr.to_dict()


def cmd_particles(run, a):
    from .particles import ParticleSystemConfig, empirical_to_measure, simulate
    run.doc, sc = _load_scenario(a.scenario, a.seed)
    rec = tuple(float(v) for v in a.record.split(","))
    pc = ParticleSystemConfig(N=a.N, dt=a.dt, seed=sc.seed, eps_moll=a.eps_moll,
                              scheme=a.scheme, record_times=rec)
    E = simulate(sc, pc)
    flow = empirical_to_measure(E, sc.box, a.cells or sc.cells, a.bandwidth)
    mkvg.write_flow(run.path("particles_flow.mkvg"), flow)
    if a.snapshots:
        E.to_csv(run.path("particles.csv"))
    rows = [(float(t), float(X.mean()), float(X.var())) for t, X in zip(E.times, E.particles)]
    jsonio.write_csv(run.path("moments.csv"), ["time", "mean", "variance"], rows)
    return 0, {"times": E.times.tolist(), "means": [r[1] for r in rows], **E.info}


def cmd_nfpe(run, a):
    from .fokker_planck import solve_nfpe
    run.doc, sc = _load_scenario(a.scenario, a.seed)
    flow = solve_nfpe(sc, cells=a.cells, dt=a.dt)
    mkvg.write_flow(run.path("nfpe_flow.mkvg"), flow)
    rows = [(float(t), float(m.mass()), float(m.mean()[0])) for t, m in zip(flow.times, flow.measures)]
    jsonio.write_csv(run.path("nfpe_moments.csv"), ["time", "mass", "mean"], rows)
    return 0, flow.info


def _field(a):
    from .kato import SpaceTimeField
    if a.field == "one":
        return SpaceTimeField.constant(1.0)
    if a.field == "zero":
        return SpaceTimeField.zero()
    if a.field == "ball":
        return SpaceTimeField.indicator_ball(a.radius)
    if a.field == "power":
        return SpaceTimeField.power_ball(a.exponent, a.radius)
    raise UsageError(f"unknown field {a.field}")


def cmd_norms(run, a):
    from .kato import kato_functional, lpq_norm
    f = _field(a)
    T_list = [float(v) for v in a.T.split(",")]
    rows = []
    for T in T_list:
        K = kato_functional(f, a.beta, T, d=1).value
        n = lpq_norm(f, a.p, a.q, T=T)
        rows.append((T, K, n))
    jsonio.write_csv(run.path("norms.csv"), ["T", "kato", "lpq"], rows)
    for T, K, n in rows:
        print(f"T={T:g}  K={K:.10g}  ||f||_Lpq={n:.10g}")
    return 0, {"rows": rows}


def cmd_verify(run, a):
    from .verify import run_suite
    with tempfile.TemporaryDirectory() as tmp:
        ok, rows = run_suite(a.suite, tmp)
    jsonio.dump(rows, run.path(f"verify_{a.suite}.json"))
    return (0 if ok else 1), {"passed": ok, "n": len(rows)}


def cmd_example3(run, a):
    from .measures import dphi_metric
    from .mkv import psi
    doc = {"name": "example3"}
    if a.cells:
        doc["cells"] = a.cells
    run.doc = doc
    sc = scenarios.from_dict(dict(doc))
    tol = 1e-3 if a.tol is None else a.tol
    k = sc.coefficients.constants
    W1, W2 = scenarios.example3_flows(sc)
    P1, P2 = psi(sc, W1), psi(sc, W2)
    r1, r2 = dphi_metric(P1, W1), dphi_metric(P2, W2)
    dist = dphi_metric(W1, W2)
    for name in ("c1", "c2", "lambda1", "lambda2"):
        print(f"{name} = {k[name]:.12f}")
    print(f"residual [W]  = {r1:.3e}")
    print(f"residual [2W] = {r2:.3e}")
    print(f"d_phi([W], [2W]) = {dist:.6f}")
    mkvg.write_flow(run.path("flow_W.mkvg"), P1)
    mkvg.write_flow(run.path("flow_2W.mkvg"), P2)
    res = {**k, "residual_W": r1, "residual_2W": r2, "dphi_between": dist, "tol": tol}
    jsonio.dump(res, run.path("example3.json"))
    ok = r1 <= tol and r2 <= tol and dist >= 0.1
    return (0 if ok else 1), res


def cmd_scenarios(run, a):
    if a.action == "list":
        cols = ["A0", "A1", "A2", "A3", "A4"]
        print(f"{'name':<18}" + "".join(f"{c:>4}" for c in cols) + "  description")
        for row in scenarios.assumption_matrix():
            marks = "".join(f"{('y' if row[c] else 'n'):>4}" for c in cols)
            print(f"{row['name']:<18}{marks}  {row['doc']}")
        jsonio.dump(scenarios.assumption_matrix(), run.path("scenarios.json"))
        return 0, {}
    if not a.name:
        raise UsageError("scenarios show needs a name")
    sc = scenarios.build(a.name)
    doc = scenarios.to_dict(sc)
    print(jsonio.dumps(doc))
    jsonio.dump(doc, run.path(f"{a.name}.json"))
    return 0, doc


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file or library name")
    common.add_argument("--out", help="output directory (relative paths go under $MKV_DATA_DIR)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--tol", type=float, default=None)

    p = argparse.ArgumentParser(prog="mkvflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("kernel", parents=[common], help="transition kernel of a scenario")
    s.add_argument("--kernel-out", default=None)
    s.add_argument("--cells", type=int, default=None)
    s.add_argument("--n-x", type=int, default=16)
    s.add_argument("--n-t", type=int, default=16)
    s.set_defaults(func=cmd_kernel)

    s = sub.add_parser("fixpoint", parents=[common], help="damped Picard iteration")
    s.add_argument("--max-iter", type=int, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_fixpoint)

    s = sub.add_parser("particles", parents=[common], help="interacting particle oracle")
    s.add_argument("--N", type=int, default=10_000)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--record", default="0.25,0.5,1.0")
    s.add_argument("--cells", type=int, default=None)
    s.add_argument("--bandwidth", type=float, default=None)
    s.add_argument("--eps-moll", type=float, default=None)
    s.add_argument("--scheme", choices=["cap", "shift"], default="cap")
    s.add_argument("--snapshots", action="store_true")
    s.set_defaults(func=cmd_particles)

    s = sub.add_parser("nfpe", parents=[common], help="nonlinear Fokker-Planck solve")
    s.add_argument("--cells", type=int, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.set_defaults(func=cmd_nfpe)

    s = sub.add_parser("norms", parents=[common], help="Kato functional and L^p_q norms")
    s.add_argument("--field", choices=["one", "zero", "ball", "power"], default="one")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--exponent", type=float, default=0.25)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--p", type=float, default=4.0)
    s.add_argument("--q", type=float, default=float("inf"))
    s.add_argument("--T", default="0.0625,0.25,1")
    s.set_defaults(func=cmd_norms)

    s = sub.add_parser("verify", parents=[common], help="verification suites")
    s.add_argument("--suite", choices=["trivial", "standard", "full"], default="trivial")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("example3", parents=[common], help="nonuniqueness construction")
    s.add_argument("--cells", type=int, default=None)
    s.set_defaults(func=cmd_example3)

    s = sub.add_parser("scenarios", parents=[common], help="scenario library")
    s.add_argument("action", choices=["list", "show"], nargs="?", default="list")
    s.add_argument("name", nargs="?")
    s.set_defaults(func=cmd_scenarios)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 2
    if args.threads:
        _accel.set_threads(args.threads)
    run = Run(args, args.command)
    try:
        code, summary = args.func(run, args)
    except (UsageError, UnknownScenario, ParamOutOfRange) as e:
        diag = {"error": "usage", "message": str(e)}
        if isinstance(e, MkvError):
            diag = e.to_dict()
        jsonio.dump(diag, run.path("diagnosis.json"))
        run.manifest("usage_error")
        print(json.dumps(diag), file=sys.stderr)
        return 2
    except MkvError as e:
        diag = e.to_dict()
        jsonio.dump(diag, run.path("diagnosis.json"))
        run.manifest("failed", {"diagnosis": diag})
        print(jsonio.dumps(diag), file=sys.stderr)
        return 1
    status = "ok" if code == 0 else "failed"
    if code != 0:
        jsonio.dump({"error": "check_failed", "summary": summary}, run.path("diagnosis.json"))
    run.manifest(status, {"summary": summary})
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
