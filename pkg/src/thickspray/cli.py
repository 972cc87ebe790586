"""Command-line interface.

Subcommands ``simulate``, ``penrose-check``, ``avgop-bench`` and
``flow-test``. Exit codes: 0 success, 1 usage or configuration error,
2 stability or bound refusal, 3 numerical divergence or failed check.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft

from . import avgops as ao
from . import characteristics as ch
from . import config as cf
from . import grid as gr
from . import penrose as pn
from . import solver as so
from .errors import ConfigError, ThickSprayError

log = logging.getLogger("thickspray")

EXIT_OK, EXIT_USAGE, EXIT_REFUSED, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _nonneg_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return n


def _add_common(p, default):
    p.add_argument("--config", metavar="PATH", default=default,
                   help="TOML configuration file (defaults apply when omitted)")
    p.add_argument("--out", metavar="DIR", default=default,
                   help="output directory (overrides THICKSPRAY_OUT and the config)")
    p.add_argument("--threads", metavar="N", type=_positive_int, default=default,
                   help="FFT worker threads (default 1)")
    p.add_argument("--seed", metavar="N", type=_nonneg_int, default=default,
                   help="seed for randomized probes (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thickspray",
                     description="Penrose checks and regularized thick-spray simulations.")
    _add_common(parser, None)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "simulate": "run the coupled solver and write diagnostics",
        "penrose-check": "evaluate the sampled Penrose margin of the initial data",
        "avgop-bench": "empirical norm tests of the averaging operators",
        "flow-test": "compare characteristics and straightening with closed forms",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        _add_common(sp, argparse.SUPPRESS)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def load_config(path: Optional[str]) -> cf.RunConfig:
    if path is None:
        return cf.parse_dict({}, None)
    return cf.parse_config(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return str(o)
    return repr(o)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _meta(args, rc: cf.RunConfig) -> dict:
    return {"config": rc.source, "seed": args.seed, "threads": args.threads}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, rc: cf.RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "config_echo.json", _dump(rc.echo()) + "\n")
    f0, fluid0 = rc.build_initial()
    log.info("simulate: d=%d Nx=%d Nv=%d dt=%g T_end=%g", rc.grid.d, rc.grid.Nx,
             rc.grid.Nv, rc.solver.dt, rc.solver.T_end)
    res = so.run(f0, fluid0, rc.law, rc.witness, rc.solver, out_dir=out, meta=_meta(args, rc))
    print(_dump({"status": res.status, "exit_code": res.exit_code, "out_dir": str(out),
                 "t_final": res.summary.get("t_final"),
                 "steps": res.summary.get("steps"),
                 "error": None if res.error is None else str(res.error)}))
    if res.error is not None:
        print(f"thickspray: {res.status}: {res.error}", file=sys.stderr)
    return res.exit_code


def penrose_report(rc: cf.RunConfig) -> dict:
    """Sampled margin of the configured initial data with sufficient-condition tags."""
    f0, fluid0 = rc.build_initial()
    s = rc.solver
    rep = pn.check_condition(f0, fluid0, rc.law, s.penrose_sampling, s.penrose_variant,
                             s.c_required)
    C = pn.prefactor(gr.velocity_moment(f0, 0), fluid0.rho, rc.law)
    out = rep.to_dict()
    out["sufficient"] = sorted(pn.classify_sufficient(f0, C))
    return out


def cmd_penrose(args, rc: cf.RunConfig, out: Path) -> int:
    report = penrose_report(rc)
    _write(out, "penrose_report.json", _dump(report) + "\n")
    print(_dump(report))
    log.info("penrose-check: margin %.6g (required > %g)", report["margin"],
             report["c_required"])
    return EXIT_OK if report["pass"] else EXIT_REFUSED


def avgop_rows(rc: cf.RunConfig, seed: int = 0) -> list:
    a = rc.avgops
    kernel = ao.GaussianKernel(1, a["width"], a["amplitude"])
    rows = ao.smoothing_suite(kernel, tuple(a["ladder"]), a["T"], a["time_factor"],
                              a["probes"], seed, a["ratio"])
    rows += ao.growth_in_T(kernel, tuple(a["T_values"]), a["growth_Nx"], a["time_factor"],
                           a["probes"], seed)
    return rows


def cmd_avgop(args, rc: cf.RunConfig, out: Path) -> int:
    rows = avgop_rows(rc, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("test", "Nx", "k", "value", "verdict"))
    for r in rows:
        w.writerow((r.test, r.Nx, r.k, "%.17g" % r.value, r.verdict))
    _write(out, "avgop_bench.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _check(name, value, tol, ok, **extra):
    return {"name": name, "value": float(value), "tol": tol, "pass": bool(ok), **extra}


def flow_checks(amplitude: float = 0.5, horizon: float = 0.5, dt_sub: float = 1e-3,
                seed: int = 0) -> list:
    """Closed-form and reference comparisons for characteristics and straightening."""
    rng = np.random.default_rng(seed)
    checks = []

    err = 0.0
    for d in (1, 2):
        c = rng.uniform(-1.0, 1.0, d)
        x = rng.uniform(0.0, 2 * math.pi, (d, 64))
        v = rng.uniform(-3.0, 3.0, (d, 64))
        for t, s in ((0.0, 1.0), (1.0, 0.0), (0.3, -0.2)):
            r = ch.flow(ch.ConstantForce(c, d), x, v, t, s, dt_sub)
            Xe, Ve = ch.constant_force_flow(c, x, v, t, s)
            err = max(err, np.abs(r.X - Xe).max(), np.abs(r.V - Ve).max())
    checks.append(_check("constant_field", err, 1e-8, err < 1e-8))

    x = rng.uniform(0.0, 2 * math.pi, (1, 64))
    v = rng.uniform(-3.0, 3.0, (1, 64))
    r = ch.flow(ch.ZeroForce(1), x, v, 0.0, 1.0, dt_sub)
    Xe, Ve = ch.constant_force_flow([0.0], x, v, 0.0, 1.0)
    err = max(np.abs(r.X - Xe).max(), np.abs(r.V - Ve).max())
    checks.append(_check("zero_force", err, 1e-12, err < 1e-12))

    F = ch.FunctionForce(lambda t, X: amplitude * np.sin(X) * np.cos(t), 1)
    err = 0.0
    h = 1e-5
    for t, s in ((0.0, 0.5), (0.5, 0.0)):
        for x0, v0 in ((0.3, 0.7), (2.0, -1.5)):
            J = np.empty((2, 2))
            for j, (dx, dv) in enumerate(((h, 0.0), (0.0, h))):
                p = ch.flow(F, [[x0 + dx]], [[v0 + dv]], t, s, dt_sub)
                m = ch.flow(F, [[x0 - dx]], [[v0 - dv]], t, s, dt_sub)
                J[:, j] = [(p.X - m.X).item() / (2 * h), (p.V - m.V).item() / (2 * h)]
            jac = ch.flow(F, [[x0]], [[v0]], t, s, dt_sub).jacobian_phase
            err = max(err, abs(np.linalg.det(J) / jac - 1.0), abs(jac - math.exp(t - s)))
    checks.append(_check("jacobian", err, 1e-6, err < 1e-6, convention="exp(d (t - s))"))

    x = rng.uniform(0.0, 2 * math.pi, (1, 16))
    v = rng.uniform(-2.0, 2.0, (1, 16))
    Xr, Vr = ch.reference_flow(F, x, v, 0.0, 1.0)
    errs = []
    for h in (0.1, 0.05, 0.025):
        r = ch.flow(F, x, v, 0.0, 1.0, h)
        errs.append(max(np.abs(r.X - Xr).max(), np.abs(r.V - Vr).max()))
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    ok = all(3.2 <= q <= 4.8 for q in ratios)
    checks.append(_check("midpoint_order", min(ratios), "4 +- 20%", ok, ratios=ratios,
                         errors=errs))

    r1 = ch.flow(F, x, v, 0.0, 0.4, dt_sub)
    r2 = ch.flow(F, r1.X, r1.V, 0.4, 1.0, dt_sub)
    r3 = ch.flow(F, x, v, 0.0, 1.0, dt_sub)
    err = max(np.abs(r2.X - r3.X).max(), np.abs(r2.V - r3.V).max())
    checks.append(_check("group_property", err, 1e-8, err < 1e-8))

    xs = np.linspace(0.0, 2 * math.pi, 8, endpoint=False)
    vs = np.linspace(-2.0, 2.0, 9)
    xg, vg = np.meshgrid(xs, vs, indexing="ij")
    xg, vg = xg.ravel()[None], vg.ravel()[None]
    res, dets = 0.0, []
    G = ch.FunctionForce(lambda t, X: amplitude * np.sin(X), 1)
    for t, s in ((0.0, horizon), (horizon, 0.0)):
        sm = ch.straightening_map(G, xg, vg, s, t, tol=1e-12, horizon=horizon, dt_sub=dt_sub)
        res = max(res, sm.residual)
        dets += [float(sm.det.min()), float(sm.det.max())]
    ok = res < 1e-10 and min(dets) >= 0.5 and max(dets) <= 2.0
    checks.append(_check("straightening", res, 1e-10, ok, det_min=min(dets),
                         det_max=max(dets)))

    K = []
    for a in (1e-3, 1e-2, 1e-1):
        Ga = ch.FunctionForce(lambda t, X, a=a: a * np.sin(X), 1)
        sm = ch.straightening_map(Ga, xg, vg, 0.0, horizon, tol=1e-14, horizon=horizon,
                                  dt_sub=dt_sub)
        K.append(float(np.abs(sm.psi - vg).max() / a))
    spread = max(K) / min(K) - 1.0
    checks.append(_check("straightening_linear", spread, 0.2, spread < 0.2, K=K))
    return checks


def cmd_flow(args, rc: cf.RunConfig, out: Path) -> int:
    fl = rc.flow
    checks = flow_checks(fl["amplitude"], fl["horizon"], fl["dt_sub"], args.seed)
    report = {"checks": checks, "pass": all(c["pass"] for c in checks)}
    _write(out, "flow_test.json", _dump(report) + "\n")
    print(_dump(report))
    return EXIT_OK if report["pass"] else EXIT_DIVERGED


COMMANDS = {"simulate": cmd_simulate, "penrose-check": cmd_penrose,
            "avgop-bench": cmd_avgop, "flow-test": cmd_flow}


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("thickspray: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    args.threads = args.threads or 1
    args.seed = args.seed or 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = load_config(args.config)
        out = so.output_dir(args.out, rc.output_dir) or Path("out")
        with scipy.fft.set_workers(args.threads):
            return COMMANDS[args.command](args, rc, out)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"thickspray: config error: {m}", file=sys.stderr)
        return EXIT_USAGE
    except ThickSprayError as exc:
        print(f"thickspray: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
