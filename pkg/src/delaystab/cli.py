"""Command-line front end.

Exit codes: 0 ok, 1 bad configuration, 2 rank condition violated, 3 blow-up,
4 verification failure.  Every report goes to stdout as JSON.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .design import build_design, design_from_matrices, determinant_chain
from .errors import BlowUpError, ConfigError, RankConditionError
from .pdesim import (
    CONFIG_KEYS,
    SimConfig,
    estimate_decay_rate,
    run_closed_loop,
    write_profile_csv,
    write_trajectory_csv,
)
from .spectral import build_basis

EXIT_OK, EXIT_CONFIG, EXIT_RANK, EXIT_BLOWUP, EXIT_VERIFY = 0, 1, 2, 3, 4
FIXTURES = ("kalman-fail",)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, default=_jsonable, allow_nan=False)
    sys.stdout.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _fail(code, message):
    print(message, file=sys.stderr)
    _emit({"error": message, "exit_code": code})
    return code


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides=()):
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        k, v = parse_override(item)
        data[k] = v
    return SimConfig.from_dict(data)


# ------------------------------------------------------------------ commands

def cmd_design(args):
    cfg = load_config(args.config, args.set)
    if args.fixture == "kalman-fail":
        Lam = np.diag([-2.0 + cfg.c, -5.0 + cfg.c])
        L = np.array([1.0, 0.0])
        gammas = cfg.gammas or [cfg.rho + 1.0, cfg.rho + 2.0]
        det_ok, kal_ok, agree = determinant_chain(Lam, L, gammas)
        try:
            design = design_from_matrices(Lam, L, gammas)
        except RankConditionError as exc:
            print(str(exc), file=sys.stderr)
            _emit({"fixture": args.fixture, "error": str(exc), "sumB_condition": exc.cond if exc.cond is not None and np.isfinite(exc.cond) else None,
                   "kalman": kal_ok, "determinant_nonzero": det_ok, "chain_agrees": agree,
                   "exit_code": EXIT_RANK})
            return EXIT_RANK
    else:
        basis = build_basis(cfg.d, cfg.c, cfg.alpha)
        try:
            design = build_design(basis, cfg.rho, gammas=cfg.gammas, d=cfg.d)
        except RankConditionError as exc:
            return _fail(EXIT_RANK, str(exc))
        det_ok, kal_ok, agree = determinant_chain(design.Lambda, design.L, design.gammas)
    report = design.to_dict()
    report.update({"determinant_nonzero": det_ok, "chain_agrees": agree, "sumB_condition": design.sumB_cond})
    _emit(report)
    return EXIT_OK if report["kalman"] else EXIT_RANK


def simulate(cfg: SimConfig, out=None, profile_out=None, profile_every=None, control=True, predictor=True,
             rate_start=1.0):
    traj = run_closed_loop(cfg, control=control, predictor=predictor,
                           profile_every=profile_every if profile_out else None)
    if out:
        write_trajectory_csv(traj, out)
    if profile_out:
        write_profile_csv(traj, profile_out)
    start = min(rate_start, 0.5 * cfg.t_final)
    return {
        "decay_rate": estimate_decay_rate(traj, start),
        "rate_window": [start, cfg.t_final],
        "norm_ratio": float(traj.norm_y[-1] / traj.norm_y[0]),
        "norm_initial": float(traj.norm_y[0]),
        "norm_final": float(traj.norm_y[-1]),
        "d": traj.d,
        "max_neumann_tail": float(traj.tail.max()),
        "csv": str(out) if out else None,
    }


def cmd_simulate(args):
    cfg = load_config(args.config, args.set)
    try:
        report = simulate(cfg, args.out, args.profile_out, args.profile_every,
                          control=not args.open_loop, predictor=not args.no_predictor)
    except BlowUpError as exc:
        return _fail(EXIT_BLOWUP, str(exc))
    except RankConditionError as exc:
        return _fail(EXIT_RANK, str(exc))
    _emit(report)
    return EXIT_OK


def cmd_verify(args):
    from .verify import SUITES, run_suites

    if args.selector not in SUITES + ("all",):
        return _fail(EXIT_CONFIG, f"unknown suite {args.selector!r}; choose from {SUITES + ('all',)}")
    report = run_suites(args.selector)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def parse_vary(items):
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--vary {item!r} is not of the form key=v1,v2,...")
        key, raw = item.split("=", 1)
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values = json.loads(f"[{raw}]")
        except json.JSONDecodeError:
            values = raw.split(",")
        axes.append([(key, v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_one(payload):
    base, changes, out = payload
    try:
        cfg = SimConfig.from_dict({**base, **changes})
        report = simulate(cfg, out)
        status = "ok"
    except BlowUpError as exc:
        report, status = {"error": str(exc)}, "blow-up"
    except (ConfigError, RankConditionError) as exc:
        report, status = {"error": str(exc)}, "config" if isinstance(exc, ConfigError) else "rank"
    return {"params": changes, "status": status, **report}


def cmd_sweep(args):
    cfg = load_config(args.config, args.set)
    combos = parse_vary(args.vary) if args.vary else [{}]
    for combo in combos:
        SimConfig.from_dict({**cfg.to_dict(), **combo})  # fail early on bad values
    outdir = Path(args.out or "sweep")
    outdir.mkdir(parents=True, exist_ok=True)
    base = cfg.to_dict()
    jobs = [(base, combo, str(outdir / f"run_{i:03d}.csv")) for i, combo in enumerate(combos)]
    workers = args.jobs or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    _emit({"runs": results, "out": str(outdir)})
    codes = {"ok": EXIT_OK, "config": EXIT_CONFIG, "rank": EXIT_RANK, "blow-up": EXIT_BLOWUP}
    return max(codes[r["status"]] for r in results)


def cmd_dump_spectrum(args):
    cfg = load_config(args.config, args.set)
    basis = build_basis(2 * args.pairs, cfg.c, cfg.alpha)
    cols = ("k", "beta", "lambda_even", "lambda_odd", "C_k2", "l_even", "l_odd")
    rows = [dict(zip(cols, r)) for r in basis.table()]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for r in basis.table():
                fh.write(",".join(f"{v:.17g}" for v in r) + "\n")
    _emit({"c": cfg.c, "alpha": cfg.alpha, "rows": rows})
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable; JSON values accepted)")

    p = argparse.ArgumentParser(prog="delaystab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", parents=[common], help="build and report the feedback design")
    d.add_argument("--fixture", choices=FIXTURES, help="use a built-in matrix fixture instead of the PDE")
    d.set_defaults(func=cmd_design)

    s = sub.add_parser("simulate", parents=[common], help="run the closed-loop PDE simulation")
    s.add_argument("--out", help="trajectory CSV path")
    s.add_argument("--profile-out", help="optional t,x,y profile CSV")
    s.add_argument("--profile-every", type=int, default=100, help="steps between dumped profiles")
    s.add_argument("--open-loop", action="store_true", help="force u = 0")
    s.add_argument("--no-predictor", action="store_true", help="feed U = Y instead of the delay predictor")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", parents=[common], help="run invariant suites")
    v.add_argument("selector", nargs="?", default="all")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", parents=[common], help="run independent simulations concurrently")
    w.add_argument("--vary", action="append", default=[], metavar="KEY=V1,V2,...")
    w.add_argument("--out", help="output directory")
    w.add_argument("--jobs", type=int, help="worker processes")
    w.set_defaults(func=cmd_sweep)

    t = sub.add_parser("dump-spectrum", parents=[common], help="tabulate roots, eigenvalues and traces")
    t.add_argument("--pairs", type=int, default=6)
    t.add_argument("--out", help="CSV path")
    t.set_defaults(func=cmd_dump_spectrum)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
