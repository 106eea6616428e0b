"""Command-line experiment driver.

Usage::

    rbsample <command> --config <path> [--out <dir>] [--validate] [--seed <u64>]
    rbsample report [<run_dir>] [--out <dir>]

Commands: ``build-truth``, ``sga``, ``sga-dou``, ``wgreedy``, ``goal``,
``report``.  Configuration files hold one ``key = value`` pair per line;
``#`` starts a comment.  Exit status is 0 on success, 1 on an operational
error and 2 when a theoretical inequality checked by the run is violated.
"""

from __future__ import annotations

import argparse
import math
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .trace import GreedyTrace, format_value, read_csv

__all__ = ["main", "ConfigError", "parse_config", "SCHEMA", "run", "report"]

EXIT_OK, EXIT_ERROR, EXIT_THEORY = 0, 1, 2
COMMANDS = ("build-truth", "sga", "sga-dou", "wgreedy", "goal", "report")


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


class TheoryViolation(RuntimeError):
    """A checked inequality failed."""


def _number(text):
    """Float from ``1e-3``, ``1/32`` or ``2^-5``."""
    t = text.strip()
    try:
        return float(t)
    except ValueError:
        pass
    if "/" in t:
        a, b = t.split("/", 1)
        return _number(a) / _number(b)
    if "^" in t:
        a, b = t.split("^", 1)
        return _number(a) ** _number(b)
    raise ValueError(f"not a number: {text!r}")


def _int(text):
    v = _number(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _check_h(v):
    n = round(1.0 / v) if v > 0 else 0
    return v > 0 and n >= 4 and abs(n * v - 1.0) <= 1e-9


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


# key -> (parser, default or REQUIRED, validator, description)
REQUIRED = object()
_H = (_number, REQUIRED, _check_h, "trial mesh size, 1/h integer >= 4")
_EPS = (_number, REQUIRED, lambda v: 0 < v <= 1, "diffusion in (0, 1]")
_REFINE = (_int, 0, lambda v: 0 <= v <= 3, "test-mesh refinements in [0, 3]")
_GRID = (_int, 128, lambda v: v >= 1, "training angles >= 1")
_NMAX = (_int, 20, lambda v: v >= 1, "largest reduced dimension >= 1")
_DELTA = (_number, 0.1, lambda v: 0 < v < 1, "proximality target in (0, 1)")

SCHEMA = {
    "build-truth": {
        "h": _H, "epsilon": _EPS, "test_refine": _REFINE,
        "export": (_bool, True, None, "write matrix files"),
    },
    "sga": {
        "h": _H, "epsilon": _EPS, "test_refine": _REFINE, "grid": _GRID,
        "tol": (_number, 1e-6, lambda v: v >= 0, "surrogate tolerance >= 0"),
        "n_max": _NMAX,
    },
    "sga-dou": {
        "h": _H, "epsilon": _EPS, "test_refine": _REFINE, "grid": _GRID,
        "delta": _DELTA,
        "tol": (_number, 1e-4, lambda v: v >= 0, "surrogate tolerance >= 0"),
        "n_max": _NMAX,
        "mode": (_choice("greedy", "full"), "greedy", None, "stabilization mode"),
    },
    "wgreedy": {
        "decay": (_choice("poly", "exp", "subexp"), "poly", None,
                  "semiaxes j^-rate, 2^-(rate j) or exp(-j^rate)"),
        "rate": (_number, 1.0, lambda v: v > 0, "decay parameter > 0"),
        "dim": (_int, 32, lambda v: 2 <= v <= 4096, "ambient dimension in [2, 4096]"),
        "gamma": (_number, 1.0, lambda v: 0 < v <= 1, "weakness parameter in (0, 1]"),
        "mode": (_choice("exact", "adversarial"), "exact", None, "selection rule"),
        "n_max": (_int, -1, lambda v: v >= -1, "largest dimension (-1: dim - 1)"),
        "alpha": (_number, -1.0, lambda v: v == -1.0 or v > 0,
                  "algebraic rate for the polynomial theorem (-1: automatic)"),
        "theta": (_number, 0.9, lambda v: 0 < v < 1, "delayed-comparison threshold"),
        "sample": (_int, 100_000, lambda v: v >= 0, "boundary sample size"),
        "trace_file": (str, "", None, "verify this trace CSV instead of running"),
    },
    "goal": {
        "h": _H, "epsilon": _EPS, "test_refine": _REFINE,
        "grid": (_int, 64, lambda v: v >= 1, "training angles >= 1"),
        "delta": _DELTA,
        "n_total": (_int, 12, lambda v: v >= 2, "combined budget >= 2"),
        "m": (_int, 0, lambda v: v >= 0, "primal budget (0: from rates)"),
        "alpha": (_number, 0.0, lambda v: v >= 0, "primal rate (0: estimate)"),
        "beta": (_number, 0.0, lambda v: v >= 0, "dual rate (0: estimate)"),
    },
}
COMMON = {"seed": (_int, 0, lambda v: 0 <= v < 2 ** 64, "random seed, u64")}


def parse_config(path, command):
    """Parse and validate a ``key = value`` file against the command schema."""
    schema = dict(COMMON)
    schema.update(SCHEMA[command])
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for command {command}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)
    cfg = {}
    for key, (parser, default, valid, desc) in schema.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(f"{path}: missing required key {key!r} ({desc})")
            cfg[key] = default
            continue
        lineno, value = raw[key]
        try:
            v = parser(value)
        except (ValueError, ZeroDivisionError, OverflowError) as exc:
            raise ConfigError(f"{path}:{lineno}: key {key!r}: {exc}") from None
        if valid is not None and not valid(v):
            raise ConfigError(f"{path}:{lineno}: key {key!r} = {value!r} out of range ({desc})")
        cfg[key] = v
    return cfg


def _write_manifest(out, command, cfg, extra, timings):
    lines = [f"command = {command}", f"version = {__version__}",
             f"python = {platform.python_version()}", f"numpy = {np.__version__}",
             f"scipy = {scipy.__version__}"]
    lines += [f"config.{k} = {format_value(v)}" for k, v in sorted(cfg.items())]
    lines += [f"result.{k} = {format_value(v)}" for k, v in extra.items()]
    lines += [f"time.{k} = {v:.3f}" for k, v in timings.items()]
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _build(cfg):
    from .truth import assemble_truth

    return assemble_truth(cfg["h"], cfg["epsilon"], test_refine=cfg.get("test_refine", 0))


def _cmd_build_truth(cfg, out, validate):
    from .truth import export_matrices

    model = _build(cfg)
    if cfg["export"]:
        export_matrices(model, os.path.join(out, "matrices"))
    return {"n_trial": model.n_trial, "n_test": model.n_test,
            "truth_infsup": model.truth_infsup}, []


def _cmd_sga(cfg, out, validate):
    from .rbgreedy import sga_run
    from .truth import angle_grid

    model = _build(cfg)
    grid = angle_grid(cfg["grid"], cfg["epsilon"])
    space, trace = sga_run(model, grid, cfg["tol"], cfg["n_max"], validate=validate)
    trace.to_csv(os.path.join(out, "trace.csv"))
    problems = []
    if validate:
        for row in trace.rows:
            if row["true_error_max"] > row["surrogate_max"] + 1e-8:
                problems.append(f"n={row['n']}: true error exceeds surrogate")
            if row["width_lower"] > row["sigma"]:
                problems.append(f"n={row['n']}: width lower bound exceeds greedy error")
    return {"n": space.n, "stop": trace.metadata["stop"]}, problems


def _cmd_sga_dou(cfg, out, validate):
    from .stab import sga_dou_run
    from .truth import angle_grid

    model = _build(cfg)
    grid = angle_grid(cfg["grid"], cfg["epsilon"])
    srm, trace = sga_dou_run(model, grid, cfg["delta"], cfg["tol"], cfg["n_max"],
                             validate=validate, mode=cfg["mode"])
    trace.to_csv(os.path.join(out, "trace.csv"))
    problems = []
    target = math.sqrt(1.0 - cfg["delta"] ** 2)
    for row in trace.rows:
        if row["beta"] < target:
            problems.append(f"n={row['n']}: pair not certified")
        if validate:
            lo, hi = row["ratio_min"], row["ratio_max"]
            if not (math.isnan(lo) or (1 - 1e-6 <= lo and hi <= 1 + 1e-6)):
                problems.append(f"n={row['n']}: surrogate/error ratio in [{lo}, {hi}]")
            g = row.get("gamma_hat")
            if g is not None and g < 1 - cfg["delta"] - 1e-3:
                problems.append(f"n={row['n']}: weak-greedy ratio {g} below 1 - delta")
    return {"n": srm.n, "n_V": srm.n_V, "stop": trace.metadata["stop"]}, problems


def _ellipsoid_from(cfg):
    from .wgreedy import CompactSet

    j = np.arange(1, cfg["dim"] + 1, dtype=float)
    r = cfg["rate"]
    if cfg["decay"] == "poly":
        c, label = j ** (-r), f"c_j = j^-{r:g}"
    elif cfg["decay"] == "exp":
        c, label = 2.0 ** (-r * j), f"c_j = 2^-({r:g} j)"
    else:
        c, label = np.exp(-(j ** r)), f"c_j = exp(-j^{r:g})"
    return CompactSet.ellipsoid(c, description=f"ellipsoid D={cfg['dim']} {label}")


def _trace_from_csv(path, gamma):
    from .wgreedy import WGREEDY_COLUMNS

    columns, rows = read_csv(path)
    missing = [c for c in ("n", "sigma") if c not in columns]
    if missing:
        raise ConfigError(f"{path}: trace lacks column(s) {', '.join(missing)}")
    trace = GreedyTrace(columns=list(WGREEDY_COLUMNS), metadata={"gamma": gamma})
    for row in rows:
        row = dict(row)
        row["n"] = int(row["n"])
        for key in ("width_lower", "width_upper", "width_exact"):
            row.setdefault(key, None)
        trace.rows.append(row)
    return trace


def _cmd_wgreedy(cfg, out, validate):
    from .wgreedy import verify_delayed_comparison, verify_rate_theorems, weak_greedy_run

    cset = _ellipsoid_from(cfg)
    n_max = cfg["dim"] - 1 if cfg["n_max"] == -1 else cfg["n_max"]
    if n_max > cfg["dim"]:
        raise ConfigError(f"n_max = {n_max} exceeds dim = {cfg['dim']}")
    if cfg["trace_file"]:
        trace = _trace_from_csv(cfg["trace_file"], cfg["gamma"])
    else:
        trace = weak_greedy_run(cset, cfg["gamma"], n_max, mode=cfg["mode"],
                                sample=cfg["sample"], seed=cfg["seed"])
    trace.to_csv(os.path.join(out, "trace.csv"))
    if cfg["alpha"] > 0:
        alpha = cfg["alpha"]
    else:
        alpha = cfg["rate"] if cfg["decay"] == "poly" else 1.0
    d = cset.semiaxes
    ns = np.arange(1, d.size)
    M = float(max(d[0], np.max(d[1:] * ns ** alpha))) if d.size > 1 else float(d[0])
    rep = verify_rate_theorems(trace, cset, alpha, M, gamma=cfg["gamma"])
    rep_d = verify_delayed_comparison(trace, cset, cfg["theta"], gamma=cfg["gamma"])
    checks = rep.checks + rep_d.checks
    with open(os.path.join(out, "checks.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("check,n,lhs,rhs,passed,exact\n")
        for c in checks:
            fh.write(",".join(format_value(v) for v in
                              (c.name, c.n, c.lhs, c.rhs, c.passed, c.exact)) + "\n")
    with open(os.path.join(out, "checks.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rep.summary() + "\n" + rep_d.summary() + "\n")
    problems = [f"{c.name} n={c.n}: {c.lhs!r} > {c.rhs!r}" for c in checks if c.hard_failure]
    extra = {"alpha": alpha, "M": M, "checks": len(checks),
             "inconclusive": sum(c.inconclusive for c in checks)}
    return extra, problems


def _cmd_goal(cfg, out, validate):
    from .goal import primal_dual_pipeline
    from .truth import angle_grid

    model = _build(cfg)
    grid = angle_grid(cfg["grid"], cfg["epsilon"])
    rep = primal_dual_pipeline(
        model, grid, cfg["delta"], cfg["n_total"],
        alpha_est=cfg["alpha"] or None, beta_est=cfg["beta"] or None,
        m=cfg["m"] or None,
    )
    rep.trace.to_csv(os.path.join(out, "trace.csv"))
    rep.primal_trace.to_csv(os.path.join(out, "primal_trace.csv"))
    rep.dual_trace.to_csv(os.path.join(out, "dual_trace.csv"))
    problems = []
    for row in rep.trace.rows:
        if row["err_corrected"] > (1 + 1e-6) * row["bound_product"] + 1e-12:
            problems.append(f"y={row['y']}: corrected error exceeds error product")
    extra = {"m": rep.m, "alpha": rep.trace.metadata["alpha"],
             "beta": rep.trace.metadata["beta"], "sigma_primal": rep.sigma_primal,
             "sigma_dual": rep.sigma_dual, "max_err_corrected": rep.max_err_corrected,
             "max_err_uncorrected": rep.max_err_uncorrected,
             "fraction_improved": rep.fraction_improved}
    return extra, problems


_RUNNERS = {
    "build-truth": _cmd_build_truth,
    "sga": _cmd_sga,
    "sga-dou": _cmd_sga_dou,
    "wgreedy": _cmd_wgreedy,
    "goal": _cmd_goal,
}


def run(config_path, command, out=None, validate=False, seed=None):
    """Execute ``command``; returns the exit status."""
    if command not in _RUNNERS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = parse_config(config_path, command)
    if seed is not None:
        cfg["seed"] = seed
    out = out or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    extra, problems = _RUNNERS[command](cfg, out, validate)
    timings = {"total": time.perf_counter() - t0}
    cfg["validate"] = bool(validate)
    extra["theory_violations"] = len(problems)
    _write_manifest(out, command, cfg, extra, timings)
    if problems:
        raise TheoryViolation("; ".join(problems[:5]) + (" ..." if len(problems) > 5 else ""))
    return EXIT_OK


def _read_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{run_dir}: missing manifest.txt")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if v == int(v) and abs(v) < 1e9:
            return str(int(v))
        return f"{v:.4e}"
    return str(v)


def report(run_dir):
    """Write ``table.txt`` and ``convergence.dat`` for a finished run."""
    manifest = _read_manifest(run_dir)
    command = manifest.get("command", "")
    trace_path = os.path.join(run_dir, "trace.csv")
    if not os.path.isfile(trace_path):
        raise FileNotFoundError(f"{run_dir}: missing trace.csv")
    columns, rows = read_csv(trace_path)
    headers = list(columns)
    if command == "wgreedy":
        flags = {}
        checks_path = os.path.join(run_dir, "checks.csv")
        if os.path.isfile(checks_path):
            _, checks = read_csv(checks_path)
            for c in checks:
                n = int(c["n"])
                flags.setdefault(n, [])
                if not c["passed"]:
                    flags[n].append(f"{c['check']}:{'FAIL' if c['exact'] else '?'}")
        headers = headers + ["checks"]
        for row in rows:
            f = flags.get(int(row["n"]))
            row["checks"] = "-" if f is None else (" ".join(f) if f else "pass")
    cells = [[_fmt(r.get(h)) for h in headers] for r in rows]
    widths = [max([len(h)] + [len(c[i]) for c in cells]) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(cell, widths)) for cell in cells]
    with open(os.path.join(run_dir, "table.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

    if command == "wgreedy":
        curve = [(r["n"], r["sigma"]) for r in rows]
    elif command in ("sga", "sga-dou"):
        curve = [(r["n"], r["surrogate_max"]) for r in rows]
    elif command == "goal":
        prim = os.path.join(run_dir, "primal_trace.csv")
        if not os.path.isfile(prim):
            raise FileNotFoundError(f"{run_dir}: missing primal_trace.csv")
        curve = [(r["n"], r["surrogate_max"]) for r in read_csv(prim)[1]]
    else:
        curve = []
    with open(os.path.join(run_dir, "convergence.dat"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("dim,surrogate\n")
        for n, s in curve:
            fh.write(f"{format_value(int(n))},{format_value(float(s))}\n")
    return "\n".join(lines)


def _parser():
    ap = argparse.ArgumentParser(prog="rbsample", description="Reduced-basis greedy experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("run_dir", nargs="?", help="run directory (report only)")
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--validate", action="store_true", help="truth-sweep validation mode")
    ap.add_argument("--seed", type=int, default=None, help="random seed (u64)")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            run_dir = args.run_dir or args.out
            if not run_dir:
                raise ConfigError("report needs a run directory")
            print(report(run_dir))
            return EXIT_OK
        if args.run_dir:
            raise ConfigError(f"unexpected argument {args.run_dir!r}")
        if not args.config:
            raise ConfigError("--config is required")
        if args.seed is not None and not (0 <= args.seed < 2 ** 64):
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        run(args.config, args.command, out=args.out, validate=args.validate, seed=args.seed)
        return EXIT_OK
    except TheoryViolation as exc:
        print(f"rbsample: theory check failed: {exc}", file=sys.stderr)
        return EXIT_THEORY
    except (ConfigError, FileNotFoundError, OSError, ValueError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"rbsample: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
