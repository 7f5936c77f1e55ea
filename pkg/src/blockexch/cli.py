"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import time
import warnings

import numpy as np

from . import harness
from .blockdetect import detect_blocks
from .censored import Bounds, censored_fit
from .covest import BlockAssignment, estimate_block, estimate_dc, estimate_exchangeable, sandwich
from .exceptions import NumericalError, ValidationError
from .netcore import DirectedNetwork, RegressionFit, canonical_dyads, ols_fit
from .simgen import (
    SETTINGS,
    CovariateSpec,
    ErrorModelParams,
    blocks_from_sizes,
    calibrate_setting,
    equal_blocks,
    generate_network,
)
from ._rng import make_rng

SCHEMA = 1
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _encode(obj) -> str:
    if obj is None or obj is True or obj is False:
        return {None: "null", True: "true", False: "false"}[obj]
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return _json_str(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{_json_str(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _json_str(s: str) -> str:
    return json.dumps(s)


def dumps(report: dict) -> str:
    """JSON with a schema tag and every float at 17 significant digits."""
    return _encode({"schema": SCHEMA, **report}) + "\n"


def _emit(report: dict, path: str | None):
    text = dumps(report)
    if path and path != "-":
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# input
# ---------------------------------------------------------------------------


def _natural_order(labels):
    if all(re.fullmatch(r"-?\d+", s) for s in labels):
        return sorted(labels, key=int)
    return sorted(labels, key=lambda s: [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)])


def validate_input(path: str) -> DirectedNetwork:
    """Parse a ``src,dst,y,x1..xk`` CSV into a network, reporting every problem."""
    if not os.path.exists(path):
        raise ValidationError(f"{path}: file not found")
    problems = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["src", "dst", "y"]:
            raise ValidationError(f"{path}: header must start with src,dst,y")
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != width:
                problems.append(f"line {lineno}: expected {width} fields, got {len(rec)}")
                continue
            src, dst = rec[0].strip(), rec[1].strip()
            vals = []
            for name, field in zip(header[2:], rec[2:]):
                try:
                    v = float(field)
                except ValueError:
                    problems.append(f"line {lineno}: non-numeric {name} {field!r}")
                    v = None
                else:
                    if not math.isfinite(v):
                        problems.append(f"line {lineno}: non-finite {name}")
                vals.append(v)
            if src == dst:
                problems.append(f"line {lineno}: self-loop src==dst ({src})")
                continue
            rows.append((lineno, src, dst, vals))
    labels = _natural_order(sorted({r[1] for r in rows} | {r[2] for r in rows}))
    n = len(labels)
    if n < 3:
        problems.append(f"need at least 3 actors, found {n}")
        raise ValidationError(problems[0], problems)
    index = {lab: t for t, lab in enumerate(labels)}
    seen = {}
    for lineno, src, dst, _ in rows:
        key = (index[src], index[dst])
        if key in seen:
            problems.append(f"line {lineno}: duplicate dyad ({src}, {dst}), first on line {seen[key]}")
        else:
            seen[key] = lineno
    send, recv = canonical_dyads(n)
    for i, j in zip(send, recv):
        if (i, j) not in seen:
            problems.append(f"missing dyad ({labels[i]}, {labels[j]})")
    if problems:
        raise ValidationError(f"{path}: {problems[0]}" + (f" (and {len(problems) - 1} more)" if len(problems) > 1 else ""), problems)
    s = [index[r[1]] for r in rows]
    d = [index[r[2]] for r in rows]
    y = [r[3][0] for r in rows]
    cov = np.array([r[3][1:] for r in rows], dtype=float).reshape(len(rows), width - 3)
    return DirectedNetwork.from_dyads(s, d, y, cov, n=n, actor_labels=tuple(labels))


def read_blocks(path: str, net: DirectedNetwork) -> BlockAssignment:
    """Read an ``actor,block`` CSV aligned to the network's actor labels."""
    if not os.path.exists(path):
        raise ValidationError(f"{path}: file not found")
    mapping = {}
    problems = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)  # header
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                mapping[rec[0].strip()] = int(rec[1])
            except (ValueError, IndexError):
                problems.append(f"line {lineno}: bad block record {rec!r}")
    missing = [lab for lab in net.labels if lab not in mapping]
    if missing:
        problems.append(f"actors without a block: {missing}")
    if problems:
        raise ValidationError(f"{path}: {problems[0]}", problems)
    g = np.array([mapping[lab] for lab in net.labels])
    return BlockAssignment(g, int(g.max()))


def write_network_csv(path: str, net: DirectedNetwork):
    send, recv = canonical_dyads(net.n)
    labels = net.labels
    k = net.n_covariates
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "y"] + [f"x{t + 1}" for t in range(k)])
        for t in range(net.n_dyads):
            w.writerow([labels[send[t]], labels[recv[t]], format(net.y[t], ".17g")]
                       + [format(v, ".17g") for v in net.covariates[t]])


def write_blocks_csv(path: str, labels, g: BlockAssignment):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["actor", "block"])
        for lab, b in zip(labels, g.g):
            w.writerow([lab, int(b)])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _resolve_blocks(args, net, fit):
    """Block assignment from ``--blocks`` or ``--auto-blocks``; also returns detection info."""
    if args.blocks:
        return read_blocks(args.blocks, net), None
    if args.auto_blocks:
        det = detect_blocks(fit, args.auto_blocks, args.knn_frac, args.compress, seed=args.seed)
        return det.assignment, det
    return None, None


def _coef_table(beta, se, lo, hi):
    names = ["intercept"] + [f"x{t}" for t in range(1, len(beta))]
    return [
        {"name": nm, "estimate": float(b), "se": float(s), "ci_lower": float(l), "ci_upper": float(h)}
        for nm, b, s, l, h in zip(names, beta, se, lo, hi)
    ]


def cmd_fit(args) -> dict:
    net = validate_input(args.input)
    fit = ols_fit(net)
    g, det = _resolve_blocks(args, net, fit)
    est = args.estimator
    if est == "dc":
        model = estimate_dc(fit)
    elif est == "exch":
        model = estimate_exchangeable(fit)
    else:
        if g is None:
            raise ValidationError("--estimator block needs --blocks FILE or --auto-blocks B")
        model = estimate_block(fit, g)
    res = sandwich(fit, model, args.alpha)
    report = {
        "command": "fit",
        "n": net.n,
        "p": fit.p,
        "estimator": est,
        "alpha": args.alpha,
        "coefficients": _coef_table(res.beta, res.se, res.ci_lower, res.ci_upper),
        "vcov": res.cov.tolist(),
        "covariance": model.to_json(),
    }
    if g is not None:
        report["blocks"] = {lab: int(b) for lab, b in zip(net.labels, g.g)}
    if det is not None:
        report["block_detection"] = det.to_json()
    report["diagnostics"] = {
        "residual_ss": float(fit.residuals @ fit.residuals),
        "n_dyads": net.n_dyads,
    }
    return report


def _residual_fit(args):
    if args.residuals:
        # a src,dst,r file is parsed like a network with the residual as response
        net = validate_input(args.residuals)
        X = np.ones((net.n_dyads, 1))
        return net, RegressionFit(net.n, np.zeros(1), np.array(net.y), np.ones((1, 1)), X, np.array(net.y))
    net = validate_input(args.input)
    return net, ols_fit(net)


def cmd_blocks(args) -> dict:
    if not (args.input or args.residuals):
        raise ValidationError("blocks needs --input or --residuals")
    net, fit = _residual_fit(args)
    det = detect_blocks(fit, args.B, args.knn_frac, args.compress, seed=args.seed, B_max=args.b_max)
    if args.out_blocks:
        write_blocks_csv(args.out_blocks, net.labels, det.assignment)
    rep = {"command": "blocks", "n": net.n, **det.to_json()}
    rep["blocks"] = {lab: int(b) for lab, b in zip(net.labels, det.assignment.g)}
    return rep


def cmd_simulate(args) -> dict:
    if args.block_sizes:
        g = blocks_from_sizes(args.block_sizes, make_rng(args.seed, 99))
    else:
        g = equal_blocks(args.n, 2, make_rng(args.seed, 99))
    if args.covariate_scale is not None:
        params = ErrorModelParams.from_r_alpha(args.r, args.alpha1)
        spec = CovariateSpec.from_setting(args.family, args.setting, args.covariate_scale, args.ratio)
    else:
        params, spec = calibrate_setting(args.family, args.setting, args.r, args.alpha1, args.beta[1], args.nts,
                                         args.ratio)
    sim = generate_network(g, args.beta, spec, params, args.seed, censor=args.censor)
    if args.out_network:
        write_network_csv(args.out_network, sim.network)
    if args.out_blocks:
        write_blocks_csv(args.out_blocks, sim.network.labels, g)
    rep = {
        "command": "simulate",
        "n": g.n,
        "seed": args.seed,
        "error_model": params.to_json(),
        "covariate": spec.to_json(),
        **sim.truth_json(),
    }
    if sim.censored is not None:
        rep["censored_fraction"] = float(sim.censored.mean())
    return rep


def _plan(args, **over) -> harness.ExperimentPlan:
    kw = dict(
        n_values=tuple(args.n_values),
        family=args.family,
        settings=tuple(args.settings),
        n_sims=args.sims,
        n_reps=args.reps,
        alpha=args.alpha,
        seed=args.seed,
        r=args.r,
        alpha1=args.alpha1,
        nts=args.nts,
        ratio=args.ratio,
        knn_frac=args.knn_frac,
        compress=args.compress,
    )
    if getattr(args, "estimators", None):
        kw["estimators"] = tuple(args.estimators)
    kw.update(over)
    return harness.ExperimentPlan(**kw)


def _write_flat_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])


def _strip_runtime(rep):
    t = rep.pop("runtime_seconds", None)
    if t is not None:
        print(f"runtime {t:.1f}s", file=sys.stderr)
    return rep


def cmd_coverage(args) -> dict:
    rep = _strip_runtime(harness.run_coverage(_plan(args), threads=args.threads))
    if args.csv:
        rows = [(c["setting"], c["n"], c["estimator"], s, float(v))
                for c in rep["cells"] for s, v in enumerate(c["per_sim"])]
        _write_flat_csv(args.csv, rows, ["setting", "n", "estimator", "sim", "coverage"])
    return {"command": "coverage", **rep}


def cmd_theorem_gap(args) -> dict:
    rep = _strip_runtime(harness.run_theorem_check(_plan(args), threads=args.threads))
    if args.csv:
        rows = [(r["setting"], r["n"], r["gap"]["median"], r["median_abs"]) for r in rep["rows"]]
        _write_flat_csv(args.csv, rows, ["setting", "n", "median_gap", "median_abs_gap"])
    return {"command": "theorem-gap", **rep}


def cmd_block_recovery(args) -> dict:
    rep = _strip_runtime(harness.run_block_recovery(_plan(args), tuple(args.r_values), threads=args.threads))
    if args.csv:
        rows = [(r["r"], r["n"], r["misclustering"]["median"]) for r in rep["rows"]]
        _write_flat_csv(args.csv, rows, ["r", "n", "median_misclustering"])
    return {"command": "block-recovery", **rep}


def cmd_se_variance(args) -> dict:
    rep = _strip_runtime(harness.run_estimator_variance(_plan(args), threads=args.threads))
    if args.csv:
        rows = [(r["setting"], r["n"], r["estimator"], r["se_sd"]["median"]) for r in rep["rows"]]
        _write_flat_csv(args.csv, rows, ["setting", "n", "estimator", "median_se_sd"])
    return {"command": "se-variance", **rep}


def cmd_censored_fit(args) -> dict:
    net = validate_input(args.input)
    if args.blocks:
        g = read_blocks(args.blocks, net)
        det = None
    else:
        # blocks from residuals of a preliminary fit on the positive observations
        pos = net.y > 0
        fit = ols_fit(net)
        if args.auto_blocks:
            r = np.where(pos, fit.residuals, 0.0)
            pre = RegressionFit(net.n, fit.beta_hat, r, fit.xtx_inv, fit.X, fit.y)
            det = detect_blocks(pre, args.auto_blocks, args.knn_frac, args.compress, seed=args.seed)
            g = det.assignment
        else:
            g, det = BlockAssignment.single(net.n), None
    bounds = Bounds(var_min=args.var_min, corr_max=args.corr_max)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = censored_fit(net, g, max_pairs=args.max_pairs, min_pairs=args.min_pairs, bounds=bounds,
                           seed=args.seed, alpha=args.alpha, meat=args.meat)
    out = res.to_json()
    lo, hi = res.ci()
    report = {
        "command": "censored-fit",
        "n": net.n,
        "p": len(res.beta),
        "alpha": args.alpha,
        "censored_fraction": float((net.y <= 0).mean()),
        "coefficients": _coef_table(res.beta, res.se, lo, hi),
        "vcov": res.beta_cov.tolist(),
        "covariance": out["covariance"],
        "blocks": {lab: int(b) for lab, b in zip(net.labels, g.g)},
        "subproblems": out["subproblems"],
        "dropped": out["dropped"],
        "warnings": sorted({str(w.message) for w in caught}),
    }
    if det is not None:
        report["block_detection"] = det.to_json()
    return report


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _csv_list(kind):
    def parse(text):
        items = [t for t in re.split(r"[,\s]+", str(text).strip()) if t]
        return [kind(t) for t in items]

    return parse


def _add_common(p, seed_required=False):
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--output", "-o", help="JSON report path (default: stdout)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $BLOCKEXCH_THREADS or all cores)")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)


def _add_blocks_opts(p):
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--blocks", help="actor,block CSV")
    grp.add_argument("--auto-blocks", type=int, metavar="B", help="estimate B blocks from residuals")
    p.add_argument("--knn-frac", type=float, default=0.2)
    p.add_argument("--compress", type=int, default=None, help="quantiles per residual-product set")


def _add_sim_opts(p):
    p.add_argument("--family", default="abs-diff", help="binary-match | abs-diff | pairwise-normal (or x1/x2/x3)")
    p.add_argument("--r", type=float, default=0.25)
    p.add_argument("--alpha1", type=float, default=1.0)
    p.add_argument("--nts", type=float, default=0.45)
    p.add_argument("--ratio", type=float, default=2.0)


def _add_plan_opts(p, estimators=True, sims=50, reps=200, n_values="20,40,80"):
    _add_sim_opts(p)
    p.add_argument("--n-values", type=_csv_list(int), default=_csv_list(int)(n_values))
    p.add_argument("--settings", type=_csv_list(str), default=list(SETTINGS))
    if estimators:
        p.add_argument("--estimators", type=_csv_list(str), default=None,
                       help=f"subset of {','.join(harness.ESTIMATORS)}")
    p.add_argument("--sims", type=int, default=sims, help="covariate simulations")
    p.add_argument("--reps", type=int, default=reps, help="error draws per covariate simulation")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--knn-frac", type=float, default=0.2)
    p.add_argument("--compress", type=int, default=200)
    p.add_argument("--csv", help="flat CSV for plotting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockexch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="OLS with sandwich standard errors")
    _add_common(p)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--estimator", choices=("dc", "exch", "block"), default="block")
    p.add_argument("--alpha", type=float, default=0.05)
    _add_blocks_opts(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("blocks", help="estimate block memberships")
    _add_common(p)
    p.add_argument("--input", "-i")
    p.add_argument("--residuals", help="src,dst,r CSV of residuals")
    p.add_argument("-B", type=int, default=2)
    p.add_argument("--b-max", type=int, default=None)
    p.add_argument("--knn-frac", type=float, default=0.2)
    p.add_argument("--compress", type=int, default=None)
    p.add_argument("--out-blocks", help="actor,block CSV to write")
    p.set_defaults(func=cmd_blocks)

    p = sub.add_parser("simulate", help="generate a network from the latent-space error model")
    _add_common(p, seed_required=True)
    _add_sim_opts(p)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--block-sizes", type=_csv_list(int), default=None)
    p.add_argument("--setting", choices=SETTINGS, default="independent")
    p.add_argument("--beta", type=_csv_list(float), default=[1.0, 1.0])
    p.add_argument("--covariate-scale", type=float, default=None, help="skip NTS calibration")
    p.add_argument("--censor", action="store_true")
    p.add_argument("--out-network", help="network CSV to write")
    p.add_argument("--out-blocks", help="true actor,block CSV to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("coverage", help="CI coverage experiment")
    _add_common(p, seed_required=True)
    _add_plan_opts(p)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("theorem-gap", help="n (V_B - V_E) across seeds")
    _add_common(p)
    _add_plan_opts(p, estimators=False, sims=200, reps=1)
    p.set_defaults(func=cmd_theorem_gap, settings=["independent", "high-high"])

    p = sub.add_parser("block-recovery", help="misclustering of estimated blocks")
    _add_common(p)
    _add_plan_opts(p, estimators=False, sims=1, reps=100)
    p.add_argument("--r-values", type=_csv_list(float), default=[0.25, 0.5, 0.75])
    p.set_defaults(func=cmd_block_recovery)

    p = sub.add_parser("se-variance", help="variability of estimated standard errors")
    _add_common(p)
    _add_plan_opts(p, sims=10, reps=200, n_values="40")
    p.set_defaults(func=cmd_se_variance, settings=["independent"], estimators=["DC", "Exch", "Block-oracle"])

    p = sub.add_parser("censored-fit", help="pairwise pseudo-likelihood for zero-censored data")
    _add_common(p)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--max-pairs", type=int, default=2000)
    p.add_argument("--min-pairs", type=int, default=30)
    p.add_argument("--var-min", type=float, default=1e-2)
    p.add_argument("--corr-max", type=float, default=0.9)
    p.add_argument("--meat", choices=("clustered", "disjoint"), default="clustered")
    _add_blocks_opts(p)
    p.set_defaults(func=cmd_censored_fit)
    return parser


def read_config(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    if not os.path.exists(path):
        raise ValidationError(f"{path}: config file not found")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}: line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v.strip("\"'")
    return out


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _commands(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return set(action.choices)
    return set()


def _convert(act, raw, path):
    if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return raw.lower() in ("1", "true", "yes", "on")
    try:
        value = act.type(raw) if act.type else raw
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: bad value {raw!r} for {act.dest}") from None
    if act.choices is not None and value not in act.choices:
        raise ValidationError(f"{path}: {act.dest} must be one of {sorted(act.choices)}")
    return value


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values as defaults, so flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in _commands(parser)), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    conf = read_config(known.config)
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in conf.items():
        if key not in actions:
            raise ValidationError(f"{known.config}: unknown key {key!r}")
        act = actions[key]
        act.required = False
        defaults[key] = _convert(act, raw, known.config)
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.threads is None:
            args.threads = harness.default_threads()
        if not 0 < getattr(args, "alpha", 0.05) < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        t0 = time.perf_counter()
        report = args.func(args)
        _emit(report, args.output)
        print(f"done in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
        return EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for prob in exc.problems[1:]:
            print(f"  {prob}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
