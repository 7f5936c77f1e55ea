"""Monte Carlo experiments: CI coverage, the block/exchangeable gap, block
recovery and the variability of standard errors.

Every random draw comes from a substream keyed by its place in the
experiment grid, so results do not depend on the number of workers.
Per-covariate-simulation work is one task; tasks are reduced in grid order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from ._rng import make_rng
from .blockdetect import detect_blocks, misclustering
from .covest import (
    BlockAssignment,
    design_kernels,
    estimate_block,
    estimate_dc,
    estimate_exchangeable,
    sandwich,
    theorem_gap,
)
from .exceptions import NumericalError, ValidationError
from .netcore import LeastSquares
from .simgen import (
    SETTINGS,
    ErrorModelParams,
    calibrate_setting,
    equal_blocks,
    sample_covariates,
    sample_errors,
    true_covariance,
)

ESTIMATORS = ("DC", "Exch", "Block-oracle", "Block-estimated", "Oracle")
PERCENTILES = (2.5, 10, 50, 90, 97.5)


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid and replicate counts for a Monte Carlo run.

    ``alpha1`` and ``r`` fix the two-block error model; the covariate scale
    is calibrated so the average noise-to-signal ratio equals ``nts``.
    """

    n_values: tuple = (20, 40, 80)
    family: str = "abs-diff"
    settings: tuple = ("independent", "high-high", "high-low")
    estimators: tuple = ("DC", "Exch", "Block-oracle", "Block-estimated")
    n_sims: int = 50
    n_reps: int = 200
    alpha: float = 0.05
    seed: int = 0
    r: float = 0.25
    alpha1: float = 1.0
    beta: tuple = (1.0, 1.0)
    nts: float = 0.45
    ratio: float = 2.0
    knn_frac: float = 0.2
    compress: int | None = 200
    B: int = 2

    def __post_init__(self):
        if self.n_sims < 1 or self.n_reps < 1:
            raise ValidationError("replicate counts must be at least 1")
        if not self.estimators:
            raise ValidationError("estimator list is empty")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValidationError(f"unknown estimators: {bad}")
        bad = [s for s in self.settings if s not in SETTINGS]
        if bad:
            raise ValidationError(f"unknown settings: {bad}")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")

    def error_params(self) -> ErrorModelParams:
        return ErrorModelParams.from_r_alpha(self.r, self.alpha1)

    def calibrate(self, setting: str) -> tuple[ErrorModelParams, object]:
        """Error parameters and calibrated covariate spec for ``setting``."""
        return calibrate_setting(self.family, setting, self.r, self.alpha1, self.beta[1], self.nts, self.ratio)

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def summarize(values) -> dict:
    """Median plus the 2.5/10/90/97.5 percentile whiskers."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"n": 0}
    q = np.percentile(v, PERCENTILES)
    return {
        "n": int(v.size),
        "median": float(q[2]),
        "p2.5": float(q[0]),
        "p10": float(q[1]),
        "p90": float(q[3]),
        "p97.5": float(q[4]),
        "mean": float(v.mean()),
    }


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


def default_threads() -> int:
    env = os.environ.get("BLOCKEXCH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class _Design:
    """Covariates, blocks and cached factorizations for one covariate simulation."""

    def __init__(self, plan: ExperimentPlan, spec, n: int, stream: tuple):
        self.n = n
        self.g = equal_blocks(n, plan.B, make_rng(plan.seed, *stream, 0))
        x = sample_covariates(spec, self.g, make_rng(plan.seed, *stream, 1))
        self.X = np.column_stack([np.ones(x.size), x])
        self.ls = LeastSquares(self.X, n)
        self.kernels_block = design_kernels(self.X, n, self.g)
        self.kernels_exch = design_kernels(self.X, n, BlockAssignment.single(n))

    def response(self, plan, params, stream, rep):
        xi = sample_errors(params, self.g, make_rng(plan.seed, *stream, 2, rep))
        return self.X @ np.asarray(plan.beta) + xi


def _estimator_se(name, fit, d: _Design, plan, truth, rep_seed):
    if name == "DC":
        model, k = estimate_dc(fit), None
    elif name == "Exch":
        model, k = estimate_exchangeable(fit), d.kernels_exch
    elif name == "Block-oracle":
        model, k = estimate_block(fit, d.g), d.kernels_block
    elif name == "Oracle":
        model, k = truth, d.kernels_block
    else:
        det = detect_blocks(fit, plan.B, plan.knn_frac, plan.compress, seed=rep_seed)
        model, k = estimate_block(fit, det.assignment), None
    return sandwich(fit, model, plan.alpha, kernels=k).se[1]


def _coverage_task(args):
    plan, setting, n, sim = args
    params, spec = plan.calibrate(setting)
    stream = (SETTINGS.index(setting), n, sim)
    d = _Design(plan, spec, n, stream)
    truth = true_covariance(params, d.g)
    z = norm.ppf(1 - plan.alpha / 2)
    b1 = plan.beta[1]
    hits = {e: 0 for e in plan.estimators}
    used = {e: 0 for e in plan.estimators}
    width = {e: 0.0 for e in plan.estimators}
    errors = {e: 0 for e in plan.estimators}
    for rep in range(plan.n_reps):
        fit = d.ls.fit(d.response(plan, params, stream, rep))
        for e in plan.estimators:
            try:
                se = _estimator_se(e, fit, d, plan, truth, rep_seed=rep)
            except NumericalError:
                errors[e] += 1
                continue
            used[e] += 1
            hits[e] += abs(fit.beta_hat[1] - b1) <= z * se
            width[e] += 2 * z * se
    out = {}
    for e in plan.estimators:
        k = used[e]
        out[e] = {
            "coverage": hits[e] / k if k else float("nan"),
            "width": width[e] / k if k else float("nan"),
            "errors": errors[e],
        }
    return out


def run_coverage(plan: ExperimentPlan, threads: int = 1) -> dict:
    """Coverage of the ``1 - alpha`` CI for the slope, per setting, n and estimator."""
    t0 = time.perf_counter()
    tasks = [(plan, s, n, sim) for s in plan.settings for n in plan.n_values for sim in range(plan.n_sims)]
    results = _map(_coverage_task, tasks, threads)
    cells = []
    it = iter(results)
    for s in plan.settings:
        for n in plan.n_values:
            per_sim = [next(it) for _ in range(plan.n_sims)]
            for e in plan.estimators:
                cov = [r[e]["coverage"] for r in per_sim]
                cells.append({
                    "setting": s,
                    "n": n,
                    "estimator": e,
                    "coverage": summarize(cov),
                    "mean_width": float(np.nanmean([r[e]["width"] for r in per_sim])),
                    "errors": int(sum(r[e]["errors"] for r in per_sim)),
                    "per_sim": [float(c) for c in cov],
                })
    return {"experiment": "coverage", "plan": plan.to_json(), "cells": cells,
            "runtime_seconds": time.perf_counter() - t0}


def coverage_cell(report: dict, setting: str, n: int, estimator: str) -> dict:
    for c in report["cells"]:
        if c["setting"] == setting and c["n"] == n and c["estimator"] == estimator:
            return c
    raise KeyError((setting, n, estimator))


def _gap_task(args):
    plan, setting, n, sim = args
    params, spec = plan.calibrate(setting)
    stream = (SETTINGS.index(setting), n, sim)
    d = _Design(plan, spec, n, stream)
    fit = d.ls.fit(d.response(plan, params, stream, 0))
    gap = theorem_gap(fit, estimate_block(fit, d.g), estimate_exchangeable(fit))
    return float(gap[1, 1])


def run_theorem_check(plan: ExperimentPlan, threads: int = 1) -> dict:
    """Median of ``n (V_B - V_E)`` for the slope across seeds, per setting and n."""
    t0 = time.perf_counter()
    tasks = [(plan, s, n, sim) for s in plan.settings for n in plan.n_values for sim in range(plan.n_sims)]
    results = _map(_gap_task, tasks, threads)
    it = iter(results)
    rows = []
    for s in plan.settings:
        for n in plan.n_values:
            gaps = [next(it) for _ in range(plan.n_sims)]
            rows.append({"setting": s, "n": n, "gap": summarize(gaps), "median_abs": float(np.median(np.abs(gaps)))})
    return {"experiment": "theorem-gap", "plan": plan.to_json(), "rows": rows,
            "runtime_seconds": time.perf_counter() - t0}


def _recovery_task(args):
    plan, r, n, rep = args
    params, spec = calibrate_setting(plan.family, "independent", r, plan.alpha1, plan.beta[1], plan.nts, plan.ratio)
    stream = (int(round(r * 1e6)), n, rep)
    g = equal_blocks(n, plan.B, make_rng(plan.seed, *stream, 0))
    x = sample_covariates(spec, g, make_rng(plan.seed, *stream, 1))
    X = np.column_stack([np.ones(x.size), x])
    xi = sample_errors(params, g, make_rng(plan.seed, *stream, 2))
    fit = LeastSquares(X, n).fit(X @ np.asarray(plan.beta) + xi)
    det = detect_blocks(fit, plan.B, plan.knn_frac, plan.compress if n >= 80 else None, seed=rep)
    return misclustering(g, det.assignment)


def run_block_recovery(plan: ExperimentPlan, r_values=(0.25, 0.5, 0.75), threads: int = 1) -> dict:
    """Misclustering proportion of estimated blocks over a grid of ``r`` and ``n``.

    ``plan.n_reps`` replicates per cell; the covariate is the independent
    setting of ``plan.family``.
    """
    t0 = time.perf_counter()
    tasks = [(plan, r, n, rep) for r in r_values for n in plan.n_values for rep in range(plan.n_reps)]
    results = _map(_recovery_task, tasks, threads)
    it = iter(results)
    rows = []
    for r in r_values:
        for n in plan.n_values:
            vals = [next(it) for _ in range(plan.n_reps)]
            rows.append({"r": float(r), "n": n, "misclustering": summarize(vals)})
    return {"experiment": "block-recovery", "plan": plan.to_json(), "r_values": [float(r) for r in r_values],
            "rows": rows, "runtime_seconds": time.perf_counter() - t0}


def recovery_median(report: dict, r: float, n: int) -> float:
    for row in report["rows"]:
        if abs(row["r"] - r) < 1e-12 and row["n"] == n:
            return row["misclustering"]["median"]
    raise KeyError((r, n))


def _se_task(args):
    plan, setting, n, sim = args
    params, spec = plan.calibrate(setting)
    stream = (SETTINGS.index(setting), n, sim)
    d = _Design(plan, spec, n, stream)
    truth = true_covariance(params, d.g)
    ses = {e: [] for e in plan.estimators}
    for rep in range(plan.n_reps):
        fit = d.ls.fit(d.response(plan, params, stream, rep))
        for e in plan.estimators:
            try:
                ses[e].append(_estimator_se(e, fit, d, plan, truth, rep_seed=rep))
            except NumericalError:
                pass
    return {e: float(np.std(v, ddof=1)) if len(v) > 1 else float("nan") for e, v in ses.items()}


def run_estimator_variance(plan: ExperimentPlan, threads: int = 1) -> dict:
    """SD of the estimated slope SE across error draws at fixed covariates."""
    t0 = time.perf_counter()
    tasks = [(plan, s, n, sim) for s in plan.settings for n in plan.n_values for sim in range(plan.n_sims)]
    results = _map(_se_task, tasks, threads)
    it = iter(results)
    rows = []
    for s in plan.settings:
        for n in plan.n_values:
            per_sim = [next(it) for _ in range(plan.n_sims)]
            for e in plan.estimators:
                rows.append({"setting": s, "n": n, "estimator": e,
                             "se_sd": summarize([p[e] for p in per_sim])})
    return {"experiment": "se-variance", "plan": plan.to_json(), "rows": rows,
            "runtime_seconds": time.perf_counter() - t0}


def se_sd_median(report: dict, setting: str, n: int, estimator: str) -> float:
    for row in report["rows"]:
        if row["setting"] == setting and row["n"] == n and row["estimator"] == estimator:
            return row["se_sd"]["median"]
    raise KeyError((setting, n, estimator))
