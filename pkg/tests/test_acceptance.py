"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE k: PASS|FAIL`` line (also repeated in
the pytest terminal summary). All Monte Carlo runs use master seed 0.
"""

from __future__ import annotations

import io
import itertools
import warnings
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import pytest
from scipy import integrate, stats

from blockexch import cli, harness
from blockexch._rng import make_rng
from blockexch.censored import bvn_cdf, censored_fit, positive_ols
from blockexch.covest import (
    BlockAssignment,
    classify_pair,
    dense_sandwich_cov,
    estimate_block,
    estimate_dc,
    estimate_exchangeable,
    sandwich_cov,
    theorem_gap,
)
from blockexch.netcore import LeastSquares, build_design_matrix, canonical_dyads, ols_fit
from blockexch.simgen import (
    CovariateSpec,
    ErrorModelParams,
    calibrate_nts,
    equal_blocks,
    generate_network,
    true_covariance,
)

THREADS = harness.default_threads()


def _random_fit(n, rng, p=2):
    m = n * (n - 1)
    X = np.column_stack([np.ones(m), rng.normal(size=(m, p - 1))])
    return LeastSquares(X, n).fit(rng.standard_t(5, size=m))


def _brute_counts(n, g):
    s, r = canonical_dyads(n)
    counts = {}
    for a, b in itertools.product(range(s.size), repeat=2):
        key = classify_pair((s[a], r[a]), (s[b], r[b]), g)
        if key is None:
            continue
        # phiD sets hold the [(i,j),(k,i)] orientation only
        if key.config == "phiD" and s[a] != r[b]:
            continue
        counts[key] = counts.get(key, 0) + 1
    return counts


# 1 -------------------------------------------------------------------------


def test_collapse_identity(acceptance):
    rng = make_rng(0, 101)
    worst = 0.0
    for n in (6, 10, 20):
        g = equal_blocks(n, 2, rng)
        fit = _random_fit(n, rng)
        mb = estimate_block(fit, g)
        me = estimate_exchangeable(fit)
        counts = _brute_counts(n, g)
        for m in ("sigma2", "phiA", "phiB", "phiC", "phiD"):
            keys = [k for k in counts if k.config == m]
            num = sum(counts[k] * mb.params[k] for k in keys)
            den = sum(counts[k] for k in keys)
            (ek,) = [k for k in me.params if k.config == m]
            worst = max(worst, abs(num / den - me.params[ek]))
    ok = worst < 1e-10
    acceptance(1, ok, f"collapse identity max |diff| = {worst:.2e} (tol 1e-10)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_degeneracy_single_block(acceptance):
    rng = make_rng(0, 102)
    ok = True
    for n in (5, 12, 30):
        fit = _random_fit(n, rng, p=3)
        g1 = BlockAssignment.single(n)
        mb, me = estimate_block(fit, g1), estimate_exchangeable(fit)
        ok &= mb.params == me.params and mb.counts == me.counts
        gap = theorem_gap(fit, mb, me)
        ok &= bool(np.array_equal(gap, np.zeros_like(gap)))
    acceptance(2, ok, "B=1 block estimate equals exchangeable exactly; theorem_gap is the zero matrix")
    assert ok


# 3 -------------------------------------------------------------------------


def test_dense_oracle_equivalence(acceptance):
    rng = make_rng(0, 103)
    worst = 0.0
    for n in (4, 7, 12):
        g = equal_blocks(n, 2, rng)
        fit = _random_fit(n, rng, p=3)
        for model in (estimate_dc(fit), estimate_exchangeable(fit), estimate_block(fit, g)):
            diff = np.abs(sandwich_cov(fit, model) - dense_sandwich_cov(fit, model)).max()
            worst = max(worst, diff)
    ok = worst < 1e-8
    acceptance(3, ok, f"structured vs dense sandwich max |diff| = {worst:.2e} (tol 1e-8)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_truth_recovery(acceptance):
    r = 0.25
    params, spec = calibrate_nts("pairwise-normal", "independent", ErrorModelParams.from_r_alpha(r, 1.0),
                                 beta1=1.0, target=0.45, r=r, solve_for="alpha")
    n, reps = 160, 200
    g = equal_blocks(n, 2, make_rng(0, 104))
    truth = true_covariance(params, g).params
    draws = {k: [] for k in truth}
    for rep in range(reps):
        sim = generate_network(g, (1.0, 1.0), spec, params, seed=int(make_rng(0, 104, rep).integers(2**31)))
        est = estimate_block(ols_fit(sim.network), g).params
        for k in truth:
            draws[k].append(est[k])
    zs = {}
    for k, v in truth.items():
        a = np.asarray(draws[k])
        zs[k] = (a.mean() - v) / (a.std(ddof=1) / np.sqrt(reps))
    bad = {str(k): round(float(z), 1) for k, z in zs.items() if abs(z) > 3}
    ok = not bad
    worst = max(zs, key=lambda k: abs(zs[k]))
    acceptance(4, ok, f"alpha1={params.sigma_eps:.4f}; {len(truth) - len(bad)}/{len(truth)} keys within "
                      f"3 MC SEs; worst {worst} z={zs[worst]:.1f}")
    assert ok, f"keys outside 3 MC SEs: {bad}"


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_coverage_reproduction(acceptance):
    base = dict(family="abs-diff", n_sims=50, n_reps=200, seed=0)
    main = harness.run_coverage(
        harness.ExperimentPlan(n_values=(40, 80), estimators=("DC", "Exch", "Block-oracle"), **base),
        threads=THREADS)
    est = harness.run_coverage(
        harness.ExperimentPlan(n_values=(80,), settings=("independent",), estimators=("Block-estimated",), **base),
        threads=THREADS)

    def med(rep, s, n, e):
        return harness.coverage_cell(rep, s, n, e)["coverage"]["median"]

    def inside(v):
        return 0.92 <= v <= 0.97

    cells = {
        "indep/80/Block-oracle": med(main, "independent", 80, "Block-oracle"),
        "indep/80/Block-estimated": med(est, "independent", 80, "Block-estimated"),
        "indep/80/Exch": med(main, "independent", 80, "Exch"),
        "hl/80/Exch": med(main, "high-low", 80, "Exch"),
        "hl/80/Block-oracle": med(main, "high-low", 80, "Block-oracle"),
        "hh/80/Exch": med(main, "high-high", 80, "Exch"),
        "hh/80/Block-oracle": med(main, "high-high", 80, "Block-oracle"),
        "hh/40/DC": med(main, "high-high", 40, "DC"),
        "hh/40/Block-oracle": med(main, "high-high", 40, "Block-oracle"),
        "hh/80/DC": med(main, "high-high", 80, "DC"),
    }
    checks = {
        "independent in [0.92,0.97]": all(inside(cells[k]) for k in
                                          ("indep/80/Block-oracle", "indep/80/Block-estimated", "indep/80/Exch")),
        "high-low exch >= 0.965": cells["hl/80/Exch"] >= 0.965,
        "high-low block in band": inside(cells["hl/80/Block-oracle"]),
        "high-high exch <= 0.935": cells["hh/80/Exch"] <= 0.935,
        "high-high block in band": inside(cells["hh/80/Block-oracle"]),
        "DC < block at n=40": cells["hh/40/DC"] < cells["hh/40/Block-oracle"],
        "DC > exch at n=80": cells["hh/80/DC"] > cells["hh/80/Exch"],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    summary = ", ".join(f"{k}={v:.3f}" for k, v in cells.items())
    acceptance(5, ok, summary + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_theorem_gap_numerics(acceptance):
    rep = harness.run_theorem_check(
        harness.ExperimentPlan(n_values=(20, 40, 80), settings=("independent", "high-high"), n_sims=200, n_reps=1,
                               seed=0), threads=THREADS)
    med = {(row["setting"], row["n"]): row["gap"]["median"] for row in rep["rows"]}
    ind = [abs(med[("independent", n)]) for n in (20, 40, 80)]
    dep40, dep80 = med[("high-high", 40)], med[("high-high", 80)]
    ok_ind = ind[0] > ind[1] > ind[2]
    ok_dep = np.sign(dep40) == np.sign(dep80) != 0 and abs(dep80 - dep40) <= 0.5 * abs(dep40)
    ok = bool(ok_ind and ok_dep)
    spread = [row["median_abs"] for row in rep["rows"] if row["setting"] == "independent"]
    acceptance(6, ok, f"independent |median| over n=20,40,80: {ind[0]:.4f}, {ind[1]:.4f}, {ind[2]:.4f} "
                      f"(median |gap|: {spread[0]:.4f}, {spread[1]:.4f}, {spread[2]:.4f}); "
                      f"high-high median n=40 {dep40:.4f}, n=80 {dep80:.4f}")
    assert ok


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_block_recovery_trend(acceptance):
    rs, ns = (0.25, 0.5, 0.75), (20, 40, 80)
    rep = harness.run_block_recovery(harness.ExperimentPlan(n_values=ns, n_reps=100, seed=0), rs, threads=THREADS)
    med = {(r, n): harness.recovery_median(rep, r, n) for r in rs for n in ns}
    viol = []
    for r in rs:
        for a, b in zip(ns, ns[1:]):
            if med[(r, b)] > med[(r, a)]:
                viol.append(f"r={r}: n={a}->{b} {med[(r, a)]:.4f}->{med[(r, b)]:.4f}")
    for n in ns:
        for a, b in zip(rs, rs[1:]):
            if med[(b, n)] < med[(a, n)]:
                viol.append(f"n={n}: r={a}->{b} {med[(a, n)]:.4f}->{med[(b, n)]:.4f}")
    drop = med[(0.25, 20)] - med[(0.25, 80)]
    if drop < 0.05:
        viol.append(f"r=1/4 drop n=20->80 only {drop:.4f}")
    ok = not viol
    table = "; ".join(f"r={r}: " + ", ".join(f"{med[(r, n)]:.4f}" for n in ns) for r in rs)
    acceptance(7, ok, table + (f"; violations: {viol}" if viol else ""))
    assert ok, viol


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_estimator_variance_ordering(acceptance):
    rep = harness.run_estimator_variance(
        harness.ExperimentPlan(n_values=(40,), settings=("independent",), estimators=("DC", "Exch", "Block-oracle"),
                               n_sims=50, n_reps=200, seed=0), threads=THREADS)
    sd = {e: harness.se_sd_median(rep, "independent", 40, e) for e in ("DC", "Block-oracle", "Exch")}
    ok = sd["DC"] > sd["Block-oracle"] > sd["Exch"]
    acceptance(8, ok, "median SD of SE(beta1) at n=40: " + ", ".join(f"{k}={v:.5f}" for k, v in sd.items()))
    assert ok


# 9 -------------------------------------------------------------------------


def _bvn_quad(h, k, rho):
    # P(Z1 <= h, Z2 <= k) = int_{-inf}^{h} phi(x) Phi((k - rho x) / sqrt(1 - rho^2)) dx
    s = np.sqrt(1 - rho * rho)
    val, _ = integrate.quad(lambda x: stats.norm.pdf(x) * stats.norm.cdf((k - rho * x) / s), -np.inf, h,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


_CENS_PARAMS = ErrorModelParams.from_r_alpha(0.5, 0.7)
_CENS_SPEC = CovariateSpec.from_setting("pairwise-normal", "independent", 1.0)


def _cens_blocks(n=60):
    return equal_blocks(n, 2, make_rng(0, 5))


def test_censored_bvn_cdf(acceptance):
    grid = np.linspace(-2.5, 2.5, 5)
    worst = 0.0
    for rho in (-0.9, 0.0, 0.5, 0.9):
        for h, k in itertools.product(grid, grid):
            worst = max(worst, abs(float(bvn_cdf(h, k, rho)) - _bvn_quad(h, k, rho)))
    ok = worst <= 1e-7
    acceptance("9a", ok, f"bvn_cdf vs quadrature on 100 points, max |err| = {worst:.2e} (tol 1e-7)")
    assert ok


@pytest.mark.slow
def test_censored_uncensored_matches_ols(acceptance):
    g = _cens_blocks()
    diffs = []
    for seed in range(10):
        sim = generate_network(g, (0.0, 1.0), _CENS_SPEC, _CENS_PARAMS, seed)
        nocens = np.zeros(sim.network.n_dyads, dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = censored_fit(sim.network, g, censored=nocens)
        diffs.append(float(np.abs(fit.beta - ols_fit(sim.network).beta_hat).max()))
    ok = max(diffs) < 1e-2
    acceptance("9b", ok, f"max_k |beta_k - OLS_k| over 10 seeds: max {max(diffs):.4f}, median {np.median(diffs):.4f} "
                         "(tol 1e-2)")
    assert ok


@pytest.mark.slow
def test_censored_beats_positive_ols(acceptance):
    g = _cens_blocks()
    err_pl, err_pos, frac = [], [], []
    for seed in range(50):
        sim = generate_network(g, (0.0, 1.0), _CENS_SPEC, _CENS_PARAMS, seed, censor=True)
        X, y = build_design_matrix(sim.network)
        cen = y <= 0
        frac.append(cen.mean())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = censored_fit(sim.network, g)
        err_pl.append(abs(fit.beta[1] - 1))
        err_pos.append(abs(positive_ols(X, y, cen)[1] - 1))
    a, b = float(np.median(err_pl)), float(np.median(err_pos))
    ok = a < b
    acceptance("9c", ok, f"censored fraction {np.mean(frac):.3f}; median |beta1-1| pseudo-likelihood {a:.4f} vs "
                         f"positive-only OLS {b:.4f}")
    assert ok


# 10 ------------------------------------------------------------------------


def _run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = cli.main(argv)
    assert code == 0, err.getvalue()
    return out.getvalue()


def test_determinism(acceptance, tmp_path):
    net, blocks = tmp_path / "net.csv", tmp_path / "blocks.csv"
    cnet, cblocks = tmp_path / "cnet.csv", tmp_path / "cblocks.csv"
    _run_cli(["simulate", "--seed", "11", "--n", "14", "--out-network", str(net), "--out-blocks", str(blocks)])
    _run_cli(["simulate", "--seed", "12", "--n", "16", "--censor", "--r", "0.5", "--alpha1", "0.7",
              "--family", "x3", "--covariate-scale", "1", "--beta", "0,1",
              "--out-network", str(cnet), "--out-blocks", str(cblocks)])
    small = ["--n-values", "12,16", "--sims", "3", "--reps", "6"]
    commands = {
        "simulate": ["simulate", "--seed", "3", "--n", "10"],
        "fit": ["fit", "-i", str(net), "--auto-blocks", "2", "--seed", "2"],
        "blocks": ["blocks", "-i", str(net), "-B", "2", "--seed", "2"],
        "coverage": ["coverage", "--seed", "4", *small],
        "theorem-gap": ["theorem-gap", "--seed", "4", *small],
        "block-recovery": ["block-recovery", "--seed", "4", "--n-values", "12,16", "--reps", "3"],
        "se-variance": ["se-variance", "--seed", "4", *small],
        "censored-fit": ["censored-fit", "-i", str(cnet), "--blocks", str(cblocks), "--max-pairs", "300",
                         "--min-pairs", "5"],
    }
    mismatched = []
    for name, argv in commands.items():
        outs = {t: _run_cli(argv + ["--threads", str(t)]) for t in (1, 4)}
        outs["again"] = _run_cli(argv + ["--threads", "1"])
        if not (outs[1] == outs[4] == outs["again"]):
            mismatched.append(name)
    ok = not mismatched
    acceptance(10, ok, f"{len(commands) - len(mismatched)}/{len(commands)} subcommands byte-identical across "
                       "--threads 1/4 and reruns" + (f"; mismatched: {mismatched}" if mismatched else ""))
    assert ok
