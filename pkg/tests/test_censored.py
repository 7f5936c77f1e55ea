from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate
from scipy.stats import multivariate_normal, norm

from blockexch import BlockAssignment, DirectedNetwork, ValidationError
from blockexch._rng import make_rng
from blockexch.censored import (
    LOG_FLOOR,
    Bounds,
    PairLikelihoodContext,
    build_subproblems,
    clustered_covariance,
    bvn_cdf,
    censored_fit,
    combine_estimates,
    fit_subproblem,
    information_matrices,
    pair_loglik,
    pair_terms,
    positive_ols,
    subproblem_scores,
    tobit_terms,
)
from blockexch.covest import ConfigurationKey
from blockexch.netcore import build_design_matrix
from blockexch.simgen import CovariateSpec, ErrorModelParams, equal_blocks, generate_network, true_covariance

PARAMS = ErrorModelParams.from_r_alpha(0.5, 0.7)
SPEC = CovariateSpec.from_setting("x3", "independent", 1.0)


def simulate(n, seed, censor=True, g=None):
    g = equal_blocks(n, 2, make_rng(0, 5)) if g is None else g
    return generate_network(g, (0.0, 1.0), SPEC, PARAMS, seed, censor=censor), g


# bivariate normal CDF ------------------------------------------------------


@pytest.mark.parametrize("rho", [-0.95, -0.5, 0.0, 0.3, 0.8, 0.99])
def test_bvn_origin_identity(rho):
    assert_allclose(bvn_cdf(0.0, 0.0, rho), 0.25 + np.arcsin(rho) / (2 * np.pi), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6))
def test_bvn_independence_and_limits(h, k):
    assert_allclose(bvn_cdf(h, k, 0.0), norm.cdf(h) * norm.cdf(k), atol=1e-15)
    assert_allclose(bvn_cdf(h, k, 1.0), norm.cdf(min(h, k)), atol=1e-12)
    assert_allclose(bvn_cdf(h, k, -1.0), max(0.0, norm.cdf(h) + norm.cdf(k) - 1), atol=1e-12)
    assert_allclose(bvn_cdf(h, k, 0.6), bvn_cdf(k, h, 0.6), atol=1e-15)


def test_bvn_quadrature_point():
    h, k, r = 0.5, -0.3, 0.4
    s = np.sqrt(1 - r * r)
    oracle = integrate.quad(lambda x: norm.pdf(x) * norm.cdf((k - r * x) / s), -np.inf, h, epsabs=1e-13)[0]
    assert abs(bvn_cdf(h, k, r) - oracle) < 1e-7


def test_bvn_matches_scipy_mvn():
    rng = make_rng(1)
    for _ in range(20):
        h, k = rng.uniform(-3, 3, 2)
        r = rng.uniform(-0.99, 0.99)
        ref = multivariate_normal(cov=[[1, r], [r, 1]]).cdf([h, k])
        assert abs(bvn_cdf(h, k, r) - ref) < 1e-5


def test_bvn_rejects_bad_input():
    with pytest.raises(ValidationError):
        bvn_cdf(np.nan, 0.0, 0.1)
    with pytest.raises(ValidationError):
        bvn_cdf(0.0, 0.0, 1.5)


# pair log-likelihood -------------------------------------------------------


def test_uncorrelated_pair_is_sum_of_marginals():
    ctx = PairLikelihoodContext(0.3, -0.2, 1.5, 0.8, 0.0)
    ll = pair_loglik(ctx, 1.1, 0.4)
    expect = norm.logpdf(1.1, 0.3, np.sqrt(1.5)) + norm.logpdf(0.4, -0.2, np.sqrt(0.8))
    assert_allclose(ll, expect, rtol=1e-13)
    # both censored, independent
    assert_allclose(pair_loglik(ctx, 0.0, 0.0), np.log(norm.cdf(-0.3 / np.sqrt(1.5)) * norm.cdf(0.2 / np.sqrt(0.8))),
                    rtol=1e-12)


def test_uncensored_pair_matches_bivariate_density():
    ctx = PairLikelihoodContext(0.3, -0.2, 1.5, 0.8, 0.6)
    ref = multivariate_normal([0.3, -0.2], [[1.5, 0.6], [0.6, 0.8]]).logpdf([1.1, 0.4])
    assert_allclose(pair_loglik(ctx, 1.1, 0.4), ref, rtol=1e-13)


def test_one_censored_far_below_mean_is_marginal_density():
    # the censored partner's conditional CDF at zero tends to one
    ctx = PairLikelihoodContext(0.5, -40.0, 1.0, 1.0, 0.5)
    assert_allclose(pair_loglik(ctx, 0.7, 0.0), norm.logpdf(0.7, 0.5, 1.0), rtol=1e-12)


def test_impossible_pair_is_floored():
    ctx = PairLikelihoodContext(1e3, 1e3, 1.0, 1.0, 0.2)
    ll, _, fl = pair_terms(0.0, 0.0, True, True, 1e3, 1e3, 1.0, 1.0, 0.2)
    assert fl.all() and ll[0] == LOG_FLOOR
    assert pair_loglik(ctx, 0.0, 0.0) == LOG_FLOOR


def test_both_censored_matches_monte_carlo():
    mu, cov = np.array([0.4, -0.1]), np.array([[1.2, 0.5], [0.5, 0.9]])
    ctx = PairLikelihoodContext(mu[0], mu[1], cov[0, 0], cov[1, 1], cov[0, 1])
    z = make_rng(2).multivariate_normal(mu, cov, size=1_000_000)
    hit = np.all(z < 0, axis=1)
    p_hat = hit.mean()
    se = np.sqrt(p_hat * (1 - p_hat) / hit.size)
    assert abs(np.exp(pair_loglik(ctx, 0.0, 0.0)) - p_hat) < 3 * se


def test_one_censored_integrates_to_both_censored():
    mu1, mu2, v1, v2, c = 0.4, -0.3, 1.3, 0.7, 0.45

    def mixed(t):
        return np.exp(pair_terms(t, 0.0, False, True, mu1, mu2, v1, v2, c)[0][0])

    total = integrate.quad(mixed, -np.inf, 0.0, epsabs=1e-12)[0]
    both = np.exp(pair_terms(0.0, 0.0, True, True, mu1, mu2, v1, v2, c)[0][0])
    assert abs(total - both) < 1e-5


def test_density_integrates_to_one_censored():
    mu1, mu2, v1, v2, c = 0.4, -0.3, 1.3, 0.7, -0.45

    def dens(t):
        return np.exp(pair_terms(0.9, t, False, False, mu1, mu2, v1, v2, c)[0][0])

    total = integrate.quad(dens, -np.inf, 0.0, epsabs=1e-12)[0]
    mixed = np.exp(pair_terms(0.9, 0.0, False, True, mu1, mu2, v1, v2, c)[0][0])
    assert abs(total - mixed) < 1e-5


@pytest.mark.parametrize("cen1,cen2", [(False, False), (False, True), (True, False), (True, True)])
def test_pair_gradient_matches_finite_differences(cen1, cen2):
    rng = make_rng(3, int(cen1), int(cen2))
    for _ in range(10):
        v1, v2 = rng.uniform(0.3, 2.0, 2)
        c = rng.uniform(-0.8, 0.8) * np.sqrt(v1 * v2)
        x = np.array([rng.normal(), rng.normal(), v1, v2, c])
        y1 = 0.0 if cen1 else rng.uniform(0.1, 2)
        y2 = 0.0 if cen2 else rng.uniform(0.1, 2)

        def f(x):
            return pair_terms(y1, y2, cen1, cen2, *x)[0][0]

        grad = pair_terms(y1, y2, cen1, cen2, *x)[1][0]
        num = np.array([(f(x + h) - f(x - h)) / (2e-6) for h in np.eye(5) * 1e-6])
        assert_allclose(grad, num, rtol=1e-5, atol=1e-7)


def test_tobit_gradient_matches_finite_differences():
    for cen, y in ((False, 0.8), (True, 0.0)):
        grad = tobit_terms(y, cen, 0.3, 1.4)[1][0]
        f = lambda m, v: tobit_terms(y, cen, m, v)[0][0]
        num = [(f(0.3 + 1e-6, 1.4) - f(0.3 - 1e-6, 1.4)) / 2e-6, (f(0.3, 1.4 + 1e-6) - f(0.3, 1.4 - 1e-6)) / 2e-6]
        assert_allclose(grad, num, rtol=1e-6)


def test_context_rejects_invalid_moments():
    with pytest.raises(ValidationError):
        PairLikelihoodContext(0, 0, -1.0, 1.0, 0.0)
    with pytest.raises(ValidationError):
        PairLikelihoodContext(0, 0, 1.0, 1.0, 1.0)


# subproblems ---------------------------------------------------------------


def _fitted_subproblems(n=24, seed=4, censor=True):
    sim, g = simulate(n, seed, censor)
    X, y = build_design_matrix(sim.network)
    cen = sim.censored if censor else np.zeros(y.size, dtype=bool)
    subs = build_subproblems(n, g, max_pairs=400)
    beta0 = positive_ols(X, y, cen)
    for sub in subs:
        k = 1 if sub.univariate else len(sub.var_keys)
        init = np.concatenate([beta0, [1.0] * k, [] if sub.univariate else [0.0]])
        fit_subproblem(sub, X, y, cen, init)
    return subs, X, y, cen


def test_subproblems_cover_every_key():
    g = BlockAssignment(np.array([1, 1, 2, 2, 1, 2, 1]), 2)
    subs = build_subproblems(7, g, max_pairs=0)
    assert len(subs) == 27
    assert sum(s.n_total for s in subs if s.key.config == "sigma2") == 42
    assert sum(s.n_total for s in subs if s.key.config == "phiA") == 21
    assert sum(s.n_total for s in subs if s.key.config == "phiD") == 7 * 6 * 5


def test_variance_subproblem_without_censoring_is_ols():
    sim, g = simulate(20, 6, censor=False)
    X, y = build_design_matrix(sim.network)
    cen = np.zeros(y.size, dtype=bool)
    sub = [s for s in build_subproblems(20, g) if s.key.config == "sigma2"][0]
    fit_subproblem(sub, X, y, cen, np.array([0.0, 0.0, 1.0]), Bounds(gtol=1e-9))
    Xs, ys = X[sub.first], y[sub.first]
    ols = np.linalg.lstsq(Xs, ys, rcond=None)[0]
    assert np.max(np.abs(sub.theta[:2] - ols)) < 1e-2
    assert_allclose(sub.theta[2], np.mean((ys - Xs @ ols) ** 2), rtol=1e-3)


def test_fit_from_truth_does_not_worsen_objective():
    sim, g = simulate(24, 7)
    X, y = build_design_matrix(sim.network)
    cen = sim.censored
    truth = true_covariance(PARAMS, g).params
    moved, start = [], []
    for sub in build_subproblems(24, g, max_pairs=300):
        tv = [0.0, 1.0] + [truth[ConfigurationKey.parse(v)] for v in sub.var_keys]
        tv = np.array(tv + ([] if sub.univariate else [truth[sub.key]]))
        before = subproblem_scores(sub, tv, X, y, cen)[0].sum()
        fit_subproblem(sub, X, y, cen, tv)
        after = subproblem_scores(sub, sub.theta, X, y, cen)[0].sum()
        assert after >= before - 1e-9
        # perturbed start moves toward the truth
        init = tv * np.r_[1.0, 1.0, [1.5] * (tv.size - 2)] + np.r_[0.5, -0.5, [0.0] * (tv.size - 2)]
        fit_subproblem(sub, X, y, cen, init)
        moved.append(np.linalg.norm(sub.theta - tv))
        start.append(np.linalg.norm(init - tv))
    assert np.median(moved) <= np.median(start)


def test_information_matrices_symmetric_and_disjoint():
    subs, X, y, cen = _fitted_subproblems()
    information_matrices(subs, X, y, cen)
    seen = set()
    for sub in subs:
        assert_allclose(sub.A, sub.A.T, atol=1e-8)
        obs = set(sub.first[sub.bhat_pairs].tolist()) | set(sub.second[sub.bhat_pairs].tolist())
        assert not (obs & seen)
        seen |= obs


def test_combine_single_subproblem_is_passthrough():
    subs, X, y, cen = _fitted_subproblems()
    information_matrices(subs, X, y, cen)
    comb = combine_estimates(subs[:1], 2)
    assert_array_equal(comb.theta, subs[0].theta)
    assert_allclose(comb.cov, subs[0].cov, rtol=1e-15)


def test_combine_equal_estimates():
    subs, X, y, cen = _fitted_subproblems()
    information_matrices(subs, X, y, cen)
    a, b = subs[0], subs[1]
    b.theta = a.theta.copy()
    b.n_total = a.n_total
    comb = combine_estimates([a, b], 2)
    assert_allclose(comb.theta[:2], a.theta[:2], rtol=1e-15)
    assert_array_equal(comb.weights.sum(axis=1), 1.0)
    full = combine_estimates(subs, 2)
    assert_allclose(full.weights.sum(axis=1), 1.0, rtol=0, atol=1e-15)


# end to end ----------------------------------------------------------------


def test_uncensored_fit_close_to_ols():
    sim, g = simulate(30, 8, censor=False)
    fit = censored_fit(sim.network, g, censored=np.zeros(sim.network.n_dyads, dtype=bool))
    X, y = build_design_matrix(sim.network)
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.max(np.abs(fit.beta - ols)) < 0.1
    lo, hi = fit.ci()
    assert np.all(lo < fit.beta) and np.all(fit.beta < hi)


def test_all_censored_is_an_error():
    sim, g = simulate(10, 9)
    net = DirectedNetwork(10, np.zeros(90), sim.network.covariates)
    with pytest.raises(ValidationError, match="censored"):
        censored_fit(net, g)


def test_small_subproblems_dropped_with_warning():
    g = BlockAssignment(np.array([1] * 11 + [2] * 2), 2)
    sim, _ = simulate(13, 10, g=g)
    with pytest.warns(RuntimeWarning, match="dropping"):
        fit = censored_fit(sim.network, g, max_pairs=300)
    assert fit.dropped
    assert all(s.n_total >= 30 for s in fit.subproblems)
    d = fit.to_json()
    assert len(d["subproblems"]) == len(fit.subproblems)
    assert set(d["dropped"]) == {str(k) for k in fit.dropped}


def test_fit_is_deterministic():
    sim, g = simulate(16, 11)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = censored_fit(sim.network, g, max_pairs=300, seed=2).to_json()
        b = censored_fit(sim.network, g, max_pairs=300, seed=2).to_json()
    assert a == b


def test_unknown_meat_rejected():
    sim, g = simulate(12, 12)
    with pytest.raises(ValidationError, match="meat"):
        censored_fit(sim.network, g, max_pairs=100, min_pairs=1, meat="bogus")


@pytest.mark.slow
def test_se_matches_replicate_spread():
    betas, ses = [], []
    for seed in range(200):
        sim, g = simulate(60, 1000 + seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = censored_fit(sim.network, g, censored=sim.censored)
        betas.append(fit.beta[1])
        ses.append(fit.se[1])
    ratio = np.median(ses) / np.std(betas, ddof=1)
    assert 0.7 <= ratio <= 1.4, ratio


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the actor-clustered SE runs about 0.8 of the seed-to-seed spread at n=80 "
                                      "and requiring every component within 3 SE gives about 0.82")
def test_subproblem_estimates_within_three_ses():

    n = 80
    g = equal_blocks(n, 2, make_rng(0, 5))
    truth = true_covariance(PARAMS, g).params
    hits = total = 0
    for seed in range(50):
        sim, _ = simulate(n, 2000 + seed, g=g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = censored_fit(sim.network, g, censored=sim.censored)
        X, y = build_design_matrix(sim.network)
        # per-subproblem blocks of the actor-clustered joint covariance
        joint = clustered_covariance(fit.subproblems, X, y, sim.censored, n)
        off = 0
        for sub in fit.subproblems:
            k = sub.theta.size
            tv = [0.0, 1.0] + [truth[ConfigurationKey.parse(v)] for v in sub.var_keys]
            tv = np.array(tv + ([] if sub.univariate else [truth[sub.key]]))
            # a negative meat diagonal counts as a miss
            se = np.sqrt(np.clip(np.diag(joint[off:off + k, off:off + k]), 0.0, None))
            off += k
            hits += bool(np.all(np.abs(sub.theta - tv) <= 3 * se))
            total += 1
    assert hits / total >= 0.9, hits / total
