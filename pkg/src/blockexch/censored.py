"""Pairwise pseudo-likelihood for zero-censored network regression.

Observed ``y_ij = max(y*_ij, 0)`` with ``y* = X beta + xi``. Every
configuration key gets its own subproblem: the sum of bivariate (or, for
``sigma2`` keys, univariate Tobit) log-likelihoods over the dyad pairs in
that key, maximized in ``beta`` plus the two dyad variances and their
covariance. Subproblem estimates are then averaged with sample-size weights.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.special import log_ndtr

from ._rng import make_rng
from .covest import (
    CONFIGS,
    BlockAssignment,
    ConfigurationKey,
    phiA_key,
    phiB_key,
    phiC_key,
    phiD_key,
    sigma2_key,
)
from .exceptions import NumericalError, ValidationError
from .netcore import DirectedNetwork, build_design_matrix, canonical_dyads, dyad_index

LOG_FLOOR = -745.0
VAR_MIN = 1e-2
CORR_MAX = 0.9
MIN_PAIRS = 30
MAX_PAIRS = 2000
_SQRT2 = math.sqrt(2.0)
_TWO_PI = 2.0 * math.pi

# Gauss-Legendre half-rules (nodes, weights) for 6, 12 and 20 points
_GL = (
    (
        np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
        np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    ),
    (
        np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                  0.5873179542866171, 0.3678314989981802, 0.1252334085114692]),
        np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                  0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    ),
    (
        np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                  0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                  0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                  0.07652652113349733]),
        np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                  0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                  0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                  0.1527533871307259]),
    ),
)
_GL_X = [np.concatenate([1 - x, 1 + x]) for x, _ in _GL]
_GL_W = [np.concatenate([w, w]) for _, w in _GL]
_X6, _X12, _X20 = _GL_X
_W6, _W12, _W20 = _GL_W


@njit(cache=True)
def _phid(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit(cache=True)
def _bvnu(h, k, r, x6, w6, x12, w12, x20, w20):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r."""
    if h == np.inf or k == np.inf:
        return 0.0
    if h == -np.inf:
        return 1.0 if k == -np.inf else _phid(-k)
    if k == -np.inf:
        return _phid(-h)
    if r == 0.0:
        return _phid(-h) * _phid(-k)
    ar = abs(r)
    if ar < 0.3:
        x, w = x6, w6
    elif ar < 0.75:
        x, w = x12, w12
    else:
        x, w = x20, w20
    hk = h * k
    bvn = 0.0
    if ar < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r) / 2.0
        for t in range(x.shape[0]):
            sn = math.sin(asr * x[t])
            bvn += w[t] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
        bvn = bvn * asr / _TWO_PI + _phid(-h) * _phid(-k)
    else:
        if r < 0:
            k = -k
            hk = -hk
        if ar < 1.0:
            as_ = 1.0 - r * r
            a = math.sqrt(as_)
            bs = (h - k) ** 2
            asr = -(bs / as_ + hk) / 2.0
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 80.0
            if asr > -100.0:
                bvn = a * math.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_)
            if hk > -100.0:
                b = math.sqrt(bs)
                sp = math.sqrt(_TWO_PI) * _phid(-b / a)
                bvn = bvn - math.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
            a = a / 2.0
            acc = 0.0
            for t in range(x.shape[0]):
                xs = (a * x[t]) ** 2
                asr_t = -(bs / xs + hk) / 2.0
                if asr_t > -100.0:
                    sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs)
                    rs = math.sqrt(1.0 - xs)
                    ep = math.exp(-(hk / 2.0) * xs / (1.0 + rs) ** 2) / rs
                    acc += w[t] * math.exp(asr_t) * (sp - ep)
            bvn = (a * acc - bvn) / _TWO_PI
        if r > 0:
            bvn = bvn + _phid(-max(h, k))
        elif h >= k:
            bvn = -bvn
        else:
            if h < 0:
                L = _phid(k) - _phid(h)
            else:
                L = _phid(-h) - _phid(-k)
            bvn = L - bvn
    return max(0.0, min(1.0, bvn))


@njit(cache=True)
def _bvn_cdf_arrays(h, k, r, out, x6, w6, x12, w12, x20, w20):
    for t in range(h.shape[0]):
        out[t] = _bvnu(-h[t], -k[t], r[t], x6, w6, x12, w12, x20, w20)


def bvn_cdf(h, k, rho):
    """``P(Z1 <= h, Z2 <= k)`` for standard bivariate normal with correlation ``rho``.

    Gauss-Legendre quadrature on the Plackett/Drezner-Wesolowsky forms
    (Genz's algorithm), accurate to roughly double precision.
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h, k, rho)))
    if np.isnan(h).any() or np.isnan(k).any() or np.isnan(rho).any():
        raise ValidationError("bvn_cdf received NaN input")
    if np.any(np.abs(rho) > 1):
        raise ValidationError("correlation must lie in [-1, 1]")
    shape = h.shape
    out = np.empty(h.size)
    _bvn_cdf_arrays(h.ravel().copy(), k.ravel().copy(), rho.ravel().copy(), out,
                    _X6, _W6, _X12, _W12, _X20, _W20)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# pair log-likelihood with analytic derivatives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairLikelihoodContext:
    """Means, variances and covariance of a latent dyad pair."""

    mu1: np.ndarray
    mu2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        v1, v2, c = (np.asarray(a, dtype=float) for a in (self.v1, self.v2, self.c))
        if np.any(v1 <= 0) or np.any(v2 <= 0):
            raise ValidationError("variances must be positive")
        if np.any(np.abs(c) >= np.sqrt(v1 * v2)):
            raise ValidationError("covariance must give |correlation| < 1")

    @property
    def rho(self):
        return np.asarray(self.c) / np.sqrt(np.asarray(self.v1) * np.asarray(self.v2))


def _mills(z):
    """``phi(z) / Phi(z)`` computed in log space."""
    return np.exp(-0.5 * z * z - 0.5 * np.log(_TWO_PI) - log_ndtr(z))


def _norm_logpdf(z):
    return -0.5 * z * z - 0.5 * np.log(_TWO_PI)


def pair_terms(y1, y2, cen1, cen2, mu1, mu2, v1, v2, c):
    """Log-likelihood and its gradient for each pair.

    Returns ``(ll, grad, floored)``; ``grad`` has columns
    ``(mu1, mu2, v1, v2, c)``, ``floored`` flags values clipped at
    ``LOG_FLOOR`` (zero probability).
    """
    arrs = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=float)) for a in (y1, y2, mu1, mu2, v1, v2, c)))
    y1, y2, mu1, mu2, v1, v2, c = arrs
    cen1 = np.broadcast_to(np.asarray(cen1, dtype=bool), y1.shape)
    cen2 = np.broadcast_to(np.asarray(cen2, dtype=bool), y1.shape)
    m = y1.size
    ll = np.zeros(m)
    grad = np.zeros((m, 5))

    both = ~cen1 & ~cen2
    if both.any():
        e1, e2 = y1[both] - mu1[both], y2[both] - mu2[both]
        a, b, cc = v1[both], v2[both], c[both]
        D = a * b - cc * cc
        q = (b * e1 * e1 - 2 * cc * e1 * e2 + a * e2 * e2) / D
        ll[both] = -np.log(_TWO_PI) - 0.5 * np.log(D) - 0.5 * q
        pe1 = (b * e1 - cc * e2) / D
        pe2 = (a * e2 - cc * e1) / D
        grad[both] = np.column_stack([
            pe1,
            pe2,
            -0.5 * b / D + 0.5 * pe1 * pe1,
            -0.5 * a / D + 0.5 * pe2 * pe2,
            cc / D + pe1 * pe2,
        ])

    for obs_first in (True, False):
        sel = (~cen1 & cen2) if obs_first else (cen1 & ~cen2)
        if not sel.any():
            continue
        if obs_first:
            yo, mo, vo, mc, vc = y1[sel], mu1[sel], v1[sel], mu2[sel], v2[sel]
        else:
            yo, mo, vo, mc, vc = y2[sel], mu2[sel], v2[sel], mu1[sel], v1[sel]
        cc = c[sel]
        e = yo - mo
        cm = mc + cc / vo * e
        s2 = vc - cc * cc / vo
        s = np.sqrt(s2)
        z = -cm / s
        lz = log_ndtr(z)
        ll[sel] = _norm_logpdf(e / np.sqrt(vo)) - 0.5 * np.log(vo) + lz
        lam = _mills(z)
        # dz = -dm/s + m * d(s2) / (2 s^3)
        dm = {"mo": -cc / vo, "mc": np.ones_like(e), "vo": -cc * e / vo**2, "vc": 0.0 * e, "c": e / vo}
        ds2 = {"mo": 0.0 * e, "mc": 0.0 * e, "vo": cc * cc / vo**2, "vc": np.ones_like(e), "c": -2 * cc / vo}
        dz = {kk: -dm[kk] / s + cm * ds2[kk] / (2 * s2 * s) for kk in dm}
        g_mo = e / vo + lam * dz["mo"]
        g_vo = -0.5 / vo + 0.5 * e * e / vo**2 + lam * dz["vo"]
        g_mc = lam * dz["mc"]
        g_vc = lam * dz["vc"]
        g_c = lam * dz["c"]
        if obs_first:
            grad[sel] = np.column_stack([g_mo, g_mc, g_vo, g_vc, g_c])
        else:
            grad[sel] = np.column_stack([g_mc, g_mo, g_vc, g_vo, g_c])

    cen = cen1 & cen2
    if cen.any():
        a, b, cc = v1[cen], v2[cen], c[cen]
        sa, sb = np.sqrt(a), np.sqrt(b)
        h = -mu1[cen] / sa
        k = -mu2[cen] / sb
        r = cc / (sa * sb)
        P = bvn_cdf(h, k, r)
        P = np.atleast_1d(P)
        with np.errstate(divide="ignore"):
            ll[cen] = np.log(P)
        sr = np.sqrt(1 - r * r)
        dPh = np.exp(_norm_logpdf(h)) * np.exp(log_ndtr((k - r * h) / sr))
        dPk = np.exp(_norm_logpdf(k)) * np.exp(log_ndtr((h - r * k) / sr))
        dPr = np.exp(-(h * h - 2 * r * h * k + k * k) / (2 * sr * sr)) / (_TWO_PI * sr)
        with np.errstate(divide="ignore", invalid="ignore"):
            gh, gk, gr = dPh / P, dPk / P, dPr / P
        g = np.column_stack([
            gh * (-1 / sa),
            gk * (-1 / sb),
            gh * mu1[cen] / (2 * a * sa) + gr * (-r / (2 * a)),
            gk * mu2[cen] / (2 * b * sb) + gr * (-r / (2 * b)),
            gr / (sa * sb),
        ])
        grad[cen] = np.where(np.isfinite(g), g, 0.0)

    floored = ~np.isfinite(ll) | (ll < LOG_FLOOR)
    ll = np.where(floored, LOG_FLOOR, ll)
    grad[floored] = 0.0
    return ll, grad, floored


def pair_loglik(ctx: PairLikelihoodContext, y_ij, y_kl, cen_ij=None, cen_kl=None):
    """Log-likelihood of each observed pair (``LOG_FLOOR`` where the probability is zero).

    Censoring defaults to ``y == 0``.
    """
    y_ij = np.asarray(y_ij, dtype=float)
    y_kl = np.asarray(y_kl, dtype=float)
    cen_ij = y_ij <= 0 if cen_ij is None else cen_ij
    cen_kl = y_kl <= 0 if cen_kl is None else cen_kl
    ll, _, _ = pair_terms(y_ij, y_kl, cen_ij, cen_kl, ctx.mu1, ctx.mu2, ctx.v1, ctx.v2, ctx.c)
    return float(ll[0]) if ll.size == 1 and np.ndim(y_ij) == 0 else ll


def tobit_terms(y, cen, mu, v):
    """Univariate Tobit log-likelihood and gradient columns ``(mu, v)``."""
    y, mu, v = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=float)) for a in (y, mu, v)))
    cen = np.broadcast_to(np.asarray(cen, dtype=bool), y.shape)
    s = np.sqrt(v)
    e = y - mu
    ll = np.where(cen, 0.0, _norm_logpdf(e / s) - np.log(s))
    z = -mu / s
    ll = np.where(cen, log_ndtr(z), ll)
    lam = _mills(z)
    g_mu = np.where(cen, lam * (-1 / s), e / v)
    g_v = np.where(cen, lam * mu / (2 * v * s), -0.5 / v + 0.5 * e * e / v**2)
    floored = ~np.isfinite(ll) | (ll < LOG_FLOOR)
    ll = np.where(floored, LOG_FLOOR, ll)
    grad = np.column_stack([g_mu, g_v])
    grad[floored] = 0.0
    return ll, grad, floored


# ---------------------------------------------------------------------------
# subproblems
# ---------------------------------------------------------------------------


@dataclass
class SubProblem:
    """One configuration key's share of the pseudo-likelihood.

    ``first``/``second`` index observations (canonical dyads); for ``sigma2``
    keys they coincide. ``var_keys`` names the variance parameter of each
    side (one name when both sides share it).
    """

    index: int
    key: ConfigurationKey
    first: np.ndarray
    second: np.ndarray
    var_keys: tuple
    n_total: int
    theta: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    cov: np.ndarray | None = None
    converged: bool = False
    n_iter: int = 0
    n_floored: int = 0
    message: str = ""
    bhat_pairs: np.ndarray | None = field(default=None, repr=False)

    @property
    def univariate(self) -> bool:
        return self.key.config == "sigma2"

    @property
    def n_pairs(self) -> int:
        return self.first.size

    def param_names(self, p: int) -> list[str]:
        names = [f"beta{t}" for t in range(p)]
        names += [f"var:{k}" for k in self.var_keys]
        if not self.univariate:
            names.append(f"cov:{self.key}")
        return names


def _pairs_by_key(n: int, g: BlockAssignment):
    """Every dyad pair, grouped by configuration key and oriented consistently."""
    lab = g.g
    send, recv = canonical_dyads(n)
    out = {}
    idx = np.arange(send.size)
    for u in range(1, g.B + 1):
        for v in range(1, g.B + 1):
            sel = (lab[send] == u) & (lab[recv] == v)
            if sel.any():
                out[sigma2_key(u, v)] = (idx[sel], idx[sel])
    ii, jj = np.triu_indices(n, 1)
    # phiA: (i,j),(j,i), orient so the sender of the first dyad has the smaller block
    swap = lab[ii] > lab[jj]
    a_s, a_r = np.where(swap, jj, ii), np.where(swap, ii, jj)
    _group(out, "phiA", dyad_index(a_s, a_r, n), dyad_index(a_r, a_s, n),
           list(zip(lab[a_s], lab[a_r])))
    # phiB: (i,j),(i,l), j<l; first dyad's receiver has the smaller block
    i, j, l = _triples(n)
    keep = j < l
    i, j, l = i[keep], j[keep], l[keep]
    swap = lab[j] > lab[l]
    j2, l2 = np.where(swap, l, j), np.where(swap, j, l)
    _group(out, "phiB", dyad_index(i, j2, n), dyad_index(i, l2, n), list(zip(lab[i], lab[j2], lab[l2])))
    # phiC: (j,i),(k,i), j<k; first dyad's sender has the smaller block
    _group(out, "phiC", dyad_index(j2, i, n), dyad_index(l2, i, n), list(zip(lab[i], lab[j2], lab[l2])))
    # phiD: (i,j),(k,i), j != k
    i, j, k = _triples(n)
    _group(out, "phiD", dyad_index(i, j, n), dyad_index(k, i, n), list(zip(lab[i], lab[j], lab[k])))
    return out


def _triples(n):
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    keep = (i != j) & (i != k) & (j != k)
    return i[keep], j[keep], k[keep]


def _group(out, config, first, second, blocks):
    make = {"phiA": phiA_key, "phiB": phiB_key, "phiC": phiC_key, "phiD": phiD_key}[config]
    codes = np.array(blocks, dtype=int)
    uniq, inv = np.unique(codes, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    for t, b in enumerate(uniq):
        sel = inv == t
        out[make(*b)] = (first[sel], second[sel])


def _var_keys(key: ConfigurationKey, first: int, second: int, send, recv, lab):
    k1 = sigma2_key(lab[send[first]], lab[recv[first]])
    k2 = sigma2_key(lab[send[second]], lab[recv[second]])
    return (str(k1),) if k1 == k2 else (str(k1), str(k2))


def build_subproblems(n: int, g: BlockAssignment, max_pairs: int = MAX_PAIRS, seed: int = 0) -> list[SubProblem]:
    """Partition dyad pairs by configuration key, subsampling large keys."""
    send, recv = canonical_dyads(n)
    lab = g.g
    groups = _pairs_by_key(n, g)
    order = [k for m in CONFIGS for k in sorted((k for k in groups if k.config == m), key=str)]
    subs = []
    for s, key in enumerate(order):
        first, second = groups[key]
        total = first.size
        if max_pairs and total > max_pairs:
            rng = make_rng(seed, 7, s)
            pick = np.sort(rng.choice(total, size=max_pairs, replace=False))
            first, second = first[pick], second[pick]
        vk = _var_keys(key, first[0], second[0], send, recv, lab)
        subs.append(SubProblem(s, key, first, second, vk, total))
    return subs


def _unpack(sub: SubProblem, theta, p):
    beta = theta[:p]
    if sub.univariate:
        return beta, theta[p], None, None
    if len(sub.var_keys) == 1:
        v1 = v2 = theta[p]
        c = theta[p + 1]
    else:
        v1, v2, c = theta[p], theta[p + 1], theta[p + 2]
    return beta, v1, v2, c


def subproblem_scores(sub: SubProblem, theta, X, y, cen):
    """Per-pair log-likelihood and score in natural parameters (beta, variances, covariance)."""
    p = X.shape[1]
    beta, v1, v2, c = _unpack(sub, theta, p)
    X1 = X[sub.first]
    if sub.univariate:
        ll, gr, fl = tobit_terms(y[sub.first], cen[sub.first], X1 @ beta, v1)
        score = np.column_stack([gr[:, :1] * X1, gr[:, 1:]])
        return ll, score, fl
    X2 = X[sub.second]
    ll, gr, fl = pair_terms(y[sub.first], y[sub.second], cen[sub.first], cen[sub.second],
                            X1 @ beta, X2 @ beta, v1, v2, c)
    sb = gr[:, :1] * X1 + gr[:, 1:2] * X2
    if len(sub.var_keys) == 1:
        score = np.column_stack([sb, gr[:, 2] + gr[:, 3], gr[:, 4]])
    else:
        score = np.column_stack([sb, gr[:, 2], gr[:, 3], gr[:, 4]])
    return ll, score, fl


def _to_natural(sub, z, p):
    """Map optimizer coordinates (log-variances, atanh-correlation) to natural ones."""
    if sub.univariate:
        return np.concatenate([z[:p], [np.exp(z[p])]])
    if len(sub.var_keys) == 1:
        v = np.exp(z[p])
        return np.concatenate([z[:p], [v, np.tanh(z[p + 1]) * v]])
    v1, v2 = np.exp(z[p]), np.exp(z[p + 1])
    return np.concatenate([z[:p], [v1, v2, np.tanh(z[p + 2]) * np.sqrt(v1 * v2)]])


def _to_optimizer(sub, theta, p):
    if sub.univariate:
        return np.concatenate([theta[:p], [np.log(theta[p])]])
    if len(sub.var_keys) == 1:
        v, c = theta[p], theta[p + 1]
        return np.concatenate([theta[:p], [np.log(v), np.arctanh(c / v)]])
    v1, v2, c = theta[p], theta[p + 1], theta[p + 2]
    return np.concatenate([theta[:p], [np.log(v1), np.log(v2), np.arctanh(c / np.sqrt(v1 * v2))]])


def _chain(sub, z, g_nat, p):
    """Gradient in optimizer coordinates from the natural-parameter gradient."""
    g = g_nat.copy()
    if sub.univariate:
        g[p] = g_nat[p] * np.exp(z[p])
        return g
    if len(sub.var_keys) == 1:
        v, t = np.exp(z[p]), np.tanh(z[p + 1])
        g[p] = (g_nat[p] + g_nat[p + 1] * t) * v
        g[p + 1] = g_nat[p + 1] * (1 - t * t) * v
        return g
    v1, v2, t = np.exp(z[p]), np.exp(z[p + 1]), np.tanh(z[p + 2])
    c = t * np.sqrt(v1 * v2)
    g[p] = (g_nat[p] + g_nat[p + 2] * c / (2 * v1)) * v1
    g[p + 1] = (g_nat[p + 1] + g_nat[p + 2] * c / (2 * v2)) * v2
    g[p + 2] = g_nat[p + 2] * (1 - t * t) * np.sqrt(v1 * v2)
    return g


@dataclass(frozen=True)
class Bounds:
    """Box constraints for the pseudo-likelihood optimizer."""

    var_min: float = VAR_MIN
    corr_max: float = CORR_MAX
    max_iter: int = 500
    gtol: float = 1e-6


def fit_subproblem(sub: SubProblem, X, y, cen, init, bounds: Bounds = Bounds()) -> SubProblem:
    """Bounded quasi-Newton maximization of one subproblem's log-likelihood.

    ``init`` is in natural parameters. Non-convergence is recorded on the
    returned object, never raised.
    """
    if sub.n_pairs == 0:
        raise ValidationError(f"subproblem {sub.key} has no pairs")
    p = X.shape[1]
    N = sub.n_pairs

    def obj(z):
        theta = _to_natural(sub, z, p)
        ll, score, _ = subproblem_scores(sub, theta, X, y, cen)
        return -ll.sum() / N, -_chain(sub, z, score.sum(axis=0), p) / N

    z0 = _to_optimizer(sub, np.asarray(init, dtype=float), p)
    n_var = 1 if sub.univariate else len(sub.var_keys)
    zb = [(None, None)] * p + [(np.log(bounds.var_min), None)] * n_var
    if not sub.univariate:
        zb.append((-np.arctanh(bounds.corr_max), np.arctanh(bounds.corr_max)))
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in zb])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in zb])
    z0 = np.clip(z0, lo, hi)
    res = minimize(obj, z0, jac=True, method="L-BFGS-B", bounds=zb,
                   options={"maxiter": bounds.max_iter, "gtol": bounds.gtol, "ftol": 1e-15})
    sub.theta = _to_natural(sub, res.x, p)
    _, grad = obj(res.x)
    free = ~(np.isclose(res.x, lo) | np.isclose(res.x, hi))
    sub.converged = bool(res.success or np.max(np.abs(grad[free]), initial=0.0) < bounds.gtol)
    sub.n_iter = int(res.nit)
    sub.message = str(res.message)
    _, _, fl = subproblem_scores(sub, sub.theta, X, y, cen)
    sub.n_floored = int(fl.sum())
    if not sub.converged:
        warnings.warn(f"subproblem {sub.key} did not converge: {sub.message}", RuntimeWarning, stacklevel=2)
    return sub


def _hessian(sub, theta, X, y, cen, step=1e-5):
    """Mean Hessian in natural parameters by central differences of the analytic score."""
    k = theta.size
    H = np.zeros((k, k))
    for t in range(k):
        h = step * max(1.0, abs(theta[t]))
        tp, tm = theta.copy(), theta.copy()
        tp[t] += h
        tm[t] -= h
        gp = subproblem_scores(sub, tp, X, y, cen)[1].mean(axis=0)
        gm = subproblem_scores(sub, tm, X, y, cen)[1].mean(axis=0)
        H[:, t] = (gp - gm) / (2 * h)
    return (H + H.T) / 2


def _disjoint_pairs(subs, seed):
    """Greedy round-robin claim of pairs so no observation feeds two subproblems."""
    owner: dict = {}
    rng = make_rng(seed, 11)
    queues = [list(rng.permutation(s.n_pairs)) for s in subs]
    chosen = [[] for _ in subs]
    pos = [0] * len(subs)
    active = True
    while active:
        active = False
        for s, sub in enumerate(subs):
            q = queues[s]
            while pos[s] < len(q):
                t = q[pos[s]]
                pos[s] += 1
                a, b = int(sub.first[t]), int(sub.second[t])
                if owner.get(a, s) == s and owner.get(b, s) == s:
                    owner[a] = s
                    owner[b] = s
                    chosen[s].append(t)
                    active = True
                    break
    return [np.array(sorted(c), dtype=int) for c in chosen]


def information_matrices(subs, X, y, cen, seed=0):
    """Attach ``A`` (negative mean Hessian), ``B`` (score outer product) and the sandwich.

    ``B`` uses only pairs whose observations no other subproblem touches,
    so cross-subproblem terms vanish and the joint matrices are block diagonal.
    """
    picks = _disjoint_pairs(subs, seed)
    for sub, pick in zip(subs, picks):
        A = -_hessian(sub, sub.theta, X, y, cen)
        _, score, _ = subproblem_scores(sub, sub.theta, X, y, cen)
        if pick.size == 0:
            pick = np.arange(sub.n_pairs)
        S = score[pick]
        Bm = S.T @ S / S.shape[0]
        try:
            Ainv = np.linalg.inv(A)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular information matrix in subproblem {sub.key}") from exc
        if not np.all(np.isfinite(Ainv)) or np.linalg.cond(A) > 1e14:
            raise NumericalError(f"singular information matrix in subproblem {sub.key}")
        sub.A, sub.B = A, Bm
        sub.bhat_pairs = pick
        sub.cov = Ainv @ Bm @ Ainv / sub.n_pairs


def clustered_covariance(subs, X, y, cen, n):
    """Joint covariance of all subproblem estimates with an actor-clustered meat.

    The meat sums ``psi_p psi_q'`` over every two pairs ``p, q`` (from any
    subproblems) that involve a common actor, which is the dependence the
    network actually has. Inclusion-exclusion over shared actors, actor
    pairs and actor triples counts each such ``(p, q)`` once.
    """
    send, recv = canonical_dyads(n)
    sizes = [s.theta.size for s in subs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    K = int(offs[-1])
    parts = {1: ([], [], []), 2: ([], [], []), 3: ([], [], [])}
    Jinv = np.zeros((K, K))

    def push(level, rows, score, o):
        r, c, v = parts[level]
        k = score.shape[1]
        r.append(np.repeat(rows, k))
        c.append(np.tile(np.arange(o, o + k), rows.size))
        v.append(score.ravel())

    for sub, o in zip(subs, offs[:-1]):
        _, score, _ = subproblem_scores(sub, sub.theta, X, y, cen)
        acts = np.column_stack([send[sub.first], recv[sub.first], send[sub.second], recv[sub.second]])
        acts = np.sort(acts, axis=1)
        # distinct actors per pair, padded with -1
        dup = np.zeros_like(acts, dtype=bool)
        dup[:, 1:] = acts[:, 1:] == acts[:, :-1]
        acts = -np.sort(-np.where(dup, -1, acts), axis=1)[:, :3]
        a, b, c = acts[:, 0], acts[:, 1], acts[:, 2]
        for col in (a, b, c):
            ok = col >= 0
            push(1, col[ok], score[ok], o)
        for u, v in ((a, b), (a, c), (b, c)):
            ok = (u >= 0) & (v >= 0)
            push(2, u[ok] * n + v[ok], score[ok], o)
        ok = c >= 0
        push(3, (a[ok] * n + b[ok]) * n + c[ok], score[ok], o)
        k = score.shape[1]
        Jinv[o:o + k, o:o + k] = np.linalg.inv(sub.A * sub.n_pairs)

    def gram(level):
        r, c, v = (np.concatenate(x) for x in parts[level])
        T = coo_matrix((v, (r, c)), shape=(n**level, K)).tocsr()
        return (T.T @ T).toarray()

    meat = gram(1) - gram(2) + gram(3)
    cov = Jinv @ meat @ Jinv.T
    return (cov + cov.T) / 2


@dataclass
class CombinedEstimate:
    names: list
    theta: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    columns: list


def combine_estimates(subs, p: int, joint_cov=None) -> CombinedEstimate:
    """Weighted average of every parameter over the subproblems that estimate it.

    A subproblem's weight is the size of its full configuration set, so
    each observation carries the same total weight within a configuration.
    Row ``t`` of the weight matrix averages all copies of target ``t``.
    ``joint_cov`` defaults to the block-diagonal matrix of per-subproblem
    sandwiches.
    """
    columns = []
    for sub in subs:
        for name in sub.param_names(p):
            columns.append((sub.index, name, sub.n_total))
    names = []
    for _, name, _ in columns:
        if name not in names:
            names.append(name)
    Wt = np.zeros((len(names), len(columns)))
    for c, (_, name, size) in enumerate(columns):
        Wt[names.index(name), c] = size
    Wt /= Wt.sum(axis=1, keepdims=True)
    stacked = np.concatenate([s.theta for s in subs])
    if joint_cov is None:
        joint_cov = np.zeros((len(columns), len(columns)))
        off = 0
        for sub in subs:
            k = sub.cov.shape[0]
            joint_cov[off:off + k, off:off + k] = sub.cov
            off += k
    theta = Wt @ stacked
    cov = Wt @ joint_cov @ Wt.T
    return CombinedEstimate(names, theta, (cov + cov.T) / 2, Wt, columns)


@dataclass
class CensoredFit:
    """Result of :func:`censored_fit`."""

    beta: np.ndarray
    beta_cov: np.ndarray
    params: dict
    subproblems: list
    dropped: list
    alpha: float = 0.05

    @property
    def se(self):
        return np.sqrt(np.maximum(np.diag(self.beta_cov), 0.0))

    def ci(self):
        from scipy.stats import norm

        z = norm.ppf(1 - self.alpha / 2)
        return self.beta - z * self.se, self.beta + z * self.se

    def to_json(self) -> dict:
        lo, hi = self.ci()
        return {
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "ci_lower": lo.tolist(),
            "ci_upper": hi.tolist(),
            "covariance": {str(k): float(v) for k, v in self.params.items()},
            "subproblems": [
                {
                    "key": str(s.key),
                    "n_pairs": int(s.n_pairs),
                    "n_available": int(s.n_total),
                    "converged": bool(s.converged),
                    "n_iter": int(s.n_iter),
                    "n_floored": int(s.n_floored),
                    "n_bhat_pairs": int(s.bhat_pairs.size) if s.bhat_pairs is not None else 0,
                    "theta": [float(t) for t in s.theta],
                }
                for s in self.subproblems
            ],
            "dropped": [str(k) for k in self.dropped],
        }


def positive_ols(X, y, cen):
    """OLS on the uncensored observations only."""
    keep = ~cen
    return np.linalg.lstsq(X[keep], y[keep], rcond=None)[0]


def censored_fit(
    net: DirectedNetwork,
    g: BlockAssignment,
    max_pairs: int = MAX_PAIRS,
    min_pairs: int = MIN_PAIRS,
    bounds: Bounds = Bounds(),
    seed: int = 0,
    alpha: float = 0.05,
    censored=None,
    meat: str = "clustered",
) -> CensoredFit:
    """End-to-end pseudo-likelihood fit; zeros in ``net.y`` are censored by default."""
    X, y = build_design_matrix(net)
    cen = (y <= 0) if censored is None else np.asarray(censored, dtype=bool)
    if cen.all():
        raise ValidationError("every observation is censored; nothing to fit")
    if (~cen).sum() <= X.shape[1]:
        raise ValidationError("too few uncensored observations to initialize")
    p = X.shape[1]
    beta0 = positive_ols(X, y, cen)
    resid = y[~cen] - X[~cen] @ beta0
    v0 = max(float(resid.var()), bounds.var_min * 2)

    subs = build_subproblems(net.n, g, max_pairs=max_pairs, seed=seed)
    kept, dropped = [], []
    for sub in subs:
        if sub.n_total < min_pairs:
            warnings.warn(f"dropping subproblem {sub.key}: {sub.n_total} pairs", RuntimeWarning, stacklevel=2)
            dropped.append(sub.key)
        else:
            kept.append(sub)
    if not kept:
        raise ValidationError("no subproblem has enough pairs")
    for sub in kept:
        n_var = 1 if sub.univariate else len(sub.var_keys)
        init = np.concatenate([beta0, [v0] * n_var, [] if sub.univariate else [0.0]])
        fit_subproblem(sub, X, y, cen, init, bounds)
    information_matrices(kept, X, y, cen, seed)
    if meat == "clustered":
        joint = clustered_covariance(kept, X, y, cen, net.n)
    elif meat == "disjoint":
        joint = None
    else:
        raise ValidationError(f"meat must be 'disjoint' or 'clustered', got {meat!r}")
    comb = combine_estimates(kept, p, joint)
    idx = [comb.names.index(f"beta{t}") for t in range(p)]
    beta = comb.theta[idx]
    beta_cov = comb.cov[np.ix_(idx, idx)]
    params = {}
    for name, val in zip(comb.names, comb.theta):
        if name.startswith("var:"):
            params[ConfigurationKey.parse(name[4:])] = float(val)
        elif name.startswith("cov:"):
            params[ConfigurationKey.parse(name[4:])] = float(val)
    return CensoredFit(beta, beta_cov, params, kept, dropped, alpha)
