"""Residual covariance estimators for network regression.

Two dyads ``(i, j)`` and ``(k, l)`` that share an actor fall into one of
five configurations:

========  ==========================  ==========================
name      pair                        block pattern
========  ==========================  ==========================
sigma2    ``(i,j), (i,j)``            ``(g_i, g_j)``
phiA      ``(i,j), (j,i)``            ``{g_i, g_j}``
phiB      ``(i,j), (i,l)``            ``(g_i, {g_j, g_l})``
phiC      ``(i,j), (k,j)``            ``(g_j, {g_i, g_k})``
phiD      ``(i,j), (k,i)``            ``(g_i, g_j, g_k)``
========  ==========================  ==========================

Dyads that share no actor have zero covariance. ``phiD`` pairs are counted
in one orientation (shared actor is the sender of the first dyad); the
mirrored entry of the covariance matrix carries the same parameter.

All sums over configuration sets are computed in closed form from
block-aggregated row and column sums, so nothing here loops over dyad pairs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from .exceptions import NumericalError, ValidationError
from .netcore import RegressionFit, canonical_dyads, to_matrix

CONFIGS = ("sigma2", "phiA", "phiB", "phiC", "phiD")


class ConfigurationKey(NamedTuple):
    """Configuration type plus its block pattern (labels are 1-based).

    ``blocks`` is ``(u, v)`` for sigma2 and phiA (phiA sorted), ``(u, (v, w))``
    for phiB/phiC with ``v <= w``, and ``(u, v, w)`` for phiD.
    """

    config: str
    blocks: tuple

    def __str__(self) -> str:
        b = self.blocks
        if self.config == "sigma2":
            return f"sigma2:({b[0]},{b[1]})"
        if self.config == "phiA":
            return f"phiA:{{{b[0]},{b[1]}}}"
        if self.config in ("phiB", "phiC"):
            return f"{self.config}:({b[0]},{{{b[1][0]},{b[1][1]}}})"
        return f"phiD:({b[0]},{b[1]},{b[2]})"

    @classmethod
    def parse(cls, text: str) -> "ConfigurationKey":
        name, _, rest = text.partition(":")
        nums = [int(t) for t in re.findall(r"\d+", rest)]
        if name == "sigma2":
            return sigma2_key(*nums)
        if name == "phiA":
            return phiA_key(*nums)
        if name == "phiB":
            return phiB_key(*nums)
        if name == "phiC":
            return phiC_key(*nums)
        if name == "phiD":
            return phiD_key(*nums)
        raise ValueError(f"unknown configuration key {text!r}")


def sigma2_key(u, v):
    return ConfigurationKey("sigma2", (int(u), int(v)))


def phiA_key(u, v):
    u, v = sorted((int(u), int(v)))
    return ConfigurationKey("phiA", (u, v))


def phiB_key(u, v, w):
    return ConfigurationKey("phiB", (int(u), tuple(sorted((int(v), int(w))))))


def phiC_key(u, v, w):
    return ConfigurationKey("phiC", (int(u), tuple(sorted((int(v), int(w))))))


def phiD_key(u, v, w):
    return ConfigurationKey("phiD", (int(u), int(v), int(w)))


def all_keys(B: int) -> list[ConfigurationKey]:
    """Every key for ``B`` blocks, in a fixed order."""
    r = range(1, B + 1)
    keys = [sigma2_key(u, v) for u, v in product(r, r)]
    keys += [phiA_key(u, v) for u in r for v in r if u <= v]
    keys += [phiB_key(u, v, w) for u in r for v in r for w in r if v <= w]
    keys += [phiC_key(u, v, w) for u in r for v in r for w in r if v <= w]
    keys += [phiD_key(u, v, w) for u, v, w in product(r, r, r)]
    return keys


@dataclass(frozen=True)
class BlockAssignment:
    """Block label (1..B) for each actor."""

    g: np.ndarray
    B: int

    def __post_init__(self):
        g = np.asarray(self.g, dtype=int).reshape(-1)
        if self.B < 1:
            raise ValidationError("B must be at least 1")
        if g.size and (g.min() < 1 or g.max() > self.B):
            raise ValidationError(f"block labels must lie in 1..{self.B}")
        missing = sorted(set(range(1, self.B + 1)) - set(g.tolist()))
        if missing:
            raise ValidationError(f"declared blocks have no actors: {missing}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def from_labels(cls, labels) -> "BlockAssignment":
        labels = np.asarray(labels, dtype=int)
        return cls(labels, int(labels.max()))

    @classmethod
    def single(cls, n: int) -> "BlockAssignment":
        return cls(np.ones(n, dtype=int), 1)

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.B + 1)[1:]

    def onehot(self) -> np.ndarray:
        G = np.zeros((self.n, self.B))
        G[np.arange(self.n), self.g - 1] = 1.0
        return G

    def permute(self, perm) -> "BlockAssignment":
        """Labels after relabeling actor ``a`` as ``perm[a]``."""
        g = np.empty_like(self.g)
        g[np.asarray(perm)] = self.g
        return BlockAssignment(g, self.B)


STRUCTURAL_ZERO = None


def classify_pair(d1, d2, g: BlockAssignment):
    """Configuration key of two dyads, or ``STRUCTURAL_ZERO`` (``None``).

    Dyads are ``(sender, receiver)`` tuples of 0-based actor indices.
    """
    i, j = d1
    k, l = d2
    lab = g.g
    if i == k and j == l:
        return sigma2_key(lab[i], lab[j])
    if i == l and j == k:
        return phiA_key(lab[i], lab[j])
    if i == k:
        return phiB_key(lab[i], lab[j], lab[l])
    if j == l:
        return phiC_key(lab[j], lab[i], lab[k])
    if i == l:
        # [(i,j),(k,i)]: shared actor i sends the first dyad
        return phiD_key(lab[i], lab[j], lab[k])
    if j == k:
        # [(i,j),(j,l)] is the mirror of [(j,l),(i,j)]
        return phiD_key(lab[j], lab[l], lab[i])
    return STRUCTURAL_ZERO


# ---------------------------------------------------------------------------
# closed-form configuration sums
# ---------------------------------------------------------------------------


def _raw_sums(U: np.ndarray, V: np.ndarray, G: np.ndarray) -> dict[str, np.ndarray]:
    """Sums of ``U[e1] * V[e2]`` over each configuration set, by ordered blocks.

    ``U`` and ``V`` are stacks of ``n x n`` dyad matrices with zero diagonal,
    shapes ``(a, n, n)`` and ``(b, n, n)``. Returns arrays with leading
    ``(a, b)`` axes followed by ordered block axes:

    * sigma2[u,v]  = sum_{g_i=u, g_j=v} U_ij V_ij
    * phiA[u,v]    = sum_{g_i=u, g_j=v} U_ij V_ji
    * phiB[u,v,w]  = sum_{g_i=u, g_j=v, g_l=w, j!=l} U_ij V_il
    * phiC[u,v,w]  = sum_{g_j=u, g_i=v, g_k=w, i!=k} U_ij V_kj
    * phiD[u,v,w]  = sum_{g_i=u, g_j=v, g_k=w, j!=k} U_ij V_ki
    """
    UT = np.swapaxes(U, -1, -2)
    VT = np.swapaxes(V, -1, -2)
    hadamard = np.einsum("aij,bij->abij", U, V)
    recip = np.einsum("aij,bji->abij", U, V)
    s2 = np.einsum("iu,abij,jv->abuv", G, hadamard, G)
    rA = np.einsum("iu,abij,jv->abuv", G, recip, G)

    UG = U @ G  # (a, n, B): row sums of U by receiver block
    VG = V @ G
    UTG = UT @ G  # column sums of U by sender block
    VTG = VT @ G
    eye = np.eye(G.shape[1])

    rowdiag = np.einsum("iu,abij,jv->abuv", G, hadamard, G)
    pB = np.einsum("iu,aiv,biw->abuvw", G, UG, VG)
    pB -= np.einsum("abuv,vw->abuvw", rowdiag, eye)

    coldiag = np.einsum("ju,abij,iv->abuv", G, hadamard, G)
    pC = np.einsum("iu,aiv,biw->abuvw", G, UTG, VTG)
    pC -= np.einsum("abuv,vw->abuvw", coldiag, eye)

    pD = np.einsum("iu,aiv,biw->abuvw", G, UG, VTG)
    pD -= np.einsum("abuv,vw->abuvw", rA, eye)
    return {"sigma2": s2, "phiA": rA, "phiB": pB, "phiC": pC, "phiD": pD}


def _keyed(raw: dict[str, np.ndarray], B: int) -> dict[ConfigurationKey, np.ndarray]:
    """Fold ordered-block sums onto configuration keys (unordered parts merged)."""
    out = {}
    r = range(B)
    for u, v in product(r, r):
        out[sigma2_key(u + 1, v + 1)] = raw["sigma2"][..., u, v]
    for u in r:
        for v in r:
            if u < v:
                out[phiA_key(u + 1, v + 1)] = raw["phiA"][..., u, v] + raw["phiA"][..., v, u]
            elif u == v:
                out[phiA_key(u + 1, u + 1)] = raw["phiA"][..., u, u]
    for name, make in (("phiB", phiB_key), ("phiC", phiC_key)):
        arr = raw[name]
        for u in r:
            for v in r:
                for w in r:
                    if v < w:
                        out[make(u + 1, v + 1, w + 1)] = arr[..., u, v, w] + arr[..., u, w, v]
                    elif v == w:
                        out[make(u + 1, v + 1, v + 1)] = arr[..., u, v, v]
    for u, v, w in product(r, r, r):
        out[phiD_key(u + 1, v + 1, w + 1)] = raw["phiD"][..., u, v, w]
    return out


def _offdiag_ones(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def enumerate_configurations(n: int, g: BlockAssignment) -> dict[ConfigurationKey, int]:
    """Size of every non-empty configuration set ``Phi_{M,q}``.

    Keys whose set is empty (for example a within-block phiB key when the
    block has fewer than three actors) are omitted.
    """
    if g.n != n:
        raise ValidationError("block assignment length does not match n")
    ones = _offdiag_ones(n)[None]
    counts = _keyed(_raw_sums(ones, ones, g.onehot()), g.B)
    out = {}
    for key in all_keys(g.B):
        c = int(round(float(counts[key][0, 0])))
        if c > 0:
            out[key] = c
    return out


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceModel:
    """A fitted (or true) residual covariance model.

    ``kind`` is ``"DC"``, ``"Exchangeable"`` or ``"BlockExchangeable"``.
    DC models keep only the residual vector; the others map
    :class:`ConfigurationKey` to a value, with set sizes in ``counts``.
    """

    kind: str
    n: int
    params: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    block_assignment: BlockAssignment | None = None
    residuals: np.ndarray | None = None

    @property
    def assignment(self) -> BlockAssignment:
        if self.block_assignment is not None:
            return self.block_assignment
        return BlockAssignment.single(self.n)

    def by_config(self) -> dict[str, dict]:
        out = {m: {} for m in CONFIGS}
        for key, val in self.params.items():
            out[key.config][key] = val
        return out

    def to_json(self) -> dict:
        """Plain-dict form keyed by strings such as ``"phiB:(1,{1,2})"``."""
        d = {"kind": self.kind, "n": self.n}
        if self.kind == "DC":
            d["n_residuals"] = int(self.residuals.size)
            return d
        d["params"] = {str(k): float(v) for k, v in self.params.items()}
        d["counts"] = {str(k): int(c) for k, c in self.counts.items()}
        if self.block_assignment is not None:
            d["blocks"] = [int(x) for x in self.block_assignment.g]
        return d


def estimate_dc(fit: RegressionFit) -> CovarianceModel:
    """Dyadic clustering: each overlapping entry is a single residual product."""
    return CovarianceModel("DC", fit.n, residuals=np.array(fit.residuals, dtype=float))


def _block_params(R: np.ndarray, g: BlockAssignment):
    G = g.onehot()
    sums = _keyed(_raw_sums(R[None], R[None], G), g.B)
    ones = _offdiag_ones(R.shape[0])[None]
    counts = _keyed(_raw_sums(ones, ones, G), g.B)
    params, cnt = {}, {}
    for key in all_keys(g.B):
        c = float(counts[key][0, 0])
        if c > 0.5:
            params[key] = float(sums[key][0, 0]) / c
            cnt[key] = int(round(c))
    return params, cnt


def estimate_block(fit: RegressionFit, g: BlockAssignment) -> CovarianceModel:
    """Known-block estimator: each parameter is the mean residual product of its set."""
    if g.n != fit.n:
        raise ValidationError("block assignment length does not match n")
    params, counts = _block_params(fit.residual_matrix(), g)
    kind = "Exchangeable" if g.B == 1 else "BlockExchangeable"
    return CovarianceModel(kind, fit.n, params, counts, g)


def estimate_exchangeable(fit: RegressionFit) -> CovarianceModel:
    """Five-parameter exchangeable estimator (single block)."""
    return estimate_block(fit, BlockAssignment.single(fit.n))


def collapse(model: CovarianceModel) -> dict[str, float]:
    """Count-weighted average of block parameters within each configuration.

    Applied to a block estimate this reproduces the exchangeable estimate
    computed from the same residuals.
    """
    out = {}
    for m in CONFIGS:
        num = sum(model.counts[k] * v for k, v in model.params.items() if k.config == m)
        den = sum(c for k, c in model.counts.items() if k.config == m)
        out[m] = num / den
    return out


# ---------------------------------------------------------------------------
# dense realization
# ---------------------------------------------------------------------------


def _param_tables(model: CovarianceModel, B: int):
    nan = np.nan
    s2 = np.full((B, B), nan)
    pa = np.full((B, B), nan)
    pb = np.full((B, B, B), nan)
    pc = np.full((B, B, B), nan)
    pd = np.full((B, B, B), nan)
    for key, val in model.params.items():
        b = key.blocks
        if key.config == "sigma2":
            s2[b[0] - 1, b[1] - 1] = val
        elif key.config == "phiA":
            pa[b[0] - 1, b[1] - 1] = pa[b[1] - 1, b[0] - 1] = val
        elif key.config in ("phiB", "phiC"):
            t = pb if key.config == "phiB" else pc
            u, (v, w) = b
            t[u - 1, v - 1, w - 1] = t[u - 1, w - 1, v - 1] = val
        else:
            pd[b[0] - 1, b[1] - 1, b[2] - 1] = val
    return s2, pa, pb, pc, pd


def realize_omega(model: CovarianceModel, n: int | None = None, g: BlockAssignment | None = None) -> np.ndarray:
    """Dense ``n(n-1) x n(n-1)`` covariance matrix in canonical dyad order.

    Raises
    ------
    KeyError
        If a configuration occurring under ``(n, g)`` has no parameter.
    """
    n = model.n if n is None else n
    send, recv = canonical_dyads(n)
    i, j = send[:, None], recv[:, None]
    k, l = send[None, :], recv[None, :]
    same = (i == k) & (j == l)
    recip = (i == l) & (j == k)
    cB = (i == k) & ~same
    cC = (j == l) & ~same
    cD1 = (i == l) & ~recip
    cD2 = (j == k) & ~recip
    if model.kind == "DC":
        r = model.residuals
        overlap = same | recip | cB | cC | cD1 | cD2
        return np.where(overlap, np.outer(r, r), 0.0)

    g = model.assignment if g is None else g
    B = g.B
    s2, pa, pb, pc, pd = _param_tables(model, B)
    lab = g.g - 1
    gi, gj, gk, gl = lab[i], lab[j], lab[k], lab[l]
    gi, gj = np.broadcast_to(gi, same.shape), np.broadcast_to(gj, same.shape)
    gk, gl = np.broadcast_to(gk, same.shape), np.broadcast_to(gl, same.shape)
    out = np.zeros(same.shape)
    out = np.where(same, s2[gi, gj], out)
    out = np.where(recip, pa[gi, gj], out)
    out = np.where(cB, pb[gi, gj, gl], out)
    out = np.where(cC, pc[gj, gi, gk], out)
    out = np.where(cD1, pd[gi, gj, gk], out)
    out = np.where(cD2, pd[gj, gl, gi], out)
    if np.isnan(out).any():
        a, b = np.argwhere(np.isnan(out))[0]
        key = classify_pair((send[a], recv[a]), (send[b], recv[b]), g)
        raise KeyError(f"model has no parameter for {key}")
    return out


# ---------------------------------------------------------------------------
# sandwich
# ---------------------------------------------------------------------------


def design_kernels(X: np.ndarray, n: int, g: BlockAssignment) -> dict[ConfigurationKey, np.ndarray]:
    """``p x p`` matrices ``K_q`` with ``X' Omega X = sum_q theta_q K_q``.

    Depends only on the design and the blocks, so Monte Carlo loops with a
    fixed design compute it once.
    """
    Xm = to_matrix(np.asarray(X, dtype=float).T, n)
    raw = _raw_sums(Xm, Xm, g.onehot())
    keyed = _keyed(raw, g.B)
    out = {}
    for key, K in keyed.items():
        if key.config == "phiD":
            K = K + K.T
        out[key] = K
    return out


def meat_from_kernels(params: dict, kernels: dict) -> np.ndarray:
    p = next(iter(kernels.values())).shape[0]
    meat = np.zeros((p, p))
    for key, theta in params.items():
        meat += theta * kernels[key]
    return meat


def dc_meat(X: np.ndarray, residuals: np.ndarray, n: int) -> np.ndarray:
    """``X' Omega_DC X`` summed over overlapping dyad pairs only."""
    W = to_matrix((np.asarray(X, dtype=float) * residuals[:, None]).T, n)
    raw = _raw_sums(W, W, np.ones((n, 1)))
    # phiD contributes both orientations
    d = raw["phiD"][..., 0, 0, 0]
    meat = (raw["sigma2"][..., 0, 0] + raw["phiA"][..., 0, 0]
            + raw["phiB"][..., 0, 0, 0] + raw["phiC"][..., 0, 0, 0] + d + d.T)
    return meat


@dataclass(frozen=True)
class SandwichResult:
    """Sandwich covariance of the OLS coefficients with normal-theory CIs."""

    cov: np.ndarray
    se: np.ndarray
    beta: np.ndarray
    alpha: float

    @property
    def z(self) -> float:
        return float(norm.ppf(1 - self.alpha / 2))

    @property
    def ci_lower(self) -> np.ndarray:
        return self.beta - self.z * self.se

    @property
    def ci_upper(self) -> np.ndarray:
        return self.beta + self.z * self.se


def model_meat(fit: RegressionFit, model: CovarianceModel, kernels=None) -> np.ndarray:
    if model.kind == "DC":
        return dc_meat(fit.X, model.residuals, fit.n)
    if kernels is None:
        kernels = design_kernels(fit.X, fit.n, model.assignment)
    return meat_from_kernels(model.params, kernels)


def sandwich_cov(fit: RegressionFit, model: CovarianceModel, kernels=None) -> np.ndarray:
    """``(X'X)^{-1} X' Omega X (X'X)^{-1}`` without materializing Omega."""
    meat = model_meat(fit, model, kernels)
    V = fit.xtx_inv @ meat @ fit.xtx_inv
    return (V + V.T) / 2


def sandwich(fit: RegressionFit, model: CovarianceModel, alpha: float = 0.05, kernels=None) -> SandwichResult:
    """Sandwich standard errors and ``1 - alpha`` normal confidence intervals.

    Moment-based covariance estimates need not be positive semi-definite; a
    negative coefficient variance raises :class:`NumericalError` instead of
    being projected away.
    """
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    V = sandwich_cov(fit, model, kernels)
    d = np.diag(V)
    if np.any(d < 0):
        k = int(np.flatnonzero(d < 0)[0])
        raise NumericalError(f"sandwich produced negative variance (coefficient {k})")
    return SandwichResult(V, np.sqrt(d), np.array(fit.beta_hat), alpha)


def dense_sandwich_cov(fit: RegressionFit, model: CovarianceModel) -> np.ndarray:
    """Reference path through the dense covariance matrix (small ``n`` only)."""
    omega = realize_omega(model, fit.n, model.assignment if model.kind != "DC" else None)
    return fit.xtx_inv @ fit.X.T @ omega @ fit.X @ fit.xtx_inv


def theorem_gap(fit: RegressionFit, model_B: CovarianceModel, model_E: CovarianceModel) -> np.ndarray:
    """``n * (V_B - V_E)``: scaled gap between block and exchangeable sandwiches."""
    VB = sandwich_cov(fit, model_B)
    VE = sandwich_cov(fit, model_E)
    return fit.n * (VB - VE)
