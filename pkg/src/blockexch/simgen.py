"""Synthetic block-exchangeable networks from a latent-space error model.

Errors follow

    xi_ij = a_i + b_j + z_i' z_j + gamma_{ij} + eps_ij

with sender/receiver effects ``(a_i, b_i)`` correlated within actor, latent
positions ``z_i`` in ``d`` dimensions, a symmetric dyad effect ``gamma`` and
idiosyncratic noise. Every standard deviation may depend on the blocks of
the actors involved, which is what makes the errors block-exchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._rng import make_rng
from .covest import (
    BlockAssignment,
    CovarianceModel,
    enumerate_configurations,
)
from .exceptions import NumericalError, ValidationError
from .netcore import DirectedNetwork, canonical_dyads, from_matrix

FAMILIES = ("binary-match", "abs-diff", "pairwise-normal")
SETTINGS = ("independent", "high-high", "high-low")
BINARY_MATCH_P = 0.75
FAMILY_ALIASES = {"x1": "binary-match", "x2": "abs-diff", "x3": "pairwise-normal"}


@dataclass(frozen=True)
class ErrorModelParams:
    """Per-block standard deviations of the latent-space error model.

    Attributes
    ----------
    sigma_a, sigma_b, sigma_z : ndarray, shape (B,)
        Sender effect, receiver effect and latent-position SDs.
    sigma_gamma : ndarray, shape (B, B)
        Symmetric dyad-effect SD per unordered block pair.
    sigma_eps : float
        Idiosyncratic SD.
    rho : float
        Correlation between an actor's sender and receiver effects.
    d : int
        Latent dimension.
    """

    sigma_a: np.ndarray
    sigma_b: np.ndarray
    sigma_z: np.ndarray
    sigma_gamma: np.ndarray
    sigma_eps: float
    rho: float = 0.5
    d: int = 2

    def __post_init__(self):
        for name in ("sigma_a", "sigma_b", "sigma_z", "sigma_gamma"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        B = self.sigma_a.size
        if not (self.sigma_b.size == self.sigma_z.size == B and self.sigma_gamma.shape == (B, B)):
            raise ValidationError("error-model arrays disagree on the number of blocks")
        if not np.allclose(self.sigma_gamma, self.sigma_gamma.T):
            raise ValidationError("sigma_gamma must be symmetric")
        sds = np.concatenate([self.sigma_a, self.sigma_b, self.sigma_z, self.sigma_gamma.ravel(), [self.sigma_eps]])
        if np.any(sds <= 0):
            raise ValidationError("all standard deviations must be positive")
        if not abs(self.rho) < 1:
            raise ValidationError("rho must lie in (-1, 1)")
        if self.d < 1:
            raise ValidationError("latent dimension d must be at least 1")

    @property
    def B(self) -> int:
        return self.sigma_a.size

    @classmethod
    def from_r_alpha(cls, r: float, alpha: float) -> "ErrorModelParams":
        """Two-block model where ``r`` scales block 2 relative to block 1."""
        a = float(alpha)
        return cls(
            sigma_a=[np.sqrt(2) * a, np.sqrt(2) * r * a],
            sigma_b=[a, r * a],
            sigma_z=[a, r * a],
            sigma_gamma=[[a, np.sqrt(r) * a], [np.sqrt(r) * a, r * a]],
            sigma_eps=a,
            rho=0.5,
            d=2,
        )

    def variance(self, u: int, v: int) -> float:
        """``Var(xi_ij)`` for sender block ``u`` and receiver block ``v`` (1-based)."""
        u, v = u - 1, v - 1
        sz2 = self.sigma_z**2
        return float(
            self.sigma_a[u] ** 2
            + self.sigma_b[v] ** 2
            + self.d * sz2[u] * sz2[v]
            + self.sigma_gamma[u, v] ** 2
            + self.sigma_eps**2
        )

    def to_json(self) -> dict:
        return {
            "sigma_a": self.sigma_a.tolist(),
            "sigma_b": self.sigma_b.tolist(),
            "sigma_z": self.sigma_z.tolist(),
            "sigma_gamma": self.sigma_gamma.tolist(),
            "sigma_eps": float(self.sigma_eps),
            "rho": float(self.rho),
            "d": int(self.d),
        }


def true_covariance(params: ErrorModelParams, g: BlockAssignment) -> CovarianceModel:
    """Exact block-exchangeable covariance implied by ``params`` under ``g``."""
    if g.B != params.B:
        raise ValidationError("block assignment and parameters disagree on B")
    sa, sb = params.sigma_a, params.sigma_b
    sz2 = params.sigma_z**2
    sg = params.sigma_gamma
    cross = params.rho * sa * sb
    counts = enumerate_configurations(g.n, g)
    out = {}
    for key in counts:
        b = key.blocks
        if key.config == "sigma2":
            val = params.variance(*b)
        elif key.config == "phiA":
            u, v = b[0] - 1, b[1] - 1
            val = cross[u] + cross[v] + params.d * sz2[u] * sz2[v] + sg[u, v] ** 2
        elif key.config == "phiB":
            val = sa[b[0] - 1] ** 2
        elif key.config == "phiC":
            val = sb[b[0] - 1] ** 2
        else:
            val = cross[b[0] - 1]
        out[key] = float(val)
    return CovarianceModel("BlockExchangeable", g.n, out, counts, g)


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng)


def sample_error_matrix(params: ErrorModelParams, g: BlockAssignment, rng) -> np.ndarray:
    """One draw of the error matrix, ``n x n`` with zero diagonal."""
    rng = _as_rng(rng)
    n = g.n
    lab = g.g - 1
    sa, sb = params.sigma_a[lab], params.sigma_b[lab]
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    a = sa * e1
    b = sb * (params.rho * e1 + np.sqrt(1 - params.rho**2) * e2)
    z = params.sigma_z[lab][:, None] * rng.standard_normal((n, params.d))
    gam = rng.standard_normal((n, n))
    gam = np.triu(gam, 1)
    gam = (gam + gam.T) * params.sigma_gamma[lab[:, None], lab[None, :]]
    eps = params.sigma_eps * rng.standard_normal((n, n))
    xi = a[:, None] + b[None, :] + z @ z.T + gam + eps
    np.fill_diagonal(xi, 0.0)
    return xi


def sample_errors(params: ErrorModelParams, g: BlockAssignment, seed) -> np.ndarray:
    """Error vector of length ``n(n-1)`` in canonical dyad order."""
    return from_matrix(sample_error_matrix(params, g, seed))


@dataclass(frozen=True)
class CovariateSpec:
    """One of the three covariate families with per-block dispersion.

    ``family`` is ``"binary-match"`` (parameters: match probabilities ``p``
    per block), ``"abs-diff"`` (actor SDs ``a`` per block) or
    ``"pairwise-normal"`` (dyad SDs ``a`` per block pair, ``B x B``).
    """

    family: str
    setting: str
    values: np.ndarray

    def __post_init__(self):
        fam = FAMILY_ALIASES.get(self.family.lower(), self.family.lower())
        if fam not in FAMILIES:
            raise ValidationError(f"unknown covariate family {self.family!r}")
        if self.setting not in SETTINGS:
            raise ValidationError(f"unknown covariate setting {self.setting!r}")
        vals = np.array(self.values, dtype=float)
        if fam == "binary-match":
            if np.any((vals <= 0) | (vals >= 1)):
                raise ValidationError("probabilities must lie in (0, 1)")
        elif np.any(vals <= 0):
            raise ValidationError("covariate SDs must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_setting(cls, family: str, setting: str, scale: float, ratio: float = 2.0) -> "CovariateSpec":
        """Two-block spec driven by one scalar.

        In ``high-high`` block 1 (the high-error block) gets the more
        dispersed covariate, in ``high-low`` block 2 does; ``ratio`` sets how
        much more. For ``binary-match`` ``scale`` is the match probability of
        the more dispersed block, in ``(0.5, 1)``; the other block sits
        ``1/ratio`` of the way from it to 1.
        """
        fam = FAMILY_ALIASES.get(family.lower(), family.lower())
        s = float(scale)
        if fam == "binary-match":
            lo_var = 1 - (1 - s) / ratio
            pair = {"independent": (s, s), "high-high": (s, lo_var), "high-low": (lo_var, s)}[setting]
            return cls(fam, setting, pair)
        if fam == "abs-diff":
            pair = {"independent": (s, s), "high-high": (ratio * s, s), "high-low": (s, ratio * s)}[setting]
            return cls(fam, setting, pair)
        if fam == "pairwise-normal":
            if setting == "independent":
                mat = np.full((2, 2), s)
            else:
                hi = np.array([[ratio, np.sqrt(ratio)], [np.sqrt(ratio), 1.0]]) * s
                mat = hi if setting == "high-high" else hi[::-1, ::-1].copy()
            return cls(fam, setting, mat)
        raise ValidationError(f"unknown covariate family {family!r}")

    def dyad_variance(self, u: int, v: int) -> float:
        """``Var(X_ij)`` given sender block ``u`` and receiver block ``v`` (1-based)."""
        u, v = u - 1, v - 1
        if self.family == "binary-match":
            p = self.values
            pij = p[u] * p[v] + (1 - p[u]) * (1 - p[v])
            return float(pij * (1 - pij))
        if self.family == "abs-diff":
            a = self.values
            return float((a[u] ** 2 + a[v] ** 2) * (1 - 2 / np.pi))
        return float(self.values[u, v] ** 2)

    def to_json(self) -> dict:
        return {"family": self.family, "setting": self.setting, "values": self.values.tolist()}


def sample_covariates(spec: CovariateSpec, g: BlockAssignment, seed) -> np.ndarray:
    """Covariate vector of length ``n(n-1)`` in canonical dyad order."""
    rng = _as_rng(seed)
    lab = g.g - 1
    n = g.n
    send, recv = canonical_dyads(n)
    if spec.family == "binary-match":
        xi = rng.random(n) < spec.values[lab]
        return (xi[send] == xi[recv]).astype(float)
    if spec.family == "abs-diff":
        xi = spec.values[lab] * rng.standard_normal(n)
        return np.abs(xi[send] - xi[recv])
    sd = spec.values[lab[send], lab[recv]]
    return sd * rng.standard_normal(send.size)


def average_nts(spec: CovariateSpec, params: ErrorModelParams, beta1: float) -> float:
    """Noise-to-signal ratio averaged over the four ordered block pairs."""
    vals = []
    for u in range(1, params.B + 1):
        for v in range(1, params.B + 1):
            s2 = params.variance(u, v)
            vals.append(s2 / (s2 + beta1**2 * spec.dyad_variance(u, v)))
    return float(np.mean(vals))


def calibrate_nts(
    family: str,
    setting: str,
    params: ErrorModelParams,
    beta1: float = 1.0,
    target: float = 0.45,
    ratio: float = 2.0,
    r: float | None = None,
    solve_for: str = "covariate",
    covariate_scale: float = 1.0,
):
    """Solve for the free scalar that puts the average NTS at ``target``.

    With ``solve_for="covariate"`` the error model is fixed and the covariate
    scale is found; returns a :class:`CovariateSpec`. With
    ``solve_for="alpha"`` the covariate spec (at ``covariate_scale``) is fixed
    and ``alpha`` of the two-block ``r`` model is found; returns
    ``(ErrorModelParams, CovariateSpec)``.

    Raises
    ------
    NumericalError
        If no root lies in the search bracket (for example ``beta1 = 0``).
    """
    if not 0 < target < 1:
        raise ValidationError("target must lie in (0, 1)")
    fam = FAMILY_ALIASES.get(family.lower(), family.lower())
    if solve_for == "covariate":
        if fam == "binary-match":
            lo, hi = 0.5 + 1e-9, 1 - 1e-9
        else:
            lo, hi = 1e-8, 1e8

        def f(s):
            return average_nts(CovariateSpec.from_setting(fam, setting, s, ratio), params, beta1) - target

        root = _bracketed_root(f, lo, hi)
        return CovariateSpec.from_setting(fam, setting, root, ratio)
    if solve_for == "alpha":
        if r is None:
            raise ValidationError("r is required when solving for alpha")
        spec = CovariateSpec.from_setting(fam, setting, covariate_scale, ratio)

        def f(a):
            return average_nts(spec, ErrorModelParams.from_r_alpha(r, a), beta1) - target

        root = _bracketed_root(f, 1e-8, 1e4)
        return ErrorModelParams.from_r_alpha(r, root), spec
    raise ValidationError(f"solve_for must be 'covariate' or 'alpha', got {solve_for!r}")


def calibrate_setting(
    family: str,
    setting: str,
    r: float,
    alpha1: float = 1.0,
    beta1: float = 1.0,
    target: float = 0.45,
    ratio: float = 2.0,
) -> tuple[ErrorModelParams, CovariateSpec]:
    """Error model and covariate spec for one simulation setting.

    Continuous families keep ``alpha1`` and solve for the covariate scale.
    A binary covariate has variance at most 1/4, too little to reach the
    target against unit-scale errors, so for ``binary-match`` the match
    probability is fixed at ``BINARY_MATCH_P`` and ``alpha`` is solved for.
    """
    fam = FAMILY_ALIASES.get(family.lower(), family.lower())
    if fam == "binary-match":
        return calibrate_nts(fam, setting, None, beta1, target, ratio, r=r, solve_for="alpha",
                             covariate_scale=BINARY_MATCH_P)
    params = ErrorModelParams.from_r_alpha(r, alpha1)
    return params, calibrate_nts(fam, setting, params, beta1, target, ratio)


def _bracketed_root(f, lo, hi):
    flo, fhi = f(lo), f(hi)
    if not np.isfinite(flo) or not np.isfinite(fhi) or flo * fhi > 0:
        raise NumericalError("no root of the NTS equation in the search bracket")
    return brentq(f, lo, hi, xtol=1e-12, rtol=1e-12, maxiter=500)


def equal_blocks(n: int, B: int = 2, rng=None) -> BlockAssignment:
    """Equal-size blocks; shuffled over actors when ``rng`` is given."""
    sizes = [n // B + (1 if k < n % B else 0) for k in range(B)]
    return blocks_from_sizes(sizes, rng)


def blocks_from_sizes(sizes, rng=None) -> BlockAssignment:
    g = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    if rng is not None:
        g = _as_rng(rng).permutation(g)
    return BlockAssignment(g, len(sizes))


@dataclass(frozen=True)
class SimulatedNetwork:
    """A generated network plus everything needed to score estimators on it."""

    network: DirectedNetwork
    g: BlockAssignment
    beta: np.ndarray
    truth: CovarianceModel
    censored: np.ndarray | None = field(default=None, repr=False)

    def truth_json(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "blocks": [int(x) for x in self.g.g],
            "covariance": self.truth.to_json()["params"],
            "counts": self.truth.to_json()["counts"],
        }


def generate_network(
    g: BlockAssignment,
    beta,
    spec: CovariateSpec,
    params: ErrorModelParams,
    seed: int,
    censor: bool = False,
) -> SimulatedNetwork:
    """``y = beta0 + beta1 * X + xi`` on the complete directed network.

    With ``censor`` responses below zero are set to zero and flagged.
    """
    beta = np.asarray(beta, dtype=float)
    x = sample_covariates(spec, g, make_rng(seed, 0))
    xi = sample_errors(params, g, make_rng(seed, 1))
    y = beta[0] + beta[1] * x + xi
    flags = None
    if censor:
        flags = y < 0
        y = np.where(flags, 0.0, y)
    net = DirectedNetwork(g.n, y, x[:, None])
    return SimulatedNetwork(net, g, beta, true_covariance(params, g), flags)
