"""Directed network data, design matrices and least squares.

Dyads are stored in receiver-major order: every sender for receiver 0,
then every sender for receiver 1, and so on, skipping self-loops. For
``n = 3`` (0-based actors) that is ``(1,0), (2,0), (0,1), (2,1), (0,2), (1,2)``.
All covariance code indexes residual vectors in this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import NumericalError, ValidationError

RCOND_MIN = 1e-12


def dyad_count(n: int) -> int:
    return n * (n - 1)


def canonical_dyads(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (senders, receivers) for all ordered pairs in canonical order."""
    recv = np.repeat(np.arange(n), n - 1)
    base = np.tile(np.arange(n - 1), n)
    send = base + (base >= recv)
    return send, recv


def dyad_index(i, j, n: int):
    """Position of dyad ``(i, j)`` in the canonical ordering."""
    i = np.asarray(i)
    j = np.asarray(j)
    return j * (n - 1) + i - (i > j)


def to_matrix(vec, n: int) -> np.ndarray:
    """Scatter a canonical dyad vector into an ``n x n`` matrix (zero diagonal).

    Entry ``[i, j]`` holds the value for dyad sender ``i`` -> receiver ``j``.
    A leading batch axis is allowed: shape ``(k, n(n-1))`` gives ``(k, n, n)``.
    """
    vec = np.asarray(vec, dtype=float)
    send, recv = canonical_dyads(n)
    out = np.zeros(vec.shape[:-1] + (n, n))
    out[..., send, recv] = vec
    return out


def from_matrix(mat) -> np.ndarray:
    """Inverse of :func:`to_matrix`."""
    mat = np.asarray(mat)
    n = mat.shape[-1]
    send, recv = canonical_dyads(n)
    return mat[..., send, recv]


@dataclass(frozen=True)
class DirectedNetwork:
    """A complete directed, weighted network with dyad covariates.

    Attributes
    ----------
    n : int
        Number of actors.
    y : ndarray
        Responses, length ``n(n-1)``, canonical order.
    covariates : ndarray
        ``(n(n-1), p-1)`` dyad covariates (no intercept column).
    actor_labels : tuple of str, optional
        Display names for actors ``0..n-1``.
    """

    n: int
    y: np.ndarray
    covariates: np.ndarray
    actor_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ValidationError(f"need at least 3 actors, got {self.n}")
        y = np.asarray(self.y, dtype=float).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1)
        m = dyad_count(self.n)
        if y.shape[0] != m:
            raise ValidationError(f"expected {m} responses for n={self.n}, got {y.shape[0]}")
        if cov.shape[0] != m:
            raise ValidationError(f"expected {m} covariate rows for n={self.n}, got {cov.shape[0]}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(cov))):
            raise ValidationError("responses and covariates must be finite")
        if self.actor_labels is not None and len(self.actor_labels) != self.n:
            raise ValidationError("actor_labels length must equal n")
        y.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariates", cov)

    @property
    def n_dyads(self) -> int:
        return dyad_count(self.n)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def labels(self) -> tuple[str, ...]:
        if self.actor_labels is not None:
            return tuple(self.actor_labels)
        return tuple(str(i + 1) for i in range(self.n))

    @classmethod
    def from_dyads(
        cls,
        senders: Sequence[int],
        receivers: Sequence[int],
        y: Sequence[float],
        covariates=None,
        n: int | None = None,
        actor_labels=None,
    ) -> "DirectedNetwork":
        """Build a network from dyad records in any order.

        Every ordered pair must appear exactly once and no self-loops are
        allowed; all violations are collected into one :class:`ValidationError`.
        """
        send = np.asarray(senders, dtype=int)
        recv = np.asarray(receivers, dtype=int)
        yv = np.asarray(y, dtype=float)
        if covariates is None:
            cov = np.zeros((len(yv), 0))
        else:
            cov = np.asarray(covariates, dtype=float)
            if cov.ndim == 1:
                cov = cov.reshape(-1, 1)
        if n is None:
            n = int(max(send.max(), recv.max())) + 1 if len(send) else 0
        problems = []
        for r, (i, j) in enumerate(zip(send, recv)):
            if i == j:
                problems.append(f"record {r}: self-loop src==dst ({i})")
            elif not (0 <= i < n and 0 <= j < n):
                problems.append(f"record {r}: actor index out of range ({i}, {j})")
        ok = (send != recv) & (send >= 0) & (recv >= 0) & (send < n) & (recv < n)
        idx = dyad_index(send[ok], recv[ok], n)
        seen = np.zeros(dyad_count(n), dtype=int)
        np.add.at(seen, idx, 1)
        for k in np.flatnonzero(seen > 1):
            s, t = canonical_dyads(n)
            problems.append(f"duplicate dyad ({s[k]}, {t[k]})")
        s, t = canonical_dyads(n)
        for k in np.flatnonzero(seen == 0):
            problems.append(f"missing dyad ({s[k]}, {t[k]})")
        if problems:
            raise ValidationError(problems[0], problems)
        order = np.empty(dyad_count(n), dtype=int)
        order[idx] = np.flatnonzero(ok)
        return cls(n=n, y=yv[order], covariates=cov[order], actor_labels=actor_labels)

    def permute_actors(self, perm) -> "DirectedNetwork":
        """Relabel actors: new actor ``perm[a]`` is old actor ``a``."""
        perm = np.asarray(perm)
        send, recv = canonical_dyads(self.n)
        idx = dyad_index(perm[send], perm[recv], self.n)
        y = np.empty_like(self.y)
        cov = np.empty_like(self.covariates)
        y[idx] = self.y
        cov[idx] = self.covariates
        labels = None
        if self.actor_labels is not None:
            labels = [None] * self.n
            for a, lab in enumerate(self.actor_labels):
                labels[perm[a]] = lab
            labels = tuple(labels)
        return DirectedNetwork(self.n, y, cov, labels)


def build_design_matrix(net: DirectedNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix with a leading intercept column, plus the response vector.

    Raises
    ------
    NumericalError
        If the design matrix is not full column rank.
    """
    X = np.column_stack([np.ones(net.n_dyads), net.covariates])
    _check_rank(X)
    return X, net.y.copy()


def _check_rank(X: np.ndarray) -> None:
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] == 0 or sv[-1] / sv[0] < RCOND_MIN:
        raise NumericalError("design matrix not full rank")


@dataclass(frozen=True)
class RegressionFit:
    """OLS fit of a network regression.

    ``residuals`` follow canonical dyad order; ``xtx_inv`` is ``(X'X)^{-1}``.
    """

    n: int
    beta_hat: np.ndarray
    residuals: np.ndarray
    xtx_inv: np.ndarray
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def fitted(self) -> np.ndarray:
        return self.y - self.residuals

    def residual_matrix(self) -> np.ndarray:
        return to_matrix(self.residuals, self.n)


class LeastSquares:
    """Reusable QR factorization of a fixed design.

    Monte Carlo loops refit many responses against one design; this keeps the
    factorization instead of redoing it per draw.
    """

    def __init__(self, X: np.ndarray, n: int):
        X = np.asarray(X, dtype=float)
        _check_rank(X)
        q, r = np.linalg.qr(X)
        sv = np.linalg.svd(r, compute_uv=False)
        if sv[-1] / sv[0] < RCOND_MIN:
            raise NumericalError("design matrix not full rank")
        self.X = X
        self.n = n
        self._q = q
        self._r = r
        rinv = solve_triangular(r, np.eye(r.shape[0]))
        self.xtx_inv = rinv @ rinv.T

    def fit(self, y) -> RegressionFit:
        y = np.asarray(y, dtype=float)
        beta = solve_triangular(self._r, self._q.T @ y)
        resid = y - self.X @ beta
        return RegressionFit(self.n, beta, resid, self.xtx_inv, self.X, y)


def ols_fit(net: DirectedNetwork) -> RegressionFit:
    """Ordinary least squares via QR; residuals in canonical dyad order."""
    X, y = build_design_matrix(net)
    return LeastSquares(X, net.n).fit(y)
