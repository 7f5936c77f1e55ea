"""Latent block detection from regression residuals.

Each actor gets five empirical distributions of residual products, one per
configuration in which it is the shared actor. Actors whose distributions
look alike (small two-sample KS distance) end up in the same block after
spectral clustering of a KNN similarity graph.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from numba import njit
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components

from ._rng import make_rng
from .covest import CONFIGS, BlockAssignment
from .exceptions import ValidationError
from .netcore import RegressionFit

EIG_TOL = 1e-10
KMEANS_RESTARTS = 25
MAX_PERM_BLOCKS = 8


@dataclass(frozen=True)
class ResidualProductSets:
    """Per-actor residual products, one sorted ``(n, size)`` array per configuration.

    Row ``i`` of ``sets["phiB"]`` holds ``r_ij * r_ik`` over ordered ``j != k``,
    both different from ``i``. With compression each row is replaced by
    ``m`` empirical quantiles.
    """

    n: int
    sets: dict
    compressed: int | None = None

    def __getitem__(self, config: str) -> np.ndarray:
        return self.sets[config]

    def sizes(self) -> dict[str, int]:
        return {m: self.sets[m].shape[1] for m in CONFIGS}


def _offdiag_rows(M: np.ndarray) -> np.ndarray:
    """Row ``i`` of ``M`` with entry ``i`` dropped, shape ``(n, n-1)``."""
    n = M.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return M[mask].reshape(n, n - 1)


def _compress(sorted_rows: np.ndarray, m: int) -> np.ndarray:
    size = sorted_rows.shape[1]
    probs = (np.arange(m) + 0.5) / m
    idx = np.minimum(np.ceil(probs * size).astype(int) - 1, size - 1)
    return sorted_rows[:, np.maximum(idx, 0)]


def residual_product_sets(fit_or_residuals, n: int | None = None, compress: int | None = None) -> ResidualProductSets:
    """Collect the per-actor residual-product multisets.

    Parameters
    ----------
    fit_or_residuals : RegressionFit or array_like
        A fit, or a canonical residual vector (then ``n`` is required).
    compress : int, optional
        Replace each multiset by this many evenly spaced quantiles.
    """
    if isinstance(fit_or_residuals, RegressionFit):
        R = fit_or_residuals.residual_matrix()
        n = fit_or_residuals.n
    else:
        from .netcore import to_matrix

        if n is None:
            raise ValidationError("n is required with a raw residual vector")
        R = to_matrix(fit_or_residuals, n)
    if n < 3:
        raise ValidationError("need at least 3 actors")
    out_r = _offdiag_rows(R)  # r_ij, j != i
    in_r = _offdiag_rows(R.T)  # r_ji, j != i
    pair_mask = ~np.eye(n - 1, dtype=bool)

    def outer(a, b):
        return (a[:, :, None] * b[:, None, :])[:, pair_mask]

    sets = {
        "sigma2": np.concatenate([out_r**2, in_r**2], axis=1),
        "phiA": out_r * in_r,
        "phiB": outer(out_r, out_r),
        "phiC": outer(in_r, in_r),
        "phiD": outer(out_r, in_r),
    }
    for m in CONFIGS:
        s = np.sort(sets[m], axis=1)
        if compress:
            s = _compress(s, int(compress))
        sets[m] = s
    return ResidualProductSets(n, sets, int(compress) if compress else None)


def ks_statistic(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov distance ``sup_x |F_a(x) - F_b(x)|``."""
    a = np.sort(np.asarray(sample_a, dtype=float).ravel())
    b = np.sort(np.asarray(sample_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("KS statistic needs two nonempty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


@njit(cache=True)
def _ks_sorted(a, b):
    na = a.shape[0]
    nb = b.shape[0]
    i = 0
    j = 0
    best = 0.0
    while i < na and j < nb:
        x = a[i] if a[i] <= b[j] else b[j]
        while i < na and a[i] == x:
            i += 1
        while j < nb and b[j] == x:
            j += 1
        d = abs(i / na - j / nb)
        if d > best:
            best = d
    return best


@njit(cache=True)
def _ks_matrix(rows):
    n = rows.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = _ks_sorted(rows[i], rows[j])
            out[i, j] = d
            out[j, i] = d
    return out


def ks_matrix(sorted_rows: np.ndarray) -> np.ndarray:
    """Pairwise KS distances between the sorted rows of ``sorted_rows``."""
    return _ks_matrix(np.ascontiguousarray(sorted_rows, dtype=float))


def similarity_matrix(sets: ResidualProductSets) -> np.ndarray:
    """``s_ij = 1 - mean_M KS(R_{M,i}, R_{M,j})`` with unit diagonal."""
    total = np.zeros((sets.n, sets.n))
    for m in CONFIGS:
        total += ks_matrix(sets[m])
    S = 1.0 - total / len(CONFIGS)
    np.fill_diagonal(S, 1.0)
    return np.clip(S, 0.0, 1.0)


def default_k(n: int, frac: float = 0.2) -> int:
    return max(1, int(round(frac * n)))


def knn_graph(S: np.ndarray, K: int) -> np.ndarray:
    """Symmetric KNN graph weighted by similarity.

    Actor ``j`` is a neighbor of ``i`` when ``s_ij`` is at least the ``K``-th
    largest similarity in row ``i``; ties at that value are all kept. An edge
    is kept when either end lists the other.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if not 1 <= K <= n - 1:
        raise ValidationError(f"K must lie in 1..{n - 1}")
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    kth = -np.sort(-off, axis=1)[:, K - 1]
    nbr = off >= kth[:, None]
    keep = nbr | nbr.T
    W = np.where(keep, S, 0.0)
    np.fill_diagonal(W, 0.0)
    return W


def laplacian(W: np.ndarray) -> np.ndarray:
    """Unnormalized graph Laplacian ``D - W``."""
    W = np.asarray(W, dtype=float)
    return np.diag(W.sum(axis=1)) - W


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    vecs = vecs.copy()
    for c in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, c]) > EIG_TOL)
        if nz.size and vecs[nz[0], c] < 0:
            vecs[:, c] *= -1
    return vecs


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    # greedy k-means++: sample a few candidates, keep the best
    n_trials = 2 + int(np.log(k))
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            cand = rng.integers(n, size=n_trials)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.random(n_trials) * tot)
            cand = np.minimum(cand, n - 1)
        best, best_pot, best_d2 = None, np.inf, None
        for c in cand:
            nd2 = np.minimum(d2, np.sum((X - X[c]) ** 2, axis=1))
            pot = nd2.sum()
            if pot < best_pot:
                best, best_pot, best_d2 = c, pot, nd2
        centers.append(X[best])
        d2 = best_d2
    return np.array(centers)


def _lloyd(X, centers, max_iter=300):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        d = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        for c in range(k):
            if not np.any(new == c):
                # move an empty center to the worst-fit point
                far = int(np.argmax(d[np.arange(X.shape[0]), new]))
                new[far] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, inertia


def kmeans(X: np.ndarray, k: int, seed: int = 0, restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Lloyd k-means with seeded greedy k-means++ restarts; best inertia wins."""
    rng = make_rng(seed, 0)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _lloyd(X, _kmeans_pp(X, k, rng))
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def _first_appearance(labels: np.ndarray) -> np.ndarray:
    mapping = {}
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping) + 1
    return np.array([mapping[lab] for lab in labels])


@dataclass
class SpectralResult:
    assignment: BlockAssignment
    eigenvalues: np.ndarray
    embedding: np.ndarray
    n_components: int
    warnings: list = field(default_factory=list)


def spectral_embedding(W: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest ``k`` Laplacian eigenvalues and sign-fixed eigenvectors."""
    vals, vecs = eigh(laplacian(W), subset_by_index=[0, k - 1])
    vals = np.where(np.abs(vals) < EIG_TOL, 0.0, vals)
    return vals, _sign_fix(vecs)


def spectral_cluster_full(W: np.ndarray, B: int, seed: int = 0) -> SpectralResult:
    W = np.asarray(W, dtype=float)
    if B < 2:
        raise ValidationError("spectral clustering needs B >= 2")
    notes = []
    ncomp, _ = connected_components(W > 0, directed=False)
    if ncomp > B:
        msg = f"similarity graph has {ncomp} components, more than B={B}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    vals, emb = spectral_embedding(W, B)
    labels = _first_appearance(kmeans(emb, B, seed))
    return SpectralResult(BlockAssignment(labels, B), vals, emb, int(ncomp), notes)


def spectral_cluster(W: np.ndarray, B: int, seed: int = 0) -> BlockAssignment:
    """Unnormalized spectral clustering into ``B`` blocks (labels by first appearance)."""
    return spectral_cluster_full(W, B, seed).assignment


def eigengap_select(W: np.ndarray, B_max: int) -> tuple[list[int], np.ndarray]:
    """Candidate block counts ranked by the eigengap, plus the eigenvalues used.

    Candidate ``k`` scores ``lambda_{k+1} - lambda_k``; ties go to smaller ``k``.
    """
    n = np.asarray(W).shape[0]
    if not 1 <= B_max < n:
        raise ValidationError(f"B_max must lie in 1..{n - 1}")
    vals = eigh(laplacian(W), eigvals_only=True, subset_by_index=[0, B_max])
    vals = np.maximum.accumulate(np.where(np.abs(vals) < EIG_TOL, 0.0, vals))
    gaps = np.diff(vals)
    order = sorted(range(B_max), key=lambda k: (-gaps[k], k))
    return [k + 1 for k in order], vals


def misclustering(g_true, g_hat) -> float:
    """Smallest share of actors in the wrong block over relabelings of ``g_hat``."""
    a = np.asarray(getattr(g_true, "g", g_true), dtype=int)
    b = np.asarray(getattr(g_hat, "g", g_hat), dtype=int)
    if a.shape != b.shape:
        raise ValidationError("assignments differ in length")
    labels = sorted(set(a.tolist()) | set(b.tolist()))
    B = len(labels)
    if B > MAX_PERM_BLOCKS:
        raise ValidationError(f"misclustering supports at most {MAX_PERM_BLOCKS} blocks")
    idx = {lab: t for t, lab in enumerate(labels)}
    ai = np.array([idx[x] for x in a])
    bi = np.array([idx[x] for x in b])
    conf = np.zeros((B, B), dtype=int)
    np.add.at(conf, (ai, bi), 1)
    best = max(sum(conf[perm[c], c] for c in range(B)) for perm in permutations(range(B)))
    return (a.size - best) / a.size


@dataclass
class DetectionResult:
    """Block estimate plus the diagnostics reported by the ``blocks`` command."""

    assignment: BlockAssignment
    similarity: np.ndarray
    eigenvalues: np.ndarray
    candidates: list
    K: int
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        n = self.similarity.shape[0]
        off = self.similarity[~np.eye(n, dtype=bool)]
        return {
            "B": self.assignment.B,
            "K": self.K,
            "blocks": [int(x) for x in self.assignment.g],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "B_candidates": [int(k) for k in self.candidates],
            "similarity": {
                "min": float(off.min()),
                "mean": float(off.mean()),
                "max": float(off.max()),
            },
            "warnings": list(self.warnings),
        }


def detect_blocks(
    fit: RegressionFit,
    B: int,
    knn_frac: float = 0.2,
    compress: int | None = None,
    seed: int = 0,
    B_max: int | None = None,
) -> DetectionResult:
    """Full pipeline: residual products, KS similarity, KNN graph, spectral clustering."""
    sets = residual_product_sets(fit, compress=compress)
    S = similarity_matrix(sets)
    K = default_k(fit.n, knn_frac)
    W = knn_graph(S, K)
    res = spectral_cluster_full(W, B, seed)
    B_max = min(max(B + 2, 4), fit.n - 1) if B_max is None else B_max
    cands, vals = eigengap_select(W, B_max)
    return DetectionResult(res.assignment, S, vals, cands, K, res.warnings)
