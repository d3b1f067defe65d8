"""Small dense linear algebra kernels used by cohorting and strategy selection.

Everything here works on plain ``numpy`` arrays. The eigensolver is a cyclic
Jacobi method, which is slow compared to LAPACK but simple, deterministic and
more than fast enough for the client-by-client matrices the cohorting
pipeline produces (a few hundred rows at most).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConvergenceError",
    "EigResult",
    "KMeansResult",
    "canonicalize_signs",
    "frobenius_norm",
    "kmeans",
    "kmeans_fit",
    "sym_eig",
    "top_k_pairs",
]


class ConvergenceError(ArithmeticError):
    """An iterative routine hit its iteration cap without converging."""


@dataclass(frozen=True)
class EigResult:
    values: np.ndarray  # descending
    vectors: np.ndarray  # column i pairs with values[i]

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf entries")
    return a


def canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    v = np.array(vectors, dtype=np.float64, copy=True)
    if v.size == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _off_norm(a: np.ndarray) -> float:
    upper = a[np.triu_indices(a.shape[0], k=1)]
    return float(np.sqrt(2.0 * np.sum(upper * upper)))


def sym_eig(m, tol: float = 1e-10, max_sweeps: int = 100, sym_tol: float = 1e-9) -> EigResult:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Sweeps over every upper off-diagonal pair until the off-diagonal Frobenius
    norm drops below ``tol * ||m||_F``. Eigenvalues come back sorted in
    descending order; each eigenvector column is sign-canonicalized so its
    largest-magnitude entry is positive.
    """
    a = _as_matrix(m)
    n, cols = a.shape
    if n != cols:
        raise ValueError(f"sym_eig needs a square matrix, got {n}x{cols}")
    asym = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asym > sym_tol * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError(f"sym_eig needs a symmetric matrix (max asymmetry {asym:.3e})")

    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    threshold = tol * scale

    off = _off_norm(a)
    sweeps = 0
    while off > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps; "
                f"off-diagonal residual {off:.3e} > {threshold:.3e}"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        off = _off_norm(a)

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigResult(values=values[order], vectors=canonicalize_signs(v[:, order]))


def top_k_pairs(e: EigResult, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` largest eigenvalues and their eigenvector columns."""
    if not 1 <= k <= e.dim:
        raise ValueError(f"k must lie in [1, {e.dim}], got {k}")
    return e.values[:k].copy(), e.vectors[:, :k].copy()


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    converged: bool
    history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[j] = points[idx]
        closest = np.minimum(closest, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _repair_empty(labels: np.ndarray, dists: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        own = dists[np.arange(labels.size), labels]
        own = np.where(counts[labels] > 1, own, -np.inf)
        labels[int(np.argmax(own))] = j
    return labels


def _lloyd(points, k, rng, max_iter) -> KMeansResult:
    centroids = _plusplus_init(points, k, rng)
    labels = None
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        dists = _sq_dists(points, centroids)
        new_labels = _repair_empty(np.argmin(dists, axis=1), dists, k)
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        centroids = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(np.sum((points - centroids[labels]) ** 2)))
    return KMeansResult(
        labels=labels,
        centroids=centroids,
        inertia=history[-1],
        n_iter=it,
        converged=converged,
        history=history,
    )


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding, keeping the best of ``n_init`` starts.

    All randomness comes from one generator seeded with ``seed``, so results
    are bit-identical across runs. Nearest-centroid ties go to the lowest
    centroid index; an empty cluster takes the point farthest from its own
    centroid.
    """
    x = _as_matrix(points)
    if k < 1 or k > x.shape[0]:
        raise ValueError(f"k must lie in [1, {x.shape[0]}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        res = _lloyd(x, k, rng, max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10) -> np.ndarray:
    """Cluster the rows of ``points`` into ``k`` groups; returns integer labels."""
    return kmeans_fit(points, k, seed=seed, max_iter=max_iter, n_init=n_init).labels
