"""Grouping clients into cohorts.

``cohort`` is the model-parameter pipeline: stack the clients' flattened
parameter vectors, project them onto their leading principal directions,
build a kernel graph over the projections, and cluster its normalized
spectral embedding with k-means. ``primary_cohort`` groups on metadata and
``moment_cohort`` clusters per-client data moments (the IFL baseline).
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .linalg import canonicalize_signs, kmeans, sym_eig, top_k_pairs


class DegenerateGraphError(ValueError):
    """The client similarity graph or its embedding cannot be normalized."""


@dataclass(frozen=True)
class CohortConfig:
    n: int = 4  # principal components kept
    q: int | None = None  # spectral components; None means one per cohort
    sigma: float | str = "auto"
    k_cohorts: int | str = 2
    seed: int = 0
    squared_kernel: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.q is not None and self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.sigma != "auto" and not (isinstance(self.sigma, (int, float)) and self.sigma > 0):
            raise ValueError(f"sigma must be positive or 'auto', got {self.sigma!r}")
        if self.k_cohorts != "auto" and not (isinstance(self.k_cohorts, int) and self.k_cohorts >= 1):
            raise ValueError(f"k_cohorts must be >= 1 or 'auto', got {self.k_cohorts!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CohortAssignment:
    labels: dict[int, int]

    def __post_init__(self):
        used = sorted(set(self.labels.values()))
        if used != list(range(len(used))):
            raise ValueError(f"cohort indices must be 0..k-1 with every cohort non-empty, got {used}")

    @property
    def num_cohorts(self) -> int:
        return len(set(self.labels.values()))

    def members(self, j: int) -> list[int]:
        return sorted(c for c, lab in self.labels.items() if lab == j)

    def cohorts(self) -> list[list[int]]:
        return [self.members(j) for j in range(self.num_cohorts)]

    def label_array(self, client_ids: Sequence[int] | None = None) -> np.ndarray:
        ids = sorted(self.labels) if client_ids is None else client_ids
        return np.array([self.labels[c] for c in ids])

    @classmethod
    def single(cls, client_ids) -> CohortAssignment:
        return cls({int(c): 0 for c in client_ids})

    @classmethod
    def from_labels(cls, client_ids, labels) -> CohortAssignment:
        """Relabel so cohorts are numbered by their first member in id order."""
        pairs = sorted(zip((int(c) for c in client_ids), (int(x) for x in labels)))
        remap: dict[int, int] = {}
        for _, lab in pairs:
            remap.setdefault(lab, len(remap))
        return cls({c: remap[lab] for c, lab in pairs})


def build_param_matrix(updates) -> tuple[list[int], np.ndarray]:
    """Stack flattened client parameter vectors as rows, ordered by client id.

    ``updates`` maps client id to a parameter vector (a ParamVector or any
    1-d array) or is a sequence of ``(client_id, params, ...)`` tuples.
    """
    items = updates.items() if isinstance(updates, Mapping) else ((u[0], u[1]) for u in updates)
    rows = sorted((int(cid), np.asarray(getattr(p, "values", p), dtype=np.float64)) for cid, p in items)
    if len(rows) < 2:
        raise ValueError(f"cohorting needs at least 2 clients, got {len(rows)}")
    lengths = {r.size for _, r in rows}
    if len(lengths) != 1:
        raise ValueError(f"client parameter vectors differ in length: {sorted(lengths)}")
    return [cid for cid, _ in rows], np.stack([r for _, r in rows])


def _row_normalize(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateGraphError(f"{what} row {int(np.argmin(norms))} is all zeros")
    return x / norms[:, None]


def pca_project(x, n: int, method: str = "auto") -> np.ndarray:
    """Project rows of ``x`` onto the top ``n`` eigenvectors of ``Xn^T Xn``.

    ``Xn`` is ``x`` with every row scaled to unit Euclidean length. With
    ``method="dual"`` (the default whenever there are more columns than rows)
    the eigenvectors come from the ``K x K`` Gram matrix ``Xn Xn^T`` instead.
    Components with a numerically zero eigenvalue are dropped to zero columns.
    Each output column is flipped so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    k, d = x.shape
    if k < 2:
        raise ValueError("pca_project needs at least 2 rows")
    if not 1 <= n <= min(k, d):
        raise ValueError(f"n must lie in [1, {min(k, d)}], got {n}")
    xn = _row_normalize(x, "parameter matrix")
    if method == "auto":
        method = "dual" if d > k else "primal"

    if method == "primal":
        vals, z = top_k_pairs(sym_eig(xn.T @ xn), n)
    elif method == "dual":
        vals, w = top_k_pairs(sym_eig(xn @ xn.T), n)
        keep = vals > 1e-12 * max(vals[0], 1e-300)
        z = np.zeros((d, n))
        z[:, keep] = (xn.T @ w[:, keep]) / np.sqrt(vals[keep])
    else:
        raise ValueError(f"unknown PCA method {method!r}")

    keep = vals > 1e-12 * max(vals[0], 1e-300)
    z[:, ~keep] = 0.0
    return canonicalize_signs(x @ z)


def pairwise_distances(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    diff = y[:, None, :] - y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def auto_sigma(y, squared_kernel: bool = False) -> float:
    """Bandwidth that keeps the kernel exponent scale-free.

    With the squared kernel ``exp(-d^2 / 2 sigma^2)`` this is the median
    pairwise distance; with the plain-distance kernel ``exp(-d / 2 sigma^2)``
    it is the square root of that median.
    """
    dist = pairwise_distances(y)
    off = dist[np.triu_indices(dist.shape[0], k=1)]
    med = float(np.median(off)) if off.size else 0.0
    if med <= 0:
        med = float(off.max()) if off.size and off.max() > 0 else 1.0
    return med if squared_kernel else math.sqrt(med)


def build_adjacency(y, sigma: float, squared_kernel: bool = False) -> np.ndarray:
    """Kernel affinity ``A_ij = exp(-||y_i - y_j|| / 2 sigma^2)`` with zero diagonal."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dist = pairwise_distances(y)
    if squared_kernel:
        dist = dist**2
    a = np.exp(-dist / (2.0 * sigma**2))
    np.fill_diagonal(a, 0.0)
    return a


def normalized_laplacian(a, client_ids: Sequence[int] | None = None) -> np.ndarray:
    """``D^{-1/2} A D^{-1/2}`` where ``D`` holds the row sums of ``A``."""
    a = np.asarray(a, dtype=np.float64)
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        i = int(np.argmin(deg))
        who = client_ids[i] if client_ids is not None else i
        raise DegenerateGraphError(f"client {who} is isolated in the similarity graph (zero degree)")
    inv = 1.0 / np.sqrt(deg)
    lap = inv[:, None] * a * inv[None, :]
    return 0.5 * (lap + lap.T)


def spectral_embed(lap, q: int) -> np.ndarray:
    """Top ``q`` eigenvectors of ``lap`` as columns, each row scaled to unit length."""
    lap = np.asarray(lap, dtype=np.float64)
    if not 1 <= q <= lap.shape[0]:
        raise ValueError(f"q must lie in [1, {lap.shape[0]}], got {q}")
    _, s = top_k_pairs(sym_eig(lap), q)
    norms = np.linalg.norm(s, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateGraphError(f"row {int(np.argmin(norms))} of the spectral embedding is zero")
    return s / norms[:, None]


def eigengap_k(values, max_k: int) -> int:
    """Number of clusters maximizing the gap between consecutive sorted eigenvalues."""
    vals = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    max_k = max(1, min(max_k, vals.size - 1))
    gaps = vals[:max_k] - vals[1 : max_k + 1]
    return int(np.argmax(gaps)) + 1


@dataclass
class CohortTrace:
    """Intermediate products of one ``cohort`` call, for inspection."""

    client_ids: list[int]
    projection: np.ndarray
    sigma: float
    adjacency: np.ndarray
    laplacian_spectrum: np.ndarray
    embedding: np.ndarray
    k: int


def cohort(updates, cfg: CohortConfig, trace: bool = False):
    """Partition clients by their parameter vectors; see the module docstring.

    Returns a :class:`CohortAssignment`, or ``(assignment, CohortTrace)`` when
    ``trace`` is set.
    """
    ids, x = build_param_matrix(updates)
    k_clients = len(ids)
    n = min(cfg.n, k_clients, x.shape[1])
    y = pca_project(x, n)

    sigma = auto_sigma(y, cfg.squared_kernel) if cfg.sigma == "auto" else float(cfg.sigma)
    a = build_adjacency(y, sigma, cfg.squared_kernel)
    lap = normalized_laplacian(a, ids)

    spectrum = sym_eig(lap).values
    if cfg.k_cohorts == "auto":
        k = eigengap_k(spectrum, math.ceil(k_clients / 2))
    else:
        k = cfg.k_cohorts
    if k > k_clients:
        raise ValueError(f"k_cohorts={k} exceeds the number of clients ({k_clients})")

    q = min(cfg.q if cfg.q is not None else k, k_clients)
    emb = spectral_embed(lap, q)
    labels = kmeans(emb, k, seed=cfg.seed)
    assignment = CohortAssignment.from_labels(ids, labels)
    if trace:
        return assignment, CohortTrace(ids, y, sigma, a, spectrum, emb, k)
    return assignment


def primary_cohort(meta: Mapping[int, Mapping], keys: Sequence[str]) -> CohortAssignment:
    """Group clients whose selected metadata fields are all equal.

    Cohort indices follow the sorted order of the metadata tuples.
    """
    tuples = {}
    for cid in sorted(meta):
        rec = meta[cid]
        missing = [k for k in keys if k not in rec]
        if missing:
            raise ValueError(f"client {cid} has no metadata field {missing[0]!r}")
        tuples[int(cid)] = tuple(rec[k] for k in keys)
    order = {t: i for i, t in enumerate(sorted(set(tuples.values()), key=lambda t: tuple(map(str, t))))}
    return CohortAssignment({cid: order[t] for cid, t in tuples.items()})


def data_moments(readings) -> np.ndarray:
    """Mean, variance, skewness and kurtosis of each feature column, concatenated.

    Skewness and kurtosis are taken as 0 for a zero-variance feature.
    """
    r = np.asarray(readings, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] == 0:
        raise ValueError("moments of an empty dataset")
    mean = r.mean(axis=0)
    centered = r - mean
    var = np.mean(centered**2, axis=0)
    safe = np.where(var > 0, var, 1.0)
    skew = np.where(var > 0, np.mean(centered**3, axis=0) / safe**1.5, 0.0)
    kurt = np.where(var > 0, np.mean(centered**4, axis=0) / safe**2, 0.0)
    return np.stack([mean, var, skew, kurt], axis=1).ravel()


def moment_cohort(client_readings: Mapping[int, np.ndarray], k: int, seed: int = 0) -> CohortAssignment:
    """IFL baseline: k-means on per-client moment vectors (columns z-scored)."""
    ids = sorted(client_readings)
    if not ids:
        raise ValueError("no client datasets")
    feats = np.stack([data_moments(client_readings[c]) for c in ids])
    sd = feats.std(axis=0)
    feats = np.where(sd > 0, (feats - feats.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)
    labels = kmeans(feats, min(k, len(ids)), seed=seed)
    return CohortAssignment.from_labels(ids, labels)


def refine(outer: CohortAssignment, inner_fn) -> CohortAssignment:
    """Split each cohort of ``outer`` with ``inner_fn(member_ids) -> CohortAssignment``."""
    labels: dict[int, int] = {}
    next_label = 0
    for members in outer.cohorts():
        inner = inner_fn(members)
        for sub in inner.cohorts():
            for c in sub:
                labels[c] = next_label
            next_label += 1
    return CohortAssignment(labels)
