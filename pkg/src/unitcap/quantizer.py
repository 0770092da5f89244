"""K-means codebook learning and unit assignment for feature sequences.

``kmeans_fit`` is plain Lloyd iteration with distance-squared-weighted
seeding and farthest-point repair of empty clusters. Everything is
deterministic given the seed: the same seed yields a bit-identical
codebook on one platform. Assignment is a pure per-frame argmin, so it
may be computed in parallel over frames without changing the result.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import Codebook, DataFormatError, FeatureSequence, UnitSequence, dedup
from .validation import check_matrix

__all__ = [
    "kmeans_fit",
    "assign",
    "encode_speech",
    "unit_rate",
    "nearest_units",
    "UnitKMeans",
    "write_features",
    "read_features",
    "FEATURES_MAGIC",
]

FEATURES_MAGIC = b"UFM1"
_FEATURES_HEADER = struct.Struct("<4sII")

DEFAULT_UNITS = 200  # speech-unit vocabulary used at full scale
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class LloydResult:
    centroids: np.ndarray  # float64, (k, dim)
    labels: np.ndarray
    inertia: float
    inertia_trace: np.ndarray  # inertia after init, then after each iteration
    n_iter: int


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences, not the expanded |x|^2 - 2xc + |c|^2 form: keeps
    # exact zeros exact and ties reproducible against a brute-force scan
    diff = points[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def nearest_units(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row, ties broken toward the lowest id."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    n, k = points.shape[0], centroids.shape[0]
    out = np.empty(n, dtype=np.int64)
    # bound the (rows, k, dim) difference cube to ~32 MB per chunk
    rows_per_chunk = max(1, 4_000_000 // max(1, k * centroids.shape[1]))
    for start in range(0, n, rows_per_chunk):
        stop = min(n, start + rows_per_chunk)
        d = _pairwise_sq_dists(points[start:stop], centroids)
        out[start:stop] = np.argmin(d, axis=1)
    return out


def _kmeanspp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]), dtype=np.float64)
    idx = int(rng.integers(n))
    centers[0] = data[idx]
    d2 = np.einsum("nd,nd->n", data - centers[0], data - centers[0])
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = data[idx]
        diff = data - centers[j]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return centers


def lloyd(
    data: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> LloydResult:
    """Run Lloyd iterations in float64 and return centroids plus the inertia trace.

    The trace starts with the inertia of the seeded centroids and appends one
    value per iteration; it is nonincreasing. Iteration stops at ``max_iters``
    or when the relative inertia improvement drops below ``tol``.
    """
    data = check_matrix(data, "data")
    n = data.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if tol < 0:
        raise ValueError(f"tol must be nonnegative, got {tol}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(data, k, rng)

    def _inertia_and_labels(cs: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        lab = np.empty(n, dtype=np.int64)
        dmin = np.empty(n, dtype=np.float64)
        rows = max(1, 4_000_000 // max(1, k * data.shape[1]))
        for start in range(0, n, rows):
            stop = min(n, start + rows)
            d = _pairwise_sq_dists(data[start:stop], cs)
            lab[start:stop] = np.argmin(d, axis=1)
            dmin[start:stop] = d[np.arange(stop - start), lab[start:stop]]
        return float(dmin.sum()), lab, dmin

    inertia, labels, dmin = _inertia_and_labels(centers)
    trace = [inertia]
    n_iter = 0
    for _ in range(max_iters):
        # repair empty clusters before the mean update: each empty cluster
        # captures the point currently farthest from its assigned centroid
        counts = np.bincount(labels, minlength=k)
        avail = dmin.copy()
        while (counts == 0).any():
            empty = int(np.argmin(counts))
            far = int(np.argmax(avail))
            counts[labels[far]] -= 1
            labels[far] = empty
            counts[empty] += 1
            avail[far] = -1.0
        new_centers = np.empty_like(centers)
        for j in range(k):
            new_centers[j] = data[labels == j].mean(axis=0)
        centers = new_centers
        n_iter += 1
        inertia, labels, dmin = _inertia_and_labels(centers)
        trace.append(inertia)
        prev = trace[-2]
        improvement = (prev - inertia) / prev if prev > 0 else prev - inertia
        if improvement < tol:
            break
    return LloydResult(centers, labels, inertia, np.asarray(trace), n_iter)


def kmeans_fit(
    data,
    k: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Codebook:
    """Learn a K-entry codebook over the rows of ``data``."""
    return Codebook(lloyd(data, k, seed=seed, max_iters=max_iters, tol=tol).centroids)


def assign(cb: Codebook, feats: FeatureSequence) -> UnitSequence:
    """Quantize every frame to its nearest centroid (squared Euclidean).

    Ties go to the lowest centroid id. The output vocabulary is the
    codebook size; the sequence is not deduplicated.
    """
    if feats.dim != cb.dim:
        raise ValueError(f"feature dim {feats.dim} != codebook dim {cb.dim}")
    if feats.num_frames == 0:
        return UnitSequence((), cb.k)
    tokens = nearest_units(feats.frames, cb.centroids)
    return UnitSequence(tuple(int(t) for t in tokens), cb.k)


def encode_speech(feats: FeatureSequence, cb: Codebook) -> UnitSequence:
    """Assign then remove sequential repetitions: the unit extraction pipeline."""
    return dedup(assign(cb, feats))


def unit_rate(sample_rate_hz: float, downsample_factor: int) -> float:
    """Pre-dedup unit rate implied by downsampling the signal by ``downsample_factor``."""
    if not sample_rate_hz > 0:
        raise ValueError(f"sample_rate_hz must be positive, got {sample_rate_hz}")
    factor = int(downsample_factor)
    if factor < 1:
        raise ValueError(f"downsample_factor must be >= 1, got {downsample_factor}")
    return sample_rate_hz / factor


class UnitKMeans(BaseEstimator):
    """Codebook learner with the familiar fit/predict estimator surface.

    Parameters mirror :func:`kmeans_fit`; fitted state lives in
    ``codebook_``, ``inertia_``, ``inertia_trace_``, ``labels_`` and
    ``n_iter_``.
    """

    def __init__(
        self,
        n_units: int = DEFAULT_UNITS,
        max_iters: int = DEFAULT_MAX_ITERS,
        tol: float = DEFAULT_TOL,
        seed: int = 0,
    ):
        self.n_units = n_units
        self.max_iters = max_iters
        self.tol = tol
        self.seed = seed

    def fit(self, X, y=None) -> "UnitKMeans":
        result = lloyd(X, self.n_units, seed=self.seed, max_iters=self.max_iters, tol=self.tol)
        self.codebook_ = Codebook(result.centroids)
        self.labels_ = result.labels
        self.inertia_ = result.inertia
        self.inertia_trace_ = result.inertia_trace
        self.n_iter_ = result.n_iter
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "codebook_"):
            raise NotFittedError("UnitKMeans must be fitted before predict")
        X = check_matrix(X, "X", allow_empty=True)
        if X.shape[1] != self.codebook_.dim:
            raise ValueError(f"X dim {X.shape[1]} != codebook dim {self.codebook_.dim}")
        return nearest_units(X, self.codebook_.centroids)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_


def write_features(feats: FeatureSequence, sink) -> None:
    """Write a feature matrix as headered binary (frame rate is not stored)."""
    from .core import _open_for_write  # shared path/file handling

    fp, owned = _open_for_write(sink)
    try:
        fp.write(_FEATURES_HEADER.pack(FEATURES_MAGIC, feats.num_frames, feats.dim))
        fp.write(feats.frames.astype("<f4").tobytes())
    finally:
        if owned:
            fp.close()


def read_features(source, frame_rate_hz: float = 50.0) -> FeatureSequence:
    from .core import _open_for_read, _read_exact

    fp, owned = _open_for_read(source)
    try:
        header = _read_exact(fp, _FEATURES_HEADER.size, "feature header")
        magic, t, dim = _FEATURES_HEADER.unpack(header)
        if magic != FEATURES_MAGIC:
            raise DataFormatError(f"bad feature-matrix magic {magic!r}")
        if dim < 1:
            raise DataFormatError("feature matrix has dim 0")
        payload = _read_exact(fp, 4 * t * dim, "feature payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(t, dim).astype(np.float64)
        if not np.isfinite(arr).all():
            raise DataFormatError("feature payload contains non-finite entries")
        return FeatureSequence(arr, frame_rate_hz=frame_rate_hz)
    finally:
        if owned:
            fp.close()


def read_features_text(path, dim_hint: int | None = None, frame_rate_hz: float = 50.0) -> FeatureSequence:
    """Read whitespace-delimited text, one frame per line."""
    arr = np.loadtxt(Path(path), dtype=np.float64, ndmin=2)
    if arr.size == 0:
        arr = arr.reshape(0, dim_hint or 0)
        if arr.shape[1] == 0:
            raise DataFormatError("empty text feature file needs a dimension hint")
    return FeatureSequence(arr, frame_rate_hz=frame_rate_hz)
