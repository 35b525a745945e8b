"""Exact nearest-neighbor retrieval over database keys.

FlatIndex is the reference implementation: an exhaustive scan over the key
matrix. `brute_force_query` re-implements the same contract as a plain
per-key loop and serves as the differential oracle for FlatIndex.

Both metrics upcast to float64 and reduce each row with the same numpy
reduction, so the two routes agree bit-for-bit on distances.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_key_matrix, as_key_vector
from .errors import FormatError

INDEX_MAGIC = b"RAEEIX01"
INDEX_VERSION = 1

METRICS = ("l2", "cosine")
_METRIC_TAGS = {"l2": 0, "cosine": 1}
_TAG_METRICS = {tag: name for name, tag in _METRIC_TAGS.items()}


@dataclass(frozen=True)
class NeighborHit:
    """One retrieved entry: its id and its distance to the query."""

    entry_id: int
    distance: float


def _check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return metric


def _check_norms(norms: np.ndarray, what: str) -> None:
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} is undefined under the cosine metric")


class FlatIndex(BaseEstimator):
    """Exact flat index over an (n, dim) key matrix.

    Parameters
    ----------
    metric : {"l2", "cosine"}
        "l2" is squared Euclidean distance; "cosine" is 1 - cos(a, b)
        clamped to [0, 2]. Default "l2".

    After `fit`, the index is immutable; concurrent queries are safe.
    Results are sorted ascending by distance with exact ties broken by
    ascending entry id, so retrieval is deterministic across runs.
    """

    def __init__(self, metric: str = "l2"):
        self.metric = metric

    def fit(self, keys, y=None) -> "FlatIndex":
        """Build the index from a sequence of embeddings or an (n, dim) matrix."""
        _check_metric(self.metric)
        mat = as_key_matrix(keys)
        self.keys_ = mat
        self._keys64 = mat.astype(np.float64)
        if self.metric == "cosine":
            norms = np.sqrt((self._keys64 * self._keys64).sum(axis=1))
            _check_norms(norms, "key")
            self._norms64 = norms
        self.n_keys_ = mat.shape[0]
        self.dim_ = mat.shape[1]
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "keys_"):
            raise NotFittedError("FlatIndex must be fitted before querying")

    def query(self, q, k: int) -> list[NeighborHit]:
        """Return the min(k, n) nearest keys to `q`."""
        self._require_fitted()
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        vec = as_key_vector(q, dim=self.dim_, name="query").astype(np.float64)
        if self.metric == "l2":
            diff = self._keys64 - vec
            dists = (diff * diff).sum(axis=1)
        else:
            qnorm = np.sqrt((vec * vec).sum())
            _check_norms(np.array([qnorm]), "query")
            dots = (self._keys64 * vec).sum(axis=1)
            dists = np.clip(1.0 - dots / (self._norms64 * qnorm), 0.0, 2.0)
        # stable sort on distance keeps ties in ascending entry-id order
        order = np.argsort(dists, kind="stable")[: min(k, self.n_keys_)]
        return [NeighborHit(int(i), float(dists[i])) for i in order]

    def save(self, path) -> None:
        """Persist as RAEEIX01: magic, version, metric tag, n, dim, f32 keys, crc."""
        self._require_fitted()
        parts = [
            INDEX_MAGIC,
            struct.pack("<IB", INDEX_VERSION, _METRIC_TAGS[self.metric]),
            struct.pack("<II", self.n_keys_, self.dim_),
            self.keys_.astype("<f4").tobytes(),
        ]
        payload = b"".join(parts)
        with open(path, "wb") as fh:
            fh.write(payload + struct.pack("<Q", zlib.crc32(payload)))


def load_index(path) -> FlatIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:8] != INDEX_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {INDEX_MAGIC!r}")
    header = struct.calcsize("<IBII")
    if len(data) < 8 + header + 8:
        raise FormatError("truncated index stream")
    version, tag, n, dim = struct.unpack_from("<IBII", data, 8)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    if tag not in _TAG_METRICS:
        raise FormatError(f"unknown metric tag {tag}")
    body_end = 8 + header + n * dim * 4
    if len(data) != body_end + 8:
        raise FormatError("index stream has wrong length for its header")
    stored = struct.unpack_from("<Q", data, body_end)[0]
    if stored != zlib.crc32(data[:body_end]):
        raise FormatError("index checksum mismatch")
    keys = np.frombuffer(data, dtype="<f4", count=n * dim, offset=8 + header)
    return FlatIndex(metric=_TAG_METRICS[tag]).fit(keys.reshape(n, dim))


def brute_force_query(keys, q, k: int, metric: str = "l2") -> list[NeighborHit]:
    """Oracle for FlatIndex.query: an exhaustive per-key loop.

    Implements the identical ordering contract (ascending distance, ties by
    ascending entry id, k clamped to n) without sharing the index's
    vectorized scan, so the two can be compared element-wise.
    """
    _check_metric(metric)
    mat = as_key_matrix(keys)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vec = as_key_vector(q, dim=mat.shape[1], name="query").astype(np.float64)
    if metric == "cosine":
        qnorm = np.sqrt((vec * vec).sum())
        _check_norms(np.array([qnorm]), "query")
    scored: list[tuple[float, int]] = []
    for i in range(mat.shape[0]):
        row = mat[i].astype(np.float64)
        if metric == "l2":
            d = row - vec
            dist = float((d * d).sum())
        else:
            norm = np.sqrt((row * row).sum())
            _check_norms(np.array([norm]), "key")
            dist = float(min(max(1.0 - (row * vec).sum() / (norm * qnorm), 0.0), 2.0))
        scored.append((dist, i))
    scored.sort()
    return [NeighborHit(i, dist) for dist, i in scored[: min(k, len(scored))]]
