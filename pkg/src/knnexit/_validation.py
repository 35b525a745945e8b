"""Input validation helpers used by the estimators and lower-level modules."""

from __future__ import annotations

import numpy as np


def as_key_vector(x, dim: int | None = None, name: str = "embedding") -> np.ndarray:
    """Coerce to a 1-D float32 vector, checking finiteness and dimension."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite components")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dim {arr.shape[0]}, expected {dim}")
    return arr


def as_key_matrix(keys, dim: int | None = None, name: str = "keys") -> np.ndarray:
    """Stack a sequence of embeddings into an (n, dim) float32 matrix."""
    if isinstance(keys, np.ndarray) and keys.ndim == 2:
        mat = np.ascontiguousarray(keys, dtype=np.float32)
    else:
        rows = list(keys)
        if not rows:
            raise ValueError(f"{name} must contain at least one embedding")
        first = as_key_vector(rows[0], dim=dim, name=f"{name}[0]")
        mat = np.empty((len(rows), first.shape[0]), dtype=np.float32)
        mat[0] = first
        for i, row in enumerate(rows[1:], start=1):
            mat[i] = as_key_vector(row, dim=first.shape[0], name=f"{name}[{i}]")
    if mat.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one embedding")
    if not np.isfinite(mat).all():
        raise ValueError(f"{name} contains non-finite components")
    if dim is not None and mat.shape[1] != dim:
        raise ValueError(f"{name} has dim {mat.shape[1]}, expected {dim}")
    return mat


def check_layer(layer: int, num_layers: int) -> int:
    """Validate a 1-based layer index against the model depth."""
    layer = int(layer)
    if not 1 <= layer <= num_layers:
        raise ValueError(f"layer {layer} out of range [1, {num_layers}]")
    return layer


def check_prob(prob: float) -> float:
    """Validate a correct-class confidence in (0, 1]."""
    prob = float(prob)
    if not 0.0 < prob <= 1.0:
        raise ValueError(f"prob must be in (0, 1], got {prob}")
    return prob
