"""Binary dataset and embedding-matrix files.

Dataset layout (little-endian):

    magic "RAEEDS01" | u32 n | u32 feature_dim | u32 num_classes
    per example: u32 id | feature_dim * f32 features | u32 label

Embedding-matrix layout:

    magic "RAEEEMB1" | u32 n | u32 dim | n * dim f32 row-major
"""

from __future__ import annotations

import struct

import numpy as np

from ._validation import as_key_matrix, as_key_vector
from .collector import LabeledExample
from .errors import FormatError

DATASET_MAGIC = b"RAEEDS01"
EMBEDDING_MAGIC = b"RAEEEMB1"


def write_dataset(path, examples: list[LabeledExample], num_classes: int) -> None:
    if not examples:
        raise ValueError("examples must be non-empty")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    features = [as_key_vector(ex.input, name=f"examples[{i}].input") for i, ex in enumerate(examples)]
    dim = features[0].shape[0]
    parts = [DATASET_MAGIC, struct.pack("<III", len(examples), dim, num_classes)]
    for ex, feat in zip(examples, features):
        if feat.shape[0] != dim:
            raise ValueError(f"example {ex.id} has dim {feat.shape[0]}, expected {dim}")
        if not 0 <= ex.label < num_classes:
            raise ValueError(f"example {ex.id} label {ex.label} out of range")
        parts.append(struct.pack("<I", ex.id))
        parts.append(feat.astype("<f4").tobytes())
        parts.append(struct.pack("<I", ex.label))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_dataset(path) -> tuple[list[LabeledExample], int]:
    """Load a dataset file; returns (examples, num_classes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:8] != DATASET_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {DATASET_MAGIC!r}")
    if len(data) < 20:
        raise FormatError("truncated dataset header")
    n, dim, num_classes = struct.unpack_from("<III", data, 8)
    record = 4 + dim * 4 + 4
    if len(data) != 20 + n * record:
        raise FormatError(
            f"dataset length {len(data)} does not match header (n={n}, dim={dim})"
        )
    examples = []
    pos = 20
    for _ in range(n):
        (ex_id,) = struct.unpack_from("<I", data, pos)
        feats = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 4).astype(np.float32)
        (label,) = struct.unpack_from("<I", data, pos + 4 + dim * 4)
        if label >= num_classes:
            raise FormatError(f"example {ex_id} label {label} >= num_classes {num_classes}")
        examples.append(LabeledExample(id=int(ex_id), input=feats, label=int(label)))
        pos += record
    return examples, int(num_classes)


def write_embeddings(path, matrix) -> None:
    mat = as_key_matrix(matrix, name="embeddings")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.astype("<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:8] != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {EMBEDDING_MAGIC!r}")
    if len(data) < 16:
        raise FormatError("truncated embedding header")
    n, dim = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + n * dim * 4:
        raise FormatError("embedding matrix length does not match header")
    return np.frombuffer(data, dtype="<f4", count=n * dim, offset=16).reshape(n, dim).astype(np.float32)
