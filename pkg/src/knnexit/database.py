"""Exit-profile database: embedding keys plus per-entry exit records.

Each entry pairs one embedding key with the list of layers at which the
backbone predicted that example correctly, together with the confidence
observed at each such layer. Keys and confidences are quantized to 32-bit
floats at insert time so that the binary round trip is bit-exact.

Binary layout (all integers little-endian):

    magic   "RAEEDB01" (8 bytes)
    u32     version (currently 1)
    u32     n entries
    u32     dim
    u32     num_layers
    u32     metadata pair count, then per pair (sorted by key):
                u32 key length, UTF-8 key, u32 value length, UTF-8 value
    f32     keys, n * dim row-major
    per entry: u32 record count, then (u16 layer, f32 prob) per record
    u64     checksum: zlib.crc32 of every preceding byte, zero-extended

The checksum is verified on load; any mismatch, bad magic, unsupported
version, or truncation raises FormatError.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_key_vector, check_layer, check_prob
from .errors import FormatError

MAGIC = b"RAEEDB01"
VERSION = 1


@dataclass(frozen=True)
class ExitRecord:
    """One (layer, confidence) pair at which an example was predicted correctly."""

    layer: int
    prob: float


@dataclass(frozen=True)
class ExitProfile:
    """All exit records of one database entry, sorted ascending by layer.

    An empty record list is valid: the example was never predicted
    correctly at any layer.
    """

    entry_id: int
    records: tuple[ExitRecord, ...] = ()

    def layers(self) -> tuple[int, ...]:
        return tuple(r.layer for r in self.records)

    def prob_at(self, layer: int) -> float | None:
        """Confidence recorded at `layer`, or None if the layer is absent."""
        for r in self.records:
            if r.layer == layer:
                return r.prob
        return None


@dataclass(frozen=True)
class DatabaseStats:
    n_entries: int
    mean_profile_len: float
    empty_profile_fraction: float
    per_layer_counts: tuple[int, ...]


@dataclass
class ExitDatabase:
    """Holds keys and exit profiles; single writer during build, then frozen.

    Parameters
    ----------
    dim : embedding dimension of every key.
    num_layers : depth m of the backbone; record layers live in [1, m].
    metadata : free-form string map (build seed, metric name, source tag).
    """

    dim: int
    num_layers: int
    metadata: dict[str, str] = field(default_factory=dict)
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[ExitProfile] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be positive")

    def __len__(self) -> int:
        return len(self.values)

    def add_entry(self, key, records) -> int:
        """Append one entry; returns its id (== previous size).

        Records may arrive in any order and are stored sorted ascending by
        layer. Duplicate layers are rejected rather than merged: the
        collection loop emits at most one record per layer, so a duplicate
        signals caller error.
        """
        vec = as_key_vector(key, dim=self.dim, name="key")
        clean: list[ExitRecord] = []
        seen: set[int] = set()
        for rec in records:
            layer = check_layer(rec.layer, self.num_layers)
            prob = check_prob(rec.prob)
            if layer in seen:
                raise ValueError(f"duplicate layer {layer} in records")
            seen.add(layer)
            # f32 quantization keeps the serialize/deserialize round trip exact
            clean.append(ExitRecord(layer, float(np.float32(prob))))
        clean.sort(key=lambda r: r.layer)
        entry_id = len(self.values)
        self.keys.append(vec)
        self.values.append(ExitProfile(entry_id, tuple(clean)))
        return entry_id

    def get_profile(self, entry_id: int) -> ExitProfile:
        if not 0 <= entry_id < len(self.values):
            raise IndexError(f"entry_id {entry_id} out of range [0, {len(self.values)})")
        return self.values[entry_id]

    def key_matrix(self) -> np.ndarray:
        """All keys stacked as an (n, dim) float32 matrix."""
        if not self.keys:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.vstack(self.keys)

    def stats(self) -> DatabaseStats:
        n = len(self.values)
        counts = [0] * self.num_layers
        total = 0
        empty = 0
        for profile in self.values:
            if not profile.records:
                empty += 1
            total += len(profile.records)
            for rec in profile.records:
                counts[rec.layer - 1] += 1
        return DatabaseStats(
            n_entries=n,
            mean_profile_len=total / n if n else 0.0,
            empty_profile_fraction=empty / n if n else 0.0,
            per_layer_counts=tuple(counts),
        )


def serialize(db: ExitDatabase) -> bytes:
    """Encode a database to its versioned binary form (deterministic)."""
    parts = [MAGIC, struct.pack("<IIII", VERSION, len(db), db.dim, db.num_layers)]
    meta = sorted(db.metadata.items())
    parts.append(struct.pack("<I", len(meta)))
    for key, value in meta:
        kb = key.encode("utf-8")
        vb = value.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<I", len(vb)))
        parts.append(vb)
    parts.append(db.key_matrix().astype("<f4").tobytes())
    for profile in db.values:
        parts.append(struct.pack("<I", len(profile.records)))
        for rec in profile.records:
            parts.append(struct.pack("<Hf", rec.layer, rec.prob))
    payload = b"".join(parts)
    return payload + struct.pack("<Q", zlib.crc32(payload))


class _Reader:
    """Cursor over a byte stream that raises FormatError on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated stream: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def deserialize(data: bytes) -> ExitDatabase:
    """Decode a database, verifying magic, version, checksum, and invariants."""
    r = _Reader(data)
    magic = r.take(8)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    n = r.u32()
    dim = r.u32()
    num_layers = r.u32()
    if dim < 1 or num_layers < 1:
        raise FormatError(f"invalid header: dim={dim}, num_layers={num_layers}")

    metadata: dict[str, str] = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        metadata[key] = r.take(r.u32()).decode("utf-8")

    key_bytes = r.take(n * dim * 4)
    keys = np.frombuffer(key_bytes, dtype="<f4").reshape(n, dim).astype(np.float32)

    db = ExitDatabase(dim=dim, num_layers=num_layers, metadata=metadata)
    for i in range(n):
        count = r.u32()
        records = []
        for _ in range(count):
            layer, prob = struct.unpack("<Hf", r.take(6))
            records.append(ExitRecord(int(layer), float(prob)))
        try:
            db.add_entry(keys[i], records)
        except ValueError as exc:
            raise FormatError(f"invariant violation in entry {i}: {exc}") from exc

    stored = struct.unpack("<Q", r.take(8))[0]
    actual = zlib.crc32(data[: r.pos - 8])
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:#x}, computed {actual:#x}")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checksum")
    return db


def save(db: ExitDatabase, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(db))


def load(path) -> ExitDatabase:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
