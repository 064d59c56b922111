"""Frozen patch-embedding stage: a deterministic color-histogram embedder,
a binary store for per-patch embedding vectors, CSV import of externally
computed embeddings, and the slide manifest.

The convolutional embedders the slide-scoring pipeline would normally sit
on are deliberately replaced by this pluggable boundary: anything that can
produce a fixed-length vector per patch location can feed the MIL head,
either through ``toy_embed`` or by importing precomputed vectors.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CorruptPayloadError,
    DuplicateCoordinateError,
    UnsupportedVersionError,
)

STORE_MAGIC = b"MILE"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count

TOY_BINS = 4  # per-channel histogram bins; embedding dim is TOY_BINS**3
TOY_DIM = TOY_BINS ** 3


@dataclass
class EmbeddingStore:
    """All patch embeddings of one slide, keyed by patch (x, y) coordinates."""

    slide_id: str
    dim: int
    coords: np.ndarray  # (n, 2) uint32, columns (x, y)
    values: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.uint32).reshape(-1, 2)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        n = self.coords.shape[0]
        if self.values.shape != (n, self.dim):
            raise ValueError(
                f"store values shape {self.values.shape} does not match "
                f"{n} entries of dim {self.dim}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("store contains non-finite embedding values")
        if n:
            uniq = np.unique(self.coords, axis=0)
            if uniq.shape[0] != n:
                raise ValueError("store contains duplicate patch coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def empty(cls, slide_id: str, dim: int) -> "EmbeddingStore":
        return cls(slide_id, dim, np.zeros((0, 2), np.uint32), np.zeros((0, dim), np.float32))


def toy_embed(patch: np.ndarray) -> np.ndarray:
    """Deterministic 64-dim embedding: L1-normalized 4x4x4 RGB histogram.

    A color histogram is enough to make color-separable synthetic slides
    learnable end to end without any neural feature extractor.
    """
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"expected a square RGB patch, got shape {patch.shape}")
    bins = patch.astype(np.int64) // (256 // TOY_BINS)
    flat = (bins[:, :, 0] * TOY_BINS + bins[:, :, 1]) * TOY_BINS + bins[:, :, 2]
    hist = np.bincount(flat.ravel(), minlength=TOY_DIM).astype(np.float64)
    return (hist / flat.size).astype(np.float32)


def _entry_dtype(dim: int) -> np.dtype:
    return np.dtype([("x", "<u4"), ("y", "<u4"), ("v", "<f4", (dim,))])


def write_store(store: EmbeddingStore, path) -> None:
    """Serialize a store to its little-endian binary layout."""
    records = np.empty(len(store), dtype=_entry_dtype(store.dim))
    records["x"] = store.coords[:, 0]
    records["y"] = store.coords[:, 1]
    records["v"] = store.values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store)))
        fh.write(records.tobytes())


def read_store(path, slide_id: str | None = None) -> EmbeddingStore:
    """Read and validate a store file written by write_store."""
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptPayloadError(f"corrupt payload: {p} is shorter than the header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise BadMagicError(f"bad magic: expected {STORE_MAGIC!r}, found {magic!r} in {p}")
    if version != STORE_VERSION:
        raise UnsupportedVersionError(f"version unsupported: {version} in {p}")
    if dim < 1:
        raise CorruptPayloadError(f"corrupt payload: dim {dim} in {p}")
    expected = _HEADER.size + count * (8 + 4 * dim)
    if len(data) != expected:
        raise CorruptPayloadError(
            f"corrupt payload: {p} has {len(data)} bytes, expected {expected}")
    records = np.frombuffer(data, dtype=_entry_dtype(dim), count=count, offset=_HEADER.size)
    coords = np.stack([records["x"], records["y"]], axis=1).astype(np.uint32)
    values = np.array(records["v"], dtype=np.float32).reshape(count, dim)
    if not np.all(np.isfinite(values)):
        raise CorruptPayloadError(f"corrupt payload: non-finite embedding value in {p}")
    if count:
        uniq = np.unique(coords, axis=0)
        if uniq.shape[0] != count:
            raise DuplicateCoordinateError(f"duplicate patch coordinate in {p}")
    return EmbeddingStore(slide_id if slide_id is not None else p.stem, dim, coords, values)


def import_csv(path, slide_id: str) -> EmbeddingStore:
    """Build a store from a CSV with header x,y,f0..f{dim-1}.

    This is the ingestion path for embeddings computed by external models.
    """
    p = Path(path)
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{p}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "x" or header[1] != "y":
            raise ConfigError(f"{p}: header must start with x,y,f0,..., got {header[:3]}")
        dim = len(header) - 2
        expected_feats = [f"f{i}" for i in range(dim)]
        if header[2:] != expected_feats:
            raise ConfigError(f"{p}: feature columns must be f0..f{dim - 1}")

        coords, rows = [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise ConfigError(
                    f"{p}: line {lineno}: expected {dim + 2} fields, got {len(row)}")
            try:
                x, y = int(row[0]), int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ConfigError(f"{p}: line {lineno}: {exc}") from None
            if x < 0 or y < 0:
                raise ConfigError(f"{p}: line {lineno}: negative coordinate")
            if not all(np.isfinite(feats)):
                raise ConfigError(f"{p}: line {lineno}: non-finite embedding value")
            if (x, y) in seen:
                raise ConfigError(f"{p}: line {lineno}: duplicate patch coordinate ({x}, {y})")
            seen.add((x, y))
            coords.append((x, y))
            rows.append(feats)

    coords_arr = np.array(coords, dtype=np.uint32).reshape(-1, 2)
    values_arr = np.array(rows, dtype=np.float32).reshape(-1, dim)
    return EmbeddingStore(slide_id, dim, coords_arr, values_arr)


@dataclass
class SlideRecord:
    """One manifest entry: a labeled slide plus where its data lives."""

    slide_id: str
    her2_score: int
    image_path: Path | None = None
    store_path: Path | None = None
    split: str | None = None

    def __post_init__(self):
        if not (0 <= int(self.her2_score) <= 3):
            raise ConfigError(
                f"slide {self.slide_id}: her2_score must be in 0..3, got {self.her2_score}")
        self.her2_score = int(self.her2_score)


_MANIFEST_KEYS = {"slide_id", "her2_score", "image_path", "store_path", "split"}


def load_manifest(path) -> list[SlideRecord]:
    """Parse the JSON manifest; relative paths resolve against its directory."""
    p = Path(path)
    try:
        entries = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise ConfigError(f"{p}: manifest must be a JSON array of slide records")
    records = []
    seen = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"{p}: entry {i} is not an object")
        unknown = set(entry) - _MANIFEST_KEYS
        if unknown:
            raise ConfigError(f"{p}: entry {i}: unknown keys {sorted(unknown)}")
        for key in ("slide_id", "her2_score"):
            if key not in entry:
                raise ConfigError(f"{p}: entry {i}: missing required field '{key}'")
        sid = str(entry["slide_id"])
        if sid in seen:
            raise ConfigError(f"{p}: duplicate slide_id '{sid}'")
        seen.add(sid)
        rec = SlideRecord(
            slide_id=sid,
            her2_score=entry["her2_score"],
            image_path=(p.parent / entry["image_path"]) if entry.get("image_path") else None,
            store_path=(p.parent / entry["store_path"]) if entry.get("store_path") else None,
            split=entry.get("split"),
        )
        if rec.image_path is None and rec.store_path is None:
            raise ConfigError(f"{p}: entry {i}: needs image_path or store_path")
        records.append(rec)
    return records
