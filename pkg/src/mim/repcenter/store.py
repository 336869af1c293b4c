"""Versioned key -> multi-modal embedding table.

Vectors are quantised to float32 when written, so every reader (in-process
or over the wire) sees exactly the same values. Writers build a new snapshot
and publish it with a single reference swap; readers grab one snapshot per
call and therefore never observe a half-applied flush.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..encoders import EncoderHead, encode_item

FILE_MAGIC = b"MIMT"
FILE_HEADER = struct.Struct("<4sIHQ")


class StoreMiss(KeyError):
    """Strict-mode lookup of a key the store does not hold."""


def quantize(v) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64).astype("<f4")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Snapshot:
    version: int
    entries: Mapping[int, tuple[np.ndarray, int]]


@dataclass
class LookupResult:
    vectors: np.ndarray
    hit: np.ndarray
    version: int

    def __iter__(self):
        # unpacks as (vectors, hit) so a store or client can serve as a CTR lookup
        yield self.vectors
        yield self.hit


class EmbeddingStore:
    def __init__(self, dim: int) -> None:
        if not 0 < dim < 1 << 16:
            raise ValueError(f"store dim must fit in u16, got {dim}")
        self.dim = dim
        self._snap = Snapshot(0, {})
        self._write_lock = threading.Lock()

    @property
    def version(self) -> int:
        return self._snap.version

    def snapshot(self) -> Snapshot:
        return self._snap

    def __len__(self) -> int:
        return len(self._snap.entries)

    def __contains__(self, key) -> bool:
        return int(key) in self._snap.entries

    def keys(self) -> list[int]:
        return sorted(self._snap.entries)

    def apply(self, updates: Mapping[int, np.ndarray]) -> int:
        """Write a batch atomically and bump the store version; returns the new version."""
        staged = {}
        for key, vec in updates.items():
            q = quantize(vec)
            if q.shape != (self.dim,):
                raise ValueError(f"vector for key {key} has shape {q.shape}, store dim is {self.dim}")
            if not np.all(np.isfinite(q)):
                raise ValueError(f"vector for key {key} is not finite")
            staged[int(key) & 0xFFFFFFFFFFFFFFFF] = q
        with self._write_lock:
            old = self._snap
            version = old.version + 1
            entries = dict(old.entries)
            for k, q in staged.items():
                entries[k] = (q, version)
            self._snap = Snapshot(version, entries)
        return version

    def get(self, key: int) -> np.ndarray | None:
        e = self._snap.entries.get(int(key))
        return None if e is None else e[0]

    def lookup(self, keys: Sequence[int], strict: bool = False) -> LookupResult:
        """Vectors in key order; misses become zero vectors with hit=False (or raise when strict)."""
        snap = self._snap
        out = np.zeros((len(keys), self.dim))
        hit = np.zeros(len(keys), dtype=bool)
        for i, k in enumerate(keys):
            e = snap.entries.get(int(k))
            if e is None:
                if strict:
                    raise StoreMiss(f"key {int(k)} not in store")
                continue
            out[i] = e[0]
            hit[i] = True
        return LookupResult(out, hit, snap.version)

    def __call__(self, keys: Sequence[int]) -> LookupResult:
        return self.lookup(keys)

    # -- persistence: "MIMT" | u32 version | u16 dim | u64 count | sorted (u64 key, dim x f32)

    def record_dtype(self) -> np.dtype:
        return np.dtype([("key", "<u8"), ("vec", "<f4", (self.dim,))])

    def save(self, path: str | Path) -> None:
        snap = self._snap
        keys = sorted(snap.entries)
        rec = np.zeros(len(keys), dtype=self.record_dtype())
        if keys:
            rec["key"] = keys
            rec["vec"] = np.stack([snap.entries[k][0] for k in keys])
        with open(path, "wb") as fh:
            fh.write(FILE_HEADER.pack(FILE_MAGIC, snap.version & 0xFFFFFFFF, self.dim, len(keys)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        blob = Path(path).read_bytes()
        if len(blob) < FILE_HEADER.size:
            raise ValueError(f"{path}: truncated store header")
        magic, version, dim, count = FILE_HEADER.unpack_from(blob)
        if magic != FILE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        store = cls(dim)
        dt = store.record_dtype()
        if len(blob) != FILE_HEADER.size + count * dt.itemsize:
            raise ValueError(f"{path}: expected {count} records")
        rec = np.frombuffer(blob, dtype=dt, count=count, offset=FILE_HEADER.size)
        entries = {}
        for key, vec in zip(rec["key"].tolist(), rec["vec"]):
            v = np.array(vec, dtype="<f4")
            v.flags.writeable = False
            entries[int(key)] = (v, version)
        store._snap = Snapshot(version, entries)
        return store


FeatureFn = Callable[[Sequence[int]], np.ndarray]


def precompute_table(keys: Iterable[int], image_features: FeatureFn, text_features: FeatureFn,
                     head: EncoderHead, store: EmbeddingStore | None = None) -> EmbeddingStore:
    """Encode every catalog item one at a time (the same path as live encoding) into a store."""
    keys = [int(k) for k in keys]
    store = EmbeddingStore(head.mm_dim) if store is None else store
    updates = {}
    if keys:
        img, txt = image_features(keys), text_features(keys)
        for i, k in enumerate(keys):
            updates[k] = encode_item(head, k, img[i], txt[i]).h_mm
    store.apply(updates)
    return store


def lookup(store: EmbeddingStore, keys: Sequence[int], strict: bool = False) -> LookupResult:
    return store.lookup(keys, strict=strict)


class DirectEncoder:
    """Lookup that encodes items live with the head, quantised like a store write."""

    def __init__(self, head: EncoderHead, image_features: FeatureFn, text_features: FeatureFn) -> None:
        self.head, self.image_features, self.text_features = head, image_features, text_features

    def __call__(self, keys: Sequence[int]) -> LookupResult:
        keys = [int(k) for k in keys]
        out = np.zeros((len(keys), self.head.mm_dim))
        if keys:
            img, txt = self.image_features(keys), self.text_features(keys)
            for i, k in enumerate(keys):
                out[i] = quantize(encode_item(self.head, k, img[i], txt[i]).h_mm)
        return LookupResult(out, np.ones(len(keys), dtype=bool), 0)
