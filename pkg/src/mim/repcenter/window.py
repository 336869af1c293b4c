"""Buffer for embeddings of newly listed items, published to the store in batches."""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..encoders import EncoderHead, encode_item
from .store import EmbeddingStore, quantize


@dataclass(frozen=True)
class SubmitAck:
    key: int
    pending: int      # messages waiting after this submit
    flushed: int      # entries published by an auto-flush triggered here (0 if none)
    version: int      # store version after this submit


class WindowBuffer:
    """Pending (key, vector) messages flushed when either max_count or max_age is reached.

    A duplicate key inside one window replaces the earlier vector; the
    replacement is counted in ``duplicates``.
    """

    def __init__(self, store: EmbeddingStore, max_count: int = 64, max_age: float = 0.1,
                 clock: Callable[[], float] = time.monotonic) -> None:
        if max_count < 1:
            raise ValueError("max_count must be >= 1")
        if max_age <= 0:
            raise ValueError("max_age must be positive")
        self.store = store
        self.max_count = max_count
        self.max_age = max_age
        self.clock = clock
        self.duplicates = 0
        self.flushes = 0
        self._pending: dict[int, np.ndarray] = {}
        self._opened: float | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._pending)

    def pending_keys(self) -> list[int]:
        with self._lock:
            return list(self._pending)

    def submit_vector(self, key: int, vector) -> SubmitAck:
        q = quantize(vector)
        if q.shape != (self.store.dim,):
            raise ValueError(f"vector dim {q.shape} does not match store dim {self.store.dim}")
        key = int(key)
        with self._lock:
            if key in self._pending:
                self.duplicates += 1
            elif not self._pending:
                self._opened = self.clock()
            self._pending[key] = q
            flushed = self._flush_if_due()
            return SubmitAck(key, len(self._pending), flushed, self.store.version)

    def _flush_if_due(self) -> int:
        if not self._pending:
            return 0
        if len(self._pending) >= self.max_count or self.clock() - self._opened >= self.max_age:
            return self._flush_locked()
        return 0

    def _flush_locked(self, store: EmbeddingStore | None = None) -> int:
        batch, self._pending, self._opened = self._pending, {}, None
        if not batch:
            return 0
        (self.store if store is None else store).apply(batch)
        self.flushes += 1
        return len(batch)

    def flush(self, store: EmbeddingStore | None = None) -> int:
        with self._lock:
            return self._flush_locked(store)

    def poll(self) -> int:
        """Flush if the oldest pending message has aged out; called by the server ticker."""
        with self._lock:
            return self._flush_if_due()


def rim_submit(window: WindowBuffer, key: int, image_feature, text_feature, head: EncoderHead) -> SubmitAck:
    """Encode a new item now and queue its embedding for the next flush."""
    bundle = encode_item(head, key, image_feature, text_feature)
    return window.submit_vector(key, bundle.h_mm)


def rim_flush(window: WindowBuffer, store: EmbeddingStore | None = None) -> int:
    return window.flush(store)
