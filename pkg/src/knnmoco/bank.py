"""Dual aligned memory queues.

``q_h`` holds post-head embeddings (the space the losses act in), ``q_g``
holds pre-head backbone features (the space neighbors are mined in). Row i of
both matrices always comes from the same anchor image: one write pointer, one
enqueue entry point.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, RetrievalError


def _normalize_rows(mat: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((mat * mat).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        raise NumericError(f"{what}: zero row cannot be normalized")
    return mat / norms


class DualQueue:
    def __init__(self, capacity: int, dim_h: int, dim_g: int, rng: np.random.Generator):
        if capacity < 0:
            raise ConfigError(f"negative queue capacity {capacity}")
        self.capacity = capacity
        self.ptr = 0
        self.filled = 0
        if capacity > 0:
            # random unit rows so retrieval is well-defined before the queue fills
            self.q_h = _normalize_rows(rng.standard_normal((capacity, dim_h)), "queue init")
            self.q_g = _normalize_rows(rng.standard_normal((capacity, dim_g)), "queue init")
        else:
            self.q_h = np.zeros((0, dim_h))
            self.q_g = np.zeros((0, dim_g))

    def enqueue(self, anchors_h: np.ndarray, anchors_g: np.ndarray) -> None:
        """Write a batch into both queues at the shared pointer (wraparound ok)."""
        anchors_h = np.asarray(anchors_h, dtype=np.float64)
        anchors_g = np.asarray(anchors_g, dtype=np.float64)
        if anchors_h.ndim != 2 or anchors_g.ndim != 2 or anchors_h.shape[0] != anchors_g.shape[0]:
            raise ConfigError(
                f"enqueue: mismatched batches {anchors_h.shape} vs {anchors_g.shape}"
            )
        b = anchors_h.shape[0]
        if b == 0:
            return
        if b > self.capacity:
            raise ConfigError(f"enqueue: batch {b} exceeds capacity {self.capacity}")
        norms = np.abs((anchors_h * anchors_h).sum(axis=1) - 1.0)
        if np.any(norms > 1e-6):
            raise ConfigError("enqueue: post-head rows must be unit-normalized")
        rows = (self.ptr + np.arange(b)) % self.capacity
        self.q_h[rows] = anchors_h
        self.q_g[rows] = _normalize_rows(anchors_g, "enqueue q_g")
        self.ptr = int((self.ptr + b) % self.capacity)
        self.filled = min(self.capacity, self.filled + b)

    def topk_neighbors(self, query_g: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k largest cosine similarities against q_g, descending.

        Ties break toward the lower index. The query is normalized here, so
        retrieval is invariant to positive rescaling."""
        return self.topk_neighbors_batch(np.asarray(query_g)[None, :], k)[0]

    def topk_neighbors_batch(self, queries_g: np.ndarray, k: int) -> np.ndarray:
        if k < 1:
            raise RetrievalError(f"k must be >= 1, got {k}")
        if k > self.filled:
            raise RetrievalError(f"k={k} exceeds filled count {self.filled}")
        q = _normalize_rows(np.asarray(queries_g, dtype=np.float64), "topk query")
        sims = q @ self.q_g.T
        order = np.argsort(-sims, axis=1, kind="stable")
        return order[:, :k]

    def neighbor_embeddings(self, indices) -> np.ndarray:
        """Aligned post-head rows for indices mined on q_g."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.capacity):
            raise RetrievalError(f"neighbor index out of range [0, {self.capacity})")
        return self.q_h[idx]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            "bank.qh": self.q_h.copy(),
            "bank.qg": self.q_g.copy(),
            "bank.ptr": np.array(float(self.ptr)),
            "bank.filled": np.array(float(self.filled)),
        }

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.q_h = np.array(state["bank.qh"], dtype=np.float64)
        self.q_g = np.array(state["bank.qg"], dtype=np.float64)
        self.capacity = self.q_h.shape[0]
        self.ptr = int(state["bank.ptr"])
        self.filled = int(state["bank.filled"])
