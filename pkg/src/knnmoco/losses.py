"""Instance-discrimination and nearest-neighbor contrastive losses.

Both follow the logit form of the training pseudocode: every positive view is
the query, its anchor fills logit slot 0, and the queue provides the
negatives. The printed equations pair negatives with the anchor instead; the
pseudocode is treated as the executable ground truth and the equations as its
idealization, so negatives pair with the query here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import DualQueue
from .errors import ConfigError

NN_DENOMINATOR_MODES = ("include_targets", "exclude_targets")


@dataclass
class LossBatch:
    """One training batch in loss space.

    anchors: [B, C_h] momentum-branch embeddings (no graph, acts as constants)
    positives: [B, N+1, C_h] online-branch embeddings, grouped per anchor,
        row order (large view, small views...) within each group
    positives_pre: [B*(N+1), C_g] pre-head features, unit rows (mining space)
    """

    anchors: np.ndarray
    positives: Tensor
    positives_pre: np.ndarray
    tau: float = 0.2
    lam: float = 0.4
    k: int = 20

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.lam < 0.0:
            raise ConfigError(f"loss weight must be >= 0, got {self.lam}")
        if self.positives.data.ndim != 3 or self.anchors.ndim != 2:
            raise ConfigError("LossBatch: positives must be [B,N+1,C], anchors [B,C]")
        if self.positives.shape[0] != self.anchors.shape[0]:
            raise ConfigError("LossBatch: batch size mismatch")

    @property
    def batch_size(self) -> int:
        return self.anchors.shape[0]

    @property
    def views_per_anchor(self) -> int:
        return self.positives.shape[1]


def _queue_logits(batch: LossBatch, bank: DualQueue) -> Tensor:
    """[B*(N+1), K] similarities of every positive against q_h, sharpened."""
    b, v, c = batch.positives.shape
    flat = ad.reshape(batch.positives, (b * v, c))
    return ad.scale(ad.matmul(flat, bank.q_h.T), 1.0 / batch.tau)


def instance_loss(batch: LossBatch, bank: DualQueue) -> Tensor:
    """Mean over positives of CE([q.a, q.Q_h]/tau, target 0).

    Gradients reach only the positives; anchors and queue are plain data."""
    b, v, c = batch.positives.shape
    l_pos = ad.bmm(batch.positives, batch.anchors.reshape(b, c, 1))  # [B, V, 1]
    flat = ad.reshape(batch.positives, (b * v, c))
    l_neg = ad.reshape(ad.matmul(flat, bank.q_h.T), (b, v, bank.capacity))
    logits = ad.reshape(ad.concat([l_pos, l_neg], axis=2), (b * v, bank.capacity + 1))
    logits = ad.scale(logits, 1.0 / batch.tau)
    return ad.softmax_cross_entropy(logits, np.zeros(b * v, dtype=np.int64))


def mine_neighbors(batch: LossBatch, bank: DualQueue) -> np.ndarray:
    """Top-k queue indices per positive, mined on pre-head features."""
    return bank.topk_neighbors_batch(batch.positives_pre, batch.k)


def nn_loss(batch: LossBatch, bank: DualQueue, neighbor_indices: np.ndarray,
            denominator: str = "include_targets") -> Tensor:
    """Pull each positive toward its mined neighbors' post-head rows.

    ``include_targets`` is the pseudocode variant (multi-label CE over all K
    queue logits); ``exclude_targets`` drops the other targets from each
    term's denominator, recovering the printed equation's structure."""
    if denominator not in NN_DENOMINATOR_MODES:
        raise ConfigError(f"unknown nn denominator mode {denominator!r}")
    logits = _queue_logits(batch, bank)
    return ad.multilabel_cross_entropy(
        logits, neighbor_indices, exclude_targets=(denominator == "exclude_targets")
    )


def total_loss(batch: LossBatch, bank: DualQueue,
               neighbor_indices: np.ndarray | None = None,
               denominator: str = "include_targets") -> Tensor:
    """instance_loss + lam * nn_loss; lam == 0 short-circuits to instance only."""
    inst = instance_loss(batch, bank)
    if batch.lam == 0.0:
        return inst
    if neighbor_indices is None:
        neighbor_indices = mine_neighbors(batch, bank)
    return ad.add(inst, ad.scale(nn_loss(batch, bank, neighbor_indices, denominator),
                                 batch.lam))
