"""Frozen-representation evaluation: linear probe, K-means segment retrieval,
video label propagation, and Jaccard / boundary-F scoring.

Every protocol is read-only over the features it is handed; nothing here
touches encoder parameters.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


# ---------------------------------------------------------------------------
# linear probe


def linear_probe(features: np.ndarray, labels: np.ndarray, epochs: int = 300,
                 lr: float = 0.5, seed: int = 0, val_fraction: float = 0.25,
                 weight_decay: float = 0.0) -> float:
    """Full-batch softmax regression on frozen features; top-1 on a held-out split."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("linear_probe needs at least 2 classes")
    n = features.shape[0]
    n_val = max(1, int(round(n * val_fraction)))
    perm = np.random.default_rng([seed, 0x9807E]).permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = features[train_idx], labels[train_idx]
    x_val, y_val = features[val_idx], labels[val_idx]

    mu = x_train.mean(axis=0)
    sd = np.maximum(x_train.std(axis=0), 1e-8)
    x_train = (x_train - mu) / sd
    x_val = (x_val - mu) / sd

    c = int(labels.max()) + 1
    w = np.zeros((features.shape[1], c))
    b = np.zeros(c)
    onehot = np.zeros((len(y_train), c))
    onehot[np.arange(len(y_train)), y_train] = 1.0
    for _ in range(epochs):
        logits = x_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - onehot) / len(y_train)
        w -= lr * (x_train.T @ d + weight_decay * w)
        b -= lr * d.sum(axis=0)
    pred = (x_val @ w + b).argmax(axis=1)
    return float((pred == y_val).mean())


# ---------------------------------------------------------------------------
# K-means


def kmeans(points: np.ndarray, k: int, iters: int = 50, seed: int = 0,
           return_history: bool = False):
    """Lloyd iterations from K-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its centroid, so
    the within-cluster objective never increases."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < k:
        raise ConfigError(f"kmeans: {n} points < k={k}")
    rng = np.random.default_rng([seed, 0x83EA7])

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = pts[rng.integers(n)]
        else:
            centroids[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    history = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        obj = dists[np.arange(n), assign].sum()
        history.append(float(obj))
        for j in range(k):
            sel = assign == j
            if sel.any():
                centroids[j] = pts[sel].mean(axis=0)
            else:
                far = dists[np.arange(n), assign].argmax()
                centroids[j] = pts[far]
                assign[far] = j
    if return_history:
        return assign, centroids, history
    return assign, centroids


# ---------------------------------------------------------------------------
# segment retrieval


@dataclass
class SegmentDescriptor:
    region_id: int
    embedding: np.ndarray  # unit-normalized mean pixel embedding
    image_id: int
    majority_class: int


def downsample_mask(mask: np.ndarray, hf: int, wf: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum(((np.arange(hf) + 0.5) * h / hf).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(wf) + 0.5) * w / wf).astype(np.int64), w - 1)
    return mask[ys][:, xs]


def upsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    hf, wf = mask.shape
    ys = np.minimum((np.arange(h) * hf // h), hf - 1)
    xs = np.minimum((np.arange(w) * wf // w), wf - 1)
    return mask[ys][:, xs]


def _image_descriptors(feats: np.ndarray, sem_mask: np.ndarray, image_id: int,
                       k: int, iters: int, seed: int
                       ) -> tuple[list[SegmentDescriptor], np.ndarray]:
    hf, wf, dim = feats.shape
    flat = feats.reshape(-1, dim)
    k_eff = min(k, flat.shape[0])
    assign, _ = kmeans(flat, k_eff, iters=iters, seed=seed + 7919 * image_id)
    gt = downsample_mask(sem_mask, hf, wf).reshape(-1)
    descs = []
    for region in range(k_eff):
        sel = assign == region
        if not sel.any():
            continue
        emb = flat[sel].mean(axis=0)
        emb = emb / max(np.linalg.norm(emb), 1e-12)
        vals, counts = np.unique(gt[sel], return_counts=True)
        descs.append(SegmentDescriptor(region, emb, image_id, int(vals[counts.argmax()])))
    return descs, assign


def segment_retrieval(train_feats: list[np.ndarray], train_masks: list[np.ndarray],
                      val_feats: list[np.ndarray], val_masks: list[np.ndarray],
                      kmeans_k: int = 15, kmeans_iters: int = 30, seed: int = 0,
                      ) -> tuple[float, dict[int, float]]:
    """Label K-means regions of val images by their single nearest train region.

    Feature maps are [h, w, dim]; masks are full-resolution semantic class
    maps. Returns (mIoU over classes present in the val ground truth,
    per-class IoU). Plain 1-nearest retrieval, unweighted."""
    if not val_feats:
        raise ConfigError("segment_retrieval: empty validation set")
    bank: list[SegmentDescriptor] = []
    for i, (feats, mask) in enumerate(zip(train_feats, train_masks)):
        descs, _ = _image_descriptors(feats, mask, i, kmeans_k, kmeans_iters, seed)
        bank.extend(descs)
    bank_emb = np.stack([d.embedding for d in bank])
    bank_cls = np.array([d.majority_class for d in bank])

    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    for i, (feats, mask) in enumerate(zip(val_feats, val_masks)):
        hf, wf, _ = feats.shape
        descs, assign = _image_descriptors(feats, mask, 10_000 + i, kmeans_k,
                                           kmeans_iters, seed)
        flat_assign = np.full(hf * wf, -1, dtype=np.int64)
        for d in descs:
            dist = ((bank_emb - d.embedding) ** 2).sum(axis=1)
            flat_assign[assign == d.region_id] = int(bank_cls[dist.argmin()])
        pred = upsample_mask(flat_assign.reshape(hf, wf), mask.shape[0], mask.shape[1])
        for cls in np.union1d(np.unique(mask), np.unique(pred)):
            c = int(cls)
            p, g = pred == c, mask == c
            inter[c] = inter.get(c, 0) + int(np.logical_and(p, g).sum())
            union[c] = union.get(c, 0) + int(np.logical_or(p, g).sum())
    gt_classes = sorted({int(c) for mask in val_masks for c in np.unique(mask)})
    per_class = {c: inter.get(c, 0) / union[c] for c in gt_classes if union.get(c, 0) > 0}
    miou = float(np.mean([per_class[c] for c in per_class])) if per_class else 0.0
    return miou, per_class


# ---------------------------------------------------------------------------
# label propagation


@dataclass(frozen=True)
class PropagationConfig:
    k_prop: int = 5
    radius: int = 8
    temperature: float = 0.07
    context: int = 2

    def __post_init__(self):
        if self.k_prop < 1 or self.radius < 1 or self.context < 1:
            raise ConfigError(f"bad propagation config {self}")


def propagate_labels(embeddings: np.ndarray, first_mask: np.ndarray,
                     cfg: PropagationConfig, return_soft: bool = False):
    """Propagate the first frame's labels through a sequence.

    embeddings: [T, h, w, dim]; first_mask: [h, w] integer labels. Each pixel
    of frame t takes the softmax-weighted label average of its k_prop most
    similar reference pixels within the spatial radius, drawn from the
    previous `context` frames' soft labels (frame 0 is ground truth).
    Returns hard masks [T, h, w]; with ``return_soft`` also the per-frame
    soft label fields."""
    emb = np.asarray(embeddings, dtype=np.float64)
    t_total, h, w, dim = emb.shape
    norms = np.sqrt((emb * emb).sum(axis=-1, keepdims=True))
    emb = emb / np.maximum(norms, 1e-12)

    n_labels = int(first_mask.max()) + 1
    soft0 = np.zeros((h, w, n_labels))
    soft0[np.arange(h)[:, None], np.arange(w)[None, :], first_mask] = 1.0
    softs = [soft0]
    r = cfg.radius
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    out = np.empty((t_total, h, w), dtype=np.int64)
    out[0] = first_mask
    for t in range(1, t_total):
        refs = list(range(max(0, t - cfg.context), t))
        n_cand = len(refs) * len(offsets)
        sims = np.full((h, w, n_cand), -np.inf)
        pad_soft = np.stack(
            [np.pad(softs[ri], ((r, r), (r, r), (0, 0))) for ri in refs]
        )  # [n_refs, h+2r, w+2r, L]
        pad_emb = np.stack(
            [np.pad(emb[ri], ((r, r), (r, r), (0, 0))) for ri in refs]
        )
        cur = emb[t]
        grid_y, grid_x = np.mgrid[0:h, 0:w]
        for ref_pos in range(len(refs)):
            for o_pos, (dy, dx) in enumerate(offsets):
                window = pad_emb[ref_pos, r + dy : r + dy + h, r + dx : r + dx + w]
                sim = (cur * window).sum(axis=-1)
                valid = (
                    (grid_y + dy >= 0) & (grid_y + dy < h)
                    & (grid_x + dx >= 0) & (grid_x + dx < w)
                )
                sims[:, :, ref_pos * len(offsets) + o_pos] = np.where(valid, sim, -np.inf)

        k = min(cfg.k_prop, n_cand)
        top = np.argpartition(-sims, k - 1, axis=2)[:, :, :k]
        top_sims = np.take_along_axis(sims, top, axis=2)
        top_sims = np.where(np.isfinite(top_sims), top_sims, -1e30)
        wgt = np.exp((top_sims - top_sims.max(axis=2, keepdims=True)) / cfg.temperature)
        wgt /= wgt.sum(axis=2, keepdims=True)

        ref_of = top // len(offsets)
        off_of = top % len(offsets)
        dys = np.array([o[0] for o in offsets])[off_of]
        dxs = np.array([o[1] for o in offsets])[off_of]
        ys = np.arange(h)[:, None, None] + r + dys
        xs = np.arange(w)[None, :, None] + r + dxs
        gathered = pad_soft[ref_of, ys, xs]  # [h, w, k, L]
        new_soft = (wgt[..., None] * gathered).sum(axis=2)
        new_soft /= np.maximum(new_soft.sum(axis=-1, keepdims=True), 1e-12)
        softs.append(new_soft)
        out[t] = new_soft.argmax(axis=-1)
    if return_soft:
        return out, softs
    return out


# ---------------------------------------------------------------------------
# J & F scoring


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the region adjacent (4-neighborhood) to non-region or the border."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        padded = np.pad(out, 1, mode="constant", constant_values=False)
        out = (
            padded[1:-1, 1:-1] | padded[:-2, 1:-1] | padded[2:, 1:-1]
            | padded[1:-1, :-2] | padded[1:-1, 2:]
            | padded[:-2, :-2] | padded[:-2, 2:] | padded[2:, :-2] | padded[2:, 2:]
        )
    return out


def jaccard_and_f(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1,
                  object_ids=None) -> tuple[float, float]:
    """Per-object region Jaccard and boundary F-measure, averaged over objects.

    Boundary matches count within a `tolerance`-pixel band. Objects listed in
    ``object_ids`` but absent from the ground truth are skipped with a warning."""
    if pred.shape != gt.shape:
        raise ConfigError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if object_ids is None:
        ids = sorted(set(np.unique(pred)) | set(np.unique(gt)))
        ids = [int(i) for i in ids if i != 0]
    else:
        ids = [int(i) for i in object_ids]
    js, fs = [], []
    for obj in ids:
        p = pred == obj
        g = gt == obj
        if object_ids is not None and not g.any():
            warnings.warn(f"object {obj} is empty in the ground truth; skipped")
            continue
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        js.append(np.logical_and(p, g).sum() / union)
        bp, bg = _boundary(p), _boundary(g)
        if not bp.any() or not bg.any():
            fs.append(1.0 if (not bp.any() and not bg.any()) else 0.0)
            continue
        precision = (bp & _dilate(bg, tolerance)).sum() / bp.sum()
        recall = (bg & _dilate(bp, tolerance)).sum() / bg.sum()
        fs.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    if not js:
        return 0.0, 0.0
    return float(np.mean(js)), float(np.mean(fs))
