"""The pretraining loop: view generation, dual forward passes, loss, SGD,
EMA, enqueue, checkpointing.

Anchors go through the momentum branch and into the queue; all positives
(one large view plus N small views per anchor) go through the online branch.
Small views never touch the momentum branch or the queue; provenance counters
make that auditable. All randomness derives from (seed, epoch, step, item),
so runs are bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bank import DualQueue
from .checkpoint import load_tensors, save_tensors
from .config import EvalConfig, TrainConfig
from .crops import (
    CropRect,
    crop_and_resize,
    overlap_fraction,
    sample_constrained_multicrop,
    sample_pair_iou_bounded,
    sample_rrc,
)
from .encoder import (
    EncoderConfig,
    EncoderPair,
    ema_update,
    forward_backbone,
    momentum_checkpoint_name,
)
from .errors import ConfigError, NumericError
from .augment import apply_mixed, apply_policy
from .evaluation import linear_probe
from .losses import LossBatch, instance_loss, mine_neighbors, nn_loss
from .optim import OptimizerState, sgd_step
from .synthdata import SynthDataset, load_dataset


class Metrics:
    """Append-only event log; serializable as JSON lines and a CSV summary."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **fields_) -> dict:
        self.rows.append(fields_)
        return fields_

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def write_summary_csv(self, path) -> None:
        cols = ["kind", "epoch", "step", "lr", "loss_inst", "loss_nn", "loss_total",
                "protocol", "score"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")


@dataclass
class ViewSet:
    anchor: np.ndarray
    large_positive: np.ndarray
    small_positives: list[np.ndarray]
    anchor_rect: CropRect
    positive_rect: CropRect
    small_rects: list[CropRect]
    small_overlaps: list[float]


def make_views(image: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
               counters: dict | None = None) -> ViewSet:
    """Crop and augment one image into (anchor, large positive, N small positives).

    The anchor gets the standard policy only; positives get the mixed policy
    when strong augmentation is enabled. Small crops are constrained against
    the anchor's rectangle when `constrained` is set."""
    h, w = image.shape[:2]
    large = cfg.large_spec()
    if cfg.iou_max < 1.0:
        rect_a, rect_p = sample_pair_iou_bounded(
            rng, w, h, large, cfg.iou_max, cfg.iou_attempts, counters
        )
    else:
        rect_a = sample_rrc(rng, w, h, large)
        rect_p = sample_rrc(rng, w, h, large)
    n = cfg.n_views
    if n > 0:
        if cfg.constrained:
            small_rects = sample_constrained_multicrop(
                rng, rect_a, n, cfg.small_spec(), cfg.min_overlap, counters=counters
            )
        else:
            small_rects = [sample_rrc(rng, w, h, cfg.small_spec()) for _ in range(n)]
    else:
        small_rects = []
    overlaps = [overlap_fraction(r, rect_a) for r in small_rects]

    standard = cfg.standard_ops()
    strong = cfg.strong_ops()

    def augment_positive(img):
        if cfg.strong_aug:
            return apply_mixed(img, standard, strong, cfg.p_strong, rng)
        return apply_policy(img, standard, rng)

    anchor = apply_policy(crop_and_resize(image, rect_a, cfg.large_side), standard, rng)
    large_pos = augment_positive(crop_and_resize(image, rect_p, cfg.large_side))
    smalls = [augment_positive(crop_and_resize(image, r, cfg.small_side))
              for r in small_rects]
    if counters is not None:
        counters["small_views"] = counters.get("small_views", 0) + len(smalls)
        bad = sum(1 for o in overlaps if cfg.constrained and o < cfg.min_overlap)
        counters["small_overlap_violations"] = counters.get("small_overlap_violations", 0) + bad
    return ViewSet(anchor, large_pos, smalls, rect_a, rect_p, small_rects, overlaps)


def _to_nchw(images: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.transpose(im, (2, 0, 1)) for im in images])


@dataclass
class TrainState:
    cfg: TrainConfig
    enc_cfg: EncoderConfig
    pair: EncoderPair
    bank: DualQueue
    opt: OptimizerState
    metrics: Metrics = field(default_factory=Metrics)
    epoch: int = 0
    global_step: int = 0
    counters: dict = field(default_factory=dict)
    min_small_overlap: float = float("inf")


def init_state(cfg: TrainConfig, data_side: int, total_steps: int) -> TrainState:
    enc_cfg = cfg.encoder_config(data_side)
    pair = EncoderPair.create(enc_cfg, cfg.m, np.random.default_rng([cfg.seed, 0xE0C]))
    bank = DualQueue(cfg.capacity, enc_cfg.embed_dim, enc_cfg.feat_dim,
                     np.random.default_rng([cfg.seed, 0xBA9C]))
    opt = OptimizerState(cfg.lr, cfg.sgd_momentum, cfg.weight_decay, total_steps)
    return TrainState(cfg, enc_cfg, pair, bank, opt)


def _bump(counters: dict, key: str, amount: int) -> None:
    counters[key] = counters.get(key, 0) + amount


def train_step(state: TrainState, anchors: np.ndarray, larges: np.ndarray,
               smalls: np.ndarray | None) -> dict:
    """One optimization step over stacked, already-augmented view batches."""
    cfg = state.cfg
    b = anchors.shape[0]
    n = 0 if smalls is None else smalls.shape[0] // b

    # momentum branch sees only anchors (this is the provenance contract)
    a_g, a_h = state.pair.forward_momentum(anchors)
    _bump(state.counters, "momentum_anchor_rows", b)
    _bump(state.counters, "momentum_small_rows", 0)

    pl_g, pl_h = state.pair.forward_online(larges)
    parts_h = [ad.reshape(pl_h, (b, 1, state.enc_cfg.embed_dim))]
    pre = [pl_g.data.reshape(b, 1, state.enc_cfg.feat_dim)]
    if n > 0:
        ps_g, ps_h = state.pair.forward_online(smalls)
        parts_h.append(ad.reshape(ps_h, (b, n, state.enc_cfg.embed_dim)))
        pre.append(ps_g.data.reshape(b, n, state.enc_cfg.feat_dim))
    positives = ad.concat(parts_h, axis=1) if len(parts_h) > 1 else parts_h[0]
    positives_pre = np.concatenate(pre, axis=1).reshape(b * (n + 1), state.enc_cfg.feat_dim)
    pre_norms = np.linalg.norm(positives_pre, axis=1, keepdims=True)
    if np.any(pre_norms < 1e-12):
        raise NumericError("collapsed pre-head feature row")
    positives_pre = positives_pre / pre_norms

    nn_active = (
        cfg.nn
        and cfg.lam > 0.0
        and state.epoch >= cfg.warmup_epochs
        and state.bank.filled >= cfg.k_neighbors
    )
    batch = LossBatch(a_h, positives, positives_pre, cfg.tau,
                      cfg.lam if nn_active else 0.0, cfg.k_neighbors)

    if cfg.queue_update == "pre":
        state.bank.enqueue(a_h, a_g)
        _bump(state.counters, "enqueued_anchor_rows", b)

    inst = instance_loss(batch, state.bank)
    if nn_active:
        indices = mine_neighbors(batch, state.bank)
        nn = nn_loss(batch, state.bank, indices, cfg.nn_denominator)
        total = ad.add(inst, ad.scale(nn, cfg.lam))
        nn_value = nn.item()
    else:
        total = inst
        nn_value = 0.0

    for p in state.pair.online.values():
        p.zero_grad()
    total.backward()
    lr_used = state.opt.lr()
    sgd_step(state.pair.online, state.opt)
    ema_update(state.pair)

    if cfg.queue_update == "post":
        state.bank.enqueue(a_h, a_g)
        _bump(state.counters, "enqueued_anchor_rows", b)
    _bump(state.counters, "enqueued_small_rows", 0)

    row = state.metrics.add(
        kind="step", epoch=state.epoch, step=state.global_step, lr=lr_used,
        loss_inst=inst.item(), loss_nn=nn_value, loss_total=total.item(),
    )
    state.global_step += 1
    return row


def _checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in state.pair.online.items()}
    tensors.update(
        {momentum_checkpoint_name(name): p.data
         for name, p in state.pair.momentum_params.items()}
    )
    tensors.update(state.bank.state_dict())
    return tensors


def checkpoint_metadata(state: TrainState, data_side: int) -> dict:
    return {
        "config_hash": state.cfg.content_hash(),
        "epoch": state.epoch,
        "step": state.global_step,
        "widths": list(state.enc_cfg.widths),
        "hidden_dim": state.enc_cfg.hidden_dim,
        "embed_dim": state.enc_cfg.embed_dim,
        "allowed_sides": list(state.enc_cfg.allowed_sides),
        "m": state.pair.m,
        "data_side": data_side,
    }


def save_checkpoint(path, state: TrainState, data_side: int) -> None:
    save_tensors(path, _checkpoint_tensors(state), checkpoint_metadata(state, data_side))


def load_encoder(path) -> tuple[dict, EncoderConfig, dict]:
    """Load a checkpoint; returns (param arrays by name, encoder config, metadata)."""
    tensors, meta = load_tensors(path)
    if meta is None:
        raise ConfigError("checkpoint carries no metadata block")
    enc_cfg = EncoderConfig(
        3, tuple(meta["widths"]), meta["hidden_dim"], meta["embed_dim"],
        tuple(meta["allowed_sides"]),
    )
    return tensors, enc_cfg, meta


def pretrain(cfg: TrainConfig, out_dir: str | Path | None = None,
             dataset: SynthDataset | None = None) -> TrainState:
    """Full training loop with cosine schedule and deterministic batching."""
    if dataset is None:
        if not cfg.dataset:
            raise ConfigError("no dataset configured")
        dataset = load_dataset(cfg.dataset)
    n = len(dataset)
    if cfg.batch_size > n:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    steps_per_epoch = n // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    state = init_state(cfg, dataset.side, total_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            perm = np.random.default_rng([cfg.seed, 0x5F0F, epoch]).permutation(n)
            for step in range(steps_per_epoch):
                idxs = perm[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                anchors, larges, smalls = [], [], []
                for j, img_idx in enumerate(idxs):
                    rng = np.random.default_rng([cfg.seed, epoch, step, j])
                    views = make_views(dataset.images[img_idx], cfg, rng, state.counters)
                    anchors.append(views.anchor)
                    larges.append(views.large_positive)
                    smalls.extend(views.small_positives)
                    if views.small_overlaps:
                        state.min_small_overlap = min(
                            state.min_small_overlap, min(views.small_overlaps)
                        )
                train_step(
                    state,
                    _to_nchw(anchors),
                    _to_nchw(larges),
                    _to_nchw(smalls) if smalls else None,
                )
            if (
                out is not None
                and cfg.checkpoint_interval > 0
                and (epoch + 1) % cfg.checkpoint_interval == 0
            ):
                save_checkpoint(out / f"checkpoint-epoch{epoch + 1}.kmco", state, dataset.side)
    except NumericError:
        if out is not None:
            state.epoch = cfg.epochs  # mark final for the dump
            save_checkpoint(out / "abort.kmco", state, dataset.side)
        raise
    state.epoch = cfg.epochs
    if out is not None:
        save_checkpoint(out / "checkpoint.kmco", state, dataset.side)
    return state


# ---------------------------------------------------------------------------
# frozen-feature extraction for the evaluation protocols


def pooled_features(params: dict, enc_cfg: EncoderConfig, dataset: SynthDataset,
                    batch: int = 64) -> np.ndarray:
    """Global-average-pooled online backbone features for every image."""
    tensors = {k: ad.Tensor(v) for k, v in params.items() if k.startswith("g.")}
    feats = []
    for start in range(0, len(dataset), batch):
        chunk = dataset.images[start : start + batch]
        x = np.transpose(chunk, (0, 3, 1, 2))
        feats.append(forward_backbone(tensors, enc_cfg, x).data)
    return np.concatenate(feats, axis=0)


def spatial_feature_maps(params: dict, enc_cfg: EncoderConfig, dataset: SynthDataset,
                         indices=None) -> list[np.ndarray]:
    """[h, w, feat_dim] backbone maps (pre-pooling) for the given images."""
    tensors = {k: ad.Tensor(v) for k, v in params.items() if k.startswith("g.")}
    indices = range(len(dataset)) if indices is None else indices
    maps = []
    for i in indices:
        x = np.transpose(dataset.images[i], (2, 0, 1))[None]
        fmap = forward_backbone(tensors, enc_cfg, x, spatial=True).data[0]
        maps.append(np.transpose(fmap, (1, 2, 0)))
    return maps


def probe_checkpoint(checkpoint_path, dataset: SynthDataset, ev: EvalConfig,
                     seed: int = 0) -> float:
    """Linear-probe accuracy of a checkpoint's backbone on a labeled dataset."""
    tensors, enc_cfg, _ = load_encoder(checkpoint_path)
    feats = pooled_features(tensors, enc_cfg, dataset)
    return linear_probe(
        feats, dataset.primary_labels(), ev.probe_epochs, ev.probe_lr, seed,
        ev.probe_val_fraction, ev.probe_weight_decay,
    )
