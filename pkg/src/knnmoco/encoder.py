"""Embedding function f = h(g(.)) and its momentum-updated twin.

The backbone g is a small stack of stride-2 convolutions followed by global
average pooling, so large crops, small crops, and full evaluation frames all
share one parameter set. Each conv is followed by per-sample instance
normalization (no batch statistics anywhere, so train and eval behave
identically), inputs are centered, and the pooled features are centered per
sample: without this the common activation mode dominates at init and the
contrastive task starts inside the representation-collapse basin. The head h
is a two-layer MLP ending in L2 normalization onto the unit hypersphere.
Spatial features for dense evaluation are read out before pooling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    hidden_dim: int = 64
    embed_dim: int = 32
    allowed_sides: tuple[int, ...] = (16, 32, 64)

    @property
    def feat_dim(self) -> int:
        return self.widths[-1]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialized conv stack + MLP head, all requires_grad."""
    params: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.widths, start=1):
        std = np.sqrt(2.0 / (cin * 9))
        params[f"g.conv{i}.w"] = Tensor(rng.standard_normal((cout, cin, 3, 3)) * std, True)
        params[f"g.conv{i}.b"] = Tensor(np.zeros(cout), True)
        cin = cout
    params["h.fc1.w"] = Tensor(
        rng.standard_normal((cfg.feat_dim, cfg.hidden_dim)) * np.sqrt(2.0 / cfg.feat_dim), True
    )
    params["h.fc1.b"] = Tensor(np.zeros(cfg.hidden_dim), True)
    params["h.fc2.w"] = Tensor(
        rng.standard_normal((cfg.hidden_dim, cfg.embed_dim)) * np.sqrt(1.0 / cfg.hidden_dim), True
    )
    params["h.fc2.b"] = Tensor(np.zeros(cfg.embed_dim), True)
    return params


def clone_params(params: dict[str, Tensor], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad) for k, v in params.items()}


def _check_resolution(cfg: EncoderConfig, images: np.ndarray | Tensor) -> None:
    shape = images.shape
    if len(shape) != 4 or shape[1] != cfg.in_channels:
        raise ConfigError(f"backbone expects [B,{cfg.in_channels},H,W], got {shape}")
    if shape[2] != shape[3] or shape[2] not in cfg.allowed_sides:
        raise ConfigError(
            f"unsupported input side {shape[2]}x{shape[3]} (allowed: {cfg.allowed_sides})"
        )


def forward_backbone(params: dict[str, Tensor], cfg: EncoderConfig, images,
                     spatial: bool = False) -> Tensor:
    """[B, C, H, W] -> pooled [B, feat_dim], or [B, feat_dim, h, w] if spatial."""
    x = ad.as_tensor(images)
    _check_resolution(cfg, x)
    x = ad.add(x, Tensor(np.full(x.shape, -0.5)))  # center the [0,1] pixel range
    for i in range(1, len(cfg.widths) + 1):
        x = ad.conv2d(x, params[f"g.conv{i}.w"], params[f"g.conv{i}.b"], stride=2, padding=1)
        x = ad.instance_norm(x)
        x = ad.relu(x)
    if spatial:
        return x
    return ad.center_rows(ad.mean(x, axis=(2, 3)))


def forward_head(params: dict[str, Tensor], features) -> Tensor:
    """[B, feat_dim] -> [B, embed_dim] with unit rows."""
    x = ad.as_tensor(features)
    if x.data.ndim != 2:
        raise ConfigError(f"head expects [B, feat_dim], got {x.shape}")
    x = ad.relu(ad.add(ad.matmul(x, params["h.fc1.w"]), params["h.fc1.b"]))
    x = ad.add(ad.matmul(x, params["h.fc2.w"]), params["h.fc2.b"])
    return ad.l2_normalize(x)


def forward_embed(params: dict[str, Tensor], cfg: EncoderConfig, images) -> tuple[Tensor, Tensor]:
    """Backbone + head composition. The head sees unit-scale features: the
    centered pooled features are small in norm, and feeding them raw would
    blow up gradients through the head's final normalization."""
    feats = forward_backbone(params, cfg, images)
    return feats, forward_head(params, ad.l2_normalize(feats))


def spatial_features(params: dict[str, Tensor], cfg: EncoderConfig,
                     image_hwc: np.ndarray) -> np.ndarray:
    """Per-location backbone features of one H x W x 3 image, as [h, w, feat_dim]."""
    x = np.transpose(image_hwc, (2, 0, 1))[None]
    fmap = forward_backbone(params, cfg, x, spatial=True).data[0]
    return np.transpose(fmap, (1, 2, 0))


@dataclass
class EncoderPair:
    """Online encoder plus its EMA twin; twin starts as a bit-equal copy."""

    cfg: EncoderConfig
    online: dict[str, Tensor]
    momentum_params: dict[str, Tensor]
    m: float = 0.999
    counters: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.m <= 1.0):
            raise ConfigError(f"momentum coefficient {self.m} outside [0,1]")

    @classmethod
    def create(cls, cfg: EncoderConfig, m: float, rng: np.random.Generator) -> "EncoderPair":
        online = init_encoder_params(cfg, rng)
        return cls(cfg, online, clone_params(online, requires_grad=False), m)

    def forward_online(self, images) -> tuple[Tensor, Tensor]:
        return forward_embed(self.online, self.cfg, images)

    def forward_momentum(self, images) -> tuple[np.ndarray, np.ndarray]:
        feats, embeds = forward_embed(self.momentum_params, self.cfg, images)
        return feats.data, embeds.data


def ema_update(pair: EncoderPair) -> None:
    """momentum <- m * momentum + (1 - m) * online, elementwise."""
    m = pair.m
    for key, mom in pair.momentum_params.items():
        mom.data = m * mom.data + (1.0 - m) * pair.online[key].data


def momentum_checkpoint_name(key: str) -> str:
    """Online names are 'g.*'/'h.*'; the twin checkpoints as 'gm.*'/'hm.*'."""
    head, rest = key.split(".", 1)
    return f"{head}m.{rest}"
