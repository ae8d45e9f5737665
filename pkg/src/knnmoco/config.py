"""Experiment configuration: typed schema, file parsing, inline overrides.

Config files are line-based ``key = value`` text with ``[section]`` headers.
Every key is validated against the schema; unknown keys are errors. Sections
named ``[variant.NAME]`` hold dotted-key overrides for the ablation grid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

from .augment import AugPolicy, policy_from_string, standard_policy, strong_policy
from .crops import CropSpec
from .encoder import EncoderConfig
from .errors import ConfigError


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


_PARSERS = {
    int: int,
    float: float,
    bool: _parse_bool,
    str: lambda s: s.strip(),
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
}


@dataclass
class TrainConfig:
    """Everything one pretraining run needs; flags compose freely."""

    dataset: str = ""
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    checkpoint_interval: int = 0
    multicrop: bool = False
    constrained: bool = False
    strong_aug: bool = False
    nn: bool = False
    n_small: int = 2
    # crop geometry
    large_scale_lo: float = 0.2
    large_scale_hi: float = 1.0
    large_side: int = 32
    small_scale_lo: float = 0.05
    small_scale_hi: float = 0.14
    small_side: int = 16
    ratio_lo: float = 0.75
    ratio_hi: float = 4.0 / 3.0
    min_overlap: float = 0.2
    iou_max: float = 1.0
    iou_attempts: int = 100
    # augmentation
    p_strong: float = 0.5
    standard_policy: str = ""
    strong_policy: str = ""
    # memory bank
    capacity: int = 512
    # losses
    tau: float = 0.2
    lam: float = 0.4
    k_neighbors: int = 20
    warmup_epochs: int = 5
    queue_update: str = "post"
    nn_denominator: str = "include_targets"
    # encoder
    widths: tuple[int, ...] = (16, 32, 64)
    hidden_dim: int = 64
    embed_dim: int = 32
    m: float = 0.999
    # optimizer
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.queue_update not in ("pre", "post"):
            raise ConfigError(f"queue_update must be pre|post, got {self.queue_update!r}")
        if self.nn_denominator not in ("include_targets", "exclude_targets"):
            raise ConfigError(f"bad nn_denominator {self.nn_denominator!r}")
        if not (0.0 <= self.m <= 1.0):
            raise ConfigError(f"m must be in [0,1], got {self.m}")
        if not (0.0 <= self.iou_max <= 1.0):
            raise ConfigError(f"iou_max must be in [0,1], got {self.iou_max}")

    @property
    def n_views(self) -> int:
        return self.n_small if self.multicrop else 0

    def large_spec(self) -> CropSpec:
        return CropSpec((self.large_scale_lo, self.large_scale_hi), self.large_side,
                        (self.ratio_lo, self.ratio_hi))

    def small_spec(self) -> CropSpec:
        return CropSpec((self.small_scale_lo, self.small_scale_hi), self.small_side,
                        (self.ratio_lo, self.ratio_hi))

    def standard_ops(self) -> AugPolicy:
        return policy_from_string(self.standard_policy) if self.standard_policy else standard_policy()

    def strong_ops(self) -> AugPolicy:
        return policy_from_string(self.strong_policy) if self.strong_policy else strong_policy()

    def encoder_config(self, data_side: int) -> EncoderConfig:
        sides = tuple(sorted({self.small_side, self.large_side, data_side}))
        return EncoderConfig(3, self.widths, self.hidden_dim, self.embed_dim, sides)

    def content_hash(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class EvalConfig:
    checkpoint: str = ""
    probe_dataset: str = ""
    train_dataset: str = ""
    val_dataset: str = ""
    video_dataset: str = ""
    probe_epochs: int = 300
    probe_lr: float = 0.5
    probe_val_fraction: float = 0.25
    probe_weight_decay: float = 0.0
    kmeans_k: int = 15
    kmeans_iters: int = 30
    k_prop: int = 5
    radius: int = 8
    prop_temperature: float = 0.07
    context: int = 2


@dataclass
class GenConfig:
    variant: str = "object"
    num_classes: int = 4
    n: int = 256
    side: int = 64
    objects_lo: int = 3
    objects_hi: int = 8
    distribution: str = "uniform"
    longtail_n_max: int = 64
    longtail_n_min: int = 2
    longtail_alpha: float = 6.0
    sequences: int = 4
    frames_per_seq: int = 8
    speed_lo: float = 0.5
    speed_hi: float = 2.5
    jitter: float = 0.25

    def __post_init__(self):
        if self.variant not in ("object", "scene", "video"):
            raise ConfigError(f"bad variant {self.variant!r}")
        if self.distribution not in ("uniform", "longtail"):
            raise ConfigError(f"bad distribution {self.distribution!r}")


@dataclass
class CropStatsConfig:
    presets: str = "moco:0.2:1.0|simclr:0.08:1.0"
    draws: int = 10000
    bins: int = 20
    source_side: int = 64
    iou_grid: tuple[float, ...] = ()

    def preset_specs(self) -> list[tuple[str, float, float]]:
        out = []
        for chunk in self.presets.split("|"):
            name, lo, hi = chunk.strip().split(":")
            out.append((name, float(lo), float(hi)))
        return out


@dataclass
class AblateConfig:
    variants: str = ""
    seeds: tuple[int, ...] = (0,)

    def variant_names(self) -> list[str]:
        return [v.strip() for v in self.variants.split("|") if v.strip()]


_SECTION_DATACLASS = {
    "train": TrainConfig,
    "crops": TrainConfig,
    "augment": TrainConfig,
    "bank": TrainConfig,
    "loss": TrainConfig,
    "encoder": TrainConfig,
    "optim": TrainConfig,
    "eval": EvalConfig,
    "gen": GenConfig,
    "cropstats": CropStatsConfig,
    "ablate": AblateConfig,
}

# section.key -> (parser key, dataclass field name)
SCHEMA: dict[str, tuple[object, str]] = {}


def _register(section: str, key: str, kind, attr: str | None = None) -> None:
    SCHEMA[f"{section}.{key}"] = (kind, attr or key)


for _name, _kind in [
    ("dataset", str), ("epochs", int), ("batch_size", int), ("seed", int),
    ("checkpoint_interval", int), ("multicrop", bool), ("constrained", bool),
    ("strong_aug", bool), ("nn", bool), ("n_small", int),
]:
    _register("train", _name, _kind)
for _name, _kind in [
    ("large_scale_lo", float), ("large_scale_hi", float), ("large_side", int),
    ("small_scale_lo", float), ("small_scale_hi", float), ("small_side", int),
    ("ratio_lo", float), ("ratio_hi", float), ("min_overlap", float),
    ("iou_max", float), ("iou_attempts", int),
]:
    _register("crops", _name, _kind)
for _name, _kind in [("p_strong", float), ("standard_policy", str), ("strong_policy", str)]:
    _register("augment", _name, _kind)
_register("bank", "capacity", int)
for _name, _kind in [
    ("tau", float), ("lam", float), ("warmup_epochs", int),
    ("queue_update", str), ("nn_denominator", str),
]:
    _register("loss", _name, _kind)
_register("loss", "k", int, "k_neighbors")
for _name, _kind in [("hidden_dim", int), ("embed_dim", int), ("m", float)]:
    _register("encoder", _name, _kind)
_register("encoder", "widths", "int_list")
_register("optim", "lr", float)
_register("optim", "momentum", float, "sgd_momentum")
_register("optim", "weight_decay", float)
for _name, _kind in [
    ("checkpoint", str), ("probe_dataset", str), ("train_dataset", str),
    ("val_dataset", str), ("video_dataset", str), ("probe_epochs", int),
    ("probe_lr", float), ("probe_val_fraction", float), ("probe_weight_decay", float),
    ("kmeans_k", int), ("kmeans_iters", int), ("k_prop", int), ("radius", int),
    ("prop_temperature", float), ("context", int),
]:
    _register("eval", _name, _kind)
for _name, _kind in [
    ("variant", str), ("num_classes", int), ("n", int), ("side", int),
    ("objects_lo", int), ("objects_hi", int), ("distribution", str),
    ("longtail_n_max", int), ("longtail_n_min", int), ("longtail_alpha", float),
    ("sequences", int), ("frames_per_seq", int), ("speed_lo", float),
    ("speed_hi", float), ("jitter", float),
]:
    _register("gen", _name, _kind)
for _name, _kind in [("presets", str), ("draws", int), ("bins", int), ("source_side", int)]:
    _register("cropstats", _name, _kind)
_register("cropstats", "iou_grid", "float_list")
_register("ablate", "variants", str)
_register("ablate", "seeds", "int_list")


@dataclass
class Config:
    """All parsed values plus the raw variant-override sections."""

    values: dict[str, object] = field(default_factory=dict)
    variant_overrides: dict[str, dict[str, str]] = field(default_factory=dict)

    def set(self, full_key: str, raw_value: str) -> None:
        if full_key not in SCHEMA:
            raise ConfigError(f"unknown config key {full_key!r}")
        kind, _ = SCHEMA[full_key]
        try:
            self.values[full_key] = _PARSERS[kind](raw_value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {full_key}: {raw_value!r} ({exc})") from exc

    def _build(self, cls, sections: tuple[str, ...]):
        kwargs = {}
        for full_key, (kind, attr) in SCHEMA.items():
            section = full_key.split(".", 1)[0]
            if section in sections and full_key in self.values:
                kwargs[attr] = self.values[full_key]
        return cls(**kwargs)

    def train_config(self) -> TrainConfig:
        return self._build(
            TrainConfig, ("train", "crops", "augment", "bank", "loss", "encoder", "optim")
        )

    def eval_config(self) -> EvalConfig:
        return self._build(EvalConfig, ("eval",))

    def gen_config(self) -> GenConfig:
        return self._build(GenConfig, ("gen",))

    def cropstats_config(self) -> CropStatsConfig:
        return self._build(CropStatsConfig, ("cropstats",))

    def ablate_config(self) -> AblateConfig:
        return self._build(AblateConfig, ("ablate",))

    def with_variant(self, name: str) -> "Config":
        if name not in self.variant_overrides:
            raise ConfigError(f"undeclared variant {name!r}")
        out = Config(dict(self.values), dict(self.variant_overrides))
        for key, raw in self.variant_overrides[name].items():
            out.set(key, raw)
        return out


def parse_config_text(text: str) -> Config:
    cfg = Config()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section.startswith("variant."):
                cfg.variant_overrides.setdefault(section[len("variant."):], {})
            elif section not in _SECTION_DATACLASS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if section is None:
            raise ConfigError(f"line {lineno}: key {key!r} outside any [section]")
        if section.startswith("variant."):
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown override key {key!r}")
            cfg.variant_overrides[section[len("variant."):]][key] = value
        else:
            cfg.set(f"{section}.{key}", value)
    return cfg


def parse_config_file(path) -> tuple[Config, str]:
    """Returns (config, raw file text). Missing file raises FileNotFoundError."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text), text


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
