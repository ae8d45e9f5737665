"""Procedural image datasets with exact instance masks.

Images are colored geometric shapes (class = shape archetype + class hue) on
low-amplitude value-noise backgrounds, so instance discrimination cannot be
solved from background color alone. Variants: object-centric (one centered
shape), scene-centric (several randomly placed shapes), and video (sequences
of frames with shapes on linear + jitter trajectories, stable identities).

All generator parameters are artifact choices; nothing here reproduces a real
dataset's construction beyond its distributional shape.
"""
from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .crops import CropRect, crop_and_resize
from .errors import ConfigError, DataFormatError, GenerationError

SHAPE_NAMES = ("disc", "square", "triangle", "cross", "ring", "diamond")
VARIANTS = ("object", "scene", "video")

MAGIC = b"KMDS"
VERSION = 1


@dataclass
class SynthDataset:
    images: np.ndarray  # [n, H, W, 3] float64 in [0, 1]
    labels: list[list[int]]  # labels[i][j] = class of instance id j+1 in image i
    masks: np.ndarray  # [n, H, W] uint16 instance ids, 0 = background
    variant: str
    seed: int
    num_classes: int
    sequence_ids: np.ndarray | None = None  # [n] uint32, video frames share an id

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def primary_labels(self) -> np.ndarray:
        """Class of the largest-area instance per image (probe target)."""
        out = np.empty(len(self), dtype=np.int64)
        for i in range(len(self)):
            ids, counts = np.unique(self.masks[i], return_counts=True)
            fg = ids > 0
            if not fg.any():
                raise GenerationError(f"image {i} has no foreground")
            best = ids[fg][counts[fg].argmax()]
            out[i] = self.labels[i][best - 1]
        return out

    def semantic_mask(self, i: int) -> np.ndarray:
        """Class map: 0 = background, class c renders as c+1."""
        mask = self.masks[i]
        lut = np.zeros(len(self.labels[i]) + 1, dtype=np.int64)
        for inst_id, cls in enumerate(self.labels[i], start=1):
            lut[inst_id] = cls + 1
        return lut[mask]

    def sequences(self) -> list[np.ndarray]:
        """Frame indices per video sequence, in frame order."""
        if self.sequence_ids is None or self.variant != "video":
            raise ConfigError("not a video dataset")
        out = []
        for sid in np.unique(self.sequence_ids):
            out.append(np.flatnonzero(self.sequence_ids == sid))
        return out


@dataclass(frozen=True)
class LongTailSpec:
    """Heavy-tailed class counts; alpha records the Pareto power being mimicked."""

    num_classes: int
    n_max: int
    n_min: int
    alpha: float = 6.0

    def __post_init__(self):
        if not (self.n_max >= self.n_min >= 1):
            raise ConfigError(f"need n_max >= n_min >= 1, got {self.n_max}, {self.n_min}")
        if self.num_classes < 1:
            raise ConfigError(f"need at least one class, got {self.num_classes}")


def longtail_counts(spec: LongTailSpec) -> np.ndarray:
    """n_c = max(n_min, round(n_max * (c+1)^-gamma)), gamma fit so the tail hits n_min."""
    c = spec.num_classes
    if c == 1 or spec.n_max == spec.n_min:
        return np.full(c, spec.n_max, dtype=np.int64)
    gamma = math.log(spec.n_max / spec.n_min) / math.log(c)
    ranks = np.arange(1, c + 1, dtype=np.float64)
    counts = np.floor(spec.n_max * ranks ** (-gamma) + 0.5).astype(np.int64)
    return np.maximum(counts, spec.n_min)


# ---------------------------------------------------------------------------
# rendering


def _class_color(cls: int, rng: np.random.Generator) -> np.ndarray:
    hue = (0.15 + 0.61803398875 * cls + rng.uniform(-0.02, 0.02)) % 1.0
    val = 0.85 + rng.uniform(-0.08, 0.08)
    return np.array(colorsys.hsv_to_rgb(hue, 0.78, val))


BACKGROUND_HUES = np.linspace(0.0, 1.0, 9)[:-1]  # palette shared by many images


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    """Low-amplitude value noise over a weakly tinted base.

    The tint comes from a small shared palette, so background color alone
    cannot identify an image, but crops of the same image share it."""
    hue = BACKGROUND_HUES[rng.integers(len(BACKGROUND_HUES))]
    base = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.18, 0.30), rng.uniform(0.40, 0.58)))
    coarse = base + rng.uniform(-0.10, 0.10, size=(5, 5, 3))
    rect = CropRect(0.0, 0.0, 5.0, 5.0, 5, 5)
    return np.clip(crop_and_resize(coarse, rect, side), 0.0, 1.0)


def _shape_membership(shape: str, cx: float, cy: float, radius: float, theta: float,
                      side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape not in ("disc", "ring"):
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        dx, dy = dx * cos_t + dy * sin_t, -dx * sin_t + dy * cos_t
    if shape == "disc":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius * 0.9
    if shape == "triangle":
        # equilateral triangle of circumradius `radius`, apex up
        inside = np.ones((side, side), dtype=bool)
        for ang in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3):
            vx, vy = math.cos(ang), -math.sin(ang)
            inside &= dx * vx + dy * vy <= radius * 0.5
        return inside
    if shape == "cross":
        arm = radius / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
        )
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= radius * radius) & (d2 >= (0.55 * radius) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius * 1.1
    raise ConfigError(f"unknown shape {shape!r}")


@dataclass
class _Obj:
    cls: int
    shape: str
    cx: float
    cy: float
    radius: float
    theta: float
    color: np.ndarray
    vx: float = 0.0
    vy: float = 0.0


def _render(objs: list[_Obj], side: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    img = _background(side, rng)
    mask = np.zeros((side, side), dtype=np.uint16)
    for inst_id, o in enumerate(objs, start=1):
        member = _shape_membership(o.shape, o.cx, o.cy, o.radius, o.theta, side)
        img[member] = o.color
        mask[member] = inst_id
    return img, mask


def _make_object(cls: int, cx: float, cy: float, radius: float,
                 rng: np.random.Generator) -> _Obj:
    shape = SHAPE_NAMES[cls % len(SHAPE_NAMES)]
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return _Obj(cls, shape, cx, cy, radius, theta, _class_color(cls, rng))


def _all_visible(mask: np.ndarray, n_objects: int, min_pixels: int = 4) -> bool:
    counts = np.bincount(mask.reshape(-1), minlength=n_objects + 1)
    return bool((counts[1 : n_objects + 1] >= min_pixels).all())


def generate(variant: str, num_classes: int, n: int, seed: int,
             objects_per_image_range: tuple[int, int] = (3, 8), side: int = 64,
             class_counts: np.ndarray | None = None) -> SynthDataset:
    """Render an object-centric or scene-centric dataset.

    ``class_counts`` (len num_classes) fixes how often each class appears as
    the primary object; n is then ignored in favor of the count sum."""
    if variant not in ("object", "scene"):
        raise ConfigError(f"generate: variant must be object|scene, got {variant!r}")
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if class_counts is not None:
        if len(class_counts) != num_classes:
            raise ConfigError("class_counts length must equal num_classes")
        primary = np.repeat(np.arange(num_classes), class_counts)
        root = np.random.default_rng([seed, 0xC1A55])
        primary = primary[root.permutation(len(primary))]
        n = len(primary)
        class_probs = np.asarray(class_counts, dtype=np.float64)
        class_probs = class_probs / class_probs.sum()
    else:
        if n < num_classes:
            raise ConfigError("need n >= num_classes")
        primary = None
        class_probs = None

    images = np.empty((n, side, side, 3))
    masks = np.empty((n, side, side), dtype=np.uint16)
    labels: list[list[int]] = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        for attempt in range(30):
            objs = []
            if variant == "object":
                cls = int(primary[i]) if primary is not None else int(rng.integers(num_classes))
                radius = rng.uniform(0.22, 0.33) * side
                cx = side / 2.0 + rng.uniform(-0.08, 0.08) * side
                cy = side / 2.0 + rng.uniform(-0.08, 0.08) * side
                objs.append(_make_object(cls, cx, cy, radius, rng))
            else:
                lo, hi = objects_per_image_range
                count = int(rng.integers(lo, hi + 1))
                for j in range(count):
                    if j == 0 and primary is not None:
                        cls = int(primary[i])
                    elif class_probs is not None:
                        cls = int(rng.choice(num_classes, p=class_probs))
                    else:
                        cls = int(rng.integers(num_classes))
                    radius = rng.uniform(0.09, 0.16) * side
                    margin = radius * 0.7
                    cx = rng.uniform(margin, side - margin)
                    cy = rng.uniform(margin, side - margin)
                    objs.append(_make_object(cls, cx, cy, radius, rng))
            img, mask = _render(objs, side, rng)
            if _all_visible(mask, len(objs)):
                images[i] = img
                masks[i] = mask
                labels.append([o.cls for o in objs])
                break
        else:
            raise GenerationError(f"could not place visible objects for image {i}")
    return SynthDataset(images, labels, masks, variant, seed, num_classes)


def generate_video(num_classes: int, sequences: int, frames_per_seq: int, seed: int,
                   side: int = 64, objects_per_seq: tuple[int, int] = (1, 3),
                   speed_range: tuple[float, float] = (0.5, 2.5),
                   jitter: float = 0.25) -> SynthDataset:
    """Sequences of frames with shapes on linear + jitter paths, bouncing at
    the frame margins; instance identities are stable across frames."""
    if frames_per_seq < 2:
        raise ConfigError("need at least 2 frames per sequence")
    n = sequences * frames_per_seq
    images = np.empty((n, side, side, 3))
    masks = np.empty((n, side, side), dtype=np.uint16)
    labels: list[list[int]] = []
    seq_ids = np.empty(n, dtype=np.uint32)
    idx = 0
    for s in range(sequences):
        rng = np.random.default_rng([seed, 0x71DE0, s])
        for attempt in range(30):
            count = int(rng.integers(objects_per_seq[0], objects_per_seq[1] + 1))
            objs = []
            for _ in range(count):
                cls = int(rng.integers(num_classes))
                radius = rng.uniform(0.12, 0.18) * side
                margin = radius + 2.0
                o = _make_object(
                    cls,
                    rng.uniform(side * 0.3, side * 0.7),
                    rng.uniform(side * 0.3, side * 0.7),
                    radius,
                    rng,
                )
                speed = rng.uniform(*speed_range)
                ang = rng.uniform(0.0, 2.0 * math.pi)
                o.vx, o.vy = speed * math.cos(ang), speed * math.sin(ang)
                objs.append(o)
            frames = []
            state = [(o.cx, o.cy, o.vx, o.vy) for o in objs]
            ok = True
            bg_rng = np.random.default_rng([seed, 0x71DE1, s])
            background = _background(side, bg_rng)
            for t in range(frames_per_seq):
                img = background.copy()
                mask = np.zeros((side, side), dtype=np.uint16)
                for inst_id, o in enumerate(objs, start=1):
                    cx, cy, vx, vy = state[inst_id - 1]
                    jx = rng.normal(0.0, jitter) if jitter > 0 else 0.0
                    jy = rng.normal(0.0, jitter) if jitter > 0 else 0.0
                    member = _shape_membership(o.shape, cx + jx, cy + jy, o.radius,
                                               o.theta, side)
                    img[member] = o.color
                    mask[member] = inst_id
                    margin = o.radius + 2.0
                    nx, ny = cx + vx, cy + vy
                    if nx < margin or nx > side - margin:
                        vx = -vx
                        nx = cx + vx
                    if ny < margin or ny > side - margin:
                        vy = -vy
                        ny = cy + vy
                    state[inst_id - 1] = (nx, ny, vx, vy)
                if not _all_visible(mask, count):
                    ok = False
                    break
                frames.append((img, mask))
            if ok:
                break
        else:
            raise GenerationError(f"could not build sequence {s}")
        for img, mask in frames:
            images[idx] = img
            masks[idx] = mask
            labels.append([o.cls for o in objs])
            seq_ids[idx] = s + 1
            idx += 1
    return SynthDataset(images, labels, masks, "video", seed, num_classes, seq_ids)


# ---------------------------------------------------------------------------
# file format


def save_dataset(path, ds: SynthDataset) -> None:
    variant_code = VARIANTS.index(ds.variant)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIII", VERSION, len(ds), ds.side, ds.side, 3, variant_code))
        for i in range(len(ds)):
            fh.write(ds.images[i].astype("<f4").tobytes())
            lab = ds.labels[i]
            fh.write(struct.pack("<I", len(lab)))
            fh.write(np.asarray(lab, dtype="<u4").tobytes())
            fh.write(ds.masks[i].astype("<u2").tobytes())
            sid = int(ds.sequence_ids[i]) if ds.sequence_ids is not None else 0
            fh.write(struct.pack("<I", sid))


def _read(fh, n, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise DataFormatError(f"truncated dataset while reading {what}")
    return raw


def load_dataset(path) -> SynthDataset:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise DataFormatError("bad magic bytes (not a KMDS dataset)")
        version, count, h, w, c, variant_code = struct.unpack("<IIIIII", _read(fh, 24, "header"))
        if version != VERSION:
            raise DataFormatError(f"unsupported dataset version {version}")
        if c != 3 or variant_code >= len(VARIANTS):
            raise DataFormatError("corrupt dataset header")
        images = np.empty((count, h, w, 3))
        masks = np.empty((count, h, w), dtype=np.uint16)
        labels: list[list[int]] = []
        seq_ids = np.empty(count, dtype=np.uint32)
        num_classes = 0
        for i in range(count):
            images[i] = np.frombuffer(
                _read(fh, 4 * h * w * 3, "image"), dtype="<f4"
            ).reshape(h, w, 3).astype(np.float64)
            (n_lab,) = struct.unpack("<I", _read(fh, 4, "label count"))
            lab = np.frombuffer(_read(fh, 4 * n_lab, "labels"), dtype="<u4")
            labels.append([int(x) for x in lab])
            if n_lab:
                num_classes = max(num_classes, int(lab.max()) + 1)
            masks[i] = np.frombuffer(_read(fh, 2 * h * w, "mask"), dtype="<u2").reshape(h, w)
            (seq_ids[i],) = struct.unpack("<I", _read(fh, 4, "sequence id"))
    variant = VARIANTS[variant_code]
    return SynthDataset(
        images, labels, masks, variant, seed=-1, num_classes=num_classes,
        sequence_ids=seq_ids if variant == "video" else None,
    )
