"""Photometric/geometric view augmentation.

Images are H x W x 3 float arrays in [0, 1]. A policy is an ordered list of
ops, each fired independently with its own probability; output is clamped to
[0, 1] after every op.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

LUMA = np.array([0.299, 0.587, 0.114])

#: op kind -> inclusive magnitude range (None: magnitude unused)
MAGNITUDE_RANGES = {
    "horizontal-flip": None,
    "brightness": (0.0, 1.0),
    "contrast": (0.0, 1.0),
    "saturation": (0.0, 1.0),
    "hue-rotate": (0.0, 0.5),
    "grayscale": None,
    "gaussian-blur": (0.1, 5.0),
    "posterize": (1.0, 8.0),
    "solarize": (0.0, 1.0),
    "sharpness": (0.0, 2.0),
}


@dataclass(frozen=True)
class AugOp:
    kind: str
    prob: float
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in MAGNITUDE_RANGES:
            raise ConfigError(f"unknown augmentation op {self.kind!r}")
        if not (0.0 <= self.prob <= 1.0):
            raise ConfigError(f"{self.kind}: probability {self.prob} outside [0,1]")
        rng = MAGNITUDE_RANGES[self.kind]
        if rng is not None and not (rng[0] <= self.magnitude <= rng[1]):
            raise ConfigError(f"{self.kind}: magnitude {self.magnitude} outside {rng}")


AugPolicy = tuple[AugOp, ...]


def _jitter_factor(rng, magnitude):
    return rng.uniform(max(0.0, 1.0 - magnitude), 1.0 + magnitude)


def _grayscale(img):
    g = img @ LUMA
    return np.repeat(g[:, :, None], 3, axis=2)


def _rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0, 0.0, (h / 6.0) % 1.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    out = np.zeros(h.shape + (3,))
    for idx, (rr, gg, bb) in enumerate([(v, t, p), (q, v, p), (p, v, t),
                                        (p, q, v), (t, p, v), (v, p, q)]):
        m = i == idx
        out[..., 0][m] = rr[m]
        out[..., 1][m] = gg[m]
        out[..., 2][m] = bb[m]
    return out


def _gaussian_kernel(sigma):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur(img, sigma):
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect")
    rows = sum(k[j] * padded[j : j + img.shape[0]] for j in range(len(k)))
    padded = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(k[j] * padded[:, j : j + img.shape[1]] for j in range(len(k)))


def _smooth3(img):
    # PIL-style SMOOTH kernel for the sharpness op
    kernel = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out


def apply_op(img: np.ndarray, op: AugOp, rng: np.random.Generator) -> np.ndarray:
    if op.kind == "horizontal-flip":
        out = img[:, ::-1].copy()
    elif op.kind == "brightness":
        out = img * _jitter_factor(rng, op.magnitude)
    elif op.kind == "contrast":
        f = _jitter_factor(rng, op.magnitude)
        m = (img @ LUMA).mean()
        out = (img - m) * f + m
    elif op.kind == "saturation":
        f = _jitter_factor(rng, op.magnitude)
        g = _grayscale(img)
        out = (img - g) * f + g
    elif op.kind == "hue-rotate":
        shift = rng.uniform(-op.magnitude, op.magnitude)
        h, s, v = _rgb_to_hsv(img)
        out = _hsv_to_rgb((h + shift) % 1.0, s, v)
    elif op.kind == "grayscale":
        out = _grayscale(img)
    elif op.kind == "gaussian-blur":
        sigma = rng.uniform(0.1, max(0.1, op.magnitude))
        out = _blur(img, sigma)
    elif op.kind == "posterize":
        levels = 2.0 ** int(round(op.magnitude))
        out = np.floor(img * levels) / levels
    elif op.kind == "solarize":
        out = np.where(img >= op.magnitude, 1.0 - img, img)
    elif op.kind == "sharpness":
        f = _jitter_factor(rng, op.magnitude)
        smooth = _smooth3(img)
        out = smooth + (img - smooth) * f
    else:  # pragma: no cover - AugOp validates kinds
        raise ConfigError(f"unknown op {op.kind!r}")
    return np.clip(out, 0.0, 1.0)


def apply_policy(img: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    out = img
    for op in policy:
        if rng.uniform() < op.prob:
            out = apply_op(out, op, rng)
    return out


def apply_mixed(img: np.ndarray, standard: AugPolicy, strong: AugPolicy,
                p_strong: float, rng: np.random.Generator) -> np.ndarray:
    """Fire exactly one of the two policies; the strong one with prob p_strong."""
    if not (0.0 <= p_strong <= 1.0):
        raise ConfigError(f"p_strong {p_strong} outside [0,1]")
    if rng.uniform() < p_strong:
        return apply_policy(img, strong, rng)
    return apply_policy(img, standard, rng)


def standard_policy() -> AugPolicy:
    """Flip + color jitter + grayscale + blur, the usual contrastive recipe."""
    return (
        AugOp("horizontal-flip", 0.5),
        AugOp("brightness", 0.8, 0.4),
        AugOp("contrast", 0.8, 0.4),
        AugOp("saturation", 0.8, 0.4),
        AugOp("hue-rotate", 0.8, 0.1),
        AugOp("grayscale", 0.2),
        AugOp("gaussian-blur", 0.5, 2.0),
    )


def strong_policy() -> AugPolicy:
    """Posterize/solarize/sharpness-heavy policy with weaker color distortion."""
    return (
        AugOp("horizontal-flip", 0.5),
        AugOp("brightness", 0.4, 0.2),
        AugOp("contrast", 0.4, 0.2),
        AugOp("posterize", 0.5, 4.0),
        AugOp("solarize", 0.5, 0.75),
        AugOp("sharpness", 0.6, 0.9),
    )


def policy_to_string(policy: AugPolicy) -> str:
    parts = []
    for op in policy:
        if MAGNITUDE_RANGES[op.kind] is None:
            parts.append(f"{op.kind}:{op.prob:g}")
        else:
            parts.append(f"{op.kind}:{op.prob:g}:{op.magnitude:g}")
    return ",".join(parts)


def policy_from_string(text: str) -> AugPolicy:
    ops = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        fields = chunk.split(":")
        if len(fields) == 2:
            ops.append(AugOp(fields[0], float(fields[1])))
        elif len(fields) == 3:
            ops.append(AugOp(fields[0], float(fields[1]), float(fields[2])))
        else:
            raise ConfigError(f"bad augmentation op spec {chunk!r}")
    return tuple(ops)
