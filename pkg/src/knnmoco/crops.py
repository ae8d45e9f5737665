"""Rectangle sampling for contrastive views.

Covers random-resized-crop semantics, IoU between crop pairs, IoU-bounded
pair sampling, the overlap-constrained multi-crop transform, and bilinear
crop-and-resize.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConstraintInfeasibleError, SamplingError


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned rectangle inside a W x H source image (pixel units)."""

    x0: float
    y0: float
    w: float
    h: float
    src_w: int
    src_h: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise SamplingError(f"degenerate crop {self.w}x{self.h}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > self.src_w + 1e-9 or self.y0 + self.h > self.src_h + 1e-9:
            raise SamplingError(
                f"crop ({self.x0},{self.y0},{self.w},{self.h}) outside {self.src_w}x{self.src_h}"
            )

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def area_fraction(self) -> float:
        return self.area / (self.src_w * self.src_h)


@dataclass(frozen=True)
class CropSpec:
    """Area-fraction range, aspect-ratio range, and output side length."""

    scale: tuple[float, float]
    out_side: int
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)

    def __post_init__(self):
        s_lo, s_hi = self.scale
        r_lo, r_hi = self.ratio
        if not (0.0 < s_lo <= s_hi <= 1.0):
            raise SamplingError(f"bad scale range {self.scale}")
        if not (0.0 < r_lo <= r_hi):
            raise SamplingError(f"bad ratio range {self.ratio}")
        if self.out_side < 1:
            raise SamplingError(f"bad output side {self.out_side}")


def _intersection(a: CropRect, b: CropRect) -> float:
    iw = min(a.x0 + a.w, b.x0 + b.w) - max(a.x0, b.x0)
    ih = min(a.y0 + a.h, b.y0 + b.h) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: CropRect, b: CropRect) -> float:
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def overlap_fraction(crop: CropRect, anchor: CropRect) -> float:
    """area(crop intersect anchor) / area(crop)."""
    return _intersection(crop, anchor) / crop.area


def sample_rrc(rng: np.random.Generator, src_w: int, src_h: int, spec: CropSpec,
               max_attempts: int = 10) -> CropRect:
    """Random resized crop: uniform area fraction, log-uniform aspect ratio.

    Dims are rounded to whole pixels and clipped to fit the source; the offset
    is uniform over valid placements. Degenerate rounding (a zero-size dim)
    consumes an attempt; after ``max_attempts`` the largest centered rectangle
    within the ratio range is returned.
    """
    if src_w < 1 or src_h < 1:
        raise SamplingError(f"empty source image {src_w}x{src_h}")
    area = src_w * src_h
    log_rlo, log_rhi = math.log(spec.ratio[0]), math.log(spec.ratio[1])
    for _ in range(max_attempts):
        target = rng.uniform(spec.scale[0], spec.scale[1]) * area
        ratio = math.exp(rng.uniform(log_rlo, log_rhi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        w = min(w, src_w)
        h = min(h, src_h)
        if w < 1 or h < 1:
            continue
        x0 = rng.uniform(0.0, src_w - w)
        y0 = rng.uniform(0.0, src_h - h)
        return CropRect(x0, y0, float(w), float(h), src_w, src_h)
    # fallback: largest centered rect whose ratio lies in range
    in_ratio = src_w / src_h
    if in_ratio < spec.ratio[0]:
        w, h = src_w, max(1, int(round(src_w / spec.ratio[0])))
    elif in_ratio > spec.ratio[1]:
        w, h = max(1, int(round(src_h * spec.ratio[1]))), src_h
    else:
        w, h = src_w, src_h
    if w < 1 or h < 1:
        raise SamplingError(f"infeasible crop spec {spec} for {src_w}x{src_h}")
    return CropRect((src_w - w) / 2.0, (src_h - h) / 2.0, float(w), float(h), src_w, src_h)


def sample_pair_iou_bounded(rng: np.random.Generator, src_w: int, src_h: int,
                            spec: CropSpec, iou_max: float,
                            max_attempts: int = 100,
                            counters: dict | None = None) -> tuple[CropRect, CropRect]:
    """Sample a crop pair with iou(a, b) <= iou_max by rejecting the second crop.

    A large first crop can make the bound unsatisfiable for every possible
    second crop (their intersection is forced), so the first crop is redrawn
    after every 10 consecutive rejections."""
    if not (0.0 <= iou_max <= 1.0):
        raise SamplingError(f"iou_max must be in [0,1], got {iou_max}")
    a = sample_rrc(rng, src_w, src_h, spec)
    for attempt in range(max_attempts):
        b = sample_rrc(rng, src_w, src_h, spec)
        if iou(a, b) <= iou_max:
            if counters is not None:
                counters["pair_rejections"] = counters.get("pair_rejections", 0) + attempt
            return a, b
        if (attempt + 1) % 10 == 0:
            a = sample_rrc(rng, src_w, src_h, spec)
    raise ConstraintInfeasibleError(
        f"no crop pair with IoU <= {iou_max} after {max_attempts} attempts"
    )


def sample_constrained_multicrop(rng: np.random.Generator, anchor: CropRect, n: int,
                                 small_spec: CropSpec, min_overlap: float = 0.2,
                                 max_attempts: int = 100,
                                 counters: dict | None = None) -> list[CropRect]:
    """Sample n small crops, each overlapping the anchor by >= min_overlap of
    its own area. Rejection sampling with a deterministic fallback: re-center
    the failed candidate inside the anchor."""
    out: list[CropRect] = []
    for _ in range(n):
        crop = None
        for _ in range(max_attempts):
            cand = sample_rrc(rng, anchor.src_w, anchor.src_h, small_spec)
            if overlap_fraction(cand, anchor) >= min_overlap:
                crop = cand
                break
            if counters is not None:
                counters["multicrop_resamples"] = counters.get("multicrop_resamples", 0) + 1
        if crop is None:
            cand_w, cand_h = cand.w, cand.h
            cx = anchor.x0 + anchor.w / 2.0
            cy = anchor.y0 + anchor.h / 2.0
            x0 = min(max(cx - cand_w / 2.0, 0.0), anchor.src_w - cand_w)
            y0 = min(max(cy - cand_h / 2.0, 0.0), anchor.src_h - cand_h)
            crop = CropRect(x0, y0, cand_w, cand_h, anchor.src_w, anchor.src_h)
            if counters is not None:
                counters["multicrop_fallbacks"] = counters.get("multicrop_fallbacks", 0) + 1
            if overlap_fraction(crop, anchor) < min_overlap:
                raise ConstraintInfeasibleError(
                    "re-centered crop still violates the overlap constraint"
                )
        out.append(crop)
    return out


def crop_and_resize(image: np.ndarray, rect: CropRect, out_side: int) -> np.ndarray:
    """Bilinear resample of an H x W x C image region to out_side x out_side.

    Half-pixel-center convention; sample coordinates are clamped to the crop
    so edge rows replicate rather than bleed outside the rectangle.
    """
    h_img, w_img = image.shape[:2]
    if rect.src_w != w_img or rect.src_h != h_img:
        raise SamplingError(f"rect source {rect.src_w}x{rect.src_h} vs image {w_img}x{h_img}")
    ys = rect.y0 + (np.arange(out_side) + 0.5) * rect.h / out_side - 0.5
    xs = rect.x0 + (np.arange(out_side) + 0.5) * rect.w / out_side - 0.5
    ys = np.clip(ys, rect.y0, rect.y0 + rect.h - 1.0)
    xs = np.clip(xs, rect.x0, rect.x0 + rect.w - 1.0)
    ys = np.clip(ys, 0.0, h_img - 1.0)
    xs = np.clip(xs, 0.0, w_img - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h_img - 1)
    x1 = np.minimum(x0 + 1, w_img - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = image if image.ndim == 3 else image[:, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if image.ndim == 3 else out[:, :, 0]


def iou_histogram(rng: np.random.Generator, src_w: int, src_h: int, spec: CropSpec,
                  draws: int, bins: int = 20) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample independent crop pairs and histogram their IoU values.

    Returns (bin_left, bin_right, counts)."""
    vals = np.empty(draws)
    for i in range(draws):
        a = sample_rrc(rng, src_w, src_h, spec)
        b = sample_rrc(rng, src_w, src_h, spec)
        vals[i] = iou(a, b)
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return edges[:-1], edges[1:], counts
