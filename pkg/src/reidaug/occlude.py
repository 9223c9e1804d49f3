"""Random rectangular occlusion filled with dataset channel means."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import ChannelStats, Dataset

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 64
_EPS = 1e-9
FILL_MODES = ("mean", "black", "white")


@dataclass(frozen=True)
class OcclusionRect:
    x: int
    y: int
    w: int
    h: int
    fill: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fallback: bool = False

    def __post_init__(self):
        if self.w < 1 or self.h < 1 or self.x < 0 or self.y < 0:
            raise ValueError(f"degenerate rect {self}")
        if any(not 0.0 <= v <= 255.0 for v in self.fill):
            raise ValueError(f"fill {self.fill} outside [0, 255]")

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, img_h: int, img_w: int) -> bool:
        return self.x + self.w <= img_w and self.y + self.h <= img_h

    def mask(self, img_h: int, img_w: int) -> np.ndarray:
        m = np.zeros((img_h, img_w), dtype=bool)
        m[self.y:self.y + self.h, self.x:self.x + self.w] = True
        return m


@dataclass(frozen=True, eq=False)
class OccludedPair:
    occluded: np.ndarray
    original: np.ndarray
    rect: OcclusionRect


@dataclass(frozen=True)
class OcclusionConfig:
    area_ratio_min: float = 0.1
    area_ratio_max: float = 0.4
    aspect_min: float = 0.3
    aspect_max: float = 3.3
    fill: str = "mean"
    resample_per_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.area_ratio_min <= self.area_ratio_max <= 1:
            raise ValueError("need 0 < area_ratio_min <= area_ratio_max <= 1")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ValueError("need 0 < aspect_min <= aspect_max")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}")

    def fill_values(self, stats: ChannelStats | None) -> tuple[float, float, float]:
        if self.fill == "black":
            return (0.0, 0.0, 0.0)
        if self.fill == "white":
            return (255.0, 255.0, 255.0)
        if stats is None:
            raise ValueError("mean fill requires channel statistics")
        return stats.fill


def admissible(cfg: OcclusionConfig, img_h: int, img_w: int, w: int, h: int) -> bool:
    """Whether a ``w x h`` rectangle meets the area and aspect bounds."""
    if not (1 <= w <= img_w and 1 <= h <= img_h):
        return False
    ratio = (w * h) / (img_h * img_w)
    aspect = w / h
    return (cfg.area_ratio_min - _EPS <= ratio <= cfg.area_ratio_max + _EPS
            and cfg.aspect_min - _EPS <= aspect <= cfg.aspect_max + _EPS)


def _fallback_size(cfg: OcclusionConfig, img_h: int, img_w: int) -> tuple[int, int]:
    best = None
    for h in range(1, img_h + 1):
        for w in range(1, img_w + 1):
            if admissible(cfg, img_h, img_w, w, h):
                key = (w * h, -abs(math.log(w / h)), w)
                if best is None or key > best[0]:
                    best = (key, w, h)
    if best is None:
        raise ValueError(f"no rectangle on a {img_h}x{img_w} image satisfies {cfg}")
    return best[1], best[2]


def sample_rect(cfg: OcclusionConfig, img_h: int, img_w: int, rng: np.random.Generator,
                fill: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> OcclusionRect:
    """Draw area ratio and aspect (w/h) uniformly, place the rect uniformly.

    Rejected draws are retried up to ``MAX_ATTEMPTS`` times; after that the
    largest admissible rect is centred and flagged with ``fallback=True``.
    """
    if img_h < 4 or img_w < 4:
        raise ValueError("image must be at least 4x4")
    total = img_h * img_w
    for _ in range(MAX_ATTEMPTS):
        area = rng.uniform(cfg.area_ratio_min, cfg.area_ratio_max) * total
        aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max)
        w = int(round(math.sqrt(area * aspect)))
        h = int(round(math.sqrt(area / aspect)))
        if admissible(cfg, img_h, img_w, w, h):
            x = int(rng.integers(0, img_w - w + 1))
            y = int(rng.integers(0, img_h - h + 1))
            return OcclusionRect(x, y, w, h, tuple(float(v) for v in fill))
    w, h = _fallback_size(cfg, img_h, img_w)
    log.debug("rect sampling fell back to centred %dx%d on %dx%d", w, h, img_w, img_h)
    return OcclusionRect((img_w - w) // 2, (img_h - h) // 2, w, h,
                         tuple(float(v) for v in fill), fallback=True)


def apply_occlusion(img: np.ndarray, rect: OcclusionRect) -> OccludedPair:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    _, img_h, img_w = img.shape
    if not rect.inside(img_h, img_w):
        raise ValueError(f"rect {rect} exceeds image bounds {img_h}x{img_w}")
    original = np.array(img, copy=True)
    occluded = np.array(img, copy=True)
    fill = np.asarray(rect.fill, dtype=img.dtype)
    occluded[:, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w] = fill[:, None, None]
    original.setflags(write=False)
    occluded.setflags(write=False)
    return OccludedPair(occluded, original, rect)


def image_rng(seed: int, index: int, *extra: int) -> np.random.Generator:
    """Independent substream per image so results do not depend on visit order."""
    return np.random.default_rng([seed, index, *extra])


def occlude_dataset(ds: Dataset, cfg: OcclusionConfig, stats: ChannelStats | None,
                    *, epoch: int | None = None) -> list[OccludedPair]:
    """One occlusion per image, in dataset order.

    ``epoch`` selects a different substream so training can resample rects
    each pass; ``None`` gives the fixed per-image draw.
    """
    if len(ds) == 0:
        raise ValueError("cannot occlude an empty dataset")
    fill = cfg.fill_values(stats)
    extra = () if epoch is None else (epoch,)
    pairs = []
    for i, s in enumerate(ds.samples):
        _, img_h, img_w = s.pixels.shape
        rect = sample_rect(cfg, img_h, img_w, image_rng(cfg.seed, i, *extra), fill)
        pairs.append(apply_occlusion(s.pixels, rect))
    return pairs
