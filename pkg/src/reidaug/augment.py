"""Label-preserving augmentation: allocate M generated images and merge them with the real set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ChannelStats, Dataset
from .gan import generate_deoccluded
from .occlude import OcclusionConfig


@dataclass(frozen=True)
class AugmentationPlan:
    n_real: int
    m_generated: int
    per_image_counts: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        counts = self.per_image_counts
        if len(counts) != self.n_real:
            raise ValueError("per_image_counts must have one entry per real image")
        if sum(counts) != self.m_generated:
            raise ValueError("per_image_counts must sum to m_generated")
        if counts and max(counts) - min(counts) > 1:
            raise ValueError("allocation must be balanced (max - min <= 1)")

    @property
    def n_total(self) -> int:
        return self.n_real + self.m_generated

    def order(self) -> list[tuple[int, int]]:
        """``(source index, variant)`` for every generated image, in output order."""
        return [(i, v) for i, c in enumerate(self.per_image_counts) for v in range(c)]


def plan(n_real: int, m: int, seed: int = 0) -> AugmentationPlan:
    """Every image gets ``m // n_real`` variants; ``m % n_real`` random images get one more."""
    if n_real < 1:
        raise ValueError("n_real must be >= 1")
    if m < 0:
        raise ValueError("m must be non-negative")
    base, extra = divmod(m, n_real)
    counts = np.full(n_real, base, dtype=np.int64)
    if extra:
        chosen = np.random.default_rng([seed, 0xA11]).choice(n_real, size=extra, replace=False)
        counts[chosen] += 1
    return AugmentationPlan(n_real, m, tuple(int(c) for c in counts), seed)


def build_augmented_set(train: Dataset, g, aug_plan: AugmentationPlan, occ_cfg: OcclusionConfig,
                        stats: ChannelStats | None, *, allow_untrained: bool = False) -> Dataset:
    """Real samples in manifest order followed by generated ones in plan order.

    Variant ``v`` of image ``i`` is produced from its own rect substream, so
    different variants of one source use different occlusions.
    """
    if aug_plan.n_real != len(train):
        raise ValueError(f"plan is for {aug_plan.n_real} images, training set has {len(train)}")
    if aug_plan.m_generated == 0:
        return train
    by_variant = {}
    for v in range(max(aug_plan.per_image_counts)):
        idx = [i for i, c in enumerate(aug_plan.per_image_counts) if c > v]
        sub = Dataset(tuple(train.samples[i] for i in idx), train.split, train.name)
        out = generate_deoccluded(g, sub, occ_cfg, stats, aug_plan.seed, variant=v, indices=idx,
                                  allow_untrained=allow_untrained)
        by_variant.update({(i, v): s for i, s in zip(idx, out.samples)})
    generated = tuple(by_variant[key] for key in aug_plan.order())
    return Dataset(train.samples + generated, train.split, train.name)
