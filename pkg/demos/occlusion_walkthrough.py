"""Random occlusion on the synthetic corpus.

Draws one rectangle per image, fills it with the training-set channel
means and writes a grid of (original, occluded) columns.

    python3 demos/occlusion_walkthrough.py /tmp/occlusion_demo
"""

import sys
from pathlib import Path

from reidaug import OcclusionConfig, channel_means, occlude_dataset, synth_corpus
from reidaug.grids import save_column_grids

out = Path(sys.argv[1] if len(sys.argv) > 1 else "occlusion_demo")

train = synth_corpus(16, 8, 32, 16, seed=7)
stats = channel_means(train)
print(f"{len(train)} images, channel means {tuple(round(v, 1) for v in stats.fill)}")

pairs = occlude_dataset(train, OcclusionConfig(seed=0), stats)
areas = [p.rect.area / (32 * 16) for p in pairs]
print(f"covered area: min {min(areas):.2f}  max {max(areas):.2f}")
print(f"fallback rects: {sum(p.rect.fallback for p in pairs)}")

# a second epoch draws fresh rectangles for the same images
again = occlude_dataset(train, OcclusionConfig(seed=0), stats, epoch=2)
moved = sum(a.rect != b.rect for a, b in zip(pairs, again))
print(f"{moved}/{len(pairs)} rects differ between epochs")

paths = save_column_grids(out, [(p.original, p.occluded) for p in pairs[:16]])
print("wrote", *paths)
