"""Train the de-occlusion GAN at desk scale and look at what it produces.

    python3 demos/deocclusion_gan.py /tmp/gan_demo
"""

import sys
from pathlib import Path

from reidaug import GanTrainConfig, OcclusionConfig, channel_means, synth_corpus, train_gan
from reidaug.gan import build_state, generate_deoccluded, reconstruction_loss
from reidaug.grids import save_column_grids

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gan_demo")

train = synth_corpus(16, 8, 32, 16, seed=7)
held_out = synth_corpus(16, 4, 32, 16, seed=8, first_id=16)
stats = channel_means(train)
occ = OcclusionConfig(seed=0)
cfg = GanTrainConfig(epochs=30, seed=0)

before = reconstruction_loss(build_state(cfg).generator, held_out, occ, stats)
g, d, log = train_gan(train, occ, stats, cfg)
after = reconstruction_loss(g, held_out, occ, stats)

for row in log[::5] + [log[-1]]:
    print(f"epoch {row['epoch']:3d}  D {row['d_loss']:.3f}  adv {row['g_adv_loss']:.3f}  l2 {row['g_l2_loss']:.4f}")
print(f"held-out reconstruction loss {before:.4f} -> {after:.4f} ({after / before:.0%} of untrained)")

# fresh rects, never seen during training; identities carry over to the outputs
generated, pairs = generate_deoccluded(g, held_out, occ, stats, seed=1, return_pairs=True)
assert [s.identity for s in generated] == [s.identity for s in held_out]
columns = [(p.occluded, s.pixels, p.original) for p, s in zip(pairs[:16], generated)]
print("wrote", *save_column_grids(out, columns))
