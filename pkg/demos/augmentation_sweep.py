"""How many generated images to add: a small sweep over M.

Trains one GAN, then a re-ID classifier per M and evaluates it on
disjoint, occluded query/gallery identities.  Takes a few minutes on CPU.

    python3 demos/augmentation_sweep.py
"""

from reidaug import (BaselineTrainConfig, GanTrainConfig, OcclusionConfig, channel_means, split_query_gallery,
                     synth_corpus, train_gan)
from reidaug.experiment import occluded_copy, sensitivity

train = synth_corpus(16, 8, 32, 16, seed=100)
stats = channel_means(train)
occ = OcclusionConfig(seed=0)
g, _, _ = train_gan(train, occ, stats, GanTrainConfig(epochs=30))

test = occluded_copy(synth_corpus(32, 8, 32, 16, seed=200, first_id=16), OcclusionConfig(seed=300), stats)
query, gallery = split_query_gallery(test, 4)
print(f"train {len(train)}  query {len(query)}  gallery {len(gallery)}")

n = len(train)
cfg = BaselineTrainConfig(epochs=30, batch_size=16, lr_step=20, feature_dim=64)
for row in sensitivity(train, query, gallery, g, [0, n // 2, n, 2 * n], occ, stats, cfg):
    print(f"M={row['M']:4d}  n_train={row['n_train']:4d}  mAP={row['mAP']:.3f}  rank1={row['rank1']:.3f}")
