"""Random-occlusion and de-occlusion GAN augmentation for person re-identification."""

from .augment import AugmentationPlan, build_augmented_set, plan
from .baseline import BaselineTrainConfig, ClassifierNet, extract_features, train_classifier
from .data import (ChannelStats, Dataset, PersonImage, channel_means, load_directory, split_query_gallery,
                   synth_corpus)
from .evalkit import EvalProtocol, EvalReport, evaluate, pairwise_distances, pool_multi_query, rerank_k_reciprocal
from .gan import (DiscriminatorNet, GanTrainConfig, GeneratorNet, discriminator_loss, euclidean_loss,
                  generate_deoccluded, generator_adversarial_loss, generator_forward, train_gan)
from .occlude import OccludedPair, OcclusionConfig, OcclusionRect, apply_occlusion, occlude_dataset, sample_rect

__version__ = "0.1.0"
