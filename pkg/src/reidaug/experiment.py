"""Sensitivity sweep over the number of generated images M, and test-set helpers."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .augment import build_augmented_set, plan
from .baseline import BaselineTrainConfig, extract_features, train_classifier
from .data import ChannelStats, Dataset, PersonImage
from .evalkit import EvalProtocol, EvalReport, evaluate, pairwise_distances, pool_multi_query
from .occlude import OcclusionConfig, occlude_dataset


def occluded_copy(ds: Dataset, occ_cfg: OcclusionConfig, stats: ChannelStats | None) -> Dataset:
    """Same samples with one random occlusion each (used to make test sets harder)."""
    pairs = occlude_dataset(ds, occ_cfg, stats)
    samples = tuple(PersonImage(p.occluded, s.identity, s.camera, s.source, s.origin_path)
                    for p, s in zip(pairs, ds.samples))
    return Dataset(samples, ds.split, ds.name)


def meta(ds: Dataset) -> np.ndarray:
    return np.stack([ds.identities, ds.cameras], axis=1)


def evaluate_embeddings(q_feat: np.ndarray, q_meta: np.ndarray, g_feat: np.ndarray, g_meta: np.ndarray,
                        protocol: EvalProtocol, seed: int = 0) -> EvalReport:
    if protocol.query_mode == "multi":
        q_feat, q_meta = pool_multi_query(q_feat, q_meta, protocol.pooling)
    return evaluate(pairwise_distances(q_feat, g_feat), q_meta, g_meta, protocol, seed)


def sensitivity(train: Dataset, query: Dataset, gallery: Dataset, g, m_values, occ_cfg: OcclusionConfig,
                stats: ChannelStats | None, cfg: BaselineTrainConfig, protocol: EvalProtocol | None = None,
                aug_seed: int = 0) -> list[dict]:
    """Train one classifier per M (same init seed, shared generator) and evaluate it."""
    protocol = protocol or EvalProtocol()
    rows = []
    for m in m_values:
        if m < 0:
            raise ValueError("M must be non-negative")
        aug = build_augmented_set(train, g, plan(len(train), int(m), aug_seed), occ_cfg, stats)
        net, _, _ = train_classifier(aug, replace(cfg))
        report = evaluate_embeddings(extract_features(net, query), meta(query),
                                     extract_features(net, gallery), meta(gallery), protocol, cfg.seed)
        rows.append({"M": int(m), "n_train": len(aug), "mAP": report.mAP,
                     "rank1": report.rank(1), "rank5": report.rank(5), "rank10": report.rank(10)})
    return rows
