import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidaug.augment import AugmentationPlan, build_augmented_set, plan
from reidaug.data import channel_means, synth_corpus
from reidaug.gan import GeneratorNet, OracleGenerator
from reidaug.occlude import OcclusionConfig


def test_plan_example_uneven():
    p = plan(10, 25, seed=0)
    assert sorted(p.per_image_counts) == [2] * 5 + [3] * 5
    assert p.n_total == 35
    assert len(p.order()) == 25


def test_plan_zero_and_exact_multiple():
    assert plan(4, 0).per_image_counts == (0, 0, 0, 0)
    assert plan(4, 8).per_image_counts == (2, 2, 2, 2)


def test_plan_rejects_bad_arguments():
    with pytest.raises(ValueError):
        plan(0, 3)
    with pytest.raises(ValueError):
        plan(3, -1)
    with pytest.raises(ValueError):
        AugmentationPlan(2, 3, (3, 0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 300), st.integers(0, 2**16))
def test_plan_is_balanced(n, m, seed):
    p = plan(n, m, seed)
    assert sum(p.per_image_counts) == m
    assert max(p.per_image_counts) - min(p.per_image_counts) <= 1
    assert p == plan(n, m, seed)


def test_zero_m_returns_training_set_unchanged():
    train = synth_corpus(4, 2, 16, 8, seed=0)
    out = build_augmented_set(train, GeneratorNet(1, 4), plan(len(train), 0), OcclusionConfig(), None)
    assert out is train


def test_augmented_set_size_labels_and_order():
    train = synth_corpus(16, 8, 32, 16, seed=1)
    stats = channel_means(train)
    p = plan(len(train), 128, seed=5)
    out = build_augmented_set(train, GeneratorNet(3, 4), p, OcclusionConfig(), stats, allow_untrained=True)
    assert len(out) == 256
    assert out.samples[:128] == train.samples
    assert len(set(out.identities.tolist())) == 16
    for (i, _), s in zip(p.order(), out.samples[128:]):
        assert s.source == "generated"
        assert (s.identity, s.camera) == (train.samples[i].identity, train.samples[i].camera)


def test_variants_use_distinct_rects():
    train = synth_corpus(2, 1, 32, 16, seed=0)
    p = plan(2, 6, seed=0)
    out = build_augmented_set(train, OracleGenerator(), p, OcclusionConfig(fill="black"), None)
    # the oracle returns originals, so compare via the recorded names instead
    names = [s.origin_path for s in out.samples[2:]]
    assert len(set(names)) == 6


def test_untrained_generator_refused():
    train = synth_corpus(2, 2, 16, 8, seed=0)
    with pytest.raises(ValueError, match="untrained"):
        build_augmented_set(train, GeneratorNet(1, 4), plan(4, 2), OcclusionConfig(), channel_means(train))


def test_plan_size_mismatch():
    train = synth_corpus(2, 2, 16, 8, seed=0)
    with pytest.raises(ValueError):
        build_augmented_set(train, OracleGenerator(), plan(3, 2), OcclusionConfig(), None)


def test_generation_is_deterministic():
    train = synth_corpus(3, 2, 16, 8, seed=2)
    stats = channel_means(train)
    g = GeneratorNet(2, 4)
    p = plan(6, 9, seed=1)
    a = build_augmented_set(train, g, p, OcclusionConfig(), stats, allow_untrained=True)
    b = build_augmented_set(train, g, p, OcclusionConfig(), stats, allow_untrained=True)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
