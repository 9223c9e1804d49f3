import math

import numpy as np
import pytest
import torch

from reidaug import neuralops as nops
from reidaug.data import ChannelStats, Dataset, channel_means, synth_corpus
from reidaug.gan import (DiscriminatorNet, GanTrainConfig, GeneratorNet, OracleGenerator, TrainingDiverged,
                         adversarial_loss_from_scores, build_state, discriminator_loss, euclidean_loss,
                         generate_deoccluded, generator_forward, load_generator, load_state, save_generator,
                         train_gan)
from reidaug.occlude import OcclusionConfig

STATS = ChannelStats(100.0, 100.0, 100.0, 1)
FAST = dict(epochs=2, batch_size=8, base_channels=8, d_base_channels=8)


@pytest.fixture(scope="module")
def corpus():
    ds = synth_corpus(4, 4, 32, 16, seed=3)
    return ds, channel_means(ds)


@pytest.mark.parametrize("depth, shape", [(3, (32, 16)), (1, (2, 2)), (2, (12, 8)), (3, (64, 64))])
def test_generator_preserves_shape(depth, shape):
    g = GeneratorNet(depth, base_channels=4)
    assert g.n_skips == depth
    y = g(torch.zeros(2, 3, *shape))
    assert y.shape == (2, 3, *shape)
    assert y.abs().max() <= 1


def test_generator_large_input():
    g = GeneratorNet(6, base_channels=2)
    assert g(torch.zeros(1, 3, 256, 256)).shape == (1, 3, 256, 256)


def test_generator_rejects_indivisible_height():
    with pytest.raises(ValueError, match=r"H not divisible by 8 \(got H=30\)"):
        generator_forward(GeneratorNet(3, 4), np.zeros((3, 30, 16), dtype=np.float32))


def test_generator_forward_single_and_batch():
    g = GeneratorNet(2, 4)
    single = generator_forward(g, np.full((3, 8, 4), 128, dtype=np.float32))
    assert single.shape == (3, 8, 4) and single.min() >= 0 and single.max() <= 255
    assert generator_forward(g, np.zeros((5, 3, 8, 4), dtype=np.float32)).shape == (5, 3, 8, 4)


@pytest.mark.parametrize("shape", [(32, 16), (1, 1), (7, 5)])
def test_discriminator_scores_in_open_interval(shape):
    d = DiscriminatorNet(4).eval()
    x = torch.full((2, 3, *shape), 1e6)
    p = d(x, -x)
    assert p.shape == (2,) and torch.all(p > 0) and torch.all(p < 1)


def test_discriminator_condition_checks():
    d = DiscriminatorNet(4)
    with pytest.raises(ValueError):
        d(None, torch.zeros(1, 3, 8, 8))
    with pytest.raises(ValueError):
        d(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 4))
    assert DiscriminatorNet(4, conditional=False).eval()(None, torch.zeros(1, 3, 8, 8)).shape == (1,)


def test_euclidean_loss_examples():
    assert euclidean_loss(np.zeros((3, 2, 2)), np.zeros((3, 2, 2))) == 0.0
    a = np.zeros((3, 2, 2))
    b = a.copy()
    b[0, 0, 0] = 1.0
    b[1, 1, 1] = 1.0
    b[2, 0, 1] = 1.0
    assert euclidean_loss(a, b) == 0.25
    assert math.isclose(euclidean_loss(a + 0.3, a), 0.09)
    with pytest.raises(ValueError):
        euclidean_loss(np.zeros(3), np.zeros(4))


def test_discriminator_loss_examples():
    assert math.isclose(discriminator_loss([0.5], [1]), math.log(2))
    assert math.isclose(discriminator_loss([0.9, 0.2], [1, 0]), -(math.log(0.9) + math.log(0.8)) / 2)
    assert round(discriminator_loss([0.9, 0.2], [1, 0]), 4) == 0.1643
    assert math.isfinite(discriminator_loss([0.0, 1.0], [1, 0]))
    with pytest.raises(ValueError):
        discriminator_loss([0.5, 0.5], [1])
    t = discriminator_loss(torch.tensor([0.9, 0.2], dtype=torch.float64), [1.0, 0.0])
    assert math.isclose(float(t), 0.1643, abs_tol=5e-5)


def test_adversarial_loss_modes():
    assert math.isclose(adversarial_loss_from_scores([0.5], "saturating"), -math.log(2))
    assert math.isclose(adversarial_loss_from_scores([0.5], "non_saturating"), math.log(2))
    with pytest.raises(ValueError):
        adversarial_loss_from_scores([0.5], "other")


def test_generator_sgd_step_decreases_loss():
    torch.manual_seed(0)
    g = nops.init_weights(GeneratorNet(2, 4).double(), torch.Generator().manual_seed(1))
    x = torch.rand(4, 3, 8, 8, dtype=torch.float64) * 2 - 1
    target = torch.rand(4, 3, 8, 8, dtype=torch.float64) * 2 - 1

    def loss():
        return 100 * euclidean_loss(g(x), target)

    g.zero_grad()
    before = loss()
    before.backward()
    nops.module_step(nops.sgd(1e-4, momentum=0.0), g)
    with torch.no_grad():
        assert loss().item() < before.item()


def test_zero_adversarial_weight_freezes_discriminator(corpus):
    ds, stats = corpus
    cfg = GanTrainConfig(lambda_adv=0.0, **FAST)
    state = build_state(cfg)
    before = {k: v.copy() for k, v in nops.module_tensors(state.discriminator).items()}
    _, d, log = train_gan(ds, OcclusionConfig(), stats, cfg, state=state)
    after = nops.module_tensors(d)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(row["d_loss"] == 0.0 and row["g_adv_loss"] == 0.0 for row in log)


def test_training_is_deterministic(corpus):
    ds, stats = corpus
    cfg = GanTrainConfig(**FAST)
    g1, _, log1 = train_gan(ds, OcclusionConfig(), stats, cfg)
    g2, _, log2 = train_gan(ds, OcclusionConfig(), stats, cfg)
    assert log1 == log2 and len(log1) == 2
    assert set(log1[0]) == {"epoch", "d_loss", "g_adv_loss", "g_l2_loss"}
    t1, t2 = nops.module_tensors(g1), nops.module_tensors(g2)
    assert all(np.array_equal(t1[k], t2[k]) for k in t1)


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(epochs=0)
    with pytest.raises(ValueError):
        GanTrainConfig(lambda_e=0, lambda_adv=0)
    with pytest.raises(ValueError):
        GanTrainConfig(adv_mode="wgan")


def test_divergence_aborts(corpus):
    ds, stats = corpus
    cfg = GanTrainConfig(learning_rate=1e30, **FAST)
    with pytest.raises(TrainingDiverged) as err:
        train_gan(ds, OcclusionConfig(), stats, cfg)
    assert err.value.last_good is not None


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_gan(Dataset(()), OcclusionConfig(), None, GanTrainConfig(**FAST))


def test_resume_reproduces_uninterrupted_run(corpus, tmp_path):
    ds, stats = corpus
    full_cfg = GanTrainConfig(**{**FAST, "epochs": 3})
    g_full, _, log_full = train_gan(ds, OcclusionConfig(), stats, full_cfg)

    half_cfg = GanTrainConfig(**{**FAST, "epochs": 2})
    state = build_state(half_cfg)
    train_gan(ds, OcclusionConfig(), stats, half_cfg, state=state)
    state.save(tmp_path / "s.ckpt", half_cfg)
    resumed = load_state(tmp_path / "s.ckpt", full_cfg)
    g_res, _, log_res = train_gan(ds, OcclusionConfig(), stats, full_cfg, state=resumed)
    assert log_res == log_full
    a, b = nops.module_tensors(g_full), nops.module_tensors(g_res)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_generator_checkpoint_round_trip(tmp_path):
    g = nops.init_weights(GeneratorNet(2, 4), torch.Generator().manual_seed(0))
    g.trained = True
    save_generator(g, tmp_path / "g.ckpt")
    back = load_generator(tmp_path / "g.ckpt")
    x = np.random.default_rng(0).uniform(0, 255, (2, 3, 8, 4)).astype(np.float32)
    assert back.trained
    np.testing.assert_array_equal(generator_forward(g, x), generator_forward(back, x))


def test_generation_preserves_labels_and_is_seeded():
    ds = synth_corpus(3, 2, 16, 8, seed=0)
    g = GeneratorNet(2, 4)
    with pytest.raises(ValueError, match="untrained"):
        generate_deoccluded(g, ds, OcclusionConfig(), STATS, seed=0)
    out, pairs = generate_deoccluded(g, ds, OcclusionConfig(), STATS, seed=0, allow_untrained=True,
                                     return_pairs=True)
    assert [(s.identity, s.camera) for s in out] == [(s.identity, s.camera) for s in ds]
    assert all(s.source == "generated" for s in out)
    again, pairs2 = generate_deoccluded(g, ds, OcclusionConfig(), STATS, seed=0, allow_untrained=True,
                                        return_pairs=True)
    assert [p.rect for p in pairs] == [p.rect for p in pairs2]
    _, other = generate_deoccluded(g, ds, OcclusionConfig(), STATS, seed=0, variant=1, allow_untrained=True,
                                   return_pairs=True)
    assert [p.rect for p in other] != [p.rect for p in pairs]


def test_oracle_generator_returns_originals():
    ds = synth_corpus(2, 2, 16, 8, seed=0)
    out = generate_deoccluded(OracleGenerator(), ds, OcclusionConfig(), ChannelStats(0, 0, 0, 1), seed=4)
    for a, b in zip(out, ds):
        np.testing.assert_array_equal(a.pixels, b.pixels)
