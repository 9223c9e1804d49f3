"""De-occlusion GAN: U-Net generator, five-stage conditional discriminator, training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import neuralops as nops
from .data import ChannelStats, Dataset, PersonImage
from .occlude import OcclusionConfig, apply_occlusion, image_rng, occlude_dataset, sample_rect

log = logging.getLogger(__name__)

# extra entropy word separating generation-time rects from training-time rects
GENERATION_STREAM = 0x6E4

ADV_MODES = ("saturating", "non_saturating")


class TrainingDiverged(RuntimeError):
    """A loss became NaN/Inf; ``last_good`` holds the state before the bad step."""

    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return x / 127.5 - 1.0


def to_pixel_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 127.5).clamp(0.0, 255.0)


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _down(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, 2, 1)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.PReLU(cout))
    return nn.Sequential(*layers)


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.PReLU(cout))


class GeneratorNet(nn.Module):
    """U-Net working on images scaled to [-1, 1].

    ``depth`` stride-2 encoder stages; the decoder mirrors them and
    concatenates the encoder activation of matching resolution at every level
    below the bottleneck, including the input image itself at full
    resolution, so there are exactly ``depth`` skip connections.
    """

    def __init__(self, depth: int = 3, base_channels: int = 16, image_size: tuple[int, int] | None = None,
                 output_activation: str = "tanh_scaled"):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if output_activation not in ("tanh_scaled", "sigmoid_scaled"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.depth = depth
        self.base_channels = base_channels
        self.image_size = tuple(image_size) if image_size else None
        self.output_activation = output_activation
        self.trained = False
        ch = [min(base_channels * 2 ** i, base_channels * 8) for i in range(depth)]
        self.encoders = nn.ModuleList(
            _down(3 if i == 0 else ch[i - 1], ch[i], norm=i > 0) for i in range(depth))
        decoders = []
        for i in range(depth, 0, -1):
            cin = ch[depth - 1] if i == depth else 2 * ch[i - 1]
            cout = ch[i - 2] if i >= 2 else base_channels
            decoders.append(_up(cin, cout))
        self.decoders = nn.ModuleList(decoders)
        self.out = nn.Conv2d(base_channels + 3, 3, 3, 1, 1)

    @property
    def n_skips(self) -> int:
        return self.depth

    def arch(self) -> dict:
        return {"net": "unet", "depth": self.depth, "base_channels": self.base_channels,
                "image_size": list(self.image_size) if self.image_size else None,
                "output_activation": self.output_activation}

    def check_shape(self, h: int, w: int) -> None:
        k = 2 ** self.depth
        if h % k:
            raise ValueError(f"H not divisible by {k} (got H={h})")
        if w % k:
            raise ValueError(f"W not divisible by {k} (got W={w})")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_shape(*x.shape[-2:])
        skips = [x]
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        skips.pop()  # bottleneck has no partner
        for dec in self.decoders:
            h = torch.cat([dec(h), skips.pop()], dim=1)
        h = self.out(h)
        if self.output_activation == "tanh_scaled":
            return torch.tanh(h)
        return 2.0 * torch.sigmoid(h) - 1.0


class DiscriminatorNet(nn.Module):
    """Five conv stages (BN on all but the first, PReLU), then pooled FC + sigmoid.

    Stages use 3x3 stride-2 convolutions so that any input of at least
    1x1 survives all five halvings.  In conditional mode the input is the
    channel concatenation of the occluded image and the candidate.
    """

    N_STAGES = 5

    def __init__(self, base_channels: int = 16, conditional: bool = True):
        super().__init__()
        self.base_channels = base_channels
        self.conditional = conditional
        cin = 6 if conditional else 3
        stages = []
        for i in range(self.N_STAGES):
            cout = base_channels * min(2 ** i, 8)
            layers = [nn.Conv2d(cin, cout, 3, 2, 1)]
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.PReLU(cout))
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, 1)

    def arch(self) -> dict:
        return {"net": "discriminator", "base_channels": self.base_channels, "conditional": self.conditional}

    def logits(self, condition: torch.Tensor | None, candidate: torch.Tensor) -> torch.Tensor:
        if self.conditional:
            if condition is None:
                raise ValueError("conditional discriminator needs the occluded image")
            if condition.shape != candidate.shape:
                raise ValueError(f"cannot concatenate {tuple(condition.shape)} with {tuple(candidate.shape)}")
            x = torch.cat([condition, candidate], dim=1)
        else:
            x = candidate
        return self.head(self.stages(x).mean(dim=(2, 3))).squeeze(1)

    def forward(self, condition: torch.Tensor | None, candidate: torch.Tensor) -> torch.Tensor:
        """Probability that ``candidate`` is real, kept strictly inside (0, 1)."""
        p = torch.sigmoid(self.logits(condition, candidate))
        return p.clamp(nops.BCE_EPS, 1.0 - nops.BCE_EPS)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def euclidean_loss(generated, original):
    """Mean squared error over all C*H*W (and batch) elements."""
    if isinstance(generated, torch.Tensor):
        if generated.shape != original.shape:
            raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(original.shape)}")
        return F.mse_loss(generated, original)
    generated, original = np.asarray(generated, dtype=np.float64), np.asarray(original, dtype=np.float64)
    if generated.shape != original.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {original.shape}")
    return float(np.mean((generated - original) ** 2))


def discriminator_loss(preds, labels, eps: float = nops.BCE_EPS):
    """Binary cross-entropy, ``-(1/B) sum[u log p + (1 - u) log(1 - p)]``.

    Predictions of exactly 0 or 1 are clamped to ``[eps, 1 - eps]``.
    """
    if isinstance(preds, torch.Tensor):
        labels = torch.as_tensor(labels, dtype=preds.dtype)
        if preds.shape != labels.shape:
            raise ValueError("preds and labels differ in length")
        return nops.bce(preds, labels, eps)
    p = np.asarray(preds, dtype=np.float64)
    u = np.asarray(labels, dtype=np.float64)
    if p.shape != u.shape:
        raise ValueError("preds and labels differ in length")
    if np.any((p <= 0) | (p >= 1)):
        log.debug("clamping %d predictions at 0/1", int(np.sum((p <= 0) | (p >= 1))))
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(u * np.log(p) + (1 - u) * np.log1p(-p)))


def adversarial_loss_from_scores(d_fake, mode: str = "non_saturating"):
    """Generator-side adversarial term given ``D(I, G(I))``.

    ``saturating`` is ``mean log(1 - D)``; ``non_saturating`` is ``-mean log D``.
    """
    if mode not in ADV_MODES:
        raise ValueError(f"mode must be one of {ADV_MODES}")
    if isinstance(d_fake, torch.Tensor):
        d = d_fake.clamp(nops.BCE_EPS, 1 - nops.BCE_EPS)
        return torch.log1p(-d).mean() if mode == "saturating" else -torch.log(d).mean()
    d = np.clip(np.asarray(d_fake, dtype=np.float64), nops.BCE_EPS, 1 - nops.BCE_EPS)
    return float(np.mean(np.log1p(-d)) if mode == "saturating" else -np.mean(np.log(d)))


def generator_adversarial_loss(d: DiscriminatorNet, occluded: torch.Tensor, generated: torch.Tensor,
                               mode: str = "non_saturating") -> torch.Tensor:
    return adversarial_loss_from_scores(d(occluded if d.conditional else None, generated), mode)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    lambda_e: float = 100.0
    lambda_adv: float = 1.0
    adv_mode: str = "non_saturating"
    depth: int = 3
    base_channels: int = 16
    d_base_channels: int = 16
    conditional: bool = True
    output_activation: str = "tanh_scaled"
    image_size: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_e < 0 or self.lambda_adv < 0 or (self.lambda_e == 0 and self.lambda_adv == 0):
            raise ValueError("lambdas must be non-negative and not both zero")
        if self.adv_mode not in ADV_MODES:
            raise ValueError(f"adv_mode must be one of {ADV_MODES}")
        if self.image_size is not None:
            object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))


@dataclass
class GanState:
    """Everything needed to continue training after ``epoch``."""

    generator: GeneratorNet
    discriminator: DiscriminatorNet
    opt_g: nops.OptimizerState
    opt_d: nops.OptimizerState
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in nops.module_tensors(self.generator).items()}
        out.update({f"D.{k}": v for k, v in nops.module_tensors(self.discriminator).items()})
        out.update(self.opt_g.state_tensors("optG"))
        out.update(self.opt_d.state_tensors("optD"))
        return out

    def save(self, path: str | Path, cfg: GanTrainConfig) -> None:
        arch = {"generator": self.generator.arch(), "discriminator": self.discriminator.arch()}
        meta = {"epoch": self.epoch, "log": self.log, "config": _cfg_json(cfg)}
        nops.save_checkpoint(path, self.tensors(), arch, meta)


def _cfg_json(cfg: GanTrainConfig) -> dict:
    d = asdict(cfg)
    d["image_size"] = list(cfg.image_size) if cfg.image_size else None
    return d


def build_state(cfg: GanTrainConfig) -> GanState:
    gen = torch.Generator().manual_seed(cfg.seed)
    g = nops.init_weights(GeneratorNet(cfg.depth, cfg.base_channels, cfg.image_size, cfg.output_activation), gen)
    d = nops.init_weights(DiscriminatorNet(cfg.d_base_channels, cfg.conditional), gen)
    return GanState(g, d, nops.adam(cfg.learning_rate, cfg.adam_beta1), nops.adam(cfg.learning_rate, cfg.adam_beta1))


def load_state(path: str | Path, cfg: GanTrainConfig) -> GanState:
    arch, meta, tensors = nops.load_checkpoint(path)
    state = build_state(cfg)
    if arch != {"generator": state.generator.arch(), "discriminator": state.discriminator.arch()}:
        raise nops.CheckpointError(f"{path}: architecture does not match the configuration")
    nops.load_module_tensors(state.generator, tensors, "G.")
    nops.load_module_tensors(state.discriminator, tensors, "D.")
    state.opt_g.load_state_tensors("optG", tensors)
    state.opt_d.load_state_tensors("optD", tensors)
    state.epoch = int(meta["epoch"])
    state.log = list(meta["log"])
    state.generator.trained = state.epoch > 0
    return state


def save_generator(g: GeneratorNet, path: str | Path) -> None:
    nops.save_checkpoint(path, nops.module_tensors(g), g.arch(), {"trained": g.trained})


def load_generator(path: str | Path) -> GeneratorNet:
    arch, meta, tensors = nops.load_checkpoint(path)
    if arch.get("net") != "unet":
        raise nops.CheckpointError(f"{path}: not a generator checkpoint")
    g = GeneratorNet(arch["depth"], arch["base_channels"], arch["image_size"], arch["output_activation"])
    nops.load_module_tensors(g, tensors)
    g.trained = bool(meta.get("trained", False))
    return g.eval()


def _pair_tensors(pairs, size: tuple[int, int] | None) -> tuple[torch.Tensor, torch.Tensor]:
    occ = to_model_range(torch.from_numpy(np.stack([p.occluded for p in pairs])))
    orig = to_model_range(torch.from_numpy(np.stack([p.original for p in pairs])))
    if size is not None:
        occ, orig = resize(occ, size), resize(orig, size)
    return occ, orig


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def train_gan(train: Dataset, occ_cfg: OcclusionConfig, stats: ChannelStats | None, cfg: GanTrainConfig,
              *, state: GanState | None = None,
              on_epoch: Callable[[GanState], None] | None = None) -> tuple[GeneratorNet, DiscriminatorNet, list[dict]]:
    """Alternate discriminator and generator Adam steps for ``cfg.epochs`` epochs.

    Each batch: D sees (I, R) labelled real and (I, G(I)) labelled fake; G
    then minimises ``lambda_adv * adversarial + lambda_e * MSE(G(I), R)``.
    With ``lambda_adv == 0`` the discriminator is never run or updated.
    Passing ``state`` continues from a checkpoint; ``on_epoch`` runs after
    every completed epoch (used for checkpointing).
    """
    train = train.without_junk()
    if len(train) == 0:
        raise ValueError("training set is empty")
    state = state or build_state(cfg)
    g, d = state.generator, state.discriminator
    use_d = cfg.lambda_adv > 0
    n = len(train)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        g.train()
        d.train()
        pairs = occlude_dataset(train, occ_cfg, stats, epoch=epoch if occ_cfg.resample_per_epoch else None)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            occ, orig = _pair_tensors([pairs[i] for i in idx], cfg.image_size)

            d_loss = torch.zeros(())
            if use_d:
                with torch.no_grad():
                    fake = g(occ)
                d.zero_grad(set_to_none=True)
                preds = torch.cat([d(occ, orig), d(occ, fake)])
                labels = torch.cat([torch.ones(len(idx)), torch.zeros(len(idx))])
                d_loss = discriminator_loss(preds, labels)
                d_loss.backward()
                nops.module_step(state.opt_d, d)

            g.zero_grad(set_to_none=True)
            fake = g(occ)
            l2 = euclidean_loss(fake, orig)
            adv = generator_adversarial_loss(d, occ, fake, cfg.adv_mode) if use_d else torch.zeros(())
            (cfg.lambda_adv * adv + cfg.lambda_e * l2).backward()
            values = (d_loss.item(), adv.item(), l2.item())
            if not _finite(*values):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {values}",
                                       last_good={"epoch": state.epoch, "log": list(state.log)})
            nops.module_step(state.opt_g, g)
            sums += values
            batches += 1

        means = sums / batches
        state.epoch = epoch
        state.log.append({"epoch": epoch, "d_loss": float(means[0]),
                          "g_adv_loss": float(means[1]), "g_l2_loss": float(means[2])})
        log.info("epoch %d d=%.4f adv=%.4f l2=%.5f", epoch, *means)
        g.trained = True
        if on_epoch is not None:
            on_epoch(state)

    g.eval()
    d.eval()
    return g, d, state.log


@torch.no_grad()
def deocclude(g: GeneratorNet, occluded: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Run the generator on ``(N, 3, H, W)`` pixel arrays; returns pixels in [0, 255]."""
    g.eval()
    occluded = np.asarray(occluded, dtype=np.float32)
    h, w = occluded.shape[-2:]
    out = []
    for start in range(0, len(occluded), batch_size):
        x = to_model_range(torch.from_numpy(occluded[start:start + batch_size]))
        if g.image_size is not None:
            x = resize(x, g.image_size)
        y = resize(g(x), (h, w))
        out.append(to_pixel_range(y).numpy())
    return np.concatenate(out).astype(np.float32)


def generator_forward(g: GeneratorNet, occluded: np.ndarray) -> np.ndarray:
    """De-occlude one ``(3, H, W)`` image or a batch."""
    occluded = np.asarray(occluded, dtype=np.float32)
    if g.image_size is None:
        g.check_shape(*occluded.shape[-2:])
    single = occluded.ndim == 3
    out = deocclude(g, occluded[None] if single else occluded)
    return out[0] if single else out


class OracleGenerator:
    """Ablation stand-in that returns the un-occluded original unchanged."""

    trained = True


def reconstruction_loss(g: GeneratorNet, ds: Dataset, occ_cfg: OcclusionConfig,
                        stats: ChannelStats | None) -> float:
    """Mean squared error of ``G(I)`` against ``R`` in the generator's [-1, 1] range."""
    pairs = occlude_dataset(ds, occ_cfg, stats)
    generated = deocclude(g, np.stack([p.occluded for p in pairs]))
    originals = np.stack([p.original for p in pairs])
    return euclidean_loss(generated / 127.5 - 1.0, originals / 127.5 - 1.0)


def generated_name(src: PersonImage, variant: int, index: int) -> str:
    stem = Path(src.origin_path).stem if src.origin_path else f"{index:06d}"
    return f"{src.identity:04d}_c{src.camera}_gen{variant}_{stem}.png"


def generate_deoccluded(g, images: Dataset, occ_cfg: OcclusionConfig, stats: ChannelStats | None,
                        seed: int, *, variant: int = 0, indices: Sequence[int] | None = None,
                        allow_untrained: bool = False, return_pairs: bool = False):
    """Occlude each image with a freshly drawn rect and de-occlude it.

    Rects come from the substream ``(seed, index, GENERATION_STREAM, variant)``,
    disjoint from the ones used during training.  Outputs keep the identity
    and camera of their source and are marked ``source="generated"``.
    """
    if not getattr(g, "trained", False) and not allow_untrained:
        raise ValueError("generator is untrained; pass allow_untrained=True for ablations")
    if len(images) == 0:
        return (Dataset((), images.split, images.name), []) if return_pairs else Dataset((), images.split, images.name)
    indices = list(range(len(images))) if indices is None else list(indices)
    if len(indices) != len(images):
        raise ValueError("indices must match the number of images")
    fill = occ_cfg.fill_values(stats)
    pairs = []
    for i, s in zip(indices, images.samples):
        _, h, w = s.pixels.shape
        rect = sample_rect(occ_cfg, h, w, image_rng(seed, i, GENERATION_STREAM, variant), fill)
        pairs.append(apply_occlusion(s.pixels, rect))
    if isinstance(g, OracleGenerator):
        out = np.stack([p.original for p in pairs])
    else:
        out = deocclude(g, np.stack([p.occluded for p in pairs]))
    samples = tuple(
        PersonImage(px, s.identity, s.camera, "generated", generated_name(s, variant, i))
        for px, s, i in zip(out, images.samples, indices))
    ds = Dataset(samples, images.split, images.name)
    return (ds, pairs) if return_pairs else ds
