"""Identity-classification baseline and penultimate-FC descriptors."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import neuralops as nops
from .data import Dataset
from .gan import TrainingDiverged, to_model_range

log = logging.getLogger(__name__)

BACKBONES = ("convnet", "densenet121")


@dataclass(frozen=True)
class BaselineTrainConfig:
    epochs: int = 70
    batch_size: int = 32
    lr: float = 0.01
    lr_step: int = 30
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    feature_dim: int = 2048
    backbone: str = "convnet"
    channels: tuple[int, ...] = (16, 32, 64, 64)
    input_size: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_size is not None:
            object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed by ``lr_gamma`` every ``lr_step`` epochs."""
        return self.lr * self.lr_gamma ** ((epoch - 1) // self.lr_step)


def _convnet(channels: tuple[int, ...]) -> tuple[nn.Module, int]:
    layers, cin = [], 3
    for i, c in enumerate(channels):
        layers += [nn.Conv2d(cin, c, 3, 1 if i == 0 else 2, 1), nn.BatchNorm2d(c), nn.PReLU(c)]
        cin = c
    return nn.Sequential(*layers), cin


def _densenet() -> tuple[nn.Module, int]:
    from torchvision.models import densenet121

    net = densenet121(weights=None)
    return nn.Sequential(net.features, nn.ReLU()), net.classifier.in_features


class ClassifierNet(nn.Module):
    """Backbone -> global average pool -> descriptor FC -> BN/PReLU -> dropout -> identity FC."""

    def __init__(self, n_identities: int, feature_dim: int = 64, backbone: str = "convnet",
                 channels: tuple[int, ...] = (16, 32, 64, 64), dropout: float = 0.5,
                 input_size: tuple[int, int] | None = None, seed: int = 0):
        super().__init__()
        self.n_identities = n_identities
        self.feature_dim = feature_dim
        self.backbone_name = backbone
        self.channels = tuple(channels)
        self.dropout_p = dropout
        self.input_size = tuple(input_size) if input_size else None
        self.backbone, width = _densenet() if backbone == "densenet121" else _convnet(self.channels)
        self.descriptor = nn.Linear(width, feature_dim)
        self.neck = nn.Sequential(nn.BatchNorm1d(feature_dim), nn.PReLU(feature_dim))
        self.classifier = nn.Linear(feature_dim, n_identities)
        self.dropout_gen = torch.Generator().manual_seed(seed)

    def arch(self) -> dict:
        return {"net": "classifier", "n_identities": self.n_identities, "feature_dim": self.feature_dim,
                "backbone": self.backbone_name, "channels": list(self.channels),
                "dropout": self.dropout_p, "input_size": list(self.input_size) if self.input_size else None}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.descriptor(self.backbone(x).mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.neck(self.features(x))
        return self.classifier(nops.dropout(h, self.dropout_p, self.training, self.dropout_gen))


@dataclass
class ClassMap:
    """Identity <-> contiguous class index."""

    identities: tuple[int, ...]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ClassMap":
        return cls(tuple(sorted({s.identity for s in ds.samples})))

    def index(self, identity: int) -> int:
        return self.identities.index(identity)

    def identity(self, index: int) -> int:
        return self.identities[index]

    def encode(self, identities) -> np.ndarray:
        lookup = {ident: i for i, ident in enumerate(self.identities)}
        return np.array([lookup[int(i)] for i in identities], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({"identities": list(self.identities)}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClassMap":
        return cls(tuple(json.loads(text)["identities"]))


def _images(ds: Dataset, input_size) -> torch.Tensor:
    x = torch.from_numpy(ds.stack())
    if input_size is not None and tuple(x.shape[-2:]) != tuple(input_size):
        raise ValueError(f"images are {tuple(x.shape[-2:])}, network expects {tuple(input_size)}")
    return to_model_range(x)


def train_classifier(train: Dataset, cfg: BaselineTrainConfig) -> tuple[ClassifierNet, ClassMap, list[dict]]:
    """Softmax cross-entropy training with SGD-momentum and a step schedule.

    Junk samples are dropped and identities are mapped to contiguous class
    indices.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    train = train.without_junk()
    classes = ClassMap.from_dataset(train)
    if len(classes.identities) < 2:
        raise ValueError("classification needs at least 2 identities")
    x_all = _images(train, cfg.input_size)
    y_all = torch.from_numpy(classes.encode(train.identities))
    input_size = cfg.input_size or tuple(x_all.shape[-2:])

    torch_gen = torch.Generator().manual_seed(cfg.seed)
    net = ClassifierNet(len(classes.identities), cfg.feature_dim, cfg.backbone, cfg.channels,
                        cfg.dropout, input_size, seed=cfg.seed)
    nops.init_weights(net, torch_gen)
    opt = nops.sgd(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            if len(idx) < 2:  # batch norm needs two samples
                continue
            x, y = x_all[idx], y_all[idx]
            net.zero_grad(set_to_none=True)
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch}",
                                       last_good={"epoch": epoch - 1, "log": list(history)})
            loss.backward()
            nops.module_step(opt, net)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(idx)
        history.append({"epoch": epoch, "lr": opt.lr, "loss": loss_sum / max(seen, 1),
                        "accuracy": correct / max(seen, 1)})
        log.info("epoch %d lr=%g loss=%.4f acc=%.3f", epoch, opt.lr, history[-1]["loss"], history[-1]["accuracy"])
    net.eval()
    return net, classes, history


@torch.no_grad()
def extract_features(net: ClassifierNet, ds: Dataset, batch_size: int = 128) -> np.ndarray:
    """Descriptor-layer outputs, one row per sample, with the net in eval mode."""
    net.eval()
    x = _images(ds, net.input_size)
    rows = [net.features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(rows).numpy().astype(np.float64)


@torch.no_grad()
def accuracy(net: ClassifierNet, classes: ClassMap, ds: Dataset) -> float:
    net.eval()
    ds = ds.without_junk()
    pred = net(_images(ds, net.input_size)).argmax(1).numpy()
    return float(np.mean(pred == classes.encode(ds.identities)))


def save_classifier(net: ClassifierNet, classes: ClassMap, path: str | Path) -> None:
    """Checkpoint plus a ``.classes.json`` sidecar with the identity mapping."""
    path = Path(path)
    nops.save_checkpoint(path, nops.module_tensors(net), net.arch())
    path.with_suffix(".classes.json").write_text(classes.to_json(), encoding="utf-8")


def load_classifier(path: str | Path) -> tuple[ClassifierNet, ClassMap]:
    path = Path(path)
    arch, _, tensors = nops.load_checkpoint(path)
    if arch.get("net") != "classifier":
        raise nops.CheckpointError(f"{path}: not a classifier checkpoint")
    net = ClassifierNet(arch["n_identities"], arch["feature_dim"], arch["backbone"], tuple(arch["channels"]),
                        arch["dropout"], arch["input_size"])
    nops.load_module_tensors(net, tensors)
    classes = ClassMap.from_json(path.with_suffix(".classes.json").read_text(encoding="utf-8"))
    return net.eval(), classes
