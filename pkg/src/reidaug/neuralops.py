"""Differentiable operators, hand-written optimizers and the checkpoint format.

Operators run on torch tensors and get their gradients from autograd.  The
:class:`OpNode` wrapper gives each operator kind a uniform
forward/backward surface so the whole set can be finite-difference checked;
the networks in :mod:`reidaug.gan` and :mod:`reidaug.baseline` are built from
the matching ``torch.nn`` layers and initialised with :func:`init_weights`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KINDS = (
    "conv2d", "conv2d_transpose", "batch_norm", "prelu", "sigmoid", "tanh",
    "dropout", "fully_connected", "concat_channels", "global_avg_pool",
    "softmax_cross_entropy", "mse", "bce",
)

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Input incompatible with an operator; names the node and the dimension."""

    def __init__(self, node: str, dim: str, expected, got):
        self.node, self.dim, self.expected, self.got = node, dim, expected, got
        super().__init__(f"{node}: dimension {dim} expected {expected}, got {got}")


class UsageError(RuntimeError):
    pass


def conv_out(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout with an explicit RNG stream; identity when not training."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities, clamped to ``[eps, 1 - eps]``."""
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


# ---------------------------------------------------------------------------
# operator nodes
# ---------------------------------------------------------------------------

_DEFAULT_HYPER = {
    "conv2d": {"stride": 1, "padding": 0},
    "conv2d_transpose": {"stride": 1, "padding": 0},
    "batch_norm": {"eps": 1e-5, "momentum": 0.1},
    "dropout": {"p": 0.5},
}


@dataclass(eq=False)
class OpNode:
    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict[str, torch.Tensor] = field(default_factory=dict)
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    name: str = ""
    _ctx: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        self.hyper = {**_DEFAULT_HYPER.get(self.kind, {}), **self.hyper}
        h = self.hyper
        if h.get("stride", 1) < 1 or h.get("padding", 0) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.kind == "batch_norm" and h["eps"] <= 0:
            raise ValueError("batch_norm eps must be positive")
        if self.kind == "dropout" and not 0.0 <= h["p"] < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.name = self.name or self.kind

    @property
    def label(self) -> str:
        return self.name


def make_node(kind: str, *, in_ch: int = 0, out_ch: int = 0, kernel: int = 1,
              in_features: int = 0, out_features: int = 0, dtype=torch.float64,
              generator: torch.Generator | None = None, **hyper) -> OpNode:
    """Create a node with freshly initialised parameters (N(0, 0.02) weights)."""
    def normal(*shape):
        return torch.randn(*shape, generator=generator, dtype=dtype) * 0.02

    params: dict[str, torch.Tensor] = {}
    buffers: dict[str, torch.Tensor] = {}
    if kind == "conv2d":
        params = {"weight": normal(out_ch, in_ch, kernel, kernel), "bias": torch.zeros(out_ch, dtype=dtype)}
    elif kind == "conv2d_transpose":
        params = {"weight": normal(in_ch, out_ch, kernel, kernel), "bias": torch.zeros(out_ch, dtype=dtype)}
    elif kind == "fully_connected":
        params = {"weight": normal(out_features, in_features), "bias": torch.zeros(out_features, dtype=dtype)}
    elif kind == "batch_norm":
        params = {"weight": torch.ones(in_ch, dtype=dtype), "bias": torch.zeros(in_ch, dtype=dtype)}
        buffers = {"running_mean": torch.zeros(in_ch, dtype=dtype), "running_var": torch.ones(in_ch, dtype=dtype)}
    elif kind == "prelu":
        params = {"weight": torch.full((max(in_ch, 1),), 0.25, dtype=dtype)}
    return OpNode(kind, dict(hyper, kernel=kernel) if kind.startswith("conv") else dict(hyper),
                  params, buffers)


def _check_inputs(node: OpNode, inputs) -> None:
    k, name, p = node.kind, node.label, node.params
    x = inputs[0]
    if k in ("conv2d", "conv2d_transpose"):
        if x.dim() != 4:
            raise ShapeError(name, "rank", 4, x.dim())
        in_ch = p["weight"].shape[1] if k == "conv2d" else p["weight"].shape[0]
        if x.shape[1] != in_ch:
            raise ShapeError(name, "channels", in_ch, x.shape[1])
        kern, s, pad = p["weight"].shape[-1], node.hyper["stride"], node.hyper["padding"]
        for axis, size in zip(("height", "width"), x.shape[2:]):
            out = conv_out(size, kern, s, pad) if k == "conv2d" else conv_transpose_out(size, kern, s, pad)
            if out < 1:
                raise ShapeError(name, axis, f">= {kern - 2 * pad}", size)
    elif k == "fully_connected":
        if x.shape[-1] != p["weight"].shape[1]:
            raise ShapeError(name, "features", p["weight"].shape[1], x.shape[-1])
    elif k in ("batch_norm", "prelu"):
        n = p["weight"].shape[0]
        if x.dim() < 2 or (x.shape[1] != n and not (k == "prelu" and n == 1)):
            raise ShapeError(name, "channels", n, x.shape[1] if x.dim() > 1 else None)
    elif k == "concat_channels":
        ref = x.shape
        for other in inputs[1:]:
            if other.shape[0] != ref[0]:
                raise ShapeError(name, "batch", ref[0], other.shape[0])
            if other.shape[2:] != ref[2:]:
                raise ShapeError(name, "spatial", tuple(ref[2:]), tuple(other.shape[2:]))
    elif k in ("mse", "bce"):
        if inputs[0].shape != inputs[1].shape:
            raise ShapeError(name, "shape", tuple(inputs[0].shape), tuple(inputs[1].shape))
    elif k == "softmax_cross_entropy":
        if inputs[1].shape != inputs[0].shape[:1]:
            raise ShapeError(name, "targets", tuple(inputs[0].shape[:1]), tuple(inputs[1].shape))


def _apply(node: OpNode, inputs, params, training: bool, generator) -> torch.Tensor:
    k, h = node.kind, node.hyper
    x = inputs[0]
    if k == "conv2d":
        return F.conv2d(x, params["weight"], params["bias"], stride=h["stride"], padding=h["padding"])
    if k == "conv2d_transpose":
        return F.conv_transpose2d(x, params["weight"], params["bias"], stride=h["stride"], padding=h["padding"])
    if k == "batch_norm":
        return F.batch_norm(x, node.buffers.get("running_mean"), node.buffers.get("running_var"),
                            params["weight"], params["bias"], training=training,
                            momentum=h["momentum"], eps=h["eps"])
    if k == "prelu":
        return F.prelu(x, params["weight"])
    if k == "sigmoid":
        return torch.sigmoid(x)
    if k == "tanh":
        return torch.tanh(x)
    if k == "dropout":
        return dropout(x, h["p"], training, generator)
    if k == "fully_connected":
        return F.linear(x, params["weight"], params["bias"])
    if k == "concat_channels":
        return torch.cat(list(inputs), dim=1)
    if k == "global_avg_pool":
        return x.mean(dim=(2, 3))
    if k == "softmax_cross_entropy":
        return F.cross_entropy(x, inputs[1])
    if k == "mse":
        return F.mse_loss(x, inputs[1])
    if k == "bce":
        return bce(x, inputs[1])
    raise AssertionError(k)


def forward(node: OpNode, *inputs: torch.Tensor, training: bool = True,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Run one operator and keep what :func:`backward` needs."""
    _check_inputs(node, inputs)
    ins = [t.detach().requires_grad_(t.is_floating_point()) for t in inputs]
    params = {n: t.detach().requires_grad_(True) for n, t in node.params.items()}
    with torch.enable_grad():
        out = _apply(node, ins, params, training, generator)
    node._ctx = (ins, params, out)
    return out.detach()


def backward(node: OpNode, upstream: torch.Tensor) -> tuple[list[torch.Tensor | None], dict[str, torch.Tensor]]:
    """Gradients of ``<upstream, output>`` w.r.t. the inputs and parameters."""
    if node._ctx is None:
        raise UsageError(f"{node.label}: backward called without a preceding forward")
    ins, params, out = node._ctx
    if upstream.shape != out.shape:
        raise ShapeError(node.label, "upstream", tuple(out.shape), tuple(upstream.shape))
    wrt = [t for t in ins if t.requires_grad] + list(params.values())
    grads = torch.autograd.grad(out, wrt, upstream, allow_unused=True)
    node._ctx = None
    it = iter(grads)
    in_grads = [next(it) if t.requires_grad else None for t in ins]
    in_grads = [torch.zeros_like(t) if g is None and t.requires_grad else g for t, g in zip(ins, in_grads)]
    p_grads = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(params, it)}
    return in_grads, p_grads


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """DCGAN-style init: N(0, 0.02) conv/linear weights, zero bias, BN (1, 0)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d | nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return module


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    slots: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.step], dtype=np.int64)}
        for pname, slot in self.slots.items():
            for sname, t in slot.items():
                out[f"{prefix}.{sname}.{pname}"] = t.detach().cpu().numpy()
        return out

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, np.ndarray]) -> None:
        self.step = int(tensors[f"{prefix}.step"][0])
        self.slots = {}
        for key, arr in tensors.items():
            if not key.startswith(prefix + ".") or key == f"{prefix}.step":
                continue
            sname, pname = key[len(prefix) + 1:].split(".", 1)
            self.slots.setdefault(pname, {})[sname] = torch.from_numpy(np.array(arr))


def sgd(lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("sgd_momentum", lr, momentum=momentum, weight_decay=weight_decay)


def adam(lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
         weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("adam", lr, momentum=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
                   grads: Mapping[str, torch.Tensor | None]) -> OptimizerState:
    """Update ``params`` in place.

    Weight decay is added to the gradient (L2 coupling).  SGD keeps a momentum
    buffer initialised to the first gradient; Adam uses bias-corrected moments.
    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, g in grads.items():
        if g is not None and g.shape != params[name].shape:
            raise ShapeError(name, "grad", tuple(params[name].shape), tuple(g.shape))
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p
        slot = state.slots.setdefault(name, {})
        if state.kind == "sgd_momentum":
            if state.momentum:
                buf = slot.get("buf")
                buf = g.clone() if buf is None else buf.mul_(state.momentum).add_(g)
                slot["buf"] = buf
                g = buf
            p.sub_(state.lr * g)
        else:
            b1, b2 = state.momentum, state.beta2
            m = slot.setdefault("m", torch.zeros_like(p))
            v = slot.setdefault("v", torch.zeros_like(p))
            m.mul_(b1).add_((1 - b1) * g)
            v.mul_(b2).add_((1 - b2) * g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


def module_step(state: OptimizerState, module: nn.Module) -> OptimizerState:
    params = dict(module.named_parameters())
    return optimizer_step(state, params, {n: p.grad for n, p in params.items()})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RDAGCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def arch_hash(arch: Mapping) -> str:
    return hashlib.sha256(_canonical(arch)).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray | torch.Tensor],
                    arch: Mapping, meta: Mapping | None = None) -> None:
    """Write ``tensors`` in the versioned little-endian record format.

    Layout: magic, u32 version, u32+bytes architecture JSON, 32-byte sha256 of
    that JSON, u32+bytes metadata JSON, u32 record count, then per record a
    u16+bytes name, u8 dtype code, u8 rank, u64 dims and the raw values.
    """
    arch_b, meta_b = _canonical(arch), _canonical(meta or {})
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", len(arch_b)), arch_b, hashlib.sha256(arch_b).digest(),
              struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _DTYPE_CODES[arr.dtype]
        name_b = name.encode("utf-8")
        chunks += [struct.pack("<H", len(name_b)), name_b, struct.pack("<BB", code, arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape),
                   np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict, dict, dict[str, np.ndarray]]:
    """Return ``(arch, meta, tensors)``; validates magic, version and hash."""
    buf = memoryview(Path(path).read_bytes())
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack("<I", take(4))
    arch_b = bytes(take(n))
    if hashlib.sha256(arch_b).digest() != bytes(take(32)):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n)))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return json.loads(arch_b), meta, tensors


def module_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
