"""Random operator instances and the finite-difference comparison used by the gradient tests."""

import numpy as np
import torch

from reidaug import neuralops as nops
from oracles import numeric_grad, rel_error


def _t(a):
    return torch.from_numpy(np.array(a, dtype=np.float64))


def random_case(kind, rng):
    """Return ``(node, inputs, generator_seed)`` for one random small instance of ``kind``."""
    g = torch.Generator().manual_seed(int(rng.integers(2**31)))
    r = lambda *shape: rng.normal(size=shape)  # noqa: E731
    seed = None
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, k))
        node = nops.make_node(kind, in_ch=int(rng.integers(1, 4)), out_ch=int(rng.integers(1, 4)), kernel=k,
                              stride=int(rng.integers(1, 3)), padding=pad, generator=g)
        node.params["weight"] = _t(r(*node.params["weight"].shape))
        node.params["bias"] = _t(r(*node.params["bias"].shape))
        cin = node.params["weight"].shape[1]
        inputs = [_t(r(int(rng.integers(1, 3)), cin, int(rng.integers(k, 6)), int(rng.integers(k, 6))))]
    elif kind == "conv2d_transpose":
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        node = nops.make_node(kind, in_ch=int(rng.integers(1, 4)), out_ch=int(rng.integers(1, 4)), kernel=k,
                              stride=stride, padding=pad, generator=g)
        node.params["weight"] = _t(r(*node.params["weight"].shape))
        node.params["bias"] = _t(r(*node.params["bias"].shape))
        cin = node.params["weight"].shape[0]
        lo = max(1, (2 * pad - k) // stride + 2)
        inputs = [_t(r(int(rng.integers(1, 3)), cin, int(rng.integers(lo, lo + 3)), int(rng.integers(lo, lo + 3))))]
    elif kind == "batch_norm":
        c = int(rng.integers(1, 4))
        node = nops.make_node(kind, in_ch=c)
        node.params["weight"] = _t(rng.uniform(0.5, 1.5, c))
        node.params["bias"] = _t(r(c))
        inputs = [_t(r(int(rng.integers(2, 5)), c, int(rng.integers(1, 4)), int(rng.integers(1, 4))))]
    elif kind == "prelu":
        c = int(rng.integers(1, 4))
        node = nops.make_node(kind, in_ch=c)
        node.params["weight"] = _t(rng.uniform(0.05, 0.5, c))
        x = rng.uniform(0.1, 2.0, (int(rng.integers(1, 3)), c, 3, 3)) * rng.choice([-1, 1], (1, c, 3, 3))
        inputs = [_t(x)]
    elif kind in ("sigmoid", "tanh", "global_avg_pool"):
        node = nops.make_node(kind)
        inputs = [_t(r(int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                       int(rng.integers(1, 4))))]
    elif kind == "dropout":
        node = nops.make_node(kind, p=float(rng.uniform(0.1, 0.7)))
        inputs = [_t(r(int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, 3))]
        seed = int(rng.integers(2**31))
    elif kind == "fully_connected":
        node = nops.make_node(kind, in_features=int(rng.integers(1, 6)), out_features=int(rng.integers(1, 6)))
        node.params["weight"] = _t(r(*node.params["weight"].shape))
        node.params["bias"] = _t(r(*node.params["bias"].shape))
        inputs = [_t(r(int(rng.integers(1, 4)), node.params["weight"].shape[1]))]
    elif kind == "concat_channels":
        n, h, w = (int(v) for v in rng.integers(1, 4, 3))
        inputs = [_t(r(n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(2, 4)))]
        node = nops.make_node(kind)
    elif kind == "softmax_cross_entropy":
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        node = nops.make_node(kind)
        inputs = [_t(r(n, k)), torch.from_numpy(rng.integers(0, k, n))]
    elif kind == "mse":
        shape = tuple(int(v) for v in rng.integers(1, 4, 3))
        node = nops.make_node(kind)
        inputs = [_t(r(*shape)), _t(r(*shape))]
    elif kind == "bce":
        n = int(rng.integers(1, 8))
        node = nops.make_node(kind)
        inputs = [_t(rng.uniform(0.05, 0.95, n)), _t(rng.uniform(0, 1, n))]
    else:
        raise AssertionError(kind)
    return node, inputs, seed


def check_case(node, inputs, seed, rng, h=1e-5):
    """Max relative error between backward() and central differences over every input and parameter."""
    gen = (lambda: torch.Generator().manual_seed(seed)) if seed is not None else (lambda: None)
    out = nops.forward(node, *inputs, generator=gen())
    assert torch.isfinite(out).all()
    upstream = _t(rng.normal(size=tuple(out.shape)))
    in_grads, p_grads = nops.backward(node, upstream)

    def objective():
        return float((nops.forward(node, *inputs, generator=gen()) * upstream).sum())

    worst = 0.0
    for x, g in zip(inputs, in_grads):
        if not x.is_floating_point():
            continue
        worst = max(worst, rel_error(g.numpy(), numeric_grad(objective, x.numpy(), h)))
    for name, p in node.params.items():
        worst = max(worst, rel_error(p_grads[name].numpy(), numeric_grad(objective, p.numpy(), h)))
    return worst
