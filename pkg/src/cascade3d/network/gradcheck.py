"""Central finite-difference checks of every layer and of the whole network."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import layers as L
from .unet import ParameterSet, UNet, UNetSpec

EPS = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor covers exactly-zero gradients (conv biases feeding batch norm),
    where central differences only see rounding noise.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(f, arr: np.ndarray, idx=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out


def _probe(rng, shape):
    return rng.standard_normal(shape)


def check_layers(rng: np.random.Generator, n: int = 6) -> "OrderedDict[str, float]":
    """Worst relative error per layer gradient, 64-bit, tensors at most ``n``^3."""
    res = OrderedDict()

    def run(name, forward, backward, inputs):
        y, cache = forward(*inputs)
        r = _probe(rng, y.shape)
        grads = backward(r, cache)
        worst = 0.0
        for a, g in zip(inputs, grads):
            if g is None:
                continue
            num = numeric_grad(lambda: float((forward(*inputs)[0] * r).sum()), a)
            worst = max(worst, rel_error(g, num))
        res[name] = worst

    m = n - 2
    for ci, co, tag in ((2, 3, "scatter"), (3, 2, "full-correlation")):
        x = rng.standard_normal((n, n, n, ci))
        w = rng.standard_normal((3, 3, 3, ci, co)) * 0.3
        b = rng.standard_normal(co)
        run(f"conv3x3x3 ({tag})", L.conv_forward, lambda g, c: L.conv_backward(g, c), [x, w, b])
    x = rng.standard_normal((n, n, n, 3))
    run("conv1x1x1", L.conv_forward, lambda g, c: L.conv_backward(g, c),
        [x, rng.standard_normal((1, 1, 1, 3, 2)), rng.standard_normal(2)])
    h = n // 2
    run("upconv2x2x2", L.upconv_forward, lambda g, c: L.upconv_backward(g, c),
        [rng.standard_normal((h, h, h, 3)), rng.standard_normal((2, 2, 2, 3, 2)), rng.standard_normal(2)])
    run("maxpool2", L.maxpool_forward, lambda g, c: (L.maxpool_backward(g, c),),
        [rng.standard_normal((n, n, n, 2))])
    # keep inputs away from the kink
    xr = rng.standard_normal((n, n, n, 2))
    xr += np.sign(xr) * 0.1
    run("relu", L.relu_forward, lambda g, c: (L.relu_backward(g, c),), [xr])

    def bn_fwd(x, gamma, beta):
        return L.batchnorm_forward(x, gamma, beta, np.zeros(x.shape[-1]), np.ones(x.shape[-1]), True)

    run("batchnorm (train)", bn_fwd, lambda g, c: L.batchnorm_backward(g, c),
        [rng.standard_normal((n, n, n, 3)) * 2 + 1, rng.standard_normal(3), rng.standard_normal(3)])
    run("crop+concat", L.crop_concat_forward, lambda g, c: L.crop_concat_backward(g, c),
        [rng.standard_normal((n, n, n, 2)), rng.standard_normal((m, m, m, 3))])
    return res


def _perturbed_params(spec: UNetSpec, rng) -> ParameterSet:
    ps = ParameterSet.initialize(spec, rng, np.float64)
    # non-trivial biases and affine terms so every path carries gradient
    for k, v in ps.params.items():
        if k.endswith((".b", ".beta")):
            v[...] = rng.standard_normal(v.shape) * 0.5
        elif k.endswith(".gamma"):
            v[...] = 1.0 + rng.standard_normal(v.shape) * 0.3
    return ps


def check_network(spec: UNetSpec, rng: np.random.Generator, per_tensor: int = 6,
                  check_input: bool = True) -> "OrderedDict[str, float]":
    """Relative error of sampled entries of every parameter tensor (and the input).

    The objective is the masked weighted cross-entropy of the train-mode
    logits, so the check covers loss, network and batch statistics together.
    """
    from ..loss import ClassWeights, weighted_ce

    ps = _perturbed_params(spec, rng)
    net = UNet(spec, ps)
    x = rng.standard_normal(spec.input_tile + (spec.in_channels,))
    out = spec.output_tile
    labels = rng.integers(0, spec.num_classes, out)
    mask = rng.random(out) < 0.8
    mask.flat[0] = True
    weights = ClassWeights.from_counts(rng.integers(1, 100, spec.num_classes))

    def loss():
        return weighted_ce(net.forward(x, train=True), labels, mask, weights)[0]

    _, g = weighted_ce(net.forward(x, train=True), labels, mask, weights)
    grads, gx = net.backward(g, need_input_grad=True)
    res = OrderedDict()
    for name, arr in ps.params.items():
        idx = rng.choice(arr.size, min(arr.size, per_tensor), replace=False)
        num = numeric_grad(loss, arr, idx)
        res[name] = rel_error(grads[name].reshape(-1)[idx], num)
    if check_input:
        idx = rng.choice(x.size, per_tensor, replace=False)
        res["input"] = rel_error(gx.reshape(-1)[idx], numeric_grad(loss, x, idx))
    return res
