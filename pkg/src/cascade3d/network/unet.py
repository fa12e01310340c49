"""Configurable valid-convolution 3D U-Net.

Level ``l`` of the analysis path holds two 3x3x3 convolutions producing
``base * 2**l`` and ``base * 2**(l + 1)`` channels, each followed by batch
norm and ReLU, then 2x2x2 max-pooling (except at the bottom). The synthesis
path up-convolves without changing the channel count, concatenates the
center-cropped analysis features and applies two more convolutions down to
``base * 2**(l + 1)`` channels. A 1x1x1 convolution maps to class logits.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DivergenceError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class UNetSpec:
    levels: int = 4
    base_channels: int = 32
    in_channels: int = 1
    num_classes: int = 8
    input_tile: tuple[int, int, int] = (132, 132, 116)

    def __post_init__(self):
        object.__setattr__(self, "input_tile", tuple(int(t) for t in self.input_tile))
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ShapeError("channel counts must be positive")
        shape_arithmetic(self.input_tile, self.levels)

    @property
    def output_tile(self) -> tuple[int, int, int]:
        return shape_arithmetic(self.input_tile, self.levels)

    @property
    def margin(self) -> tuple[int, int, int]:
        return tuple((i - o) // 2 for i, o in zip(self.input_tile, self.output_tile))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_tile"] = list(self.input_tile)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        return cls(**{**d, "input_tile": tuple(d["input_tile"])})


FULL_SPEC = dict(levels=4, base_channels=32, in_channels=1, num_classes=8, input_tile=(132, 132, 116))
DESK_SPEC = dict(levels=2, base_channels=8, in_channels=1, num_classes=4, input_tile=(44, 44, 44))


def shape_arithmetic(input_dims, levels: int) -> tuple[int, int, int]:
    """Output dims of the network for a given input tile, or :class:`ShapeError`."""
    if levels < 2:
        raise ShapeError(f"levels must be >= 2, got {levels}")
    dims = [int(d) for d in input_dims]
    if len(dims) != 3:
        raise ShapeError(f"expected 3 dims, got {input_dims}")
    out = []
    for axis, n in enumerate(dims):
        for lvl in range(levels - 1):
            n -= 4
            if n <= 0:
                raise ShapeError(f"non-positive size at level {lvl}, axis {axis}")
            if n % 2:
                raise ShapeError(f"odd before pool at level {lvl}, axis {axis} (size {n})")
            n //= 2
        n -= 4
        if n <= 0:
            raise ShapeError(f"non-positive size at level {levels - 1}, axis {axis}")
        for lvl in range(levels - 2, -1, -1):
            n = 2 * n - 4
            if n <= 0:
                raise ShapeError(f"non-positive size at level {lvl}, axis {axis}")
        out.append(n)
    return tuple(out)


# ------------------------------------------------------------------ inventory


def _layer_inventory(spec: UNetSpec):
    """Yield ``(kind, name, c_in, c_out)`` in forward order."""
    b = spec.base_channels
    c = spec.in_channels
    enc_out = []
    for lvl in range(spec.levels):
        c1, c2 = b * 2**lvl, b * 2 ** (lvl + 1)
        yield "conv3", f"enc{lvl}.conv1", c, c1
        yield "conv3", f"enc{lvl}.conv2", c1, c2
        c = c2
        enc_out.append(c2)
    for lvl in range(spec.levels - 2, -1, -1):
        yield "up", f"dec{lvl}.up", c, c
        cat = c + enc_out[lvl]
        c = enc_out[lvl]
        yield "conv3", f"dec{lvl}.conv1", cat, c
        yield "conv3", f"dec{lvl}.conv2", c, c
    yield "conv1", "out", c, spec.num_classes


def parameter_shapes(spec: UNetSpec) -> "OrderedDict[str, tuple[int, ...]]":
    shapes = OrderedDict()
    for kind, name, ci, co in _layer_inventory(spec):
        k = {"conv3": 3, "conv1": 1, "up": 2}[kind]
        shapes[f"{name}.w"] = (k, k, k, ci, co)
        shapes[f"{name}.b"] = (co,)
        if kind == "conv3":
            shapes[f"{name}.bn.gamma"] = (co,)
            shapes[f"{name}.bn.beta"] = (co,)
    return shapes


def buffer_shapes(spec: UNetSpec) -> "OrderedDict[str, tuple[int, ...]]":
    shapes = OrderedDict()
    for kind, name, _, co in _layer_inventory(spec):
        if kind == "conv3":
            shapes[f"{name}.bn.mean"] = (co,)
            shapes[f"{name}.bn.var"] = (co,)
    return shapes


def parameter_count(spec: UNetSpec) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(spec).values()))


class ParameterSet:
    """Ordered learnable tensors plus batch-norm running statistics."""

    def __init__(self, params: "OrderedDict[str, np.ndarray]", buffers: "OrderedDict[str, np.ndarray]"):
        self.params = params
        self.buffers = buffers

    @classmethod
    def zeros(cls, spec: UNetSpec, dtype=np.float32) -> "ParameterSet":
        params = OrderedDict((k, np.zeros(s, dtype)) for k, s in parameter_shapes(spec).items())
        buffers = OrderedDict()
        for k, s in buffer_shapes(spec).items():
            buffers[k] = np.ones(s, dtype) if k.endswith(".var") else np.zeros(s, dtype)
        return cls(params, buffers)

    @classmethod
    def initialize(cls, spec: UNetSpec, rng: np.random.Generator, dtype=np.float32) -> "ParameterSet":
        """He-normal kernels scaled by fan-in, zero biases, unit BN scale."""
        ps = cls.zeros(spec, dtype)
        for name, arr in ps.params.items():
            if name.endswith(".w"):
                fan_in = int(np.prod(arr.shape[:-1]))
                if name.endswith(".up.w"):
                    fan_in = arr.shape[3]
                arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith(".gamma"):
                arr[...] = 1.0
        return ps

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
            OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items()),
        )

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def equals(self, other: "ParameterSet") -> bool:
        if list(self.params) != list(other.params) or list(self.buffers) != list(other.buffers):
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for d1, d2 in ((self.params, other.params), (self.buffers, other.buffers))
            for a, b in zip(d1.values(), d2.values())
        )


class UNet:
    """Forward/backward driver over a :class:`ParameterSet`.

    ``forward(..., train=True)`` records a tape consumed by :meth:`backward`.
    Instances own scratch buffers, so use one instance per thread.
    """

    def __init__(self, spec: UNetSpec, params: ParameterSet):
        self.spec = spec
        self.params = params
        self.scratch = L.Scratch()
        self._tape = None
        self._inventory = list(_layer_inventory(spec))

    # -- helpers
    def _conv_block(self, h, name, train, tape):
        p, buf = self.params.params, self.params.buffers
        h, c_cache = L.conv_forward(h, p[f"{name}.w"], p[f"{name}.b"], self.scratch, name)
        h, bn_cache = L.batchnorm_forward(
            h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
            buf[f"{name}.bn.mean"], buf[f"{name}.bn.var"], train,
        )
        h, r_mask = L.relu_forward(h)
        if tape is not None:
            tape.append(("conv3", name, c_cache, bn_cache, r_mask))
        return h

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Logits ``(ox, oy, oz, K)`` for an input tile ``(tx, ty, tz)`` or ``(tx, ty, tz, C)``."""
        spec = self.spec
        x = np.asarray(x, dtype=self.params.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[:3] != spec.input_tile or x.shape[3] != spec.in_channels:
            raise ShapeError(f"input {x.shape} does not match tile {spec.input_tile}x{spec.in_channels}")
        p = self.params.params
        tape = [] if train else None
        h = x
        skips = []
        for lvl in range(spec.levels):
            h = self._conv_block(h, f"enc{lvl}.conv1", train, tape)
            h = self._conv_block(h, f"enc{lvl}.conv2", train, tape)
            if lvl < spec.levels - 1:
                skips.append(h)
                h, cache = L.maxpool_forward(h)
                if tape is not None:
                    tape.append(("pool", lvl, cache))
        for lvl in range(spec.levels - 2, -1, -1):
            name = f"dec{lvl}.up"
            h, cache = L.upconv_forward(h, p[f"{name}.w"], p[f"{name}.b"])
            if tape is not None:
                tape.append(("up", name, cache))
            h, cache = L.crop_concat_forward(skips[lvl], h)
            if tape is not None:
                tape.append(("cat", lvl, cache))
            h = self._conv_block(h, f"dec{lvl}.conv1", train, tape)
            h = self._conv_block(h, f"dec{lvl}.conv2", train, tape)
        h, cache = L.conv_forward(h, p["out.w"], p["out.b"])
        if tape is not None:
            tape.append(("conv1", "out", cache))
        if not np.all(np.isfinite(h)):
            raise DivergenceError("non-finite activations in forward pass")
        self._tape = tape
        return h

    def backward(self, grad_logits: np.ndarray, need_input_grad: bool = False):
        """Return ``(param_grads, input_grad)``; consumes the train-mode tape."""
        if self._tape is None:
            raise RuntimeError("backward called without a recorded train-mode forward")
        tape, self._tape = self._tape, None
        grads = OrderedDict((k, None) for k in self.params.params)
        skip_grads = {}
        g = np.asarray(grad_logits, dtype=self.params.dtype)
        for i in range(len(tape) - 1, -1, -1):
            entry = tape[i]
            kind = entry[0]
            if kind == "conv1":
                g, gw, gb = L.conv_backward(g, entry[2])
                grads["out.w"], grads["out.b"] = gw, gb
            elif kind == "conv3":
                _, name, c_cache, bn_cache, r_mask = entry
                g = L.relu_backward(g, r_mask)
                g, ggamma, gbeta = L.batchnorm_backward(g, bn_cache)
                first = i == 0
                g, gw, gb = L.conv_backward(
                    g, c_cache, need_input_grad or not first, self.scratch, name
                )
                grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
                grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = ggamma, gbeta
            elif kind == "pool":
                g = L.maxpool_backward(g, entry[2]) + skip_grads.pop(entry[1])
            elif kind == "up":
                g, gw, gb = L.upconv_backward(g, entry[2])
                grads[f"{entry[1]}.w"], grads[f"{entry[1]}.b"] = gw, gb
            elif kind == "cat":
                gskip, g = L.crop_concat_backward(g, entry[2])
                skip_grads[entry[1]] = gskip
        return grads, g

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        from ..loss import softmax

        return softmax(self.forward(x, train=False).astype(np.float64))
