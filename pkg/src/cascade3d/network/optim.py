"""SGD with momentum and the bit-exact checkpoint format."""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, VVFError
from ..volume import split_header
from .unet import ParameterSet, UNetSpec, buffer_shapes, parameter_shapes

CKPT_MAGIC = "VCKPT1"


@dataclass
class TrainState:
    params: ParameterSet
    lr: float = 0.01
    momentum: float = 0.9
    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.velocity:
            self.velocity = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.params.items())
        for k, v in self.params.params.items():
            if self.velocity[k].shape != v.shape:
                raise ValueError(f"momentum buffer for {k} has shape {self.velocity[k].shape}")

    def copy(self) -> "TrainState":
        return TrainState(
            self.params.copy(), self.lr, self.momentum,
            OrderedDict((k, v.copy()) for k, v in self.velocity.items()),
            self.iteration, self.seed,
        )


def sgd_step(state: TrainState, grads) -> TrainState:
    """``v <- mu * v + g``; ``p <- p - lr * v``. Updates ``state`` in place."""
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at iteration {state.iteration}")
    for name, p in state.params.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p -= state.lr * v
    state.iteration += 1
    return state


# ----------------------------------------------------------------- checkpoint

_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def encode_checkpoint(spec: UNetSpec, state: TrainState, extra: dict | None = None) -> bytes:
    dtype = state.params.dtype
    code = "f64" if dtype == np.float64 else "f32"
    lines = [
        CKPT_MAGIC,
        "spec=" + json.dumps(spec.to_dict(), sort_keys=True),
        f"dtype={code}",
        f"iteration={state.iteration}",
        f"seed={state.seed}",
        f"lr={state.lr!r}",
        f"momentum={state.momentum!r}",
        "extra=" + json.dumps(extra or {}, sort_keys=True),
    ]
    head = ("\n".join(lines) + "\n\n").encode("ascii")
    blobs = [
        arr.astype(_CODES[code]).tobytes()
        for group in (state.params.params, state.params.buffers, state.velocity)
        for arr in group.values()
    ]
    return head + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> tuple[UNetSpec, TrainState, dict]:
    header, payload = split_header(raw, CKPT_MAGIC)
    try:
        spec = UNetSpec.from_dict(json.loads(header["spec"]))
        code = header["dtype"]
        dtype = _CODES[code]
        iteration = int(header["iteration"])
        seed = int(header["seed"])
        lr = float(header["lr"])
        momentum = float(header["momentum"])
        extra = json.loads(header.get("extra", "{}"))
    except (KeyError, ValueError) as exc:
        raise VVFError(f"malformed checkpoint header: {exc}") from exc
    pshapes = parameter_shapes(spec)
    bshapes = buffer_shapes(spec)
    groups = [pshapes, bshapes, pshapes]
    total = sum(int(np.prod(s)) for g in groups for s in g.values())
    if len(payload) != total * dtype.itemsize:
        raise VVFError(
            f"checkpoint payload holds {len(payload) // dtype.itemsize} values, expected {total}"
        )
    flat = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    out = []
    pos = 0
    for shapes in groups:
        d = OrderedDict()
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            d[name] = flat[pos : pos + n].reshape(shape).copy()
            pos += n
        out.append(d)
    if not all(np.all(np.isfinite(v)) for g in out for v in g.values()):
        raise VVFError("checkpoint contains non-finite values")
    params = ParameterSet(out[0], out[1])
    state = TrainState(params, lr, momentum, out[2], iteration, seed)
    return spec, state, extra


def save_checkpoint(path, spec: UNetSpec, state: TrainState, extra: dict | None = None) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(spec, state, extra))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[UNetSpec, TrainState, dict]:
    with open(os.fspath(path), "rb") as fh:
        return decode_checkpoint(fh.read())
