"""Dense 3D grid containers, block resampling and the VVF file format.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written with x
varying fastest, i.e. ``index = x + nx * (y + ny * z)`` (Fortran order).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import VVFError

MAGIC = "VVOL1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 entries, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    return spacing


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image on a regular grid (float32 storage)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def equals(self, other) -> bool:
        return (
            type(other) is Volume
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Class indices in ``[0, num_classes)``; 0 is background."""

    data: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got {data.shape}")
        if int(self.num_classes) < 2 or int(self.num_classes) > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def foreground(self) -> np.ndarray:
        return self.data > 0

    def equals(self, other) -> bool:
        return (
            type(other) is LabelMap
            and self.num_classes == other.num_classes
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-voxel class probabilities, channel-first ``(K, nx, ny, nz)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 4 or data.shape[0] < 2:
            raise ValueError(f"probability data must be (K>=2, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise ValueError("probabilities must be finite and non-negative")
        if np.abs(data.sum(axis=0, dtype=np.float64) - 1.0).max() > 1e-6:
            raise ValueError("class probabilities do not sum to 1 within 1e-6")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class
        return LabelMap(np.argmax(self.data, axis=0), self.num_classes, self.spacing)

    def equals(self, other) -> bool:
        return (
            type(other) is ProbabilityMap
            and self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


Grid = Union[Volume, LabelMap, ProbabilityMap]


def block_view(a: np.ndarray, factor: int) -> np.ndarray:
    """Crop ``a`` to multiples of ``factor`` and expose blocks as trailing axes."""
    nx, ny, nz = (s // factor for s in a.shape[:3])
    a = a[: nx * factor, : ny * factor, : nz * factor]
    b = a.reshape(nx, factor, ny, factor, nz, factor)
    return b.transpose(0, 2, 4, 1, 3, 5).reshape(nx, ny, nz, factor**3)


def downsample(v: Volume | LabelMap, factor: int) -> Volume | LabelMap:
    """Block-downsample by an integer factor.

    Intensities are averaged over each ``factor**3`` block; labels take the
    majority class of the block with ties resolved to the lowest index.
    Trailing voxels that do not fill a whole block are dropped.
    """
    if int(factor) != factor or factor <= 0:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if min(v.dims) < factor:
        raise ValueError(f"dims {v.dims} smaller than factor {factor}")
    spacing = tuple(s * factor for s in v.spacing)
    if factor == 1:
        if isinstance(v, LabelMap):
            return LabelMap(v.data.copy(), v.num_classes, v.spacing)
        return Volume(v.data.copy(), v.spacing)
    blocks = block_view(v.data, factor)
    if isinstance(v, LabelMap):
        counts = np.stack([(blocks == k).sum(axis=-1) for k in range(v.num_classes)])
        return LabelMap(np.argmax(counts, axis=0), v.num_classes, spacing)
    if isinstance(v, Volume):
        return Volume(blocks.astype(np.float64).mean(axis=-1), spacing)
    raise TypeError(f"cannot downsample {type(v).__name__}")


def nearest_indices(n_src: int, n_tgt: int) -> np.ndarray:
    """Source index of each target voxel under the voxel-center convention."""
    i = np.arange(n_tgt)
    return np.minimum(((2 * i + 1) * n_src) // (2 * n_tgt), n_src - 1)


def upsample_nearest(v: LabelMap | ProbabilityMap | Volume, target_dims) -> Grid:
    target_dims = tuple(int(t) for t in target_dims)
    src = v.dims
    if len(target_dims) != 3 or any(t < s for t, s in zip(target_dims, src)):
        raise ValueError(f"target dims {target_dims} smaller than source {src}")
    idx = np.ix_(*(nearest_indices(s, t) for s, t in zip(src, target_dims)))
    spacing = tuple(sp * s / t for sp, s, t in zip(v.spacing, src, target_dims))
    if isinstance(v, LabelMap):
        return LabelMap(v.data[idx], v.num_classes, spacing)
    if isinstance(v, ProbabilityMap):
        return ProbabilityMap(v.data[(slice(None),) + idx], spacing)
    return Volume(v.data[idx], spacing)


# --------------------------------------------------------------------------- VVF


def _header(kind, dims, spacing, dtype, classes=None) -> bytes:
    lines = [
        MAGIC,
        f"kind={kind}",
        "dims=" + ",".join(str(d) for d in dims),
        "spacing=" + ",".join(repr(float(s)) for s in spacing),
        f"dtype={dtype}",
    ]
    if classes is not None:
        lines.append(f"classes={classes}")
    return ("\n".join(lines) + "\n\n").encode("ascii")


def encode_vvf(v: Grid) -> bytes:
    if isinstance(v, Volume):
        head = _header("volume", v.dims, v.spacing, "f32")
        payload = v.data.astype("<f4").tobytes(order="F")
    elif isinstance(v, LabelMap):
        head = _header("labels", v.dims, v.spacing, "u8", v.num_classes)
        payload = v.data.astype("u1").tobytes(order="F")
    elif isinstance(v, ProbabilityMap):
        code = "f64" if v.data.dtype == np.float64 else "f32"
        head = _header("probmap", v.dims, v.spacing, code, v.num_classes)
        payload = b"".join(
            ch.astype(_DTYPES[code]).tobytes(order="F") for ch in v.data
        )
    else:
        raise TypeError(f"cannot serialize {type(v).__name__}")
    return head + payload


def write_vvf(v: Grid, path) -> None:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(encode_vvf(v))


def split_header(raw: bytes, magic: str = MAGIC) -> tuple[dict[str, str], bytes]:
    """Parse ``magic`` + ``key=value`` lines up to the first blank line."""
    end = raw.find(b"\n\n")
    if end < 0:
        raise VVFError("missing header terminator")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise VVFError("header is not ASCII") from exc
    if lines[0] != magic:
        raise VVFError(f"bad magic {lines[0]!r}, expected {magic!r}")
    header = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise VVFError(f"malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header, raw[end + 2 :]


def decode_vvf(raw: bytes) -> Grid:
    header, payload = split_header(raw)
    try:
        kind = header["kind"]
        dims = tuple(int(d) for d in header["dims"].split(","))
        spacing = tuple(float(s) for s in header["spacing"].split(","))
        code = header["dtype"]
    except (KeyError, ValueError) as exc:
        raise VVFError(f"incomplete or malformed header: {exc}") from exc
    if code not in _DTYPES:
        raise VVFError(f"unknown dtype {code!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VVFError(f"bad dims {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VVFError(f"spacing must be strictly positive, got {spacing}")
    channels = 1
    classes = None
    if kind in ("labels", "probmap"):
        try:
            classes = int(header["classes"])
        except (KeyError, ValueError) as exc:
            raise VVFError("labels/probmap header needs classes=K") from exc
        if kind == "probmap":
            channels = classes
    elif kind != "volume":
        raise VVFError(f"unknown kind {kind!r}")
    dtype = _DTYPES[code]
    n = channels * dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise VVFError(
            f"payload holds {len(payload) // dtype.itemsize} values, header declares {n}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    if dtype.kind == "f" and not np.all(np.isfinite(flat)):
        raise VVFError("payload contains non-finite values")
    try:
        if kind == "volume":
            if code != "f32":
                raise VVFError("volume payload must be f32")
            return Volume(flat.reshape(dims, order="F"), spacing)
        if kind == "labels":
            if code != "u8":
                raise VVFError("label payload must be u8")
            return LabelMap(flat.reshape(dims, order="F"), classes, spacing)
        chans = flat.reshape((channels,) + tuple(reversed(dims)))
        data = np.stack([c.transpose(2, 1, 0) for c in chans])
        return ProbabilityMap(data.astype(dtype.newbyteorder("=")), spacing)
    except ValueError as exc:
        if isinstance(exc, VVFError):
            raise
        raise VVFError(str(exc)) from exc


def read_vvf(path) -> Grid:
    with open(os.fspath(path), "rb") as fh:
        return decode_vvf(fh.read())
