"""Elastic B-spline deformation, small rotations and training-window sampling.

All geometric augmentation is expressed as a map from output voxel
coordinates to source coordinates, so a deformation followed by a rotation
and a crop is resampled once. Reads outside the volume use mirror extension
(``d c b | a b c d | c b a``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError
from ._spline import bspline3_eval
from .volume import LabelMap, Volume


def mirror_index(i: np.ndarray, n: int) -> np.ndarray:
    """Reflect integer indices into ``[0, n)`` without repeating the edge voxel."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


def crop_mirror(a: np.ndarray, origin, size) -> np.ndarray:
    """Window ``[origin, origin + size)`` of the first three axes, mirror-padded."""
    idx = [mirror_index(np.arange(o, o + s), n) for o, s, n in zip(origin, size, a.shape[:3])]
    return a[np.ix_(*idx)]


# -------------------------------------------------------------- deformations


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacements on a coarse control grid, interpolated by cubic B-splines.

    ``control`` has shape ``(3, gx, gy, gz)``; control point ``(i, j, k)`` sits
    at voxel ``(i, j, k) * grid_spacing``. The spline interpolates the control
    values, so the dense field equals them exactly at control points.
    """

    control: np.ndarray
    grid_spacing: int = 32
    sigma: float = 4.0

    def __post_init__(self):
        if self.grid_spacing < 2:
            raise ValueError("grid spacing must be >= 2 voxels")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        c = np.asarray(self.control, dtype=np.float64)
        if c.ndim != 4 or c.shape[0] != 3:
            raise ValueError(f"control grid must be (3, gx, gy, gz), got {c.shape}")
        object.__setattr__(self, "control", c)
        coeffs = np.stack([ndimage.spline_filter(ch, order=3, mode="mirror") for ch in c])
        object.__setattr__(self, "_coeffs", coeffs)

    @staticmethod
    def control_shape(dims, grid_spacing: int) -> tuple[int, int, int]:
        return tuple(max(2, -(-(int(n) - 1) // grid_spacing) + 1) for n in dims)

    @classmethod
    def zeros(cls, dims, grid_spacing: int = 32) -> "DeformationField":
        return cls(np.zeros((3,) + cls.control_shape(dims, grid_spacing)), grid_spacing, 0.0)

    @classmethod
    def random(cls, dims, rng: np.random.Generator, sigma: float = 4.0, grid_spacing: int = 32):
        shape = (3,) + cls.control_shape(dims, grid_spacing)
        return cls(rng.normal(0.0, sigma, size=shape), grid_spacing, sigma)

    def displacement(self, coords: np.ndarray) -> np.ndarray:
        """Displacement ``(3, N)`` at voxel coordinates ``coords`` ``(3, N)``."""
        if not self.control.any():
            return np.zeros_like(coords, dtype=np.float64)
        grid = np.ascontiguousarray(coords, dtype=np.float64) / self.grid_spacing
        out = np.empty_like(grid)
        bspline3_eval(self._coeffs, grid, out)
        return out

    def dense(self, dims) -> np.ndarray:
        coords = np.indices(dims, dtype=np.float64).reshape(3, -1)
        return self.displacement(coords).reshape((3,) + tuple(dims))


def rotation_matrix(angle_degrees: float, axis: int) -> np.ndarray:
    t = np.deg2rad(angle_degrees)
    c, s = np.cos(t), np.sin(t)
    a, b = [ax for ax in range(3) if ax != axis]
    m = np.eye(3)
    m[a, a], m[a, b], m[b, a], m[b, b] = c, -s, s, c
    return m


@dataclass(frozen=True)
class Transform:
    """Output-to-source coordinate map: rotate about ``center``, then deform.

    For an output coordinate ``p``: ``q = R (p - center) + center`` and the
    source coordinate is ``q + d(q)``. This is the pull-back of deforming the
    volume first and rotating the result second.
    """

    field: DeformationField | None = None
    angle: float = 0.0
    axis: int = 2
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        no_field = self.field is None or not self.field.control.any()
        return no_field and self.angle == 0.0

    def source_coords(self, coords: np.ndarray) -> np.ndarray:
        q = np.asarray(coords, dtype=np.float64)
        if self.angle != 0.0:
            c = np.asarray(self.center, dtype=np.float64)[:, None]
            q = rotation_matrix(self.angle, self.axis) @ (q - c) + c
        if self.field is not None:
            q = q + self.field.displacement(q)
        return q


def resample(a: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    """Sample ``a`` at ``coords`` ``(3, ...)`` (order 1 trilinear, 0 nearest)."""
    shape = coords.shape[1:]
    flat = coords.reshape(3, -1)
    if order == 0:
        # explicit rounding keeps label copies exact and mirror-consistent
        idx = [mirror_index(np.floor(c + 0.5).astype(np.int64), n) for c, n in zip(flat, a.shape)]
        return a[tuple(idx)].reshape(shape)
    out = ndimage.map_coordinates(a.astype(np.float64), flat, order=order, mode="mirror")
    return out.reshape(shape)


def _apply(v, transform: Transform):
    coords = transform.source_coords(np.indices(v.dims, dtype=np.float64).reshape(3, -1))
    coords = coords.reshape((3,) + v.dims)
    if isinstance(v, LabelMap):
        return LabelMap(resample(v.data, coords, 0), v.num_classes, v.spacing)
    if isinstance(v, Volume):
        return Volume(resample(v.data, coords, 1), v.spacing)
    raise TypeError(f"cannot transform {type(v).__name__}")


def deform(v: Volume | LabelMap, field: DeformationField) -> Volume | LabelMap:
    """Pull-back ``out(p) = v(p + d(p))``: trilinear for images, nearest for labels."""
    return _apply(v, Transform(field=field))


def volume_center(dims) -> tuple[float, float, float]:
    return tuple((n - 1) / 2.0 for n in dims)


def rotate(v: Volume | LabelMap, angle_degrees: float, axis: int = 2, max_angle: float = 5.0):
    """Rotate about the volume center around ``axis`` (0, 1 or 2)."""
    if abs(angle_degrees) > max_angle:
        raise ValueError(f"angle {angle_degrees} outside +/-{max_angle} degrees")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return _apply(v, Transform(angle=float(angle_degrees), axis=axis, center=volume_center(v.dims)))


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    deform: bool = True
    sigma: float = 4.0
    grid_spacing: int = 32
    rotate: bool = True
    max_angle: float = 5.0
    axes: tuple[int, ...] = (0, 1, 2)


def random_transform(dims, cfg: AugmentConfig, rng: np.random.Generator) -> Transform:
    """Draw one deformation + rotation. Draw order is fixed for reproducibility."""
    if not cfg.enabled:
        return Transform()
    field = None
    if cfg.deform and cfg.sigma > 0:
        field = DeformationField.random(dims, rng, cfg.sigma, cfg.grid_spacing)
    angle, axis = 0.0, 2
    if cfg.rotate and cfg.max_angle > 0:
        angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
        axis = int(cfg.axes[rng.integers(len(cfg.axes))])
    return Transform(field, angle, axis, volume_center(dims))


# ---------------------------------------------------------- window sampling


@dataclass(frozen=True)
class SampleWindow:
    input_origin: tuple[int, int, int]
    input_dims: tuple[int, int, int]
    output_origin: tuple[int, int, int]
    output_dims: tuple[int, int, int]

    @property
    def margin(self) -> tuple[int, int, int]:
        return tuple(o - i for o, i in zip(self.output_origin, self.input_origin))

    @classmethod
    def from_output_origin(cls, origin, spec) -> "SampleWindow":
        margin = spec.margin
        origin = tuple(int(o) for o in origin)
        return cls(
            tuple(o - m for o, m in zip(origin, margin)),
            spec.input_tile,
            origin,
            spec.output_tile,
        )

    def output_slices_in_input(self) -> tuple[slice, slice, slice]:
        return tuple(slice(m, m + d) for m, d in zip(self.margin, self.output_dims))


def window_margins(input_dims, output_dims) -> tuple[int, int, int]:
    out = []
    for i, o in zip(input_dims, output_dims):
        if (i - o) % 2:
            raise ValueError(f"input {input_dims} and output {output_dims} margins are not integral")
        out.append((i - o) // 2)
    return tuple(out)


def _origin_range(n: int, out: int) -> np.ndarray:
    return np.arange(min(0, n - out), max(0, n - out) + 1)


class WindowSampler:
    """Uniform draws over output-window origins that overlap a region.

    Origins keep the output window inside the volume along every axis where
    the volume is at least as large as the window.
    """

    def __init__(self, region_mask: np.ndarray, spec):
        mask = np.asarray(region_mask, dtype=bool)
        if not mask.any():
            raise EmptyMaskError("cannot sample windows from an empty region")
        self.spec = spec
        out = spec.output_tile
        ranges = [_origin_range(n, o) for n, o in zip(mask.shape, out)]
        # region-voxel count of each candidate window via a summed-volume table
        sat = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
        sat[1:, 1:, 1:] = mask.cumsum(0).cumsum(1).cumsum(2)
        lo = [np.clip(r, 0, n) for r, n in zip(ranges, mask.shape)]
        hi = [np.clip(r + o, 0, n) for r, o, n in zip(ranges, out, mask.shape)]
        counts = 0
        for bits in range(8):
            sel = [(hi if bits >> ax & 1 else lo)[ax] for ax in range(3)]
            sign = (-1) ** (3 - bin(bits).count("1"))
            counts = counts + sign * sat[np.ix_(*sel)]
        valid = np.argwhere(counts > 0)
        self.origins = np.stack([ranges[ax][valid[:, ax]] for ax in range(3)], axis=1)

    def sample(self, rng: np.random.Generator) -> SampleWindow:
        o = self.origins[rng.integers(len(self.origins))]
        return SampleWindow.from_output_origin(o, self.spec)


def sample_window(region, spec, rng: np.random.Generator) -> SampleWindow:
    mask = getattr(region, "mask", region)
    return WindowSampler(mask, spec).sample(rng)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    image: np.ndarray  # input window
    labels: np.ndarray  # output window
    mask: np.ndarray  # output window, candidate region
    window: SampleWindow
    transform: Transform


def extract_sample(image: np.ndarray, labels: np.ndarray, region: np.ndarray,
                   window: SampleWindow, transform: Transform | None = None,
                   image_order: int = 1) -> TrainingSample:
    """Cut one training sample, applying ``transform`` identically to all three grids."""
    transform = transform or Transform()
    if transform.is_identity:
        img = crop_mirror(image, window.input_origin, window.input_dims)
        lab = crop_mirror(labels, window.output_origin, window.output_dims)
        msk = crop_mirror(region, window.output_origin, window.output_dims)
    else:
        grid_in = np.indices(window.input_dims, dtype=np.float64).reshape(3, -1)
        grid_in += np.asarray(window.input_origin, dtype=np.float64)[:, None]
        src = transform.source_coords(grid_in).reshape((3,) + tuple(window.input_dims))
        img = resample(image, src, image_order)
        sl = (slice(None),) + window.output_slices_in_input()
        src_out = src[sl]
        lab = resample(labels, src_out, 0)
        msk = resample(region, src_out, 0)
    return TrainingSample(
        np.asarray(img, dtype=np.float32), np.asarray(lab), np.asarray(msk, dtype=bool),
        window, transform,
    )
