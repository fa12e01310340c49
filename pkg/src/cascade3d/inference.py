"""Sliding-window tiled prediction with optional probability averaging.

Each tiling grid partitions space into output windows of the network's
output size. Overlap mode adds grids shifted by half a window along x and y
(or x, y, z for R=8), so every region voxel is predicted by R tiles and the
class probabilities are averaged over the tiles that actually cover it.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .augment import SampleWindow, crop_mirror
from .errors import DivergenceError, EmptyMaskError
from .loss import softmax
from .network.unet import ParameterSet, UNet, UNetSpec
from .volume import LabelMap, ProbabilityMap, Volume, upsample_nearest

MODES = ("nonoverlap", "overlap")
_SHIFT_AXES = {1: (), 2: (0,), 4: (0, 1), 8: (0, 1, 2)}


@dataclass(frozen=True, eq=False)
class TilingPlan:
    windows: tuple[SampleWindow, ...]
    mode: str
    R: int
    coverage: np.ndarray  # tiles covering each voxel of the working grid

    @property
    def num_tiles(self) -> int:
        return len(self.windows)


def grid_offsets(mode: str, R: int, output_dims) -> list[tuple[int, int, int]]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "nonoverlap":
        return [(0, 0, 0)]
    if R not in _SHIFT_AXES or R == 1:
        raise ValueError(f"overlap mode supports R in (2, 4, 8), got {R}")
    axes = _SHIFT_AXES[R]
    offs = []
    for bits in itertools.product((0, 1), repeat=len(axes)):
        o = [0, 0, 0]
        for ax, b in zip(axes, bits):
            o[ax] = b * (output_dims[ax] // 2)
        offs.append(tuple(o))
    return offs


def _axis_origins(lo: int, hi: int, off: int, out: int) -> range:
    """Origins ``lo + off + m * out`` whose window meets ``[lo, hi)``."""
    base = lo + off
    m_min = (lo - base - out) // out + 1
    m_max = (hi - 1 - base) // out
    return range(base + m_min * out, base + m_max * out + 1, out)


def _window_counts(mask: np.ndarray, origins, out) -> np.ndarray:
    """Region-voxel count inside each output window (summed-volume table)."""
    sat = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = mask.cumsum(0).cumsum(1).cumsum(2)
    o = np.asarray(origins, dtype=np.int64)
    n = np.asarray(mask.shape)
    lo = np.clip(o, 0, n)
    hi = np.clip(o + np.asarray(out), 0, n)
    total = np.zeros(len(o), dtype=np.int64)
    for bits in range(8):
        idx = tuple(np.where(bits >> ax & 1, hi[:, ax], lo[:, ax]) for ax in range(3))
        total += (-1) ** (3 - bin(bits).count("1")) * sat[idx]
    return total


def plan_tiles(region, spec: UNetSpec, mode: str = "nonoverlap", R: int = 4) -> TilingPlan:
    """Tiles whose output windows intersect ``region``, anchored at its bounding box."""
    mask = np.asarray(getattr(region, "mask", region), dtype=bool)
    if not mask.any():
        raise EmptyMaskError("cannot tile an empty region")
    idx = np.nonzero(mask)
    lo = [int(i.min()) for i in idx]
    hi = [int(i.max()) + 1 for i in idx]
    out = spec.output_tile
    origins = []
    for off in grid_offsets(mode, R, out):
        axes = [_axis_origins(lo[a], hi[a], off[a], out[a]) for a in range(3)]
        origins.extend(itertools.product(*axes))
    keep = _window_counts(mask, origins, out) > 0
    windows = tuple(
        SampleWindow.from_output_origin(o, spec) for o, k in zip(origins, keep) if k
    )
    coverage = np.zeros(mask.shape, dtype=np.int32)
    for w in windows:
        coverage[_clip_slices(w.output_origin, w.output_dims, mask.shape)] += 1
    return TilingPlan(windows, mode, 1 if mode == "nonoverlap" else R, coverage)


def _clip_slices(origin, dims, shape):
    return tuple(slice(max(o, 0), min(o + d, n)) for o, d, n in zip(origin, dims, shape))


def _tile_slices(origin, dims, shape):
    """Slices into the tile for the part of its window inside the volume."""
    return tuple(
        slice(max(o, 0) - o, min(o + d, n) - o) for o, d, n in zip(origin, dims, shape)
    )


def average_tiles(shape, region_mask, plan: TilingPlan, tile_probs, num_classes: int) -> np.ndarray:
    """Mean of per-tile probabilities at every voxel, accumulated in tile order.

    ``tile_probs[i]`` is ``(ox, oy, oz, K)`` for ``plan.windows[i]``. The mean
    is kept as a running update ``m += (p - m) / n``, which equals the
    arithmetic mean up to rounding and reproduces identical inputs bit for
    bit. Voxels outside the region get probability 1 for class 0.
    """
    acc = np.zeros((num_classes,) + tuple(shape), dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.int64)
    for w, p in zip(plan.windows, tile_probs):
        dst = _clip_slices(w.output_origin, w.output_dims, shape)
        src = _tile_slices(w.output_origin, w.output_dims, shape)
        cnt[dst] += 1
        tile = np.moveaxis(np.asarray(p, dtype=np.float64)[src], -1, 0)
        view = acc[(slice(None),) + dst]
        view += (tile - view) / cnt[dst]
    mask = np.asarray(region_mask, dtype=bool)
    if np.any(mask & (cnt == 0)):
        raise EmptyMaskError("tiling plan leaves region voxels uncovered")
    acc[:, ~mask] = 0.0
    acc[0, ~mask] = 1.0
    return acc


def normalize_intensity(a: np.ndarray, center: float = 0.0, scale: float = 500.0) -> np.ndarray:
    return ((np.asarray(a, dtype=np.float64) - center) / scale).astype(np.float32)


class TilePredictor:
    """Evaluates network tiles; one UNet per worker thread."""

    def __init__(self, spec: UNetSpec, params: ParameterSet):
        if not params.all_finite():
            raise DivergenceError("parameters contain non-finite values")
        self.spec = spec
        self.params = params
        self._local = threading.local()

    def _net(self) -> UNet:
        net = getattr(self._local, "net", None)
        if net is None:
            net = self._local.net = UNet(self.spec, self.params)
        return net

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        logits = self._net().forward(patch, train=False)
        return softmax(logits.astype(np.float64))


def predict(volume: Volume | np.ndarray, region, spec: UNetSpec, params: ParameterSet,
            plan: TilingPlan, *, intensity=(0.0, 500.0), target_dims=None,
            threads: int = 1, spacing=None):
    """Tiled prediction. Returns ``(ProbabilityMap, LabelMap)``.

    Both are on the working grid, or upsampled by nearest neighbour to
    ``target_dims`` if given.
    """
    image = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    spacing = spacing or (volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0))
    mask = np.asarray(getattr(region, "mask", region), dtype=bool)
    if mask.shape != image.shape:
        raise ValueError(f"region dims {mask.shape} differ from image dims {image.shape}")
    img = normalize_intensity(image, *intensity)
    predictor = TilePredictor(spec, params)

    def run(w: SampleWindow):
        return predictor(crop_mirror(img, w.input_origin, w.input_dims))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            tiles = list(pool.map(run, plan.windows))
    else:
        tiles = [run(w) for w in plan.windows]
    probs = average_tiles(image.shape, mask, plan, tiles, spec.num_classes)
    pmap = ProbabilityMap(probs, spacing)
    labels = pmap.argmax()
    if target_dims is not None and tuple(target_dims) != pmap.dims:
        pmap = upsample_nearest(pmap, target_dims)
        labels = upsample_nearest(labels, target_dims)
    return pmap, labels
