"""Binary-mask operations that build the two candidate regions.

Stage 1 uses a thresholded body mask; stage 2 uses the stage-1 foreground
prediction grown by a Euclidean ball of ``r`` voxels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError
from .volume import LabelMap, Volume

DEFAULT_THRESHOLD = -300.0

_CONN26 = np.ones((3, 3, 3), dtype=bool)
_CONN4 = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class CandidateRegion:
    mask: np.ndarray
    stage: int
    dilation_radius: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {mask.shape}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be non-negative")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def voxel_fraction(self) -> float:
        return self.voxel_count / self.mask.size

    @property
    def is_empty(self) -> bool:
        return self.voxel_count == 0

    def bounding_box(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """Inclusive-exclusive ``(lo, hi)`` corners of the set voxels."""
        if self.is_empty:
            raise EmptyMaskError("empty candidate region has no bounding box")
        idx = np.nonzero(self.mask)
        return (
            tuple(int(i.min()) for i in idx),
            tuple(int(i.max()) + 1 for i in idx),
        )

    def as_labelmap(self) -> LabelMap:
        return LabelMap(self.mask.astype(np.uint8), 2, self.spacing)


@lru_cache(maxsize=32)
def ball(r: int) -> np.ndarray:
    """Discrete Euclidean ball ``{v : |v|_2 <= r}`` as a ``(2r+1)^3`` mask."""
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    b = x * x + y * y + z * z <= r * r
    b.setflags(write=False)
    return b


def dilate(mask: np.ndarray, r: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if int(r) != r or r < 0:
        raise ValueError(f"radius must be a non-negative integer, got {r}")
    if r == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=ball(int(r)))


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 26-connected component; ties go to the first in raster order."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("largest_component of an empty mask")
    lab, n = ndimage.label(mask, structure=_CONN26)
    if n == 1:
        return mask.copy()
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def fill_holes_2d(mask: np.ndarray) -> np.ndarray:
    """Fill, slice by slice along z, background not 4-connected to the slice border."""
    mask = np.asarray(mask, dtype=bool)
    out = mask.copy()
    for z in range(mask.shape[2]):
        sl = mask[:, :, z]
        if sl.any():
            out[:, :, z] = ndimage.binary_fill_holes(sl, structure=_CONN4)
    return out


def body_mask(v: Volume, threshold: float = DEFAULT_THRESHOLD) -> CandidateRegion:
    """Threshold, keep the largest component, then fill in-slice holes."""
    fg = v.data >= threshold
    if not fg.any():
        raise EmptyMaskError(f"no voxel reaches threshold {threshold}")
    mask = fill_holes_2d(largest_component(fg))
    return CandidateRegion(mask, stage=1, dilation_radius=0, spacing=v.spacing)


def candidate_from_prediction(labels: LabelMap, r: int = 3) -> CandidateRegion:
    """Dilate the union of all predicted foreground classes by ``r`` voxels.

    An all-background prediction yields a legal, empty region; callers check
    :attr:`CandidateRegion.is_empty`.
    """
    mask = dilate(labels.foreground(), r)
    return CandidateRegion(mask, stage=2, dilation_radius=int(r), spacing=labels.spacing)
