"""Deterministic synthetic abdomen phantoms with exact ground truth.

Each case is a body ellipsoid (soft tissue around 0 HU) in air (-1000 HU)
holding three labelled structures: a large organ (class 1), a medium organ
(class 2) and a thin curved tube (class 3). Two unlabelled decoys live in the
background class: a bright spine-like rod with the tube's intensity and a gas
pocket that the body mask has to fill back in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import LabelMap, Volume

BACKGROUND, LARGE_ORGAN, MEDIUM_ORGAN, TUBE = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    seed: int = 0
    num_classes: int = 4
    spacing: tuple[float, float, float] = (0.8, 0.8, 0.8)
    air: float = -1000.0
    tissue: float = 0.0
    # intensity offsets over tissue for classes 1..3
    class_offsets: tuple[float, float, float] = (60.0, 100.0, 160.0)
    spine_offset: float = 160.0
    gas: float = -900.0
    noise_sigma: float = 60.0
    # geometry as fractions of each axis length
    body_semi_axes: tuple[float, float, float] = (0.47, 0.40, 0.48)
    large_semi_axes: tuple[float, float, float] = (0.20, 0.15, 0.18)
    medium_semi_axes: tuple[float, float, float] = (0.08, 0.07, 0.10)
    tube_radius: float = 2.5  # voxels
    jitter: float = 0.02  # max center shift, fraction of axis length
    size_jitter: float = 0.1  # max relative semi-axis change

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("spacing", "class_offsets", "body_semi_axes", "large_semi_axes", "medium_semi_axes"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.num_classes != 4:
            raise ConfigError("the phantom generator produces exactly 4 classes")
        if min(self.dims) < 16:
            raise ConfigError(f"phantom dims {self.dims} too small")
        if self.noise_sigma < 0 or self.tube_radius <= 0:
            raise ConfigError("noise sigma must be >= 0 and tube radius > 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    image: Volume
    labels: LabelMap
    body: np.ndarray = field(repr=False, default=None)  # true body ellipsoid


def _ellipsoid(grid, center, semi):
    x, y, z = grid
    return (
        ((x - center[0]) / semi[0]) ** 2
        + ((y - center[1]) / semi[1]) ** 2
        + ((z - center[2]) / semi[2]) ** 2
    ) <= 1.0


def _tube(dims, points, radius):
    """Voxels within ``radius`` of a densely sampled polyline."""
    seeds = np.ones(dims, dtype=bool)
    idx = np.round(points).astype(int)
    keep = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    idx = idx[keep]
    seeds[idx[:, 0], idx[:, 1], idx[:, 2]] = False
    # the curve is sampled more finely than a voxel, so the
    # distance to the nearest seed approximates distance to the curve
    return ndimage.distance_transform_edt(seeds) <= radius


def make_case(spec: PhantomSpec, index: int) -> Case:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    dims = spec.dims
    n = np.asarray(dims, dtype=np.float64)
    c = (n - 1) / 2.0
    grid = np.indices(dims, dtype=np.float64)

    def jit(size=3):
        return rng.uniform(-spec.jitter, spec.jitter, size) * n

    def scale(semi):
        return np.asarray(semi) * n * (1 + rng.uniform(-spec.size_jitter, spec.size_jitter, 3))

    body = _ellipsoid(grid, c + jit() * 0.5, np.asarray(spec.body_semi_axes) * n)
    large = _ellipsoid(grid, c + np.array([-0.17, -0.03, 0.0]) * n + jit(), scale(spec.large_semi_axes))
    medium = _ellipsoid(grid, c + np.array([0.22, 0.02, 0.05]) * n + jit(), scale(spec.medium_semi_axes))

    t = np.linspace(0.0, 1.0, int(8 * n[2]))
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.06, 0.10) * n[0]
    tx = c[0] + 0.02 * n[0] + amp * np.sin(2 * np.pi * t + phase)
    ty = c[1] - 0.25 * n[1] + 0.03 * n[1] * np.cos(3 * np.pi * t + phase)
    tz = c[2] + (t - 0.5) * 0.44 * n[2]
    tube = _tube(dims, np.stack([tx, ty, tz], axis=1) + jit() * 0.5, spec.tube_radius)

    spine_c = c + np.array([0.0, 0.24, 0.0]) * n + jit() * 0.5
    spine = ((grid[0] - spine_c[0]) ** 2 + (grid[1] - spine_c[1]) ** 2) <= (0.05 * n[0]) ** 2
    spine &= np.abs(grid[2] - c[2]) <= 0.22 * n[2]
    gas = _ellipsoid(grid, c + np.array([0.12, 0.17, -0.1]) * n + jit(), np.full(3, 0.035) * n)

    inner = ndimage.binary_erosion(body, iterations=2)
    for name, m in (("large organ", large), ("medium organ", medium), ("tube", tube),
                    ("spine", spine), ("gas pocket", gas)):
        if not m.any() or np.any(m & ~inner):
            raise ConfigError(f"case {index}: {name} does not fit inside the body")
    if np.any(spine & (large | medium | tube)) or np.any(gas & (large | medium | tube | spine)):
        raise ConfigError(f"case {index}: decoys overlap labelled structures")

    labels = np.zeros(dims, dtype=np.uint8)
    labels[large] = LARGE_ORGAN
    labels[medium] = MEDIUM_ORGAN
    labels[tube] = TUBE

    intensity = np.full(dims, spec.air)
    intensity[body] = spec.tissue
    intensity[spine] = spec.tissue + spec.spine_offset
    intensity[gas] = spec.gas
    for k, off in enumerate(spec.class_offsets, start=1):
        intensity[labels == k] = spec.tissue + off
    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, dims)

    case_id = f"case{index:03d}"
    return Case(
        case_id,
        Volume(intensity, spec.spacing),
        LabelMap(labels, spec.num_classes, spec.spacing),
        body,
    )


def generate(spec: PhantomSpec, n_cases: int, start: int = 0) -> list[Case]:
    """Cases ``start .. start + n_cases - 1``; case ``i`` depends only on ``(seed, i)``."""
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    return [make_case(spec, start + i) for i in range(n_cases)]
