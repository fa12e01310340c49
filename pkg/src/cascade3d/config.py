"""Run configuration: dataclasses with YAML/JSON round-trip and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .errors import ConfigError
from .inference import MODES
from .network.unet import DESK_SPEC, UNetSpec
from .phantom import PhantomSpec
from .pipeline import StageConfig


def _stage_from_dict(d: dict, stage: int) -> StageConfig:
    d = dict(d or {})
    d.setdefault("stage", stage)
    if d["stage"] != stage:
        raise ConfigError(f"stage{stage} section declares stage {d['stage']}")
    aug = d.pop("augment", None)
    if isinstance(aug, dict):
        if "axes" in aug:
            aug["axes"] = tuple(aug["axes"])
        aug = AugmentConfig(**aug)
    if "intensity" in d:
        d["intensity"] = tuple(d["intensity"])
    return StageConfig(**d, augment=aug or AugmentConfig())


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    network: UNetSpec = field(default_factory=lambda: UNetSpec.from_dict(DESK_SPEC))
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, iterations=5000))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, iterations=5000))
    n_train: int = 20
    n_val: int = 5
    tiling: str = "nonoverlap"
    overlap_R: int = 4
    sweep_radii: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    recall_target: float = 0.99
    threads: int = 1

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("need at least one training and one validation case")
        if self.tiling not in MODES:
            raise ConfigError(f"tiling must be one of {MODES}")
        if self.overlap_R not in (2, 4, 8):
            raise ConfigError("overlap_R must be 2, 4 or 8")
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("stage1/stage2 sections must have stage 1 and 2")
        if self.network.num_classes != self.phantom.num_classes:
            raise ConfigError("network and phantom disagree on the number of classes")
        if self.stage1.factor != self.stage2.factor:
            raise ConfigError("both stages must work on the same downsampled grid")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        object.__setattr__(self, "sweep_radii", tuple(int(r) for r in self.sweep_radii))

    def to_dict(self) -> dict:
        d = {
            "phantom": self.phantom.to_dict(),
            "network": self.network.to_dict(),
            "stage1": dataclasses.asdict(self.stage1),
            "stage2": dataclasses.asdict(self.stage2),
        }
        for f in dataclasses.fields(self):
            if f.name not in d:
                d[f.name] = getattr(self, f.name)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "phantom" in d:
                p = dict(d["phantom"])
                for k in ("dims", "spacing", "class_offsets", "body_semi_axes", "large_semi_axes",
                          "medium_semi_axes"):
                    if k in p:
                        p[k] = tuple(p[k])
                d["phantom"] = PhantomSpec(**p)
            if "network" in d:
                d["network"] = UNetSpec.from_dict({**DESK_SPEC, **d["network"]})
            if "stage1" in d:
                d["stage1"] = _stage_from_dict(d["stage1"], 1)
            if "stage2" in d:
                d["stage2"] = _stage_from_dict(d["stage2"], 2)
            if "sweep_radii" in d:
                d["sweep_radii"] = tuple(d["sweep_radii"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
