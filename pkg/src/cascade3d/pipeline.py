"""Two-stage coarse-to-fine training and prediction.

Stage 1 trains inside the body mask C1. Its non-overlapping tiled
predictions, dilated by ``r`` voxels, give the candidate region C2 in which a
second network, initialised from the stage-1 weights, is fine-tuned. All
network work happens on the image downsampled by ``factor``.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, WindowSampler, extract_sample, random_transform, Transform
from .errors import ConfigError, EmptyMaskError
from .inference import normalize_intensity, plan_tiles, predict
from .loss import ClassWeights, pooled_class_weights, weighted_ce
from .metrics import CaseMetrics, SegmentationReport, per_class_dice
from .morphology import DEFAULT_THRESHOLD, CandidateRegion, body_mask, candidate_from_prediction
from .network import ParameterSet, TrainState, UNet, UNetSpec, load_checkpoint, save_checkpoint, sgd_step
from .phantom import Case
from .volume import LabelMap, Volume, downsample, upsample_nearest

log = logging.getLogger(__name__)

CLASS_NAMES = {1: "large_organ", 2: "medium_organ", 3: "tube"}


@dataclass(frozen=True)
class StageConfig:
    stage: int = 1
    iterations: int = 200_000
    radius: int = 3  # dilation of stage-1 foreground, stage 2 only
    lr: float = 0.01
    momentum: float = 0.9
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 1000
    validate_every: int = 500
    patience: int | None = None  # validations without improvement before stopping
    seed: int = 0
    factor: int = 2
    threshold: float = DEFAULT_THRESHOLD
    intensity: tuple[float, float] = (0.0, 500.0)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations < 0 or self.radius < 0 or self.factor < 1:
            raise ConfigError("iterations, radius must be >= 0 and factor >= 1")
        if self.checkpoint_every < 1 or self.validate_every < 1:
            raise ConfigError("checkpoint/validation cadence must be >= 1")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be > 0 and momentum in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 or null")
        if not self.intensity[1] > self.intensity[0]:
            raise ConfigError("intensity window must have positive width")


FULL_ITERATIONS = {1: 200_000, 2: 115_000}


@dataclass(frozen=True, eq=False)
class PreparedCase:
    """A case on the working grid together with one stage's candidate region."""

    case_id: str
    image: np.ndarray  # normalized intensities, downsampled
    labels: LabelMap  # downsampled
    region: CandidateRegion
    full_labels: LabelMap
    body: CandidateRegion  # C1 on the working grid
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class Dataset:
    train: list[Case]
    validation: list[Case]

    def __post_init__(self):
        ids = [c.case_id for c in self.train]
        vids = [c.case_id for c in self.validation]
        if set(ids) & set(vids):
            raise ConfigError("train and validation splits overlap")
        for c in self.train + self.validation:
            if c.image.dims != c.labels.dims or c.image.spacing != c.labels.spacing:
                raise ConfigError(f"{c.case_id}: image and labels disagree on dims/spacing")


def working_grid(case: Case, cfg: StageConfig) -> tuple[Volume, LabelMap, CandidateRegion]:
    img = downsample(case.image, cfg.factor)
    lab = downsample(case.labels, cfg.factor)
    return img, lab, body_mask(img, cfg.threshold)


def prepare_stage1(case: Case, cfg: StageConfig) -> PreparedCase:
    img, lab, c1 = working_grid(case, cfg)
    return PreparedCase(
        case.case_id, normalize_intensity(img.data, *cfg.intensity), lab, c1,
        case.labels, c1, img.spacing,
    )


def stage1_foreground(img: Volume, c1: CandidateRegion, spec: UNetSpec, params: ParameterSet,
                      cfg: StageConfig) -> LabelMap:
    plan = plan_tiles(c1, spec, "nonoverlap")
    _, labels = predict(img, c1, spec, params, plan, intensity=cfg.intensity)
    return labels


def prepare_stage2(case: Case, cfg: StageConfig, spec: UNetSpec, params1: ParameterSet) -> PreparedCase:
    img, lab, c1 = working_grid(case, cfg)
    pred = stage1_foreground(img, c1, spec, params1, cfg)
    c2 = candidate_from_prediction(pred, cfg.radius)
    return PreparedCase(
        case.case_id, normalize_intensity(img.data, *cfg.intensity), lab, c2,
        case.labels, c1, img.spacing,
    )


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    state: TrainState
    best_params: ParameterSet
    best_dice: float
    best_iteration: int
    weights: ClassWeights
    losses: list[tuple[int, float]]
    val_history: list[tuple[int, float]]
    counters: dict[str, int]
    checkpoint: Path | None = None


def iteration_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, iteration]))


def draw_sample(pc: PreparedCase, sampler: WindowSampler, aug: AugmentConfig,
                rng: np.random.Generator):
    window = sampler.sample(rng)
    transform = random_transform(pc.image.shape, aug, rng)
    sample = extract_sample(pc.image, pc.labels.data, pc.region.mask, window, transform)
    if not sample.mask.any():
        # the deformation moved the region out of the window; fall back to the raw crop
        sample = extract_sample(pc.image, pc.labels.data, pc.region.mask, window, Transform())
    return sample


def validate(spec: UNetSpec, params: ParameterSet, cases: list[PreparedCase], cfg: StageConfig,
             mode: str = "nonoverlap", R: int = 4) -> SegmentationReport:
    """Predict each case inside its candidate region and score at full resolution."""
    metrics = []
    for pc in cases:
        labels = predict_region(spec, params, pc, mode, R)
        full = upsample_nearest(labels, pc.full_labels.dims)
        d = per_class_dice(full.data, pc.full_labels.data, spec.num_classes)
        metrics.append(CaseMetrics(pc.case_id, d))
    names = {k: CLASS_NAMES.get(k, f"class{k}") for k in range(1, spec.num_classes)}
    return SegmentationReport(metrics, names, stage=cases[0].region.stage if cases else 1, tiling=mode)


def predict_region(spec, params, pc: PreparedCase, mode="nonoverlap", R=4) -> LabelMap:
    if pc.region.is_empty:
        return LabelMap(np.zeros(pc.labels.dims, np.uint8), spec.num_classes, pc.spacing)
    plan = plan_tiles(pc.region, spec, mode, R)
    _, labels = predict(pc.image, pc.region, spec, params, plan, intensity=(0.0, 1.0), spacing=pc.spacing)
    return labels


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("checkpoints", "logs", "predictions"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def ckpt(self, stage: int, tag: str) -> Path:
        return self.root / "checkpoints" / f"stage{stage}_{tag}.ckpt"

    @property
    def loss_csv(self) -> Path:
        return self.root / "logs" / "loss.csv"

    @property
    def val_csv(self) -> Path:
        return self.root / "logs" / "val_dice.csv"


def _rewrite_csv(path: Path, header: list[str], keep) -> None:
    """Drop rows that a resumed run will regenerate."""
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r, None)
            rows = [row for row in r if keep(row)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train_stage(spec: UNetSpec, cfg: StageConfig, train_cases: list[PreparedCase],
                val_cases: list[PreparedCase] = (), init: str | TrainState | os.PathLike = "random",
                run_dir=None, resume: bool = False, weights: ClassWeights | None = None,
                stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.iterations`` SGD steps of one stage.

    ``init`` is ``"random"`` (stage 1 only), a TrainState, or a checkpoint
    path. Stage 2 must be initialised from stage-1 weights. With
    ``resume=True`` and a ``run_dir`` holding ``stage{N}_last.ckpt`` the run
    continues from that checkpoint and reproduces an uninterrupted run
    bit for bit. ``stop_at`` halts the loop early as an interruption would:
    nothing after the last regular checkpoint is saved.
    """
    if not train_cases:
        raise ConfigError("no training cases")
    rd = RunDir(run_dir) if run_dir is not None else None
    extra = {}
    if resume and rd is not None and rd.ckpt(cfg.stage, "last").exists():
        ckspec, state, extra = load_checkpoint(rd.ckpt(cfg.stage, "last"))
        if ckspec != spec:
            raise ConfigError("checkpoint spec differs from the configured network")
        log.info("stage %d: resuming at iteration %d", cfg.stage, state.iteration)
    elif isinstance(init, str) and init == "random":
        if cfg.stage == 2:
            raise ConfigError("stage 2 must be fine-tuned from a stage-1 checkpoint, not random init")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.stage, 2**31]))
        state = TrainState(ParameterSet.initialize(spec, rng), cfg.lr, cfg.momentum, seed=cfg.seed)
    else:
        if isinstance(init, TrainState):
            src = init
        else:
            path = Path(init)
            if not path.exists():
                raise ConfigError(f"initial checkpoint {path} does not exist")
            ckspec, src, _ = load_checkpoint(path)
            if ckspec != spec:
                raise ConfigError("initial checkpoint spec differs from the configured network")
        # fine-tuning restarts the optimizer
        state = TrainState(src.params.copy(), cfg.lr, cfg.momentum, seed=cfg.seed)

    if weights is None:
        weights = pooled_class_weights(((pc.labels, pc.region) for pc in train_cases), spec.num_classes)
    for pc in train_cases:
        if pc.region.stage != cfg.stage:
            raise ConfigError(f"{pc.case_id}: region is for stage {pc.region.stage}, not {cfg.stage}")
    samplers = [WindowSampler(pc.region.mask, spec) for pc in train_cases]
    net = UNet(spec, state.params)

    best_dice = float(extra.get("best_dice", -1.0))
    best_iter = int(extra.get("best_iteration", -1))
    best_params = state.params.copy()
    if rd is not None and best_iter >= 0 and rd.ckpt(cfg.stage, "best").exists():
        best_params = load_checkpoint(rd.ckpt(cfg.stage, "best"))[1].params
    stale = int(extra.get("stale", 0))
    start = state.iteration
    losses: list[tuple[int, float]] = []
    val_history: list[tuple[int, float]] = []
    counters = {"iterations": 0, "loss_voxels": 0, "loss_voxels_outside_region": 0,
                "windows_missing_region": 0}

    loss_fh = val_fh = None
    if rd is not None:
        s = str(cfg.stage)
        _rewrite_csv(rd.loss_csv, ["stage", "iteration", "loss"],
                     lambda row: row[0] != s or int(row[1]) < start)
        _rewrite_csv(rd.val_csv, ["stage", "iteration", "mean_dice"],
                     lambda row: row[0] != s or int(row[1]) <= start)
        loss_fh = open(rd.loss_csv, "a", newline="")
        val_fh = open(rd.val_csv, "a", newline="")
        loss_w = csv.writer(loss_fh, lineterminator="\n")
        val_w = csv.writer(val_fh, lineterminator="\n")

    def snapshot(tag, st):
        save_checkpoint(rd.ckpt(cfg.stage, tag), spec, st, {
            "stage": cfg.stage, "best_dice": best_dice, "best_iteration": best_iter, "stale": stale,
            "weights": list(weights.weights),
        })

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    try:
        while state.iteration < end:
            it = state.iteration
            rng = iteration_rng(cfg.seed, cfg.stage, it)
            ci = int(rng.integers(len(train_cases)))
            pc = train_cases[ci]
            sample = draw_sample(pc, samplers[ci], cfg.augment, rng)
            counters["iterations"] += 1
            counters["loss_voxels"] += int(sample.mask.sum())
            raw = _crop(pc.region.mask, sample.window)
            counters["windows_missing_region"] += int(not raw.any())
            if sample.transform.is_identity:
                counters["loss_voxels_outside_region"] += int((sample.mask & ~raw).sum())
            logits = net.forward(sample.image, train=True)
            loss, g = weighted_ce(logits, sample.labels, sample.mask, weights)
            grads, _ = net.backward(g)
            sgd_step(state, grads)
            losses.append((it, loss))
            if loss_fh is not None:
                loss_w.writerow([cfg.stage, it, repr(loss)])

            done = state.iteration
            if val_cases and (done % cfg.validate_every == 0 or done == cfg.iterations):
                report = validate(spec, state.params, list(val_cases), cfg)
                md = report.mean_dice()
                val_history.append((done, md))
                if val_fh is not None:
                    val_w.writerow([cfg.stage, done, repr(md)])
                    val_fh.flush()
                if md > best_dice:
                    best_dice, best_iter, stale = md, done, 0
                    best_params = state.params.copy()
                    if rd is not None:
                        snapshot("best", state)
                else:
                    stale += 1
                log.info("stage %d it %d loss %.4f val dice %.4f (best %.4f @ %d)",
                         cfg.stage, done, loss, md, best_dice, best_iter)
            if rd is not None and (done % cfg.checkpoint_every == 0 or done == cfg.iterations):
                loss_fh.flush()
                snapshot("last", state)
            if cfg.patience is not None and stale >= cfg.patience:
                log.info("stage %d: stopping early at %d", cfg.stage, done)
                break
    finally:
        if loss_fh is not None:
            loss_fh.close()
            val_fh.close()

    if not val_cases:
        best_params, best_iter = state.params.copy(), state.iteration
    if rd is not None and state.iteration == cfg.iterations and not rd.ckpt(cfg.stage, "best").exists():
        snapshot("best", TrainState(best_params, cfg.lr, cfg.momentum, iteration=best_iter, seed=cfg.seed))
    return TrainResult(
        state, best_params, best_dice, best_iter, weights, losses, val_history, counters,
        rd.ckpt(cfg.stage, "best") if rd is not None else None,
    )


def _crop(mask, w):
    from .augment import crop_mirror

    return crop_mirror(mask, w.output_origin, w.output_dims)


# ------------------------------------------------------------------- cascade


@dataclass
class CascadeResult:
    labels: LabelMap  # final, original resolution
    stage1_labels: LabelMap  # original resolution
    stage1_working: LabelMap  # working grid
    c1: CandidateRegion
    c2: CandidateRegion
    empty_c2: bool = False


def cascade_predict(volume: Volume, spec: UNetSpec, params1: ParameterSet, params2: ParameterSet,
                    r: int = 3, mode: str = "nonoverlap", R: int = 4, factor: int = 2,
                    threshold: float = DEFAULT_THRESHOLD, intensity=(0.0, 500.0)) -> CascadeResult:
    """Downsample, mask, stage-1 predict, dilate, stage-2 predict, upsample."""
    img = downsample(volume, factor)
    c1 = body_mask(img, threshold)
    plan1 = plan_tiles(c1, spec, "nonoverlap")
    _, lab1 = predict(img, c1, spec, params1, plan1, intensity=intensity)
    c2 = candidate_from_prediction(lab1, r)
    s1_full = upsample_nearest(lab1, volume.dims)
    if c2.is_empty:
        log.warning("stage-1 prediction is all background; returning an empty segmentation")
        empty = LabelMap(np.zeros(volume.dims, np.uint8), spec.num_classes, volume.spacing)
        return CascadeResult(empty, s1_full, lab1, c1, c2, empty_c2=True)
    plan2 = plan_tiles(c2, spec, mode, R)
    _, lab2 = predict(img, c2, spec, params2, plan2, intensity=intensity, target_dims=volume.dims)
    lab2 = LabelMap(lab2.data, lab2.num_classes, volume.spacing)
    s1_full = LabelMap(s1_full.data, s1_full.num_classes, volume.spacing)
    return CascadeResult(lab2, s1_full, lab1, c1, c2)
