"""End-to-end desk experiment: train both stages on phantoms and evaluate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError
from .metrics import CaseMetrics, SegmentationReport, SweepResult, dilation_sweep, per_class_dice, sweep_csv
from .morphology import dilate
from .phantom import generate
from .pipeline import (
    CLASS_NAMES, RunDir, cascade_predict, prepare_stage1, prepare_stage2, stage1_foreground,
    train_stage, working_grid,
)
from .volume import upsample_nearest

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    stage1: SegmentationReport
    stage2: SegmentationReport
    stage2_overlap: SegmentationReport
    sweep: SweepResult
    c1_fraction: float
    c2_fraction: float
    c2_recall: float
    seconds: dict[str, float]

    def summary(self) -> dict:
        tube = 3
        return {
            "stage1_mean_dice": self.stage1.mean_dice(),
            "stage2_mean_dice": self.stage2.mean_dice(),
            "stage2_overlap_mean_dice": self.stage2_overlap.mean_dice(),
            "stage1_class_dice": {CLASS_NAMES[k]: self.stage1.class_mean(k) for k in self.stage1.classes},
            "stage2_class_dice": {CLASS_NAMES[k]: self.stage2.class_mean(k) for k in self.stage2.classes},
            "stage2_overlap_class_dice": {
                CLASS_NAMES[k]: self.stage2_overlap.class_mean(k) for k in self.stage2_overlap.classes
            },
            "tube_gain": self.stage2.class_mean(tube) - self.stage1.class_mean(tube),
            "r_star": self.sweep.r_star,
            "sweep": [[r.r, r.recall, r.fpr] for r in self.sweep.rows],
            "c1_fraction": self.c1_fraction,
            "c2_fraction": self.c2_fraction,
            "c2_recall": self.c2_recall,
            "seconds": self.seconds,
        }


def _names(k: int) -> dict[int, str]:
    return {c: CLASS_NAMES.get(c, f"class{c}") for c in range(1, k)}


def run_experiment(cfg: RunConfig, out_dir, resume: bool = True) -> ExperimentResult:
    out = Path(out_dir)
    rd = RunDir(out)
    cfg_path = out / "config.yaml"
    if cfg_path.exists():
        if load_config(cfg_path).fingerprint() != cfg.fingerprint():
            raise ConfigError(f"{out} holds a run with a different configuration")
    else:
        dump_config(cfg, cfg_path)
    spec = cfg.network
    timings = {}

    t0 = time.perf_counter()
    train = generate(cfg.phantom, cfg.n_train, start=0)
    val = generate(cfg.phantom, cfg.n_val, start=cfg.n_train)
    timings["phantoms"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tr1 = [prepare_stage1(c, cfg.stage1) for c in train]
    va1 = [prepare_stage1(c, cfg.stage1) for c in val]
    res1 = train_stage(spec, cfg.stage1, tr1, va1, run_dir=out, resume=resume)
    timings["stage1_train"] = time.perf_counter() - t0
    p1 = res1.best_params

    t0 = time.perf_counter()
    tr2 = [prepare_stage2(c, cfg.stage2, spec, p1) for c in train]
    va2 = [prepare_stage2(c, cfg.stage2, spec, p1) for c in val]
    res2 = train_stage(spec, cfg.stage2, tr2, va2, init=rd.ckpt(1, "best"), run_dir=out, resume=resume)
    timings["stage2_train"] = time.perf_counter() - t0
    p2 = res2.best_params

    t0 = time.perf_counter()
    s1, s2, s2o = [], [], []
    s1_fg, truth_fg, c1_masks = [], [], []
    c1_frac, c2_frac, c2_hit, c2_tot = [], [], 0, 0
    K = spec.num_classes
    for case in val:
        img, lab, c1 = working_grid(case, cfg.stage1)
        pred1 = stage1_foreground(img, c1, spec, p1, cfg.stage1)
        full1 = upsample_nearest(pred1, case.labels.dims)
        s1.append(CaseMetrics(case.case_id, per_class_dice(full1.data, case.labels.data, K)))
        for mode, bucket in (("nonoverlap", s2), ("overlap", s2o)):
            res = cascade_predict(
                case.image, spec, p1, p2, r=cfg.stage2.radius, mode=mode, R=cfg.overlap_R,
                factor=cfg.stage1.factor, threshold=cfg.stage1.threshold, intensity=cfg.stage1.intensity,
            )
            bucket.append(CaseMetrics(case.case_id, per_class_dice(res.labels.data, case.labels.data, K)))
        fg = pred1.data > 0
        truth = lab.data > 0
        s1_fg.append(fg)
        truth_fg.append(truth)
        c1_masks.append(c1.mask)
        c2 = dilate(fg, cfg.stage2.radius)
        c1_frac.append(c1.voxel_fraction)
        c2_frac.append(float(c2.mean()))
        c2_hit += int((c2 & truth).sum())
        c2_tot += int(truth.sum())
    sweep = dilation_sweep(s1_fg, truth_fg, c1_masks, cfg.sweep_radii, cfg.recall_target)
    timings["evaluation"] = time.perf_counter() - t0

    names = _names(K)
    result = ExperimentResult(
        SegmentationReport(s1, names, stage=1, tiling="nonoverlap"),
        SegmentationReport(s2, names, stage=2, tiling="nonoverlap"),
        SegmentationReport(s2o, names, stage=2, tiling=f"overlap R={cfg.overlap_R}"),
        sweep, float(np.mean(c1_frac)), float(np.mean(c2_frac)), c2_hit / max(c2_tot, 1), timings,
    )
    ev = out / "eval"
    ev.mkdir(exist_ok=True)
    for tag, rep in (("stage1", result.stage1), ("stage2", result.stage2), ("stage2_overlap", result.stage2_overlap)):
        (ev / f"{tag}_per_case.csv").write_text(rep.per_case_csv())
        (ev / f"{tag}_summary.csv").write_text(rep.summary_csv())
        (ev / f"{tag}_table.txt").write_text(rep.table() + "\n")
    (ev / "sweep.csv").write_text(sweep_csv(sweep))
    (ev / "results.json").write_text(json.dumps(
        {"fingerprint": cfg.fingerprint(), **result.summary()}, indent=2) + "\n")
    return result
