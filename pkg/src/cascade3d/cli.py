"""Command-line entry point.

Every subcommand reads a YAML run config (``--config``), writes only under
``--run-dir`` (or an explicit ``--out``), and records a ``run.json``
provenance file. Exit codes: 0 ok, 2 config error, 3 data error,
4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import CascadeError, ConfigError, DataError
from .inference import MODES, plan_tiles, predict
from .metrics import CaseMetrics, SegmentationReport, dilation_sweep, per_class_dice, sweep_csv
from .morphology import body_mask
from .network import load_checkpoint
from .phantom import Case, generate
from .pipeline import (
    CLASS_NAMES, RunDir, cascade_predict, prepare_stage1, prepare_stage2, stage1_foreground,
    train_stage, working_grid,
)
from .volume import LabelMap, Volume, downsample, read_vvf, write_vvf

log = logging.getLogger("cascade3d")


# ------------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _versions() -> dict:
    import numba
    import scipy
    import yaml

    return {
        "cascade3d": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "scipy": scipy.__version__, "numba": numba.__version__, "pyyaml": yaml.__version__,
    }


def _provenance(run_dir: Path, cfg: RunConfig, args, argv) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "argv": list(argv),
        "config_hash": cfg.fingerprint(),
        "seeds": {"phantom": cfg.phantom.seed, "stage1": cfg.stage1.seed, "stage2": cfg.stage2.seed},
        "threads": cfg.threads,
        "versions": _versions(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def _read(path, kind):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p} does not exist")
    v = read_vvf(p)
    if not isinstance(v, kind):
        raise DataError(f"{p} holds a {type(v).__name__}, expected {kind.__name__}")
    return v


def load_manifest(path) -> tuple[list[Case], list[Case]]:
    """``(train, validation)`` cases listed in a phantom manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    try:
        man = json.loads(path.read_text())
        entries = man["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from e
    train, val = [], []
    for e in entries:
        img = _read(path.parent / e["image"], Volume)
        lab = _read(path.parent / e["labels"], LabelMap)
        case = Case(e["id"], img, lab)
        (val if e.get("split") == "validation" else train).append(case)
    return train, val


def _params(run_dir: RunDir, stage: int, cfg: RunConfig):
    path = run_dir.ckpt(stage, "best")
    if not path.exists():
        raise ConfigError(f"stage-{stage} checkpoint {path} not found; train stage {stage} first")
    spec, state, _ = load_checkpoint(path)
    if spec != cfg.network:
        raise ConfigError(f"{path} was trained with a different network spec")
    return state.params


def _report(rows, cfg, stage, tiling) -> SegmentationReport:
    names = {k: CLASS_NAMES.get(k, f"class{k}") for k in range(1, cfg.network.num_classes)}
    return SegmentationReport(rows, names, stage=stage, tiling=tiling)


def _write_report(rep: SegmentationReport, out: Path, prefix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}per_case.csv").write_text(rep.per_case_csv())
    (out / f"{prefix}summary.csv").write_text(rep.summary_csv())
    print(rep.table())


# --------------------------------------------------------------- subcommands


def cmd_phantom(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n if args.n is not None else cfg.n_train + cfg.n_val
    cases = generate(cfg.phantom, n, start=args.start)
    entries = []
    for i, c in enumerate(cases):
        write_vvf(c.image, out / f"{c.case_id}_image.vvf")
        write_vvf(c.labels, out / f"{c.case_id}_labels.vvf")
        split = "train" if args.start + i < cfg.n_train else "validation"
        entries.append({"id": c.case_id, "image": f"{c.case_id}_image.vvf",
                        "labels": f"{c.case_id}_labels.vvf", "split": split})
    manifest = {"phantom": cfg.phantom.to_dict(), "cases": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(cases)} cases to {out}")


def cmd_mask(args, cfg: RunConfig) -> None:
    img = _read(args.image, Volume)
    small = downsample(img, cfg.stage1.factor)
    region = body_mask(small, cfg.stage1.threshold if args.threshold is None else args.threshold)
    write_vvf(region.as_labelmap(), args.out)
    print(f"C1 fraction {region.voxel_fraction:.4f}")


def cmd_train(args, cfg: RunConfig) -> None:
    rd = RunDir(args.run_dir)
    train, val = load_manifest(args.data)
    dump_config(cfg, rd.root / f"config_stage{args.stage}.yaml")
    spec = cfg.network
    if args.iterations is not None:
        key = "stage1" if args.stage == 1 else "stage2"
        cfg = replace(cfg, **{key: replace(getattr(cfg, key), iterations=args.iterations)})
    if args.stage == 1:
        scfg = cfg.stage1
        tr = [prepare_stage1(c, scfg) for c in train]
        va = [prepare_stage1(c, scfg) for c in val]
        init = "random"
    else:
        scfg = cfg.stage2
        p1 = _params(rd, 1, cfg)
        tr = [prepare_stage2(c, scfg, spec, p1) for c in train]
        va = [prepare_stage2(c, scfg, spec, p1) for c in val]
        init = rd.ckpt(1, "best")
    res = train_stage(spec, scfg, tr, va, init=init, run_dir=rd.root, resume=args.resume)
    print(f"stage {args.stage}: {res.state.iteration} iterations, best validation Dice "
          f"{res.best_dice:.4f} at {res.best_iteration}; counters {res.counters}")


def cmd_predict(args, cfg: RunConfig) -> None:
    rd = RunDir(args.run_dir)
    img = _read(args.image, Volume)
    params = _params(rd, 1, cfg)
    small = downsample(img, cfg.stage1.factor)
    c1 = body_mask(small, cfg.stage1.threshold)
    plan = plan_tiles(c1, cfg.network, args.tiles, args.r_overlap)
    _, labels = predict(small, c1, cfg.network, params, plan, intensity=cfg.stage1.intensity,
                        target_dims=img.dims, threads=cfg.threads)
    labels = LabelMap(labels.data, labels.num_classes, img.spacing)
    out = Path(args.out) if args.out else rd.root / "predictions" / (Path(args.image).stem + "_stage1.vvf")
    write_vvf(labels, out)
    print(f"wrote {out} ({plan.num_tiles} tiles)")


def cmd_cascade(args, cfg: RunConfig) -> None:
    rd = RunDir(args.run_dir)
    train, val = load_manifest(args.data)
    cases = val if args.split == "validation" else train if args.split == "train" else train + val
    p1, p2 = _params(rd, 1, cfg), _params(rd, 2, cfg)
    mode = args.tiles or cfg.tiling
    rows = []
    for c in cases:
        res = cascade_predict(c.image, cfg.network, p1, p2, r=cfg.stage2.radius, mode=mode,
                              R=args.r_overlap or cfg.overlap_R, factor=cfg.stage1.factor,
                              threshold=cfg.stage1.threshold, intensity=cfg.stage1.intensity)
        if res.empty_c2:
            log.warning("%s: empty stage-2 candidate region", c.case_id)
        write_vvf(res.labels, rd.root / "predictions" / f"{c.case_id}_labels.vvf")
        rows.append(CaseMetrics(c.case_id, per_class_dice(res.labels.data, c.labels.data,
                                                          cfg.network.num_classes)))
    _write_report(_report(rows, cfg, 2, mode), rd.root / "eval")


def cmd_sweep(args, cfg: RunConfig) -> None:
    rd = RunDir(args.run_dir)
    _, val = load_manifest(args.data)
    if not val:
        raise DataError("manifest has no validation cases")
    lo, hi = args.r
    p1 = _params(rd, 1, cfg)
    fg, truth, uni = [], [], []
    for c in val:
        img, lab, c1 = working_grid(c, cfg.stage1)
        pred = stage1_foreground(img, c1, cfg.network, p1, cfg.stage1)
        fg.append(pred.data > 0)
        truth.append(lab.data > 0)
        uni.append(c1.mask)
    res = dilation_sweep(fg, truth, uni, range(lo, hi + 1), cfg.recall_target)
    out = rd.root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(res))
    for row in res.rows:
        print(f"r={row.r} recall={row.recall:.4f} fpr={row.fpr:.4f}")
    print(f"r* = {res.r_star}")


def cmd_eval(args, cfg: RunConfig) -> None:
    train, val = load_manifest(args.data)
    pred_dir = Path(args.pred)
    rows = []
    for c in train + val:
        p = pred_dir / f"{c.case_id}_labels.vvf"
        if not p.exists():
            continue
        pred = _read(p, LabelMap)
        if pred.dims != c.labels.dims:
            raise DataError(f"{p}: dims {pred.dims} differ from ground truth {c.labels.dims}")
        rows.append(CaseMetrics(c.case_id, per_class_dice(pred.data, c.labels.data, cfg.network.num_classes)))
    if not rows:
        raise DataError(f"no predictions found in {pred_dir}")
    _write_report(_report(rows, cfg, 2, "eval"), Path(args.out) if args.out else Path(args.run_dir) / "eval",
                  prefix="eval_")


# ------------------------------------------------------------------- parsing


def _radius_range(s: str) -> tuple[int, int]:
    try:
        if ".." in s:
            lo, hi = (int(x) for x in s.split(".."))
        else:
            lo = hi = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {s!r}") from None
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad radius range {s!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults to the desk configuration)")
    common.add_argument("--run-dir", default="runs/default", help="directory for all outputs")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")

    p = argparse.ArgumentParser(
        prog="cascade3d", description="Two-stage coarse-to-fine 3D segmentation of phantom CT volumes.",
        epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 divergence",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write phantom VVF pairs and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=None, help="number of cases (default n_train + n_val)")
    s.add_argument("--start", type=int, default=0)

    s = sub.add_parser("mask", parents=[common], help="body mask C1 of a downsampled image")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=None)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--data", required=True, help="phantom manifest.json")
    s.add_argument("--iterations", type=int, default=None, help="override the stage's iteration count")
    s.add_argument("--resume", action="store_true", help="continue from the stage's last checkpoint")

    s = sub.add_parser("predict", parents=[common], help="stage-1 tiled prediction of one image")
    s.add_argument("--image", required=True)
    s.add_argument("--tiles", choices=MODES, default="nonoverlap")
    s.add_argument("--r-overlap", type=int, default=4, choices=(2, 4, 8))
    s.add_argument("--out", default=None)

    s = sub.add_parser("cascade", parents=[common], help="full two-stage prediction and scoring")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "validation", "all"), default="validation")
    s.add_argument("--tiles", choices=MODES, default=None)
    s.add_argument("--r-overlap", type=int, default=None, choices=(2, 4, 8))

    s = sub.add_parser("sweep", parents=[common], help="recall/FPR of dilated stage-1 output over r")
    s.add_argument("--data", required=True)
    s.add_argument("--r", type=_radius_range, default=(0, 6), help="radius or range LO..HI")

    s = sub.add_parser("eval", parents=[common], help="score label VVFs against a manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True, help="directory of <case>_labels.vvf files")
    s.add_argument("--out", default=None)
    return p


COMMANDS = {
    "phantom": cmd_phantom, "mask": cmd_mask, "train": cmd_train, "predict": cmd_predict,
    "cascade": cmd_cascade, "sweep": cmd_sweep, "eval": cmd_eval,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        run_dir = Path(args.run_dir)
        _provenance(run_dir, cfg, args, argv)
        COMMANDS[args.command](args, cfg)
    except CascadeError as e:
        print(json.dumps({"error": e.category, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"error": "data", "message": str(e)}), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
