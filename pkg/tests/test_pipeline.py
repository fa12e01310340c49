import numpy as np
import pytest

from cascade3d.augment import AugmentConfig
from cascade3d.errors import ConfigError, EmptyMaskError
from cascade3d.network import ParameterSet, TrainState, load_checkpoint
from cascade3d.phantom import Case
from cascade3d.pipeline import (
    Dataset, RunDir, StageConfig, cascade_predict, iteration_rng, prepare_stage1, prepare_stage2,
    train_stage,
)
from cascade3d.volume import LabelMap, Volume

from conftest import TINY, stage_cfg


@pytest.fixture(scope="module")
def prepared(small_cases):
    cfg = stage_cfg()
    return [prepare_stage1(c, cfg) for c in small_cases[:3]], [prepare_stage1(small_cases[3], cfg)]


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage=3)
    with pytest.raises(ConfigError):
        StageConfig(radius=-1)
    with pytest.raises(ConfigError):
        StageConfig(validate_every=0)


def test_dataset_splits_must_be_disjoint(small_cases):
    with pytest.raises(ConfigError):
        Dataset(small_cases[:2], small_cases[1:3])
    bad = Case("x", small_cases[0].image, LabelMap(small_cases[0].labels.data, 4, (1.0, 1.0, 1.0)))
    with pytest.raises(ConfigError):
        Dataset([bad], [])
    assert len(Dataset(small_cases[:2], small_cases[2:]).train) == 2


def test_prepare_stage1_uses_working_grid(prepared, small_cases):
    pc = prepared[0][0]
    assert pc.image.shape == (24, 24, 24) and pc.labels.dims == (24, 24, 24)
    assert pc.region.stage == 1 and 0.3 < pc.region.voxel_fraction < 0.5
    assert pc.full_labels.dims == (48, 48, 48)


def test_stage2_rejects_random_init(prepared):
    with pytest.raises(ConfigError, match="stage-1 checkpoint"):
        train_stage(TINY, stage_cfg(stage=2), prepared[0], init="random")


def test_stage2_rejects_missing_checkpoint(prepared, tmp_path):
    with pytest.raises(ConfigError):
        train_stage(TINY, stage_cfg(stage=2), prepared[0], init=tmp_path / "nope.ckpt")


def test_region_stage_must_match(prepared):
    with pytest.raises(ConfigError):
        train_stage(TINY, stage_cfg(stage=2), prepared[0],
                    init=TrainState(ParameterSet.initialize(TINY, np.random.default_rng(0))))


def test_iteration_rng_is_position_addressed():
    a = iteration_rng(1, 1, 7).integers(1 << 30, size=4)
    b = iteration_rng(1, 1, 7).integers(1 << 30, size=4)
    c = iteration_rng(1, 2, 7).integers(1 << 30, size=4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def _files(root):
    rd = RunDir(root)
    return {
        "last": rd.ckpt(1, "last").read_bytes(),
        "best": rd.ckpt(1, "best").read_bytes(),
        "loss": rd.loss_csv.read_bytes(),
        "val": rd.val_csv.read_bytes(),
    }


def test_identical_runs_are_byte_identical(prepared, tmp_path):
    tr, va = prepared
    for name in ("a", "b"):
        train_stage(TINY, stage_cfg(), tr, va, run_dir=tmp_path / name)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_split_resume_equals_straight_run(prepared, tmp_path):
    tr, va = prepared
    straight = train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "s")
    train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "r", stop_at=3)
    resumed = train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "r", resume=True)
    assert resumed.state.params.equals(straight.state.params)
    assert _files(tmp_path / "s") == _files(tmp_path / "r")


@pytest.mark.parametrize("stop", [1, 4, 5])
def test_interruption_between_checkpoints(prepared, tmp_path, stop):
    tr, va = prepared
    cfg = stage_cfg(iterations=7, validate_every=2, checkpoint_every=3)
    train_stage(TINY, cfg, tr, va, run_dir=tmp_path / "s")
    train_stage(TINY, cfg, tr, va, run_dir=tmp_path / "r", stop_at=stop)
    train_stage(TINY, cfg, tr, va, run_dir=tmp_path / "r", resume=True)
    assert _files(tmp_path / "s") == _files(tmp_path / "r")


def test_resume_after_crash_drops_stale_log_rows(prepared, tmp_path):
    tr, va = prepared
    train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "s")
    train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "r", stop_at=3)
    # rows written after the last checkpoint by a run that then died
    with open(RunDir(tmp_path / "r").loss_csv, "a") as fh:
        fh.write("1,3,999.0\n1,4,999.0\n")
    train_stage(TINY, stage_cfg(iterations=6), tr, va, run_dir=tmp_path / "r", resume=True)
    assert _files(tmp_path / "s") == _files(tmp_path / "r")


def test_checkpoint_records_best_validation(prepared, tmp_path):
    tr, va = prepared
    res = train_stage(TINY, stage_cfg(), tr, va, run_dir=tmp_path)
    _, best, extra = load_checkpoint(RunDir(tmp_path).ckpt(1, "best"))
    assert extra["best_iteration"] == res.best_iteration == best.iteration
    assert extra["best_dice"] == res.best_dice
    assert best.params.equals(res.best_params)
    assert len(res.val_history) == 2 and len(res.losses) == 6


def test_training_reduces_loss(prepared):
    tr, _ = prepared
    cfg = stage_cfg(iterations=120, augment=AugmentConfig(enabled=False), lr=0.05)
    res = train_stage(TINY, cfg, tr)
    losses = np.array([l for _, l in res.losses])
    assert losses[-30:].mean() < losses[:30].mean()


def test_stage2_stays_inside_candidate_region(small_cases, tmp_path):
    cfg1 = stage_cfg()
    tr1 = [prepare_stage1(c, cfg1) for c in small_cases[:2]]
    res1 = train_stage(TINY, cfg1, tr1, run_dir=tmp_path)
    # a stage-1 model that predicts the true labels gives a well-defined C2
    cfg2 = stage_cfg(stage=2, augment=AugmentConfig(enabled=False))
    tr2 = [prepare_stage2(c, cfg2, TINY, res1.best_params) for c in small_cases[:2]]
    tr2 = [p for p in tr2 if not p.region.is_empty]
    if not tr2:
        pytest.skip("untrained stage-1 model produced no foreground")
    res2 = train_stage(TINY, cfg2, tr2, init=RunDir(tmp_path).ckpt(1, "best"), run_dir=tmp_path)
    assert res2.counters["iterations"] == 6
    assert res2.counters["loss_voxels"] > 0
    assert res2.counters["loss_voxels_outside_region"] == 0
    assert res2.counters["windows_missing_region"] == 0


def test_cascade_rejects_all_air(tiny_spec):
    ps = ParameterSet.initialize(tiny_spec, np.random.default_rng(0))
    air = Volume(np.full((48, 48, 48), -1000.0))
    with pytest.raises(EmptyMaskError):
        cascade_predict(air, tiny_spec, ps, ps)


def _biased_params(spec, cls):
    ps = ParameterSet.initialize(spec, np.random.default_rng(0))
    ps.params["out.w"][...] = 0.0
    ps.params["out.b"][...] = 0.0
    ps.params["out.b"][cls] = 10.0
    return ps


def test_cascade_empty_c2_returns_background(small_cases, tiny_spec):
    bg = _biased_params(tiny_spec, 0)
    res = cascade_predict(small_cases[0].image, tiny_spec, bg, bg)
    assert res.empty_c2 and not res.labels.data.any()
    assert res.labels.dims == (48, 48, 48)


def test_cascade_never_labels_outside_c2(small_cases, tiny_spec):
    p1 = ParameterSet.initialize(tiny_spec, np.random.default_rng(1))
    everywhere = _biased_params(tiny_spec, 2)
    for mode in ("nonoverlap", "overlap"):
        res = cascade_predict(small_cases[0].image, tiny_spec, p1, everywhere, r=1, mode=mode)
        if res.empty_c2:
            continue
        small = res.labels.data[::2, ::2, ::2]
        assert not np.any((small > 0) & ~res.c2.mask)
        assert np.all(small[res.c2.mask] == 2)
        assert res.stage1_labels.dims == (48, 48, 48)
