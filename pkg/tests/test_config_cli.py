import csv
import json

import pytest

from cascade3d.cli import main
from cascade3d.config import RunConfig, dump_config, load_config
from cascade3d.errors import ConfigError
from cascade3d.volume import LabelMap, read_vvf

from conftest import SMALL_PHANTOM, TINY, stage_cfg


def tiny_config(**kw):
    base = dict(phantom=SMALL_PHANTOM, network=TINY,
                stage1=stage_cfg(1, iterations=4, validate_every=2, checkpoint_every=2),
                stage2=stage_cfg(2, iterations=4, validate_every=2, checkpoint_every=2, radius=1),
                n_train=2, n_val=1)
    base.update(kw)
    return RunConfig(**base)


def test_yaml_round_trip(tmp_path):
    cfg = tiny_config(tiling="overlap", overlap_R=8)
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.fingerprint() == cfg.fingerprint()
    assert RunConfig().fingerprint() != cfg.fingerprint()


def test_partial_yaml_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("n_train: 3\nstage1:\n  iterations: 7\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.n_train == 3 and cfg.stage1.iterations == 7 and cfg.stage2.iterations == 5000


@pytest.mark.parametrize("text", [
    "bogus_key: 1\n",
    "network:\n  input_tile: [45, 45, 45]\n",
    "tiling: sliding\n",
    "overlap_R: 3\n",
    "stage2:\n  stage: 1\n",
    "stage1:\n  lr: -1\n",
    "network:\n  num_classes: 3\n",
    "n_val: 0\n",
    "- just\n- a list\n",
])
def test_bad_configs_rejected(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
    assert main(["phantom", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "p"),
                 "--run-dir", str(tmp_path / "run")]) == 2


def test_config_error_is_machine_readable(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("tiling: sliding\n")
    assert main(["phantom", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "p")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and "tiling" in err["message"]


def test_missing_image_is_data_error(tmp_path):
    assert main(["mask", "--image", str(tmp_path / "none.vvf"), "--out", str(tmp_path / "m.vvf"),
                 "--run-dir", str(tmp_path)]) == 3


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.yaml"
    dump_config(tiny_config(), cfg_path)
    run = root / "run"
    common = ["--config", str(cfg_path), "--run-dir", str(run)]
    assert main(["phantom", *common, "--out", str(root / "data")]) == 0
    return root, run, common, root / "data" / "manifest.json"


def test_phantom_writes_manifest(workspace):
    root, run, _, manifest = workspace
    man = json.loads(manifest.read_text())
    assert [e["split"] for e in man["cases"]] == ["train", "train", "validation"]
    lab = read_vvf(manifest.parent / man["cases"][0]["labels"])
    assert isinstance(lab, LabelMap) and lab.dims == (48, 48, 48)
    rec = json.loads((run / "run.json").read_text())
    assert rec["config_hash"] == load_config(root / "tiny.yaml").fingerprint()
    assert {"seeds", "threads", "versions"} <= set(rec)


def test_stage2_without_checkpoint_fails(tmp_path, workspace, capsys):
    _, _, common, manifest = workspace
    code = main(["train", "--stage", "2", "--data", str(manifest),
                 "--config", common[1], "--run-dir", str(tmp_path / "fresh")])
    assert code != 0 and code == 2
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_mask(workspace, tmp_path):
    _, _, common, manifest = workspace
    img = manifest.parent / "case000_image.vvf"
    before = img.read_bytes()
    assert main(["mask", *common, "--image", str(img), "--out", str(tmp_path / "c1.vvf")]) == 0
    c1 = read_vvf(tmp_path / "c1.vvf")
    assert c1.dims == (24, 24, 24) and 0.3 < (c1.data > 0).mean() < 0.5
    assert img.read_bytes() == before


@pytest.fixture(scope="module")
def trained(workspace):
    _, run, common, manifest = workspace
    for stage in (1, 2):
        assert main(["train", *common, "--stage", str(stage), "--data", str(manifest)]) == 0
    return workspace


def test_train_writes_checkpoints_and_logs(trained):
    _, run, _, _ = trained
    for stage in (1, 2):
        assert (run / "checkpoints" / f"stage{stage}_best.ckpt").exists()
        assert (run / "checkpoints" / f"stage{stage}_last.ckpt").exists()
    rows = list(csv.reader(open(run / "logs" / "loss.csv")))
    assert rows[0] == ["stage", "iteration", "loss"] and len(rows) == 9


def test_predict(trained, tmp_path):
    _, _, common, manifest = trained
    img = manifest.parent / "case002_image.vvf"
    out = tmp_path / "p.vvf"
    assert main(["predict", *common, "--image", str(img), "--tiles", "overlap", "--r-overlap", "2",
                 "--out", str(out)]) == 0
    assert read_vvf(out).dims == (48, 48, 48)


def test_sweep_recall_is_monotone(trained):
    _, run, common, manifest = trained
    assert main(["sweep", *common, "--data", str(manifest), "--r", "0..4"]) == 0
    rows = list(csv.DictReader(open(run / "eval" / "sweep.csv")))
    assert [int(r["r"]) for r in rows] == [0, 1, 2, 3, 4]
    rec = [float(r["recall"]) for r in rows]
    assert rec == sorted(rec)


def test_sweep_rejects_bad_range(trained):
    _, _, common, manifest = trained
    with pytest.raises(SystemExit):
        main(["sweep", *common, "--data", str(manifest), "--r", "4..1"])


def test_cascade_and_eval_outputs(trained, tmp_path):
    _, run, common, manifest = trained
    assert main(["cascade", *common, "--data", str(manifest)]) == 0
    pred = run / "predictions" / "case002_labels.vvf"
    assert read_vvf(pred).dims == (48, 48, 48)
    per_case = (run / "eval" / "per_case.csv").read_text()
    summary = (run / "eval" / "summary.csv").read_text()
    assert per_case.startswith("case_id,class,dice") and "case002" in per_case
    assert summary.startswith("class,mean")
    # identical reruns give byte-identical CSVs
    assert main(["cascade", *common, "--data", str(manifest)]) == 0
    assert (run / "eval" / "per_case.csv").read_text() == per_case
    assert (run / "eval" / "summary.csv").read_text() == summary
    assert main(["eval", *common, "--data", str(manifest), "--pred", str(run / "predictions"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval_per_case.csv").read_text().splitlines()[1:] == per_case.splitlines()[1:]


def test_eval_without_predictions_fails(workspace, tmp_path):
    _, _, common, manifest = workspace
    assert main(["eval", *common, "--data", str(manifest), "--pred", str(tmp_path)]) == 3
