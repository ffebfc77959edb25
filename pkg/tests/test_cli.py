import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from cellweight import cli
from cellweight.config import ConfigError, load_config
from cellweight.targetgen import read_samples
from cellweight.train import TrainingDiverged

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"

# small enough for a few seconds per full run
FAST = [
    "synth.n_regions=8",
    "synth.canvas=[64, 64]",
    "synth.cells_per_region=8",
    "prepare.patch_size=32",
    "prepare.stride=32",
    "detect.tile=32",
    "detector.base_filters=4",
    "train.max_epochs=3",
    "train.early_stop_patience=2",
]


def run(workdir, *args, extra=()):
    sets = [f"workdir={workdir}", *FAST, *extra]
    return cli.main([*args, "-c", str(TOY), *(a for s in sets for a in ("--set", s))])


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert run(root, "all") == 0
    return root


def test_end_to_end_outputs(full_run):
    for stage in ("synth", "prepare", "models", "detections", "reports"):
        assert (full_run / stage / "config.yaml").exists()
    summary = json.loads((full_run / "reports" / "summary.json").read_text())
    assert set(summary["recall_by_gt_class"]) == {"CD8+", "CD4+/FOXP3-", "CD4+/FOXP3+"}
    assert summary["classification"]["positions"] == "annotations"
    assert len(summary["sweep"]) == 20
    table = (full_run / "reports" / "table.txt").read_text()
    assert "Precision" in table and "Recall" in table and "F1-score" in table
    assert (full_run / "reports" / "pr_vs_cap.png").exists()
    assert (full_run / "models" / "detector" / "detector_best.pt").exists()
    metrics = (full_run / "models" / "detector" / "detector_best_metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,val_loss"


def test_resolved_config_is_written(full_run):
    saved = yaml.safe_load((full_run / "prepare" / "config.yaml").read_text())
    assert saved["prepare"]["patch_size"] == 32
    assert saved["workdir"] == str(full_run)


def test_census_and_splits(full_run):
    splits = json.loads((full_run / "prepare" / "splits.json").read_text())
    assert [len(splits[k]) for k in ("train", "val", "test")] == [5, 2, 1]
    info = json.loads((full_run / "prepare" / "census.json").read_text())
    assert info["strategy"] == "ExpWeightType1"
    assert info["background_weight"] == pytest.approx(np.exp(-1))


def test_unweighted_prepare_gives_unit_weights(tmp_path):
    assert run(tmp_path, "synth") == 0
    assert run(tmp_path, "prepare", extra=["prepare.strategy=Unweighted"]) == 0
    samples = read_samples(tmp_path / "prepare" / "samples" / "train")
    assert samples and all(np.all(s.weight == 1.0) for s in samples)


def test_ground_truth_as_detections_scores_perfectly(full_run, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(full_run, work)
    for csv_path in (work / "detections").glob("*.csv"):
        src = work / "synth" / "regions" / csv_path.name
        rows = src.read_text().splitlines()[1:]
        csv_path.write_text("x,y,confidence,class\n" + "".join(f"{r.rsplit(',', 1)[0]},1.0,{r.rsplit(',', 1)[1]}\n" for r in rows))
    assert run(work, "evaluate") == 0
    summary = json.loads((work / "reports" / "summary.json").read_text())
    assert all(r["f1"] == 1.0 for r in summary["sweep"])
    assert summary["best_cap_px"] == 1.0


def test_identical_runs_give_identical_reports(full_run, tmp_path):
    assert run(tmp_path, "all") == 0
    a = (full_run / "reports" / "summary.json").read_text()
    b = (tmp_path / "reports" / "summary.json").read_text().replace(str(tmp_path), str(full_run))
    assert a == b


def test_rerun_is_idempotent(full_run):
    before = (full_run / "reports" / "summary.json").read_bytes()
    assert run(full_run, "evaluate") == 0
    assert (full_run / "reports" / "summary.json").read_bytes() == before


def test_unknown_config_key(tmp_path, capsys):
    assert cli.main(["synth", "--set", f"workdir={tmp_path}", "--set", "train.epochs=3"]) == cli.EXIT_CONFIG
    assert "unknown keys" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 0\nbogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_type_errors():
    with pytest.raises(ConfigError):
        load_config(None, ["train.batch_size=2.5"])
    with pytest.raises(ConfigError):
        load_config(None, ["detect.classify=yes please"])
    with pytest.raises(ConfigError):
        load_config(None, ["prepare.fractions=[0.5, 0.5, 0.5]"])
    with pytest.raises(ConfigError):
        load_config(None, ["prepare.patch_size=30"])
    assert load_config(None, ["train.max_epochs=30"]).train.max_epochs == 30


def test_missing_upstream_artifacts(tmp_path, capsys):
    assert cli.main(["evaluate", "--set", f"workdir={tmp_path}"]) == cli.EXIT_DATA
    assert "prepare" in capsys.readouterr().err
    assert cli.main(["prepare", "--set", f"workdir={tmp_path}"]) == cli.EXIT_DATA


def test_divergence_exit_code(tmp_path, monkeypatch):
    assert run(tmp_path, "synth") == 0
    assert run(tmp_path, "prepare") == 0

    def boom(*args, **kwargs):
        raise TrainingDiverged("non-finite training loss at epoch 0, batch 0")

    monkeypatch.setattr(cli, "train_detector", boom)
    assert run(tmp_path, "train", "--model", "detector") == cli.EXIT_DIVERGED
