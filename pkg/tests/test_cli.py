import json

import numpy as np
import pytest

from protosleep.cli import main, read_predictions
from protosleep.data import load_dataset

from conftest import TINY_FEATURES

TINY = [
    "--set", f"model.features={json.dumps(TINY_FEATURES.to_dict())}",
    "--set", "model.num_prototypes=4",
    "--set", "train.batch_size=16",
    "--set", "train.projection_period=null",
    "--window-len", "2",
    "--max-epochs", "2",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--subjects", "3", "--epochs", "8", "--seed", "2", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--data", str(dataset), "--folds", "3", "--seed", "1", "--out", str(out), *TINY]
    assert main(args) == 0
    return out


def test_synth_outputs(dataset):
    assert (dataset / "manifest.json").exists() and (dataset / "events.json").exists()
    assert len(load_dataset(dataset)) == 3
    run = json.loads((dataset / "run_manifest.json").read_text())
    assert run["config"]["synth"]["seed"] == 2 and "torch" in run["versions"]


def test_train_is_reproducible(dataset, trained, tmp_path):
    args = ["train", "--data", str(dataset), "--folds", "3", "--seed", "1", "--out", str(tmp_path), *TINY]
    assert main(args) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    cfg = json.loads((trained / "run_manifest.json").read_text())["config"]
    assert cfg["train"]["max_epochs"] == 2 and cfg["model"]["num_prototypes"] == 4


def test_explain_matches_eval_logits(dataset, trained, tmp_path):
    ckpt = str(trained / "model.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--data", str(dataset), "--out", str(tmp_path / "e")]) == 0
    stored = read_predictions(tmp_path / "e" / "predictions.csv")
    ref = sorted(stored)[0]
    win = f"{ref[0]}:{ref[1]}"
    assert main(["explain", "--ckpt", ckpt, "--data", str(dataset), "--window", win, "--out", str(tmp_path / "x")]) == 0
    rep = json.loads((tmp_path / "x" / "explanation.json").read_text())
    contrib = np.array([list(r.values()) for r in rep["contributions"].values()])
    recon = contrib.sum(axis=0) + np.array(list(rep["bias"].values()))
    assert np.abs(recon - stored[ref]).max() < 1e-6


def test_model_commands_write_artifacts(dataset, trained, tmp_path):
    ckpt = str(trained / "model.ckpt")
    base = ["--ckpt", ckpt, "--data", str(dataset)]
    assert main(["cards", *base, "--no-occlusion", "--out", str(tmp_path / "c")]) == 0
    assert len(json.loads((tmp_path / "c" / "cards.json").read_text())) == 4
    assert main(["errors", *base, "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "error_scores.csv").exists()
    assert main(["export-scores", *base, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "scores.csv").read_text().startswith("subject_id,epoch_index")
    assert main(["ensemble", "--ckpt", ckpt, ckpt, "--data", str(dataset), "--out", str(tmp_path / "n")]) == 0
    for d in "crsn":
        assert (tmp_path / d / "run_manifest.json").exists()


def test_artifact_root_env(dataset, monkeypatch, tmp_path):
    monkeypatch.setenv("PROTOSLEEP_ROOT", str(tmp_path))
    assert main(["synth", "--subjects", "1", "--epochs", "2"]) == 0
    assert (tmp_path / "synth" / "manifest.json").exists()


def test_config_file_precedence(tmp_path):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"synth": {"subjects": 1, "epochs_per_subject": 2, "seed": 4}}))
    assert main(["synth", "--config", str(cfgfile), "--seed", "9", "--out", str(tmp_path / "d")]) == 0
    cfg = json.loads((tmp_path / "d" / "run_manifest.json").read_text())["config"]["synth"]
    assert (cfg["subjects"], cfg["seed"]) == (1, 9)


def test_exit_codes(dataset, tmp_path):
    assert main(["synth", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["synth", "--set", "synth.nope=1", "--out", str(tmp_path)]) == 3
    assert main(["synth", "--set", "synth.subjects=0", "--out", str(tmp_path)]) == 3
    assert main(["train", "--data", str(dataset), "--folds", "9", "--out", str(tmp_path)]) == 3
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(dataset)]) == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path)]) == 4
