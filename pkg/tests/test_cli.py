import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from lepdnet.cli import main
from lepdnet.pipeline import TrainConfig, dump_config_text


def run(capsys, *argv):
    code = main(["-q", *argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["-q", "synth", "--out", str(root / "d"), "--n-per-class", "10", "--seed", "1"]) == 0
    (root / "c.txt").write_text("total_epochs = 2\n")
    assert main(["-q", "train", "--data", str(root / "d"), "--config", str(root / "c.txt"),
                 "--out", str(root / "r"), "--deterministic", "--fold", "0"]) == 0
    return root


def test_synth_writes_dataset_and_is_repeatable(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "a"), "--n-per-class", "10", "--seed", "1")
    assert code == 0
    assert json.loads(out)["counts"]["US"] == 10
    assert len(list((tmp_path / "a" / "images").iterdir())) == 50
    run(capsys, "synth", "--out", str(tmp_path / "b"), "--n-per-class", "10", "--seed", "1")
    digest = [hashlib.sha256((tmp_path / d / "metadata.csv").read_bytes()).hexdigest() for d in "ab"]
    assert digest[0] == digest[1]


def test_synth_clinical_ratio(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "a"), "--clinical-total", "50", "--seed", "2")
    assert code == 0 and sum(json.loads(out)["counts"].values()) == 50


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--n-per-class", "3"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_train_layout(trained):
    report = json.loads((trained / "r" / "report.json").read_text())
    assert report["schema_version"] == 1 and report["switches"] == "cre+sle+fpd"
    assert (trained / "r" / "fold_0" / "log.csv").is_file()


def test_invalid_config_key_names_key(trained, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("learning_rate = 1\n")
    code, out, err = run(capsys, "train", "--data", str(trained / "d"), "--config", str(bad), "--out", str(tmp_path / "r"))
    assert code == 2 and "learning_rate" in err and out == ""


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r"))
    assert code == 3 and "metadata.csv" in err


def test_no_fpd_flag(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", str(trained / "d"), "--config", str(trained / "c.txt"),
                       "--out", str(tmp_path / "r"), "--fold", "0", "--no-fpd", "--no-sle")
    assert code == 0 and json.loads(out)["switches"] == "cre"
    lines = (tmp_path / "r" / "fold_0" / "log.csv").read_text().splitlines()[1:]
    assert all(float(line.split(",")[4]) == 0.0 for line in lines)


def test_predict_outputs(trained, capsys):
    model = str(trained / "r" / "fold_0" / "checkpoint.bin")
    image = str(trained / "d" / "images" / "US_00001.png")
    base = ["predict", "--model", model, "--image", image, "--pos-x", "0.5", "--pos-y", "0.6", "--organ", "OR"]
    code, out, _ = run(capsys, *base, "--json")
    assert code == 0
    probs = json.loads(out)["probabilities"]
    assert list(probs) == ["US", "PS", "RS", "OC", "NS"]
    assert abs(sum(probs.values()) - 1) <= 1e-6
    code, out, _ = run(capsys, *base)
    assert code == 0 and len(out.splitlines()) == 5


@pytest.mark.parametrize("flag, value", [("--organ", "XX"), ("--pos-x", "1.5"), ("--pos-y", "-0.2")])
def test_predict_rejects_bad_location(trained, flag, value, capsys):
    args = {"--model": str(trained / "r" / "fold_0" / "checkpoint.bin"),
            "--image": str(trained / "d" / "images" / "US_00001.png"),
            "--pos-x": "0.5", "--pos-y": "0.5", "--organ": "BL"}
    args[flag] = value
    with pytest.raises(SystemExit) as info:
        main(["predict"] + [x for kv in args.items() for x in kv])
    assert info.value.code == 2


def test_predict_bad_checkpoint_is_exit_3(trained, capsys):
    code, _, err = run(capsys, "predict", "--model", str(trained / "d" / "metadata.csv"),
                       "--image", str(trained / "d" / "images" / "US_00001.png"),
                       "--pos-x", "0.5", "--pos-y", "0.5", "--organ", "BL")
    assert code == 3 and "checkpoint" in err


def test_evaluate_and_cam(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--data", str(trained / "d"), "--run", str(trained / "r"),
                       "--out", str(tmp_path / "ev"))
    assert code == 0
    train_report = json.loads((trained / "r" / "report.json").read_text())
    assert json.loads(out)["folds"][0]["metrics"] == train_report["folds"][0]["metrics"]
    code, out, _ = run(capsys, "cam", "--run", str(trained / "r"), "--data", str(trained / "d"), "--limit", "2")
    assert code == 0
    paths = json.loads(out)["paths"]
    assert len(paths) == 2 and all(p.endswith(".png") for p in paths)
    code, out, _ = run(capsys, "cam", "--model", str(trained / "r" / "fold_0" / "checkpoint.bin"),
                       "--image", str(trained / "d" / "images" / "RS_00001.png"), "--pos-x", "0.3",
                       "--pos-y", "0.35", "--organ", "LK", "--target", "RS", "--out", str(tmp_path / "c.png"))
    assert code == 0 and (tmp_path / "c.png").is_file()
    code, _, _ = run(capsys, "cam", "--model", str(trained / "r" / "fold_0" / "checkpoint.bin"))
    assert code == 2


def test_ablate_smoke(trained, tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(dump_config_text(TrainConfig(total_epochs=1, folds=2)))
    code, out, _ = run(capsys, "ablate", "--data", str(trained / "d"), "--config", str(cfg),
                       "--out", str(tmp_path / "ab"), "--deterministic")
    assert code == 0 and len(json.loads(out)["rows"]) == 8


def test_module_entry_point_separates_streams(trained):
    proc = subprocess.run(
        [sys.executable, "-m", "lepdnet", "predict", "--model", str(trained / "r" / "fold_0" / "checkpoint.bin"),
         "--image", str(trained / "d" / "images" / "PS_00001.png"), "--pos-x", "0.5", "--pos-y", "0.85",
         "--organ", "BL", "--json"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    probs = np.array(list(json.loads(proc.stdout)["probabilities"].values()))
    assert abs(probs.sum() - 1) <= 1e-6
