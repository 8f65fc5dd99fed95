import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from sslchange.cli import cli, main, overlay


def invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False)


def _write_mask(path, arr):
    Image.fromarray((np.asarray(arr, dtype=np.uint8) * 255)).save(path)


def test_overlay_colours():
    pred = np.array([[1, 1], [0, 0]], dtype=bool)
    gt = np.array([[1, 0], [1, 0]], dtype=bool)
    rgb = overlay(pred, gt)
    assert rgb[0, 0].tolist() == [255, 255, 255]  # TP
    assert rgb[0, 1].tolist() == [255, 0, 0]      # FP
    assert rgb[1, 0].tolist() == [0, 0, 255]      # FN
    assert rgb[1, 1].tolist() == [0, 0, 0]        # TN


def test_evaluate_and_overlay(tmp_path):
    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    _write_mask(pred_dir / "a.png", [[1, 1], [0, 0]])
    _write_mask(gt_dir / "a.png", [[1, 0], [1, 0]])
    res = invoke("evaluate", "--pred-dir", pred_dir, "--gt-dir", gt_dir, "--out", tmp_path / "m.json")
    assert res.exit_code == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert metrics["tp"] == metrics["fp"] == metrics["fn"] == metrics["tn"] == 1
    assert metrics["f1"] == pytest.approx(0.5)
    res = invoke("overlay", "--pred-dir", pred_dir, "--gt-dir", gt_dir, "--out-dir", tmp_path / "ov")
    assert res.exit_code == 0 and (tmp_path / "ov" / "a.png").exists()


def test_failure_prints_json_error(tmp_path, capsys):
    (tmp_path / "pred").mkdir()
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path),
              "--out", str(tmp_path / "m.json")])
    assert exc.value.code != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "DataError"


def test_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["dilute", "--ratio", "0.5"])
    assert exc.value.code == 2
    assert "error" in json.loads(capsys.readouterr().err)


def test_synth_and_dilute(tmp_path):
    root = tmp_path / "d"
    res = invoke("synth", "--out", root, "--canvas-size", 32, "--train", 10, "--val", 4, "--test", 2)
    assert res.exit_code == 0 and json.loads(res.output) == {"train": 10, "val": 4, "test": 2}
    res = invoke("dilute", "--root", root, "--split", "train", "--ratio", 0.2, "--seed", 3)
    assert json.loads(res.output)["selected"] == 2
    assert len(json.loads((root / "train" / "dilution.json").read_text())["selected"]) == 2


@pytest.mark.slow
def test_stage_commands_chain(tiny_dataset, tmp_path):
    a, b = tiny_dataset / "train" / "A", tiny_dataset / "train" / "B"
    res = invoke("adapter-train", "--t1-dir", a, "--t2-dir", b, "--epochs", 1, "--out", tmp_path / "ad.pt")
    assert res.exit_code == 0, res.output
    res = invoke("pretrain", "--t1-dir", a, "--adapter-ckpt", tmp_path / "ad.pt", "--epochs", 1,
                 "--batch-size", 4, "--out", tmp_path / "pre")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "pre" / "report.jsonl").exists()
    res = invoke("finetune", "--train-dir", tiny_dataset / "train", "--val-dir", tiny_dataset / "val",
                 "--encoder-ckpt", tmp_path / "pre" / "last.pt", "--fusion", "deconv", "--epochs", 1,
                 "--out", tmp_path / "ft")
    assert res.exit_code == 0, res.output
    assert len(list((tmp_path / "ft" / "pred").glob("*.png"))) == 4
    assert (tmp_path / "ft" / "metrics.csv").exists()


@pytest.mark.slow
def test_run_command_with_overrides(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    args = ["run", "--set", f"out_dir={out}", "--set", f"data.root={tiny_dataset}",
            "--set", "finetune.use_pretrained=false", "--set", "finetune.epochs=1"]
    res = invoke(*args)
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)["stages"] == {"finetune": "ran", "evaluate": "ran"}
    assert "evaluate" in json.loads(invoke(*args).output)["stages"]
