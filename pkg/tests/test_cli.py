import json

import numpy as np
import pytest

from dsdit import tensor as T
from dsdit.cli import main, read_config_file
from dsdit.imaging import read_png

TINY = ["--image-size", "16", "--patch", "4", "--dim", "8", "--heads", "2", "--blocks", "1",
        "--scale", "4", "--batch", "2", "--train-count", "4", "--test-count", "2",
        "--sampler-steps", "2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    assert "--seed" in capsys.readouterr().out


def test_unknown_flag_is_machine_readable(capsys):
    code, _, err = run(capsys, "train", "--out", "x.dsck", "--bogus")
    assert code == 2
    assert error_of(err)["error"] == "usage"


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy\nsteps = 3\nomega = 1.1\narch=dsdit\n")
    assert read_config_file(cfg) == {"steps": 3, "omega": 1.1, "arch": "dsdit"}
    cfg.write_text("learning_rate = 3\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "a.dsck"))
    assert code == 2 and "unknown key" in error_of(err)["message"]


def test_omega_range(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TINY, "--omega", "2.5", "--out", str(tmp_path / "a.dsck"))
    assert code == 2 and error_of(err)["error"] == "config"


def test_invalid_config_combo(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TINY, "--arch", "m3dit", "--injection", "plw",
                       "--out", str(tmp_path / "a.dsck"))
    assert code == 2 and "dsdit" in error_of(err)["message"]


def test_pipeline(tmp_path, capsys):
    ck = tmp_path / "model.dsck"
    code, out, _ = run(capsys, "train", *TINY, "--steps", "2", "--seed", "3", "--out", str(ck))
    assert code == 0 and json.loads(out)["steps"] == 2
    assert (tmp_path / "model.loss.csv").read_text().startswith("step,loss")

    code, out, _ = run(capsys, "train", *TINY, "--steps", "3", "--seed", "3", "--resume", str(ck),
                       "--out", str(tmp_path / "more.dsck"))
    assert code == 0 and json.loads(out)["steps"] == 3

    code, out, _ = run(capsys, "sample", "--checkpoint", str(ck), "--out", str(tmp_path / "s"),
                       "--omega", "1.1", "--dump-dir", str(tmp_path / "dump"))
    assert code == 0
    first = json.loads(out)
    assert first["samples"] == 2 and first["omega"] == 1.1
    assert read_png(tmp_path / "s" / "0000_sample.png").shape == (16, 16, 3)
    assert len(list((tmp_path / "dump").glob("*.dtns"))) == 4
    run(capsys, "sample", "--checkpoint", str(ck), "--out", str(tmp_path / "s2"), "--omega", "1.1")
    code, out, _ = run(capsys, "sample", "--checkpoint", str(ck), "--out", str(tmp_path / "s2"),
                       "--omega", "1.1")
    assert json.loads(out)["digests"] == first["digests"]

    code, out, _ = run(capsys, "eval", "--checkpoint", str(ck), "--out", str(tmp_path / "e"))
    assert code == 0
    assert [r["method"] for r in json.loads(out)["summary"]] == ["bicubic", "model"]
    assert (tmp_path / "e" / "metrics.csv").exists()

    code, out, _ = run(capsys, "sweep-omega", "--checkpoint", str(ck), "--omegas", "0,1,1.2",
                       "--out", str(tmp_path / "w"))
    assert code == 0 and len(json.loads(out)["summary"]) == 4

    code, _, err = run(capsys, "eval", "--checkpoint", str(ck), "--dim", "16", "--out", str(tmp_path / "e"))
    assert code == 2 and "differ" in error_of(err)["message"]


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.dsck"), "--out", str(tmp_path))
    assert code == 1 and error_of(err)["error"] == "CheckpointError"


def test_gen_data(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", *TINY, "--count", "2", "--out", str(tmp_path))
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2
    assert read_png(tmp_path / manifest["scenes"][0]["ref"]).shape == (16, 16, 3)


def test_grad_check(capsys):
    code, out, _ = run(capsys, "grad-check", "--injection", "variant_b")
    result = json.loads(out)
    assert code == 0 and result["ok"] and result["worst_relative_error"] <= 1e-4


def test_fixtures(tmp_path, capsys):
    code, out, _ = run(capsys, "fixtures", "--out", str(tmp_path))
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    x1 = T.read_dtns(tmp_path / "euler_x1.dtns").data
    end = T.read_dtns(tmp_path / "euler_linear_40.dtns").data
    assert np.max(np.abs(end - x1 * (39 / 40) ** 40)) <= 1e-12
    assert "checkerboard_16_4" in manifest["fixtures"]
    run(capsys, "fixtures", "--out", str(tmp_path / "again"))
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again == manifest
