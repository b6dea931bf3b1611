import json

import numpy as np
import pytest

from conftest import REPO
from knucklenet.cli import dispatch
from knucklenet.pipeline import ScoreTable

DESK_CFG = REPO / "configs" / "desk.cfg"


def test_synth_writes_manifest_and_images(tmp_path):
    assert dispatch(["synth", "--identities", "50", "--samples", "5", "--out", str(tmp_path / "d")]) == 0
    rows = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
    assert rows[0] == "path,subject,component,index" and len(rows) == 1001
    assert len(list((tmp_path / "d").rglob("*.png"))) == 1000


def test_train_missing_manifest_is_load_error(tmp_path, capsys):
    code = dispatch(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.knn")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: load-error:")


def test_usage_errors_exit_2(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["synth", "--bogus"]) == 2


def test_print_config_is_byte_stable(capsys):
    assert dispatch(["train", "--config", str(DESK_CFG), "--print-config"]) == 0
    first = capsys.readouterr().out
    assert dispatch(["train", "--config", str(DESK_CFG), "--print-config"]) == 0
    assert capsys.readouterr().out == first
    assert "network.input_height = 64\n" in first and "training.margin_max = 0.5\n" in first


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("training.speed = 3\n")
    assert dispatch(["train", "--config", str(tmp_path / "c.cfg"), "--print-config"]) == 1
    assert "error: config-error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert dispatch(["synth", "--identities", "6", "--samples", "5", "--height", "64", "--width", "24",
                     "--seed", "2", "--out", str(d / "data")]) == 0
    assert dispatch(["train", "--config", str(DESK_CFG), "--manifest", str(d / "data" / "manifest.csv"),
                     "--out", str(d / "m" / "model.knn"), "--epochs", "2", "--checkpoint-every", "1",
                     "--export-augmented", str(d / "aug")]) == 0
    return d


def test_train_outputs(tiny_run):
    assert (tiny_run / "m" / "model.epoch0001.knn").exists()
    trace = (tiny_run / "m" / "model.loss.csv").read_text().splitlines()
    assert trace[0] == "iter,loss,beta,yield" and len(trace) > 1
    aug = (tiny_run / "aug" / "manifest.csv").read_text().splitlines()
    assert len(aug) == 1 + 6 * 35


def test_match_eval_embed_and_staged_equals_direct(tiny_run):
    d = tiny_run
    common = ["--checkpoint", str(d / "m" / "model.knn"), "--manifest", str(d / "data" / "manifest.csv"),
              "--config", str(DESK_CFG)]
    assert dispatch(["match", *common, "--out", str(d / "s.csv")]) == 0
    table = ScoreTable.from_csv(d / "s.csv")
    assert table.matrix.shape == (6 * 3, 6 * 2)
    assert dispatch(["eval", "--scores", str(d / "s.csv"), "--out", str(d / "r1")]) == 0
    assert dispatch(["eval", *common, "--out", str(d / "r2")]) == 0
    r1 = json.loads((d / "r1" / "report.json").read_text())
    r2 = json.loads((d / "r2" / "report.json").read_text())
    # staged match -> eval through a score file equals the one-shot eval, apart from the parameter count
    assert r2.pop("parameter_count") == 25_760 and r1.pop("parameter_count") is None
    assert r1 == r2
    assert (d / "r1" / "roc.csv").read_bytes() == (d / "r2" / "roc.csv").read_bytes()

    assert dispatch(["embed", *common, "--out", str(d / "e.csv")]) == 0
    rows = (d / "e.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header[:4] == ["path", "subject", "component", "index"] and len(header) == 4 + 128
    assert len(rows) == 1 + 6 * 5
    vec = np.array(rows[1].split(",")[4:], dtype=float)
    assert abs(np.linalg.norm(vec) - 1) < 1e-6


def test_fuse_fixed_weights_and_test_split(tmp_path):
    rng = np.random.default_rng(0)
    probes = [f"s{i}:{j}" for i in range(8) for j in (2, 3)]
    gallery = [f"s{i}:{j}" for i in range(8) for j in (0, 1)]
    same = np.array([[p.split(":")[0] == g.split(":")[0] for g in gallery] for p in probes])
    for split in ("val", "test"):
        for name in ("major", "nail"):
            m = np.abs(np.where(same, 1.0, 2.0) + rng.normal(0, 0.4, same.shape))
            ScoreTable(probes, gallery, m).to_csv(tmp_path / f"{name}_{split}.csv")
    # shuffle the row order of one file: fusion aligns on (probe, gallery) keys
    lines = (tmp_path / "nail_val.csv").read_text().splitlines()
    (tmp_path / "nail_val.csv").write_text("\n".join([lines[0], *reversed(lines[1:])]) + "\n")
    code = dispatch(["fuse", str(tmp_path / "major_val.csv"), str(tmp_path / "nail_val.csv"),
                     "--names", "major,nail", "--weights", "major=1.0,nail=0.0",
                     "--test", str(tmp_path / "major_test.csv"), "--test", str(tmp_path / "nail_test.csv"),
                     "--out", str(tmp_path / "f")])
    assert code == 0
    out = json.loads((tmp_path / "f" / "fusion.json").read_text())
    assert out["validation"]["eer"] == out["single"]["major"]
    assert "test" in out and (tmp_path / "f" / "fused_test.csv").exists()


def test_fuse_argument_errors(tmp_path, capsys):
    assert dispatch(["fuse", "a.csv", "--search", "--out", str(tmp_path)]) == 2
    probes, gallery = ["a:1", "b:1"], ["a:0", "b:0"]
    for n in ("x", "y"):
        ScoreTable(probes, gallery, np.array([[0.1, 1.0], [1.2, 0.2]])).to_csv(tmp_path / f"{n}.csv")
    assert dispatch(["fuse", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"), "--weights", "x=0.9,y=0.9",
                     "--out", str(tmp_path / "f")]) == 1
    assert "config-error" in capsys.readouterr().err
