import struct

import pytest
import torch

from knucklenet import config as cfgmod
from knucklenet.checkpoint import load_checkpoint, save_checkpoint
from knucklenet.errors import ConfigError, LoadError
from knucklenet.network import DualBlockConfig, NetworkConfig, build_network


def small_net():
    blocks = (DualBlockConfig((3, 5), (5, 3), 2, (2, 2)), DualBlockConfig((1, 3), (3, 1), 2, (1, 2)),
              DualBlockConfig((1, 3), (3, 1), 2, (1, 1)))
    return NetworkConfig(16, 12, blocks, (4,), 16, (1, 1))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = build_network(small_net(), seed=3)
    save_checkpoint(params, tmp_path / "a.knn", {"epoch": 4, "seed": 3})
    loaded, meta = load_checkpoint(tmp_path / "a.knn")
    assert meta == {"epoch": 4, "seed": 3}
    assert loaded.config == params.config
    assert all(torch.equal(loaded.tensors[k], params.tensors[k]) for k in params.tensors)
    save_checkpoint(loaded, tmp_path / "b.knn", meta)
    assert (tmp_path / "a.knn").read_bytes() == (tmp_path / "b.knn").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    save_checkpoint(build_network(small_net()), tmp_path / "a.knn")
    data = (tmp_path / "a.knn").read_bytes()
    cases = {"magic": b"NOTKNUCK" + data[8:], "version": data[:8] + struct.pack("<I", 9) + data[12:],
             "truncated": data[:-5], "trailing": data + b"\0"}
    for name, blob in cases.items():
        (tmp_path / f"{name}.knn").write_bytes(blob)
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / f"{name}.knn")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.knn")


def test_default_config_dump_is_stable_and_reloadable(tmp_path):
    cfg = cfgmod.load_config()
    text = cfgmod.dump(cfg)
    (tmp_path / "c.cfg").write_text(text)
    again = cfgmod.load_config(tmp_path / "c.cfg")
    assert cfgmod.dump(again) == text
    assert again == cfg


def test_overrides_and_seed_propagation(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\ntraining.epochs = 7\nseed = 4\n\n")
    cfg = cfgmod.load_config(tmp_path / "c.cfg", {"training.epochs": 9, "training.batch_triplets": None})
    assert cfg.training.epochs == 9 and cfg.training.batch_triplets == 35
    assert cfg.training.seed == 4 and cfg.augmentation.seed == 4


def test_config_hash_ignores_paths():
    a = cfgmod.load_config(None, {"paths.manifest": "x.csv"})
    b = cfgmod.load_config(None, {"paths.manifest": "y.csv"})
    c = cfgmod.load_config(None, {"seed": 1})
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b) != cfgmod.config_hash(c)


@pytest.mark.parametrize("text, match", [
    ("training.epocs = 3\n", "unknown"),
    ("training.epochs 3\n", "key = value"),
    ("training.epochs = three\n", "JSON"),
    ("protocol.component = \"thumb\"\n", "component"),
    ("network.blocks = [[[5, 9], [9, 5], 32, [2, 2]], [[3, 7], [7, 3], 64, [2, 2]], [[3, 5], [5, 3], 96, [2, 2]]]\n",
     "blocks\\[1\\]"),
])
def test_bad_configs_rejected(tmp_path, text, match):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigError, match=match):
        cfgmod.load_config(tmp_path / "c.cfg")
