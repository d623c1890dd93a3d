import pytest
import torch
import torch.nn as nn

from checkpoints import (
    LossLog,
    latest_checkpoint,
    list_checkpoints,
    load_extra,
    load_networks,
    read_header,
    write_checkpoint,
)
from errors import CheckpointError


class Broken(nn.Linear):
    def state_dict(self, *args, **kwargs):
        raise RuntimeError("disk on fire")


def _nets(seed):
    torch.manual_seed(seed)
    return {"generator": nn.Linear(3, 2), "frame_d": nn.Conv2d(3, 1, 3)}


def test_write_and_load_round_trip(tmp_path):
    src = _nets(0)
    path = write_checkpoint(tmp_path, 3, src, {"network_hash": "abc", "phase": 2}, {"note": "x"})
    assert path.name == "epoch_0003"
    header = read_header(path)
    assert header == {"network_hash": "abc", "phase": "2", "epoch": "3"}
    dst = _nets(1)
    load_networks(path, dst, expected_hash="abc")
    for name in src:
        for a, b in zip(src[name].state_dict().values(), dst[name].state_dict().values()):
            assert torch.equal(a, b)
    assert load_extra(path) == {"note": "x"}
    assert [p.name for p in tmp_path.iterdir()] == ["epoch_0003"]


def test_hash_mismatch_is_refused(tmp_path):
    path = write_checkpoint(tmp_path, 1, _nets(0), {"network_hash": "abc"})
    with pytest.raises(CheckpointError, match="abc"):
        load_networks(path, _nets(1), expected_hash="def")


def test_missing_pieces(tmp_path):
    path = write_checkpoint(tmp_path, 1, {"generator": nn.Linear(3, 2)}, {})
    with pytest.raises(CheckpointError, match="frame_d"):
        load_networks(path, _nets(0))
    with pytest.raises(CheckpointError):
        read_header(tmp_path / "nowhere")
    assert load_extra(path) is None


def test_failed_write_leaves_nothing_behind(tmp_path):
    with pytest.raises(CheckpointError, match="disk on fire"):
        write_checkpoint(tmp_path, 1, {"generator": Broken(2, 2)}, {})
    assert list(tmp_path.iterdir()) == []


def test_checkpoints_sort_numerically(tmp_path):
    for epoch in (10, 2, 1):
        write_checkpoint(tmp_path, epoch, _nets(0), {})
    (tmp_path / "notes").mkdir()
    assert [p.name for p in list_checkpoints(tmp_path)] == ["epoch_0001", "epoch_0002", "epoch_0010"]
    assert latest_checkpoint(tmp_path).name == "epoch_0010"
    assert latest_checkpoint(tmp_path / "empty") is None


def test_loss_log(tmp_path):
    log = LossLog(tmp_path / "logs" / "loss_log.csv")
    assert log.read().empty
    log.append(1, 1, {"GAN": 0.5, "FM": 2.0})
    log.append(2, 2, {"GAN": 0.4, "RL": 0.1})
    df = log.read()
    assert list(df.columns) == ["epoch", "phase", "loss_name", "value"]
    assert df[df["epoch"] == 1]["loss_name"].tolist() == ["FM", "GAN"]
    log.truncate_after(1)
    assert log.read()["epoch"].unique().tolist() == [1]
