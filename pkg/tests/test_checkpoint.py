import json
import struct

import pytest
import torch

from gaitgs.checkpoint import MAGIC, CheckpointError, load_archive, save_archive


def test_roundtrip(tmp_path):
    tensors = {"a.w": torch.randn(3, 4), "b": torch.arange(5), "c": torch.randn(2, dtype=torch.float64),
               "s": torch.tensor(3.0)}
    save_archive(tmp_path / "x.ckpt", tensors, {"iteration": 7})
    back, man = load_archive(tmp_path / "x.ckpt")
    assert man == {"iteration": 7}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_layout_little_endian_f32(tmp_path):
    save_archive(tmp_path / "x.ckpt", {"w": torch.tensor([1.0, -2.0])}, {})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert header["tensors"] == [{"name": "w", "shape": [2], "dtype": "<f4", "offset": 0}]
    assert raw[16 + n:] == struct.pack("<2f", 1.0, -2.0)


@pytest.mark.parametrize("mangle", [
    lambda raw: b"XXXXXXXX" + raw[8:],
    lambda raw: raw[:16] + b"{not json" + raw[25:],
    lambda raw: raw[:8] + struct.pack("<Q", 10 ** 9) + raw[16:],
    lambda raw: raw[:-4],
])
def test_corruption_detected(tmp_path, mangle):
    path = tmp_path / "x.ckpt"
    save_archive(path, {"w": torch.randn(4, 4)}, {"k": 1})
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_archive(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "nope.ckpt")
