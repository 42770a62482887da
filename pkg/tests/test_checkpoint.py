import numpy as np
import pytest
import torch

from flexcode.checkpoint import load_module, load_tensors, module_tensors, save_tensors


def test_round_trip_preserves_bits(tmp_path):
    tensors = {
        "a": np.array([[1.5, -0.0, np.inf]], dtype=np.float32),
        "b": torch.arange(6, dtype=torch.int64).reshape(2, 3),
        "c": np.array(np.pi, dtype=np.float64),
        "d": np.zeros((0, 4)),
    }
    save_tensors(tmp_path / "x.ckpt", tensors, {"note": "hi", "n": 3})
    got, meta = load_tensors(tmp_path / "x.ckpt")
    assert meta == {"note": "hi", "n": 3}
    assert got["a"].tobytes() == tensors["a"].tobytes() and got["a"].dtype == np.float32
    assert got["b"].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert got["c"].shape == () and float(got["c"]) == np.pi
    assert got["d"].shape == (0, 4)


def test_file_is_deterministic(tmp_path):
    t = {"z": np.ones(3), "y": np.zeros(2)}
    save_tensors(tmp_path / "1.ckpt", t, {"k": [1, 2]})
    save_tensors(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"k": [1, 2]})
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_module_round_trip(tmp_path):
    torch.manual_seed(0)
    src = torch.nn.Linear(3, 2)
    dst = torch.nn.Linear(3, 2)
    save_tensors(tmp_path / "m.ckpt", module_tensors("lin", src))
    tensors, _ = load_tensors(tmp_path / "m.ckpt")
    load_module("lin", dst, tensors)
    assert torch.equal(src.weight, dst.weight) and torch.equal(src.bias, dst.bias)
    with pytest.raises(KeyError):
        load_module("other", dst, tensors)


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT 3\n{}\n")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "bad")
