from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from lsslnode.checkpoint import FORMAT_VERSION, load_checkpoint, quantize, save_checkpoint


def _tensors():
    rng = np.random.default_rng(0)
    return {"a.w": quantize(rng.normal(size=(3, 4))), "a.b": quantize(rng.normal(size=4)), "s": np.array(1.5)}


def test_round_trip_is_bit_identical(tmp_path):
    t = _tensors()
    save_checkpoint(tmp_path / "x.ckpt", t, {"mode": "AE"})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == np.float64 and back[k].shape == np.shape(t[k])
        np.testing.assert_array_equal(back[k], t[k])
    assert meta["mode"] == "AE" and meta["format_version"] == FORMAT_VERSION and meta["dtype"] == "<f4"


def test_save_load_save_is_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "1.ckpt", _tensors(), {"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "1.ckpt")
    meta = {k: v for k, v in meta.items() if k not in ("tensors", "format_version", "dtype")}
    save_checkpoint(tmp_path / "2.ckpt", back, meta)
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_layout_is_header_then_little_endian_f4(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"v": np.array([1.0, -2.0])})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == b"LSSLCKPT"
    (n,) = struct.unpack("<Q", raw[8:16])
    head = json.loads(raw[16 : 16 + n])
    assert head["tensors"] == [{"name": "v", "shape": [2], "offset": 0, "nbytes": 8}]
    assert raw[16 + n :] == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "x.ckpt", {"v": np.ones(1)})
    raw = bytearray((tmp_path / "x.ckpt").read_bytes())
    raw = raw.replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "y.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "y.ckpt")


def test_quantize_is_idempotent():
    x = np.random.default_rng(1).normal(size=10)
    q = quantize(x)
    np.testing.assert_array_equal(quantize(q), q)
    assert np.max(np.abs(q - x)) < 1e-6
