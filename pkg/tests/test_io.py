import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bluralign import io
from bluralign.pipeline import SynthConfig, TrainConfig


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple),
              elements=st.floats(width=32, allow_nan=False)))
def test_tensor_round_trip_bit_exact(arr):
    out = io.decode_tensor(io.encode_tensor(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == arr.astype("<f4").tobytes()


def test_tensor_layout():
    buf = io.encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"CAIA"
    assert struct.unpack("<IIIII", buf[4:24]) == (1, 0, 2, 1, 3)
    assert np.frombuffer(buf[24:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_tensor_errors():
    good = io.encode_tensor(np.zeros((2, 2)))
    with pytest.raises(io.BadMagicError):
        io.decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(io.UnsupportedVersionError):
        io.decode_tensor(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(io.TensorFormatError):
        io.decode_tensor(good[:-1])
    with pytest.raises(io.TensorFormatError):
        io.decode_tensor(good[:8])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**31 - 1))
def test_pnm_round_trip_bit_exact(h, w, color, seed):
    shape = (h, w, 3) if color else (h, w)
    arr = np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)
    np.testing.assert_array_equal(io.decode_pnm(io.encode_pnm(arr)), arr)


def test_pnm_comments_and_quantization():
    buf = b"P5\n# made by hand\n2 1\n# max\n255\n" + bytes([7, 250])
    np.testing.assert_array_equal(io.decode_pnm(buf), [[7, 250]])
    np.testing.assert_array_equal(io.quantize([0.0, 0.5 / 255, 1.0, 1.2, -0.1]), [0, 1, 255, 255, 0])
    with pytest.raises(ValueError):
        io.decode_pnm(b"P3\n1 1\n255\n0")
    with pytest.raises(ValueError):
        io.decode_pnm(b"P5\n2 2\n255\n" + bytes(3))


def test_manifest_round_trip_and_tamper(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(1.5)}
    io.write_manifest(tmp_path, tensors, {"k": 1})
    manifest, back = io.read_manifest(tmp_path)
    assert manifest["meta"] == {"k": 1}
    np.testing.assert_array_equal(back["a"], tensors["a"])
    assert back["b"].shape == ()
    raw = bytearray((tmp_path / "a.caia").read_bytes())
    raw[-1] ^= 1
    (tmp_path / "a.caia").write_bytes(bytes(raw))
    with pytest.raises(io.ChecksumError):
        io.read_manifest(tmp_path)


def test_run_config_strict():
    sections = {"synth": SynthConfig, "train": TrainConfig}
    cfg = io.parse_run_config("train:\n  steps: 7\n  grid: [4, 4]\n", sections)
    assert cfg["train"].steps == 7 and cfg["train"].grid == (4, 4)
    assert cfg["synth"] == SynthConfig()
    with pytest.raises(io.ConfigError, match="stpes"):
        io.parse_run_config("train:\n  stpes: 7\n", sections)
    with pytest.raises(io.ConfigError, match="unknown section"):
        io.parse_run_config("trian: {}\n", sections)
    with pytest.raises(io.ConfigError):
        io.parse_run_config("train: [1, 2]\n", sections)
    with pytest.raises(io.ConfigError):
        io.parse_run_config("train:\n  fusion_mode: nope\n", sections)
    dumped = io.dump_run_config(cfg)
    assert io.parse_run_config(dumped, sections) == cfg
