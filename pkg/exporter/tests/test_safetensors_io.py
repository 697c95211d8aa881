"""Round trips and failure modes of the tensor-file reader/writer."""

import json
import struct

import numpy as np
import pytest

from ffwdexport.errors import ValidationError
from ffwdexport.safetensors_io import SafetensorsFile, write_safetensors


def test_f32_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 5)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
        "c.with.dots": rng.standard_normal((2, 2, 2)).astype(np.float32),
    }
    path = tmp_path / "t.safetensors"
    write_safetensors(path, tensors)
    sf = SafetensorsFile(path)
    assert sorted(sf.names) == sorted(tensors)
    for name, arr in tensors.items():
        back = sf.tensor(name)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)


def test_f16_source_widens_exactly(tmp_path):
    vals = np.array([0.0, 1.0, -2.5, 0.125, 65504.0], dtype=np.float32)
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": vals}, dtypes={"x": "F16"})
    back = SafetensorsFile(path).tensor("x")
    assert np.array_equal(back, vals.astype(np.float16).astype(np.float32))


def test_bf16_known_bit_patterns(tmp_path):
    # 1.0 -> 0x3F80, 1.5 -> 0x3FC0, -2.0 -> 0xC000: all exactly representable
    vals = np.array([1.0, 1.5, -2.0, 0.0], dtype=np.float32)
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": vals}, dtypes={"x": "BF16"})
    sf = SafetensorsFile(path)
    assert sf.dtype("x") == "BF16"
    assert np.array_equal(sf.tensor("x"), vals)


def test_bf16_round_trip_error_bounded(tmp_path):
    rng = np.random.default_rng(1)
    vals = rng.standard_normal(256).astype(np.float32)
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": vals}, dtypes={"x": "BF16"})
    back = SafetensorsFile(path).tensor("x")
    # bfloat16 keeps 8 significand bits: relative error under 2^-8
    rel = np.abs(back - vals) / np.abs(vals)
    assert rel.max() < 2 ** -8


def test_f64_source_narrows_to_f32(tmp_path):
    vals = np.array([1.0 + 1e-12, np.pi], dtype=np.float64)
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": vals}, dtypes={"x": "F64"})
    back = SafetensorsFile(path).tensor("x")
    assert back.dtype == np.float32
    assert np.array_equal(back, vals.astype(np.float32))


def test_metadata_travels_and_is_not_a_tensor(tmp_path):
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": np.zeros(2, np.float32)},
                      metadata={"format": "pt", "note": "fixture"})
    sf = SafetensorsFile(path)
    assert sf.metadata == {"format": "pt", "note": "fixture"}
    assert sf.names == ["x"]


def test_identical_inputs_give_identical_bytes(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"b": rng.standard_normal(4).astype(np.float32),
               "a": rng.standard_normal((2, 3)).astype(np.float32)}
    p1, p2 = tmp_path / "one", tmp_path / "two"
    write_safetensors(p1, tensors)
    write_safetensors(p2, dict(reversed(tensors.items())))
    assert p1.read_bytes() == p2.read_bytes()


def test_file_too_short_for_header_length(tmp_path):
    path = tmp_path / "t.safetensors"
    path.write_bytes(b"\x01\x02\x03")
    with pytest.raises(ValidationError, match="too short"):
        SafetensorsFile(path)


def test_header_length_past_end_of_file(tmp_path):
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", 10_000) + b"{}")
    with pytest.raises(ValidationError, match="file ends"):
        SafetensorsFile(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "t.safetensors"
    body = b"not json at all"
    path.write_bytes(struct.pack("<Q", len(body)) + body)
    with pytest.raises(ValidationError, match="not valid JSON"):
        SafetensorsFile(path)


def test_offsets_outside_payload(tmp_path):
    header = json.dumps({
        "x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 999]}
    }).encode()
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", len(header)) + header + b"\x00" * 16)
    with pytest.raises(ValidationError, match="outside"):
        SafetensorsFile(path)


def test_offsets_disagree_with_shape(tmp_path):
    header = json.dumps({
        "x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 12]}
    }).encode()
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", len(header)) + header + b"\x00" * 12)
    with pytest.raises(ValidationError, match="wants 16 bytes"):
        SafetensorsFile(path).tensor("x")


def test_unsupported_dtype_fails_only_when_requested(tmp_path):
    header = json.dumps({
        "ids": {"dtype": "I64", "shape": [2], "data_offsets": [0, 16]},
        "x": {"dtype": "F32", "shape": [2], "data_offsets": [16, 24]},
    }).encode()
    payload = struct.pack("<qq", 1, 2) + np.arange(2, dtype="<f4").tobytes()
    path = tmp_path / "t.safetensors"
    path.write_bytes(struct.pack("<Q", len(header)) + header + payload)
    sf = SafetensorsFile(path)
    assert np.array_equal(sf.tensor("x"), [0.0, 1.0])
    with pytest.raises(ValidationError, match="unsupported dtype 'I64'"):
        sf.tensor("ids")


def test_missing_tensor_name(tmp_path):
    path = tmp_path / "t.safetensors"
    write_safetensors(path, {"x": np.zeros(2, np.float32)})
    with pytest.raises(ValidationError, match="no tensor named 'y'"):
        SafetensorsFile(path).tensor("y")


def test_writer_rejects_empty_and_unknown_dtype(tmp_path):
    with pytest.raises(ValidationError, match="no tensors"):
        write_safetensors(tmp_path / "e", {})
    with pytest.raises(ValidationError, match="unsupported dtype"):
        write_safetensors(tmp_path / "e", {"x": np.zeros(2)}, dtypes={"x": "I8"})
