import json

import numpy as np
import pytest

from smoothrot import (
    ArchiveError,
    LengthMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    load_archive,
    save_archive,
)
from smoothrot.archive import MAGIC


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "t.tarc"
    subnormal = np.float32(1e-42)  # below the normal range, still finite
    tensors = {
        "w": np.array([[1.5, -0.0], [subnormal, 3.25]], dtype=np.float32),
        "v": np.arange(7, dtype=np.float32) * np.float32(0.1),
    }
    save_archive(tensors, path)
    loaded = load_archive(path)
    assert set(loaded) == {"w", "v"}
    for name in tensors:
        assert loaded[name].shape == tensors[name].shape
        assert loaded[name].tobytes() == tensors[name].tobytes()


def test_empty_archive(tmp_path):
    path = tmp_path / "empty.tarc"
    save_archive({}, path)
    assert load_archive(path) == {}


def test_int32_entries_and_meta(tmp_path):
    path = tmp_path / "codes.tarc"
    codes = np.array([[1, -7], [3, 0]], dtype=np.int32)
    save_archive({"q.codes": codes}, path, meta={"q.codes": {"bits": 4}})
    tensors, meta = load_archive(path, with_meta=True)
    assert np.array_equal(tensors["q.codes"], codes)
    assert meta["q.codes"] == {"bits": 4}


def test_identical_content_gives_identical_bytes(tmp_path):
    a, b = tmp_path / "a.tarc", tmp_path / "b.tarc"
    tensors = {"x": np.arange(12, dtype=np.float32).reshape(3, 4)}
    save_archive(tensors, a)
    save_archive(dict(tensors), b)
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.tarc"
    path.write_bytes(b"NOPE!\n" + b"\x00" * 16)
    with pytest.raises(MalformedHeaderError):
        load_archive(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "bad.tarc"
    payload = b"notjson!"
    path.write_bytes(MAGIC + len(payload).to_bytes(8, "little") + payload)
    with pytest.raises(MalformedHeaderError):
        load_archive(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "trunc.tarc"
    save_archive({"x": np.ones(8, dtype=np.float32)}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])  # chop one element off the payload
    with pytest.raises(TruncatedPayloadError) as err:
        load_archive(path)
    assert "truncated" in str(err.value)


def test_declared_length_mismatch(tmp_path):
    path = tmp_path / "mismatch.tarc"
    header = {"x": {"dtype": "f32", "shape": [3], "offset": 0, "byte_length": 8}}
    header_bytes = json.dumps(header).encode()
    path.write_bytes(
        MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + b"\x00" * 8
    )
    with pytest.raises(LengthMismatchError):
        load_archive(path)


def test_non_finite_rejected(tmp_path):
    path = tmp_path / "inf.tarc"
    arr = np.array([1.0, np.inf], dtype=np.float32)
    header = {"x": {"dtype": "f32", "shape": [2], "offset": 0, "byte_length": 8}}
    header_bytes = json.dumps(header).encode()
    path.write_bytes(
        MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + arr.tobytes()
    )
    with pytest.raises(ArchiveError):
        load_archive(path)


def test_bad_names_rejected(tmp_path):
    with pytest.raises(ArchiveError):
        save_archive({"": np.ones(2, dtype=np.float32)}, tmp_path / "x.tarc")


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ArchiveError):
        save_archive({"x": np.ones(2, dtype=np.float64)}, tmp_path / "x.tarc")
