import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoflow import checkpoint as ck
from geoflow import config as cf
from geoflow.errors import CheckpointError, ValidationError
from geoflow.exports import read_csv, write_csv


def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {"b.w": rng.standard_normal((3, 4)), "a": rng.standard_normal(5),
            "scalar": np.array(2.5), "f32": rng.standard_normal((2, 2)).astype(np.float32)}


def test_round_trip_byte_identical(tmp_path):
    cfg = {"model": {"d": 8}, "note": "x"}
    first = ck.save(tmp_path / "a.bin", cfg, _tensors())
    loaded = ck.load(tmp_path / "a.bin")
    second = ck.save(tmp_path / "b.bin", loaded.config, loaded.tensors)
    assert first == second == (tmp_path / "b.bin").read_bytes()
    for name, arr in _tensors().items():
        assert loaded.tensors[name].dtype == arr.dtype
        assert np.array_equal(loaded.tensors[name], arr)


def test_layout_header_fields():
    data = ck.encode({"k": 1}, {"x": np.arange(3, dtype=np.float64)})
    assert data[:4] == b"VGWF"
    version, n = struct.unpack_from("<II", data, 4)
    assert version == 1 and data[12:12 + n] == b'{"k":1}'
    (count,) = struct.unpack_from("<I", data, 12 + n)
    assert count == 1
    # name_len, name, dtype tag, rank, dims, 24 bytes data, crc
    assert len(data) == 12 + n + 4 + 4 + 1 + 1 + 4 + 8 + 24 + 4


def test_tensor_order_does_not_matter():
    t = _tensors()
    rev = dict(reversed(list(t.items())))
    assert ck.encode({}, t) == ck.encode({}, rev)


def test_crc_corruption_detected():
    data = bytearray(ck.encode({"a": 1}, _tensors()))
    data[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        ck.decode(bytes(data))


def test_bad_magic_version_and_truncation():
    good = ck.encode({}, _tensors())
    with pytest.raises(CheckpointError):
        ck.decode(b"XXXX" + good[4:])
    body = bytearray(good[:-4])
    body[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        ck.decode(bytes(body) + struct.pack("<I", __import__("zlib").crc32(bytes(body))))
    cut = good[:-20]
    import zlib
    with pytest.raises(CheckpointError):
        ck.decode(cut + struct.pack("<I", zlib.crc32(cut)))


def test_store_precision():
    t = {"w": np.random.default_rng(1).standard_normal(4)}
    small = ck.decode(ck.encode({}, t, store="f32"))
    assert small.tensors["w"].dtype == np.float32
    np.testing.assert_allclose(small.tensors["w"], t["w"], rtol=1e-6)
    with pytest.raises(CheckpointError):
        ck.encode({}, t, store="f16")


def test_expected_names_and_missing_file(tmp_path):
    ck.save(tmp_path / "m.bin", {}, {"a": np.zeros(2)})
    with pytest.raises(CheckpointError, match="missing"):
        ck.load(tmp_path / "m.bin", expected_names=["a", "b"])
    with pytest.raises(CheckpointError, match="cannot read"):
        ck.load(tmp_path / "absent.bin")


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=6),
                       st.lists(st.floats(allow_nan=False, width=64), max_size=6), max_size=4))
def test_round_trip_property(raw):
    tensors = {k: np.array(v, dtype=np.float64) for k, v in raw.items()}
    data = ck.encode({"n": len(tensors)}, tensors)
    back = ck.decode(data)
    assert ck.encode(back.config, back.tensors) == data


# ------------------------------------------------------------------ config

def test_default_config_valid_and_hash_stable():
    a, b = cf.RunConfig(), cf.from_dict({})
    assert a.digest() == b.digest() and len(a.digest()) == 16
    other = cf.from_dict({"train": {"lr": 1e-3}})
    assert other.digest() != a.digest()


def test_config_rejects_unknown_keys_and_types():
    with pytest.raises(ValidationError, match="unknown key"):
        cf.from_dict({"model": {"depth": 3}})
    with pytest.raises(ValidationError, match="unknown config section"):
        cf.from_dict({"models": {}})
    with pytest.raises(ValidationError):
        cf.from_dict({"train": {"lr": "fast"}})
    with pytest.raises(ValidationError):
        cf.from_dict({"model": {"k": 3}})          # rollout k no longer matches


def test_config_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        cf.load(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError):
        cf.load(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"world": {"d": 64, "n_patch": 4}}))
    assert cf.load(good).world.d == 64


def test_header_records_conventions():
    h = cf.header(cf.RunConfig(), threads=1)
    assert h["config_hash"] == cf.RunConfig().digest()
    assert "unsquared" in h["chamfer"] and h["threads"] == 1


def test_csv_header_round_trip(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, {"config_hash": "abc"}, ["a", "b"], [[1, "x,y"], [2, 'q"r']])
    raw = path.read_bytes()
    assert raw.startswith(b"# config_hash: ") and b"\r\n" in raw
    head, cols, rows = read_csv(path)
    assert head["config_hash"] == "abc" and cols == ["a", "b"]
    assert rows == [["1", "x,y"], ["2", 'q"r']]
