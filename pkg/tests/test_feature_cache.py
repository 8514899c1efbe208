import struct

import numpy as np
import pytest

from visproto.feature_cache import MAGIC, FeatureCache, cache_key, split_key


def test_cache_key_round_trip():
    key = cache_key("img-7", "mock", 3, "abcd1234", "normalized")
    assert split_key(key) == ("img-7", "mock", 3, "abcd1234", "normalized")


def test_cache_key_tolerates_pipes_in_image_id():
    key = cache_key("weird|id", "mock", 1, "ff", "raw")
    assert split_key(key)[0] == "weird|id"


def test_put_get_bit_exact(tmp_path):
    cache = FeatureCache(16)
    rng = np.random.default_rng(0)
    vec = rng.standard_normal(16).astype(np.float32)
    cache.put("k", vec)
    out = cache.get("k")
    assert out.dtype == np.float32
    assert out.tobytes() == vec.tobytes()


def test_get_missing_returns_none():
    assert FeatureCache(4).get("nope") is None


def test_put_validates_shape():
    cache = FeatureCache(4)
    with pytest.raises(ValueError):
        cache.put("k", np.zeros(5, dtype=np.float32))


def test_save_load_round_trip(tmp_path):
    cache = FeatureCache(8)
    rng = np.random.default_rng(1)
    vectors = {f"key-{i}": rng.standard_normal(8).astype(np.float32) for i in range(50)}
    for k, v in vectors.items():
        cache.put(k, v)
    path = tmp_path / "feats.pfc"
    cache.save(path)

    loaded = FeatureCache.load(path)
    assert len(loaded) == 50
    for k, v in vectors.items():
        assert loaded.get(k).tobytes() == v.tobytes()


def test_file_layout_matches_documented_format(tmp_path):
    cache = FeatureCache(2)
    vec = np.array([1.5, -2.25], dtype=np.float32)
    cache.put("ab", vec)
    path = tmp_path / "one.pfc"
    cache.save(path)

    data = path.read_bytes()
    assert data[:4] == MAGIC == b"PFC1"
    dim, count = struct.unpack_from("<II", data, 4)
    assert (dim, count) == (2, 1)
    (key_len,) = struct.unpack_from("<H", data, 12)
    assert key_len == 2
    assert data[14:16] == b"ab"
    assert data[16:24] == vec.astype("<f4").tobytes()
    assert len(data) == 24


def test_missing_file_yields_empty_cache(tmp_path):
    cache = FeatureCache.load(tmp_path / "absent.pfc", dim=4)
    assert len(cache) == 0


def test_corrupt_header_treated_as_miss(tmp_path, caplog):
    path = tmp_path / "bad.pfc"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    cache = FeatureCache.load(path, dim=4)
    assert len(cache) == 0


def test_truncated_tail_drops_partial_entry(tmp_path):
    cache = FeatureCache(4)
    rng = np.random.default_rng(2)
    first = rng.standard_normal(4).astype(np.float32)
    second = rng.standard_normal(4).astype(np.float32)
    cache.put("first", first)
    cache.put("second", second)
    path = tmp_path / "cut.pfc"
    cache.save(path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])  # slice into the second entry's payload

    loaded = FeatureCache.load(path, dim=4)
    assert loaded.get("first").tobytes() == first.tobytes()
    assert loaded.get("second") is None


def test_dimension_mismatch_ignores_file(tmp_path):
    cache = FeatureCache(4)
    cache.put("k", np.zeros(4, dtype=np.float32))
    path = tmp_path / "dim.pfc"
    cache.save(path)
    loaded = FeatureCache.load(path, dim=8)
    assert len(loaded) == 0 and loaded.dim == 8


def test_save_then_reload_then_save_identical_bytes(tmp_path):
    cache = FeatureCache(6)
    rng = np.random.default_rng(3)
    for i in range(10):
        cache.put(f"k{i}", rng.standard_normal(6).astype(np.float32))
    a = tmp_path / "a.pfc"
    b = tmp_path / "b.pfc"
    cache.save(a)
    FeatureCache.load(a).save(b)
    assert a.read_bytes() == b.read_bytes()


def test_overlong_key_rejected():
    cache = FeatureCache(2)
    with pytest.raises(ValueError):
        cache.put("x" * 70000, np.zeros(2, dtype=np.float32))
