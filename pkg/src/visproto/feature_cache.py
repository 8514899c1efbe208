"""Binary on-disk cache of extracted feature vectors.

File layout (little-endian throughout):

    magic "PFC1" (4 bytes)
    u32 d            feature dimension
    u32 count        number of entries
    per entry:
        u16 key_len
        key          UTF-8, key_len bytes
        d x f32      feature payload

Vectors round-trip bit-exactly. A corrupt file is reported, treated as a
miss, and the unreadable tail is dropped so the next save rewrites it clean.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"PFC1"


@dataclass
class FeatureCacheEntry:
    image_id: str
    backend_id: str
    n_scales: int
    schedule_hash: str
    feature: np.ndarray
    created_at: float


def cache_key(
    image_id: str, backend_id: str, n_scales: int, schedule_hash: str, mode: str
) -> str:
    """Composite key; mode is "normalized" or "raw"."""
    return f"{image_id}|{backend_id}|{n_scales}|{schedule_hash}|{mode}"


def split_key(key: str) -> tuple[str, str, int, str, str]:
    image_id, backend_id, n_scales, schedule_hash, mode = key.rsplit("|", 4)
    return image_id, backend_id, int(n_scales), schedule_hash, mode


class FeatureCache:
    """Keyed store of fixed-dimension float32 vectors."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("feature dimension must be >= 1")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        self._created: dict[str, float] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def keys(self) -> list[str]:
        return list(self._vectors.keys())

    def put(self, key: str, feature: np.ndarray) -> None:
        vec = np.ascontiguousarray(np.asarray(feature, dtype=np.float32))
        if vec.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {vec.shape}")
        if len(key.encode("utf-8")) > 0xFFFF:
            raise ValueError("cache key exceeds 65535 UTF-8 bytes")
        self._vectors[key] = vec
        self._created[key] = time.time()

    def get(self, key: str) -> np.ndarray | None:
        vec = self._vectors.get(key)
        return None if vec is None else vec.copy()

    def get_entry(self, key: str) -> FeatureCacheEntry | None:
        vec = self._vectors.get(key)
        if vec is None:
            return None
        image_id, backend_id, n_scales, schedule_hash, _mode = split_key(key)
        return FeatureCacheEntry(
            image_id=image_id,
            backend_id=backend_id,
            n_scales=n_scales,
            schedule_hash=schedule_hash,
            feature=vec.copy(),
            created_at=self._created[key],
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", self.dim, len(self._vectors)))
            for key, vec in self._vectors.items():
                raw_key = key.encode("utf-8")
                fh.write(struct.pack("<H", len(raw_key)))
                fh.write(raw_key)
                fh.write(vec.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, dim: int | None = None) -> "FeatureCache":
        """Read a cache file; a missing file yields an empty cache.

        ``dim`` cross-checks the header when given. Corruption never raises:
        cleanly parsed entries are kept, the rest is dropped with a warning.
        """
        path = Path(path)
        if not path.exists():
            if dim is None:
                raise ValueError("dim is required when the cache file is absent")
            return cls(dim)
        data = path.read_bytes()
        if len(data) < 12 or data[:4] != MAGIC:
            log.warning("feature cache %s: bad header, ignoring file", path)
            if dim is None:
                raise ValueError("dim is required to recover from a corrupt cache")
            return cls(dim)
        file_dim, count = struct.unpack_from("<II", data, 4)
        if dim is not None and file_dim != dim:
            log.warning(
                "feature cache %s: dimension %d does not match expected %d, "
                "ignoring file",
                path,
                file_dim,
                dim,
            )
            return cls(dim)
        cache = cls(file_dim)
        offset = 12
        vec_bytes = file_dim * 4
        loaded_at = time.time()
        for i in range(count):
            if offset + 2 > len(data):
                log.warning(
                    "feature cache %s: truncated at entry %d/%d, dropping tail",
                    path, i, count,
                )
                break
            (key_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            if offset + key_len + vec_bytes > len(data):
                log.warning(
                    "feature cache %s: truncated at entry %d/%d, dropping tail",
                    path, i, count,
                )
                break
            try:
                key = data[offset : offset + key_len].decode("utf-8")
            except UnicodeDecodeError:
                log.warning(
                    "feature cache %s: undecodable key at entry %d, dropping tail",
                    path, i,
                )
                break
            offset += key_len
            vec = np.frombuffer(
                data, dtype="<f4", count=file_dim, offset=offset
            ).copy()
            offset += vec_bytes
            cache._vectors[key] = vec
            cache._created[key] = loaded_at
        return cache
