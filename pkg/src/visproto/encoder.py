"""Visual feature encoders and the multi-scale extraction pipeline.

An encoder turns a preprocessed 3xRxR tensor into an L2-normalized feature
vector. Two implementations exist: ``OnnxEncoder`` wraps a real model
artifact behind onnxruntime, and ``MockEncoder`` derives features from a
seeded hash of the input bytes so the whole pipeline runs with no model
assets. ``extract_multiscale`` composes cropping, preprocessing, encoding,
and weighted aggregation, with a feature cache in front.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .feature_cache import FeatureCache, cache_key
from .multiscale import (
    CropRegion,
    ScaleSchedule,
    aggregate_multiscale,
    crop_region_for_scale,
    l2_normalize,
)
from .workspace import atomic_write_json, read_json

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ExtractionError(RuntimeError):
    """Raised when a stage of multi-scale extraction fails; carries the
    index of the scale that was being processed."""

    def __init__(self, message: str, scale_index: int | None = None):
        super().__init__(message)
        self.scale_index = scale_index


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderManifest:
    """Description of one encoder backend.

    ``backend_id`` names the configuration ("rn50", "vit-l-14", "mock",
    "mock-<seed>", ...). Real backends point at an ONNX artifact whose
    sha-256 must match ``content_hash``.
    """

    backend_id: str
    input_resolution: int
    feature_dim: int
    channel_mean: tuple[float, float, float]
    channel_std: tuple[float, float, float]
    model_artifact_path: str | None = None
    content_hash: str | None = None

    def __post_init__(self) -> None:
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.input_resolution <= 0:
            raise ValueError("input_resolution must be positive")

    def verify_artifact(self) -> None:
        """Check the artifact file against the recorded hash."""
        if self.model_artifact_path is None:
            return
        path = Path(self.model_artifact_path)
        if not path.exists():
            raise FileNotFoundError(f"model artifact missing: {path}")
        if self.content_hash:
            digest = sha256_file(path)
            if digest != self.content_hash:
                raise ValueError(
                    f"model artifact {path} hash {digest[:12]}... does not "
                    f"match manifest {self.content_hash[:12]}..."
                )

    def to_json(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "input_resolution": self.input_resolution,
            "feature_dim": self.feature_dim,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
            "model_artifact_path": self.model_artifact_path,
            "content_hash": self.content_hash,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EncoderManifest":
        return cls(
            backend_id=doc["backend_id"],
            input_resolution=int(doc["input_resolution"]),
            feature_dim=int(doc["feature_dim"]),
            channel_mean=tuple(doc["channel_mean"]),
            channel_std=tuple(doc["channel_std"]),
            model_artifact_path=doc.get("model_artifact_path"),
            content_hash=doc.get("content_hash"),
        )


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_manifests() -> dict[str, EncoderManifest]:
    """Built-in registry: the four stock CLIP image encoders (artifact
    paths unset until the user registers them) plus the mock backend."""
    entries = [
        EncoderManifest("mock", 64, 512, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
        EncoderManifest("rn50", 224, 1024, CLIP_MEAN, CLIP_STD),
        EncoderManifest("vit-b-32", 224, 512, CLIP_MEAN, CLIP_STD),
        EncoderManifest("vit-b-16", 224, 512, CLIP_MEAN, CLIP_STD),
        EncoderManifest("vit-l-14", 224, 768, CLIP_MEAN, CLIP_STD),
    ]
    return {m.backend_id: m for m in entries}


def load_manifests(path: str | Path) -> dict[str, EncoderManifest]:
    """Read a backends.json registry, or the built-in defaults when the
    file does not exist."""
    path = Path(path)
    if not path.exists():
        return default_manifests()
    doc = read_json(path)
    registry = {}
    for entry in doc["backends"]:
        manifest = EncoderManifest.from_json(entry)
        registry[manifest.backend_id] = manifest
    return registry


def save_manifests(path: str | Path, registry: dict[str, EncoderManifest]) -> None:
    atomic_write_json(
        path, {"backends": [registry[k].to_json() for k in sorted(registry)]}
    )


def resolve_manifest(registry: dict[str, EncoderManifest], backend_id: str) -> EncoderManifest:
    """Look up a backend id; "mock-<seed>" ids inherit the mock entry."""
    if backend_id in registry:
        return registry[backend_id]
    if backend_id.startswith("mock-") and "mock" in registry:
        return replace(registry["mock"], backend_id=backend_id)
    raise KeyError(f"unknown encoder backend {backend_id!r}")


# ---------------------------------------------------------------------------
# images and preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    """A single image on disk, real or generated."""

    image_id: str
    source: str  # "real_dataset" or "generated"
    path: str
    width: int
    height: int
    class_id: str
    generation_id: str | None = None

    def __post_init__(self) -> None:
        if self.source not in ("real_dataset", "generated"):
            raise ValueError(f"unknown image source {self.source!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    @classmethod
    def from_path(
        cls,
        path: str | Path,
        *,
        image_id: str,
        source: str,
        class_id: str,
        generation_id: str | None = None,
    ) -> "ImageRecord":
        with Image.open(path) as img:
            width, height = img.size
        return cls(
            image_id=image_id,
            source=source,
            path=str(path),
            width=width,
            height=height,
            class_id=class_id,
            generation_id=generation_id,
        )


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def preprocess(
    image: Image.Image, region: CropRegion, manifest: EncoderManifest
) -> np.ndarray:
    """Crop, resize to the backend resolution, and normalize.

    Returns a float32 tensor of shape (3, R, R): crop -> bicubic resize ->
    scale to [0, 1] -> per-channel (x - mean) / std.
    """
    if region.x + region.width > image.width or region.y + region.height > image.height:
        raise ValueError(
            f"crop {region} exceeds image bounds {image.width}x{image.height}"
        )
    if image.mode != "RGB":
        image = image.convert("RGB")
    r = manifest.input_resolution
    patch = image.crop(region.as_box()).resize((r, r), Image.Resampling.BICUBIC)
    arr = np.asarray(patch, dtype=np.float32) / 255.0
    arr = arr.transpose(2, 0, 1)  # HWC -> CHW
    mean = np.asarray(manifest.channel_mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(manifest.channel_std, dtype=np.float32).reshape(3, 1, 1)
    return (arr - mean) / std


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class Encoder:
    """Base class; concrete backends implement ``_encode``."""

    def __init__(self, manifest: EncoderManifest):
        self.manifest = manifest
        self.encode_calls = 0

    def encode(self, preprocessed: np.ndarray) -> np.ndarray:
        r = self.manifest.input_resolution
        if preprocessed.shape != (3, r, r):
            raise ValueError(
                f"expected tensor of shape (3, {r}, {r}), got {preprocessed.shape}"
            )
        self.encode_calls += 1
        feature = self._encode(np.ascontiguousarray(preprocessed, dtype=np.float32))
        if feature.shape != (self.manifest.feature_dim,):
            raise RuntimeError(
                f"backend {self.manifest.backend_id} returned shape "
                f"{feature.shape}, expected ({self.manifest.feature_dim},)"
            )
        return l2_normalize(feature.astype(np.float32, copy=False))

    def _encode(self, preprocessed: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MockEncoder(Encoder):
    """Deterministic stand-in backend.

    The feature is a seeded hash of the input expanded to d Gaussian
    values: sha-256 over (backend seed, tensor shape, tensor bytes) seeds
    numpy's Generator, which draws standard normals that are then
    L2-normalized. Same input, same bytes out; distinct inputs land on
    effectively independent random directions.
    """

    def __init__(self, manifest: EncoderManifest):
        super().__init__(manifest)
        self.seed = _parse_mock_seed(manifest.backend_id)

    def _encode(self, preprocessed: np.ndarray) -> np.ndarray:
        h = hashlib.sha256()
        h.update(str(self.seed).encode("ascii"))
        h.update(str(preprocessed.shape).encode("ascii"))
        h.update(preprocessed.tobytes())
        rng = np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))
        return rng.standard_normal(self.manifest.feature_dim).astype(np.float32)


def _parse_mock_seed(backend_id: str) -> int:
    if backend_id == "mock":
        return 0
    if backend_id.startswith("mock-"):
        try:
            return int(backend_id[len("mock-"):])
        except ValueError:
            raise ValueError(f"bad mock backend id {backend_id!r}") from None
    raise ValueError(f"not a mock backend id: {backend_id!r}")


class OnnxEncoder(Encoder):
    """Real backend running an ONNX artifact through onnxruntime.

    onnxruntime is imported lazily so environments without it can still
    use every other part of the package.
    """

    def __init__(self, manifest: EncoderManifest):
        super().__init__(manifest)
        if manifest.model_artifact_path is None:
            raise ValueError(
                f"backend {manifest.backend_id} has no model artifact registered"
            )
        manifest.verify_artifact()
        try:
            import onnxruntime
        except ImportError as exc:
            raise RuntimeError(
                "onnxruntime is required for real encoder backends; "
                "install it or use the mock backend"
            ) from exc
        self._session = onnxruntime.InferenceSession(
            manifest.model_artifact_path, providers=["CPUExecutionProvider"]
        )
        self._input_name = self._session.get_inputs()[0].name

    def _encode(self, preprocessed: np.ndarray) -> np.ndarray:
        batch = preprocessed[np.newaxis, ...]
        (output,) = self._session.run(None, {self._input_name: batch})
        return np.asarray(output, dtype=np.float32).reshape(-1)


def make_encoder(manifest: EncoderManifest) -> Encoder:
    if manifest.backend_id == "mock" or manifest.backend_id.startswith("mock-"):
        return MockEncoder(manifest)
    return OnnxEncoder(manifest)


# ---------------------------------------------------------------------------
# multi-scale extraction
# ---------------------------------------------------------------------------

def extract_multiscale(
    record: ImageRecord,
    schedule: ScaleSchedule,
    encoder: Encoder,
    cache: FeatureCache | None = None,
    *,
    normalize: bool = True,
) -> np.ndarray:
    """Full per-image pipeline: crop each scale, preprocess, encode, and
    aggregate with the schedule weights.

    A single-scale schedule reduces to encoding the full image, bit for
    bit. Results are cached under (image id, backend, schedule, mode) when
    a cache is supplied; a hit skips encoding entirely.
    """
    mode = "normalized" if normalize else "raw"
    key = cache_key(
        record.image_id,
        encoder.manifest.backend_id,
        schedule.n_scales,
        schedule.digest(),
        mode,
    )
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit

    image = load_image(record.path)
    per_scale: list[np.ndarray] = []
    for index, (_, ratio) in enumerate(schedule.entries):
        try:
            region = crop_region_for_scale(image.width, image.height, ratio)
            tensor = preprocess(image, region, encoder.manifest)
            per_scale.append(encoder.encode(tensor))
        except Exception as exc:
            raise ExtractionError(
                f"extraction failed at scale {index} "
                f"(ratio {ratio:g}) for {record.image_id}: {exc}",
                scale_index=index,
            ) from exc

    if schedule.n_scales == 1:
        feature = per_scale[0]
    else:
        feature = aggregate_multiscale(per_scale, schedule, normalize=normalize)

    if cache is not None:
        cache.put(key, feature)
    return feature
