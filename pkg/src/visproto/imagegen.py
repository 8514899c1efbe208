"""Prototype image synthesis through a text-to-image endpoint.

Jobs are planned one per prompt with seeds derived from a single global
seed, executed against a pluggable engine (HTTP service or offline stub),
and recorded in a per-dataset manifest. Review flags and regeneration
attempts live in the same manifest so calibrated and uncorrected source
sets stay reconstructible side by side.
"""

from __future__ import annotations

import hashlib
import io
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import requests
from PIL import Image

from .promptgen import PromptSet
from .workspace import atomic_write_json, read_json, sanitize_name

MASK64 = (1 << 64) - 1

DEFAULT_ENGINE_ID = "stable-diffusion-2.1"

JOB_STATUSES = ("pending", "done", "failed", "flagged", "regenerated")
FLAG_CATEGORIES = ("wrong_category", "poor_composition")

MANIFEST_FILENAME = "manifest.json"


class GenerationError(RuntimeError):
    """Text-to-image endpoint failure after retries."""


@dataclass(frozen=True)
class GenerationParams:
    """Diffusion knobs recorded on every job."""

    guidance_scale: float = 7.5
    num_inference_steps: int = 30
    width: int = 512
    height: int = 512

    def to_json(self) -> dict:
        return {
            "guidance_scale": self.guidance_scale,
            "num_inference_steps": self.num_inference_steps,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GenerationParams":
        return cls(
            guidance_scale=float(doc["guidance_scale"]),
            num_inference_steps=int(doc["num_inference_steps"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )


@dataclass
class GenerationJob:
    """One prompt -> one image.

    ``attempt`` 0 is the original generation; regenerations bump it and
    link back through ``parent_id``. Flag fields hold the review verdict
    while the status tracks the job lifecycle.
    """

    generation_id: str
    dataset_id: str
    class_id: str
    prompt_no: int
    prompt_text: str
    seed: int
    guidance_scale: float
    num_inference_steps: int
    width: int
    height: int
    status: str = "pending"
    output_path: str | None = None
    attempt: int = 0
    parent_id: str | None = None
    error: str | None = None
    flag_category: str | None = None
    flag_note: str | None = None
    flag_reviewer: str | None = None
    created_at: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in JOB_STATUSES:
            raise ValueError(f"unknown job status {self.status!r}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must fit in 64 bits")
        if self.prompt_no < 1:
            raise ValueError("prompt_no is 1-based")

    def to_json(self) -> dict:
        return {
            "generation_id": self.generation_id,
            "dataset_id": self.dataset_id,
            "class_id": self.class_id,
            "prompt_no": self.prompt_no,
            "prompt_text": self.prompt_text,
            "seed": self.seed,
            "guidance_scale": self.guidance_scale,
            "num_inference_steps": self.num_inference_steps,
            "width": self.width,
            "height": self.height,
            "status": self.status,
            "output_path": self.output_path,
            "attempt": self.attempt,
            "parent_id": self.parent_id,
            "error": self.error,
            "flag_category": self.flag_category,
            "flag_note": self.flag_note,
            "flag_reviewer": self.flag_reviewer,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GenerationJob":
        return cls(**doc)


def derive_seed(global_seed: int, dataset_id: str, class_id: str, prompt_no: int) -> int:
    """Per-job seed: global seed XOR a stable 64-bit hash of the job
    coordinates. Reruns reproduce it; distinct prompts diverge."""
    tag = f"{dataset_id}|{class_id}|{prompt_no}".encode("utf-8")
    h = hashlib.sha256(tag).digest()
    return (global_seed ^ int.from_bytes(h[:8], "little")) & MASK64


def make_generation_id(dataset_id: str, class_id: str, prompt_no: int, attempt: int) -> str:
    return f"{dataset_id}:{sanitize_name(class_id)}:{prompt_no}:a{attempt}"


def plan_jobs(
    prompts: PromptSet,
    global_seed: int,
    params: GenerationParams | None = None,
) -> list[GenerationJob]:
    """One pending job per prompt; a pure function of its arguments."""
    if not prompts.prompts:
        raise ValueError("prompt set is empty")
    params = params or GenerationParams()
    jobs = []
    for no in range(1, len(prompts.prompts) + 1):
        jobs.append(
            GenerationJob(
                generation_id=make_generation_id(
                    prompts.dataset_id, prompts.class_id, no, 0
                ),
                dataset_id=prompts.dataset_id,
                class_id=prompts.class_id,
                prompt_no=no,
                prompt_text=prompts.effective_prompt(no - 1),
                seed=derive_seed(global_seed, prompts.dataset_id, prompts.class_id, no),
                guidance_scale=params.guidance_scale,
                num_inference_steps=params.num_inference_steps,
                width=params.width,
                height=params.height,
            )
        )
    return jobs


@dataclass
class GenerationManifest:
    """All jobs for one dataset, grouped per class."""

    dataset_id: str
    global_seed: int
    engine_id: str = DEFAULT_ENGINE_ID
    jobs: dict[str, list[GenerationJob]] = field(default_factory=dict)

    def add_jobs(self, class_id: str, new_jobs: list[GenerationJob]) -> None:
        existing = {j.generation_id for js in self.jobs.values() for j in js}
        for job in new_jobs:
            if job.generation_id in existing:
                raise ValueError(f"duplicate generation_id {job.generation_id}")
            existing.add(job.generation_id)
        self.jobs.setdefault(class_id, []).extend(new_jobs)

    def find(self, generation_id: str) -> GenerationJob:
        for js in self.jobs.values():
            for job in js:
                if job.generation_id == generation_id:
                    return job
        raise KeyError(f"no job {generation_id!r}")

    def class_ids(self) -> list[str]:
        return sorted(self.jobs)

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "global_seed": self.global_seed,
            "engine_id": self.engine_id,
            "jobs": {
                class_id: [j.to_json() for j in js]
                for class_id, js in sorted(self.jobs.items())
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GenerationManifest":
        return cls(
            dataset_id=doc["dataset_id"],
            global_seed=int(doc["global_seed"]),
            engine_id=doc.get("engine_id", DEFAULT_ENGINE_ID),
            jobs={
                class_id: [GenerationJob.from_json(j) for j in js]
                for class_id, js in doc.get("jobs", {}).items()
            },
        )


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

class TextToImageEngine(Protocol):
    engine_id: str

    def generate(self, job: GenerationJob) -> bytes:
        ...


class HttpTextToImage:
    """Client for a text-to-image HTTP service returning PNG bytes.

    Request body mirrors the job parameters; transient failures retry
    with exponential backoff.
    """

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        *,
        engine_id: str = DEFAULT_ENGINE_ID,
        timeout: float = 300.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.api_key = api_key
        self.engine_id = engine_id
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "HttpTextToImage":
        url = os.environ.get("T2I_API_URL")
        if not url:
            raise GenerationError("T2I_API_URL is not set")
        return cls(url, api_key=os.environ.get("T2I_API_KEY"), **kwargs)

    def generate(self, job: GenerationJob) -> bytes:
        body = {
            "prompt": job.prompt_text,
            "seed": job.seed,
            "guidance_scale": job.guidance_scale,
            "num_inference_steps": job.num_inference_steps,
            "width": job.width,
            "height": job.height,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                self._sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(
                    self.url, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = GenerationError(f"endpoint returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise GenerationError(
                    f"endpoint returned {resp.status_code}: {resp.text[:200]}"
                )
            if not resp.content.startswith(b"\x89PNG"):
                raise GenerationError("endpoint response is not a PNG")
            return resp.content
        raise GenerationError(
            f"text-to-image endpoint unreachable after {self.max_retries} "
            f"attempts: {last_error}"
        )


class StubTextToImage:
    """Offline engine rendering seeded noise; fully deterministic."""

    engine_id = "stub"

    def generate(self, job: GenerationJob) -> bytes:
        rng = np.random.default_rng(job.seed)
        arr = rng.integers(0, 256, size=(job.height, job.width, 3), dtype=np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, "RGB").save(buf, format="PNG")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class ImageStore:
    """Generated images under ``<root>/<dataset>/<class_name>/``.

    Original outputs are ``<No.>.png`` with a ``<No.>.json`` sidecar;
    regeneration attempts keep the old files and land next to them as
    ``<No.>.r<attempt>.png``.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def class_dir(self, dataset_id: str, class_id: str) -> Path:
        return self.root / dataset_id / sanitize_name(class_id)

    def manifest_path(self, dataset_id: str) -> Path:
        return self.root / dataset_id / MANIFEST_FILENAME

    def relative_image_path(self, job: GenerationJob) -> str:
        stem = str(job.prompt_no) if job.attempt == 0 else f"{job.prompt_no}.r{job.attempt}"
        return "/".join(
            (job.dataset_id, sanitize_name(job.class_id), f"{stem}.png")
        )

    def resolve(self, relative_path: str) -> Path:
        return self.root / relative_path

    def save_manifest(self, manifest: GenerationManifest) -> None:
        atomic_write_json(self.manifest_path(manifest.dataset_id), manifest.to_json())

    def load_manifest(self, dataset_id: str) -> GenerationManifest:
        path = self.manifest_path(dataset_id)
        if not path.exists():
            raise FileNotFoundError(f"no generation manifest for {dataset_id!r}")
        return GenerationManifest.from_json(read_json(path))

    def has_manifest(self, dataset_id: str) -> bool:
        return self.manifest_path(dataset_id).exists()

    def list_datasets(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(
            d.name for d in self.root.iterdir()
            if d.is_dir() and (d / MANIFEST_FILENAME).exists()
        )

    def write_output(self, job: GenerationJob, png_bytes: bytes) -> str:
        """Persist image plus sidecar; returns the relative image path."""
        rel = self.relative_image_path(job)
        target = self.resolve(rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(png_bytes)
        os.replace(tmp, target)
        sidecar = target.with_suffix(".json")
        atomic_write_json(sidecar, job.to_json())
        return rel


def execute(job: GenerationJob, engine: TextToImageEngine, store: ImageStore) -> GenerationJob:
    """Run one job to completion; failures land as status "failed" with
    the error text recorded rather than raising."""
    try:
        png = engine.generate(job)
        job.created_at = time.time()
        job.output_path = store.write_output(job, png)
        with Image.open(store.resolve(job.output_path)) as img:
            img.verify()
        job.status = "done"
        job.error = None
    except Exception as exc:
        job.status = "failed"
        job.error = str(exc)
        job.created_at = time.time()
    # keep the sidecar in sync with the final status
    if job.output_path:
        sidecar = store.resolve(job.output_path).with_suffix(".json")
        atomic_write_json(sidecar, job.to_json())
    return job


def regenerate(
    job: GenerationJob,
    new_prompt_text: str | None = None,
    new_seed: int | None = None,
) -> GenerationJob:
    """Derive a replacement job from a flagged one.

    Seed policy: an explicit seed wins; a corrected prompt keeps the old
    seed (the prompt is the variable under test); otherwise the seed is
    bumped so the reroll actually differs.
    """
    if job.status != "flagged":
        raise ValueError(
            f"only flagged jobs can be regenerated; {job.generation_id} is "
            f"{job.status}"
        )
    if new_seed is not None:
        seed = new_seed & MASK64
    elif new_prompt_text is not None and new_prompt_text != job.prompt_text:
        seed = job.seed
    else:
        seed = (job.seed + 1) & MASK64
    attempt = job.attempt + 1
    return replace(
        job,
        generation_id=make_generation_id(
            job.dataset_id, job.class_id, job.prompt_no, attempt
        ),
        prompt_text=new_prompt_text if new_prompt_text is not None else job.prompt_text,
        seed=seed,
        status="pending",
        output_path=None,
        attempt=attempt,
        parent_id=job.generation_id,
        error=None,
        flag_category=None,
        flag_note=None,
        flag_reviewer=None,
        created_at=0.0,
    )


# ---------------------------------------------------------------------------
# calibration state
# ---------------------------------------------------------------------------

def set_flag(
    manifest: GenerationManifest,
    generation_id: str,
    category: str,
    note: str | None = None,
    reviewer_id: str | None = None,
) -> GenerationJob:
    """Flag a completed generation; flagging twice is a no-op update."""
    if category not in FLAG_CATEGORIES:
        raise ValueError(f"unknown flag category {category!r}")
    job = manifest.find(generation_id)
    if job.status not in ("done", "flagged"):
        raise ValueError(
            f"cannot flag job {generation_id} in status {job.status}"
        )
    job.status = "flagged"
    job.flag_category = category
    job.flag_note = note
    job.flag_reviewer = reviewer_id
    return job


def clear_flag(manifest: GenerationManifest, generation_id: str) -> GenerationJob:
    """Remove a flag; the job returns to its never-flagged state."""
    job = manifest.find(generation_id)
    if job.status == "flagged":
        job.status = "done"
    job.flag_category = None
    job.flag_note = None
    job.flag_reviewer = None
    return job


def available_sources(
    manifest: GenerationManifest, class_id: str, *, calibrated: bool
) -> tuple[list[GenerationJob], list[str]]:
    """Select the generation jobs whose images feed the class prototype.

    Uncorrected mode uses the original attempt-0 outputs as generated,
    review verdicts ignored. Calibrated mode picks, per prompt number, the
    newest completed non-flagged attempt; prompt numbers with no usable
    attempt are reported in the excluded list (by their newest id).
    Returns (selected jobs ordered by prompt_no, excluded generation ids).
    """
    jobs = manifest.jobs.get(class_id, [])
    if not calibrated:
        selected = sorted(
            (
                j for j in jobs
                if j.attempt == 0 and j.status != "failed" and j.output_path
            ),
            key=lambda j: j.prompt_no,
        )
        return selected, []

    by_no: dict[int, list[GenerationJob]] = {}
    for j in jobs:
        by_no.setdefault(j.prompt_no, []).append(j)
    selected = []
    excluded: list[str] = []
    for no in sorted(by_no):
        attempts = sorted(by_no[no], key=lambda j: j.attempt)
        usable = [j for j in attempts if j.status == "done" and j.output_path]
        if usable:
            selected.append(usable[-1])
            excluded.extend(
                j.generation_id for j in attempts
                if j is not usable[-1] and j.status in ("flagged", "regenerated")
            )
        else:
            excluded.extend(j.generation_id for j in attempts)
    return selected, excluded
