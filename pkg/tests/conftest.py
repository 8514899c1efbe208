"""Shared fixtures: a synthetic workspace with cleanly separated classes.

Every image of a class (test images and generated images alike) carries
identical bytes, so the deterministic mock encoder maps them to one point
per class. Distinct classes land on independent random directions, which
keeps intra-class cosine at 1.0 and inter-class cosine near zero.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import pytest
from PIL import Image

from visproto.imagegen import GenerationManifest, ImageStore, plan_jobs
from visproto.promptgen import PromptSession, PromptStore, StubChatProvider, baseline_prompt_set
from visproto.workspace import Workspace

FIXTURE_CLASSES = ("alpha", "beta", "gamma")
FIXTURE_COLORS = {
    "alpha": (200, 30, 30),
    "beta": (30, 200, 30),
    "gamma": (30, 30, 200),
}
GLOBAL_SEED = 7


def solid_png(color: tuple[int, int, int], size: int = 64) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (size, size), color).save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class FixtureWorkspace:
    ws: Workspace
    dataset_id: str
    classes: tuple[str, ...]
    class_bytes: dict[str, bytes]
    n_g: int
    n_test: int
    styles: tuple[str, ...]

    def image_store(self, style: str) -> ImageStore:
        return ImageStore(self.ws.images_dir(style))

    def prompt_store(self, style: str) -> PromptStore:
        return PromptStore(self.ws.prompts_dir(style))


def build_fixture_workspace(
    root,
    *,
    dataset_id: str = "synth",
    classes: tuple[str, ...] = FIXTURE_CLASSES,
    n_g: int = 4,
    n_test: int = 2,
    styles: tuple[str, ...] = ("coarse_to_fine", "baseline"),
) -> FixtureWorkspace:
    ws = Workspace(root)
    ws.ensure_layout()
    class_bytes = {c: solid_png(FIXTURE_COLORS[c]) for c in classes}

    for class_id in classes:
        class_dir = ws.dataset_dir(dataset_id) / class_id
        class_dir.mkdir(parents=True)
        for i in range(n_test):
            (class_dir / f"t{i}.png").write_bytes(class_bytes[class_id])

    for style in styles:
        prompt_store = PromptStore(ws.prompts_dir(style))
        image_store = ImageStore(ws.images_dir(style))
        manifest = GenerationManifest(
            dataset_id=dataset_id, global_seed=GLOBAL_SEED, engine_id="fixture"
        )
        if style == "baseline":
            sets = [baseline_prompt_set(dataset_id, c, n_g) for c in classes]
        else:
            session = PromptSession(
                StubChatProvider(n_lines=n_g), dataset_id, n_g=n_g
            )
            sets = [session.request_prompts(c) for c in classes]
        for prompt_set in sets:
            prompt_store.store(prompt_set)
            jobs = plan_jobs(prompt_set, GLOBAL_SEED)
            for job in jobs:
                job.status = "done"
                job.created_at = 0.0
                job.output_path = image_store.relative_image_path(job)
                image_store.write_output(job, class_bytes[job.class_id])
            manifest.add_jobs(prompt_set.class_id, jobs)
        image_store.save_manifest(manifest)

    return FixtureWorkspace(
        ws=ws,
        dataset_id=dataset_id,
        classes=classes,
        class_bytes=class_bytes,
        n_g=n_g,
        n_test=n_test,
        styles=styles,
    )


@pytest.fixture
def fixture_ws(tmp_path) -> FixtureWorkspace:
    return build_fixture_workspace(tmp_path / "ws")
