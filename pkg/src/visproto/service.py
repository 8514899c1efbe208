"""Local HTTP service for the human calibration loop.

Exposes the prompt and image stores, flagging, prompt edits, regeneration,
and evaluation runs as JSON endpoints, plus the generated images as static
files. Every mutation goes through the same store code the command line
uses, so the service holds no state of its own; restarting it loses
nothing.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .classifier import CalibrationError
from .encoder import Encoder
from .evaluation import GapError, RunConfig, run_eval
from .imagegen import (
    FLAG_CATEGORIES,
    HttpTextToImage,
    ImageStore,
    StubTextToImage,
    TextToImageEngine,
    clear_flag,
    execute,
    regenerate,
    set_flag,
)
from .promptgen import PromptCalibration, PromptStore
from .workspace import Workspace, read_json

DEFAULT_STYLE = "coarse_to_fine"


@dataclass
class ServiceConfig:
    root: str | Path
    style: str = DEFAULT_STYLE
    engine: TextToImageEngine | None = None
    encoder: Encoder | None = None  # injected for tests; default resolves per run
    ui_dir: str | Path | None = None
    regeneration_workers: int = 2

    def __post_init__(self) -> None:
        self.root = Path(self.root)


@dataclass
class _State:
    ws: Workspace
    config: ServiceConfig
    executor: ThreadPoolExecutor
    locks: dict = field(default_factory=dict)
    locks_guard: threading.Lock = field(default_factory=threading.Lock)

    def class_lock(self, dataset_id: str, class_id: str) -> threading.Lock:
        key = (dataset_id, class_id)
        with self.locks_guard:
            if key not in self.locks:
                self.locks[key] = threading.Lock()
            return self.locks[key]

    def prompt_store(self, style: str) -> PromptStore:
        return PromptStore(self.ws.root / "prompts" / style)

    def image_store(self, style: str) -> ImageStore:
        return ImageStore(self.ws.root / "images" / style)

    def engine(self) -> TextToImageEngine:
        if self.config.engine is not None:
            return self.config.engine
        import os

        if os.environ.get("T2I_API_URL"):
            return HttpTextToImage.from_env()
        return StubTextToImage()


class FlagBody(BaseModel):
    dataset: str
    category: str
    generation_id: str | None = None
    class_id: str | None = None
    prompt_no: int | None = None
    note: str | None = None
    reviewer_id: str | None = None
    style: str = DEFAULT_STYLE


class PromptEditBody(BaseModel):
    dataset: str
    replacement_text: str
    reviewer_id: str | None = None
    style: str = DEFAULT_STYLE


class RegenerateBody(BaseModel):
    dataset: str
    new_prompt_text: str | None = None
    new_seed: int | None = None
    style: str = DEFAULT_STYLE


class RunBody(BaseModel):
    dataset_id: str
    backend_id: str
    n_scales: int = 3
    prompt_style: str = DEFAULT_STYLE
    multiscale_enabled: bool = True
    calibration_applied: bool = False
    raw_aggregate: bool = False
    n_g: int = 10


def create_app(config: ServiceConfig) -> FastAPI:
    ws = Workspace(config.root)
    state = _State(
        ws=ws,
        config=config,
        executor=ThreadPoolExecutor(
            max_workers=config.regeneration_workers,
            thread_name_prefix="regen",
        ),
    )
    @asynccontextmanager
    async def _lifespan(app: FastAPI):
        yield
        # wait for queued regenerations so no manifest is left half-updated
        state.executor.shutdown(wait=True)

    app = FastAPI(title="visual prototype review service", lifespan=_lifespan)
    app.state.service = state

    # ------------------------------------------------------------------ reads

    @app.get("/api/datasets")
    def list_datasets() -> dict:
        ids = set()
        if ws.datasets_dir.is_dir():
            ids.update(d.name for d in ws.datasets_dir.iterdir() if d.is_dir())
        ids.update(state.image_store(config.style).list_datasets())
        return {"datasets": [{"dataset_id": d} for d in sorted(ids)]}

    @app.get("/api/datasets/{dataset_id}/classes")
    def list_classes(dataset_id: str, style: str = Query(default=config.style)) -> dict:
        dataset_dir = ws.dataset_dir(dataset_id)
        store = state.image_store(style)
        class_ids: set[str] = set()
        if dataset_dir.is_dir():
            class_ids.update(d.name for d in dataset_dir.iterdir() if d.is_dir())
        generations: dict[str, dict] = {}
        if store.has_manifest(dataset_id):
            manifest = store.load_manifest(dataset_id)
            for class_id, jobs in manifest.jobs.items():
                class_ids.add(class_id)
                generations[class_id] = {
                    "total": len(jobs),
                    "done": sum(1 for j in jobs if j.status == "done"),
                    "flagged": sum(1 for j in jobs if j.status == "flagged"),
                    "failed": sum(1 for j in jobs if j.status == "failed"),
                }
        if not class_ids:
            raise HTTPException(404, f"unknown dataset {dataset_id!r}")
        out = []
        for class_id in sorted(class_ids):
            n_real = 0
            class_dir = dataset_dir / class_id
            if class_dir.is_dir():
                n_real = sum(1 for f in class_dir.iterdir() if f.is_file())
            out.append(
                {
                    "class_id": class_id,
                    "class_name": class_id,
                    "n_real_images": n_real,
                    "generations": generations.get(class_id),
                }
            )
        return {"dataset_id": dataset_id, "classes": out}

    @app.get("/api/classes/{class_id}/prompts")
    def get_prompts(
        class_id: str,
        dataset: str = Query(...),
        style: str = Query(default=config.style),
    ) -> dict:
        store = state.prompt_store(style)
        try:
            prompt_set = store.load(dataset, class_id)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc))
        return {
            "dataset_id": prompt_set.dataset_id,
            "class_id": prompt_set.class_id,
            "provider_id": prompt_set.provider_id,
            "deficient": prompt_set.deficient,
            "gaps": list(prompt_set.gaps),
            "prompts": [
                {
                    "no": i + 1,
                    "text": text,
                    "status": cal.status,
                    "replacement_text": cal.replacement_text,
                    "note": cal.note,
                    "effective_text": prompt_set.effective_prompt(i),
                }
                for i, (text, cal) in enumerate(
                    zip(prompt_set.prompts, prompt_set.calibration)
                )
            ],
        }

    @app.get("/api/classes/{class_id}/generations")
    def get_generations(
        class_id: str,
        dataset: str = Query(...),
        style: str = Query(default=config.style),
    ) -> dict:
        store = state.image_store(style)
        if not store.has_manifest(dataset):
            raise HTTPException(404, f"no generations for dataset {dataset!r}")
        manifest = store.load_manifest(dataset)
        jobs = manifest.jobs.get(class_id)
        if jobs is None:
            raise HTTPException(404, f"no generations for class {class_id!r}")
        return {
            "dataset_id": dataset,
            "class_id": class_id,
            "engine_id": manifest.engine_id,
            "generations": [
                dict(
                    j.to_json(),
                    image_url=(
                        f"/images/{style}/{j.output_path}" if j.output_path else None
                    ),
                )
                for j in sorted(jobs, key=lambda j: (j.prompt_no, j.attempt))
            ],
        }

    @app.get("/api/runs/{run_id}")
    def get_run(run_id: str) -> dict:
        run_dir = ws.run_dir(run_id)
        report_path = run_dir / "report.json"
        if not report_path.exists():
            raise HTTPException(404, f"no run {run_id!r}")
        run_config = RunConfig.from_json(read_json(run_dir / "config.json"))
        report = read_json(report_path)
        out = {
            "run_id": run_id,
            "config": run_config.to_json(),
            "report": report,
            "calibration_delta": None,
        }
        # pair with the run that differs only in the calibration switch
        twin = RunConfig.from_json(
            dict(
                run_config.to_json(),
                calibration_applied=not run_config.calibration_applied,
            )
        )
        twin_path = ws.run_dir(twin.run_id) / "report.json"
        if twin_path.exists():
            twin_report = read_json(twin_path)
            if run_config.calibration_applied:
                calibrated, uncorrected = report, twin_report
                calibrated_id, uncorrected_id = run_id, twin.run_id
            else:
                calibrated, uncorrected = twin_report, report
                calibrated_id, uncorrected_id = twin.run_id, run_id
            out["calibration_delta"] = {
                "uncorrected_run_id": uncorrected_id,
                "calibrated_run_id": calibrated_id,
                "uncorrected_overall": uncorrected["overall"],
                "calibrated_overall": calibrated["overall"],
                "delta_overall": round(
                    calibrated["overall"] - uncorrected["overall"], 10
                ),
                "uncorrected_macro": uncorrected["macro"],
                "calibrated_macro": calibrated["macro"],
                "delta_macro": round(calibrated["macro"] - uncorrected["macro"], 10),
            }
        return out

    # -------------------------------------------------------------- mutations

    @app.post("/api/flags")
    def post_flag(body: FlagBody) -> dict:
        if body.category not in FLAG_CATEGORIES:
            raise HTTPException(422, f"unknown category {body.category!r}")
        if body.generation_id:
            store = state.image_store(body.style)
            if not store.has_manifest(body.dataset):
                raise HTTPException(404, f"unknown dataset {body.dataset!r}")
            manifest = store.load_manifest(body.dataset)
            try:
                job = manifest.find(body.generation_id)
            except KeyError as exc:
                raise HTTPException(404, str(exc))
            with state.class_lock(body.dataset, job.class_id):
                manifest = store.load_manifest(body.dataset)
                job = set_flag(
                    manifest,
                    body.generation_id,
                    body.category,
                    note=body.note,
                    reviewer_id=body.reviewer_id,
                )
                store.save_manifest(manifest)
            return {"flag_id": f"g:{body.generation_id}", "job": job.to_json()}

        if body.class_id is None or body.prompt_no is None:
            raise HTTPException(
                422, "either generation_id or class_id + prompt_no is required"
            )
        store = state.prompt_store(body.style)
        with state.class_lock(body.dataset, body.class_id):
            try:
                prompt_set = store.load(body.dataset, body.class_id)
            except FileNotFoundError as exc:
                raise HTTPException(404, str(exc))
            index = body.prompt_no - 1
            if not 0 <= index < len(prompt_set.prompts):
                raise HTTPException(404, f"no prompt {body.prompt_no}")
            old = prompt_set.calibration[index]
            prompt_set = prompt_set.with_calibration(
                index,
                PromptCalibration(
                    status=f"flagged_{body.category}",
                    replacement_text=old.replacement_text,
                    note=body.note,
                    reviewer_id=body.reviewer_id,
                ),
            )
            store.store(prompt_set)
        return {
            "flag_id": f"p:{body.dataset}:{body.class_id}:{body.prompt_no}",
            "status": f"flagged_{body.category}",
        }

    @app.delete("/api/flags/{flag_id:path}")
    def delete_flag(
        flag_id: str, style: str = Query(default=config.style)
    ) -> dict:
        if flag_id.startswith("g:"):
            generation_id = flag_id[2:]
            dataset = generation_id.split(":", 1)[0]
            store = state.image_store(style)
            if not store.has_manifest(dataset):
                raise HTTPException(404, f"unknown dataset {dataset!r}")
            manifest = store.load_manifest(dataset)
            try:
                job = manifest.find(generation_id)
            except KeyError as exc:
                raise HTTPException(404, str(exc))
            with state.class_lock(dataset, job.class_id):
                manifest = store.load_manifest(dataset)
                job = clear_flag(manifest, generation_id)
                store.save_manifest(manifest)
            return {"flag_id": flag_id, "job": job.to_json()}

        if flag_id.startswith("p:"):
            try:
                _, dataset, class_id, no = flag_id.split(":")
                prompt_no = int(no)
            except ValueError:
                raise HTTPException(422, f"bad prompt flag id {flag_id!r}")
            store = state.prompt_store(style)
            with state.class_lock(dataset, class_id):
                try:
                    prompt_set = store.load(dataset, class_id)
                except FileNotFoundError as exc:
                    raise HTTPException(404, str(exc))
                index = prompt_no - 1
                if not 0 <= index < len(prompt_set.prompts):
                    raise HTTPException(404, f"no prompt {prompt_no}")
                prompt_set = prompt_set.with_calibration(index, PromptCalibration())
                store.store(prompt_set)
            return {"flag_id": flag_id, "status": "unreviewed"}

        raise HTTPException(422, f"bad flag id {flag_id!r}")

    @app.put("/api/prompts/{class_id}/{prompt_no}")
    def put_prompt(class_id: str, prompt_no: int, body: PromptEditBody) -> dict:
        store = state.prompt_store(body.style)
        with state.class_lock(body.dataset, class_id):
            try:
                prompt_set = store.load(body.dataset, class_id)
            except FileNotFoundError as exc:
                raise HTTPException(404, str(exc))
            index = prompt_no - 1
            if not 0 <= index < len(prompt_set.prompts):
                raise HTTPException(404, f"no prompt {prompt_no}")
            old = prompt_set.calibration[index]
            # a flagged prompt keeps its flag; an unreviewed one becomes
            # "replaced". Original text stays in place either way.
            status = old.status if old.status.startswith("flagged_") else "replaced"
            prompt_set = prompt_set.with_calibration(
                index,
                PromptCalibration(
                    status=status,
                    replacement_text=body.replacement_text,
                    note=old.note,
                    reviewer_id=body.reviewer_id or old.reviewer_id,
                ),
            )
            store.store(prompt_set)
        return {
            "class_id": class_id,
            "no": prompt_no,
            "status": status,
            "original_text": prompt_set.prompts[index],
            "replacement_text": body.replacement_text,
        }

    @app.post("/api/regenerate/{generation_id:path}")
    def post_regenerate(generation_id: str, body: RegenerateBody) -> dict:
        store = state.image_store(body.style)
        if not store.has_manifest(body.dataset):
            raise HTTPException(404, f"unknown dataset {body.dataset!r}")
        manifest = store.load_manifest(body.dataset)
        try:
            job = manifest.find(generation_id)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        new_prompt = body.new_prompt_text
        if new_prompt is None:
            # an edited prompt (saved through PUT /api/prompts) is the
            # default correction for its generations
            try:
                prompt_set = state.prompt_store(body.style).load(
                    body.dataset, job.class_id
                )
                replacement_text = prompt_set.calibration[
                    job.prompt_no - 1
                ].replacement_text
                if replacement_text:
                    new_prompt = replacement_text
            except (FileNotFoundError, IndexError):
                pass
        with state.class_lock(body.dataset, job.class_id):
            manifest = store.load_manifest(body.dataset)
            job = manifest.find(generation_id)
            try:
                replacement = regenerate(job, new_prompt, body.new_seed)
            except ValueError as exc:
                raise HTTPException(409, str(exc))
            job.status = "regenerated"
            manifest.add_jobs(job.class_id, [replacement])
            store.save_manifest(manifest)

        def _run(dataset: str, class_id: str, replacement_id: str, style: str) -> None:
            engine = state.engine()
            lock = state.class_lock(dataset, class_id)
            with lock:
                current = state.image_store(style).load_manifest(dataset)
                target = current.find(replacement_id)
            done = execute(target, engine, state.image_store(style))
            with lock:
                current = state.image_store(style).load_manifest(dataset)
                stored = current.find(replacement_id)
                stored.status = done.status
                stored.output_path = done.output_path
                stored.error = done.error
                stored.created_at = done.created_at
                state.image_store(style).save_manifest(current)

        state.executor.submit(
            _run, body.dataset, job.class_id, replacement.generation_id, body.style
        )
        return {
            "parent_id": generation_id,
            "replacement_id": replacement.generation_id,
            "status": "pending",
        }

    @app.post("/api/runs")
    def post_run(body: RunBody) -> dict:
        run_config = RunConfig(**body.model_dump())
        try:
            run = run_eval(run_config, ws, encoder=config.encoder)
        except GapError as exc:
            raise HTTPException(422, detail={"gaps": exc.gaps})
        except CalibrationError as exc:
            raise HTTPException(409, str(exc))
        return {
            "run_id": run.run_id,
            "overall": run.overall,
            "macro": run.macro,
            "report": run.report_json(),
        }

    # ---------------------------------------------------------------- static

    images_root = ws.root / "images"
    images_root.mkdir(parents=True, exist_ok=True)
    app.mount("/images", StaticFiles(directory=images_root), name="images")

    ui_dir = Path(config.ui_dir) if config.ui_dir else None
    if ui_dir and ui_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
