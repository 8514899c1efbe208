"""Evaluation harness: dataset ingestion, scored runs, ablations, and
error statistics.

A run composes the full pipeline: multi-scale features for generated and
real images, one prototype per class, an inner-product score matrix, and
accuracy figures. Results are persisted under ``runs/<run_id>/`` where
``run_id`` is a digest of the run configuration:

    config.json        what was asked (the only config-bearing file)
    predictions.jsonl  one {image_id, true, predicted, score, margin} per line
    report.json        results only, deterministic byte-for-byte
    report.txt         the same results as an aligned table
    timing.json        wall-clock and encoder-call counts (never in report)

Keeping configuration and timing out of report.json makes result equality
checkable by byte comparison, which the calibration workflow relies on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .classifier import (
    AccuracyReport,
    ClassPrototype,
    Prediction,
    ScoreMatrix,
    accuracy,
    build_prototype,
    predict,
    score_all,
)
from .encoder import (
    Encoder,
    ImageRecord,
    extract_multiscale,
    load_manifests,
    make_encoder,
    resolve_manifest,
)
from .feature_cache import FeatureCache
from .imagegen import GenerationManifest, ImageStore, available_sources, regenerate, set_flag
from .multiscale import make_schedule
from .promptgen import PromptStore
from .workspace import Workspace, atomic_write_json, atomic_write_text, read_json, stable_digest

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

BACKEND_LABELS = {
    "rn50": "RN50",
    "vit-b-32": "ViT-B/32",
    "vit-b-16": "ViT-B/16",
    "vit-l-14": "ViT-L/14",
    "mock": "Mock",
}

# Ablation arms: encoder alone, plus language-model prompts, plus
# multi-scale extraction, plus both. Row labels follow the conventional
# shorthand (M_S = multi-scale).
ABLATION_ROWS: tuple[tuple[str, str, bool], ...] = (
    ("CLIP", "baseline", False),
    ("CLIP&LLM", "coarse_to_fine", False),
    ("CLIP&M_S", "baseline", True),
    ("CLIP&LLM&M_S", "coarse_to_fine", True),
)

ABLATION_TOGGLED_FIELDS = {"prompt_style", "multiscale_enabled", "n_scales"}


class GapError(RuntimeError):
    """Required assets are missing; carries the full gap manifest."""

    def __init__(self, gaps: list[str]):
        super().__init__(
            "missing assets prevent evaluation:\n  " + "\n  ".join(gaps)
        )
        self.gaps = gaps


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    dataset_id: str
    classes: list[dict]  # {"class_id", "class_name"}
    images: list[ImageRecord]
    split: str = "all"
    empty_classes: tuple[str, ...] = ()

    def class_ids(self) -> list[str]:
        return [c["class_id"] for c in self.classes]


def ingest_dataset(root: str | Path, dataset_id: str | None = None) -> DatasetManifest:
    """Scan a directory-per-class dataset.

    Every image of every class is test data; there is no split. Classes
    come from subdirectory names, images from sorted file paths. Empty
    class directories are kept out of ``classes`` and reported.
    """
    root = Path(root)
    if not root.is_dir():
        raise GapError([f"dataset directory not found: {root}"])
    dataset_id = dataset_id or root.name

    classes = []
    images: list[ImageRecord] = []
    empty: list[str] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        class_id = class_dir.name
        files = sorted(
            f for f in class_dir.iterdir()
            if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES
        )
        skipped = [
            f.name for f in sorted(class_dir.iterdir())
            if f.is_file() and f.suffix.lower() not in IMAGE_SUFFIXES
        ]
        if skipped:
            log.warning(
                "dataset %s class %s: skipping non-image files %s",
                dataset_id, class_id, ", ".join(skipped),
            )
        if not files:
            empty.append(class_id)
            log.warning("dataset %s: class directory %s is empty", dataset_id, class_id)
            continue
        classes.append({"class_id": class_id, "class_name": class_id})
        for f in files:
            images.append(
                ImageRecord.from_path(
                    f,
                    image_id=f"{dataset_id}/{class_id}/{f.name}",
                    source="real_dataset",
                    class_id=class_id,
                )
            )
    if not classes:
        raise GapError([f"dataset {dataset_id}: no classes with images under {root}"])
    return DatasetManifest(
        dataset_id=dataset_id,
        classes=classes,
        images=images,
        empty_classes=tuple(empty),
    )


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything that identifies one evaluation run.

    Disabling multi-scale forces a single scale so the two switches can
    never disagree.
    """

    dataset_id: str
    backend_id: str
    n_scales: int = 3
    prompt_style: str = "coarse_to_fine"
    multiscale_enabled: bool = True
    calibration_applied: bool = False
    raw_aggregate: bool = False
    n_g: int = 10

    def __post_init__(self) -> None:
        if self.prompt_style not in ("coarse_to_fine", "baseline"):
            raise ValueError(f"unknown prompt_style {self.prompt_style!r}")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.n_g < 1:
            raise ValueError("n_g must be >= 1")
        if not self.multiscale_enabled and self.n_scales != 1:
            object.__setattr__(self, "n_scales", 1)

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "backend_id": self.backend_id,
            "n_scales": self.n_scales,
            "prompt_style": self.prompt_style,
            "multiscale_enabled": self.multiscale_enabled,
            "calibration_applied": self.calibration_applied,
            "raw_aggregate": self.raw_aggregate,
            "n_g": self.n_g,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        return cls(**doc)

    @property
    def run_id(self) -> str:
        return stable_digest(self.to_json())[:12]


def config_diff(a: RunConfig, b: RunConfig) -> set[str]:
    """Names of the fields on which two configs disagree."""
    da, db = a.to_json(), b.to_json()
    return {k for k in da if da[k] != db[k]}


# ---------------------------------------------------------------------------
# error statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorFlag:
    """One flagged item, identified by class and prompt number."""

    class_id: str
    prompt_no: int
    category: str


@dataclass
class ErrorReport:
    prompt_errors: int = 0
    image_errors: int = 0
    deduplicated_total: int = 0
    category_counts: dict = field(default_factory=dict)
    category_ratios: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "prompt_errors": self.prompt_errors,
            "image_errors": self.image_errors,
            "deduplicated_total": self.deduplicated_total,
            "category_counts": dict(sorted(self.category_counts.items())),
            "category_ratios": dict(sorted(self.category_ratios.items())),
        }


def error_stats(
    prompt_flags: Iterable[ErrorFlag], image_flags: Iterable[ErrorFlag]
) -> ErrorReport:
    """Union-count flagged items.

    A prompt flag and an image flag on the same (class, prompt number)
    describe one underlying error and count once; the prompt-side category
    wins on disagreement since the prompt is upstream of the image.
    """
    prompt_flags = list(prompt_flags)
    image_flags = list(image_flags)
    by_key: dict[tuple[str, int], str] = {}
    for flag in image_flags:
        by_key[(flag.class_id, flag.prompt_no)] = flag.category
    for flag in prompt_flags:
        by_key[(flag.class_id, flag.prompt_no)] = flag.category

    counts: dict[str, int] = {}
    for category in by_key.values():
        counts[category] = counts.get(category, 0) + 1
    total = len(by_key)
    ratios = {cat: n / total for cat, n in counts.items()} if total else {}
    return ErrorReport(
        prompt_errors=len({(f.class_id, f.prompt_no) for f in prompt_flags}),
        image_errors=len({(f.class_id, f.prompt_no) for f in image_flags}),
        deduplicated_total=total,
        category_counts=counts,
        category_ratios=ratios,
    )


def collect_prompt_flags(store: PromptStore, dataset_id: str) -> list[ErrorFlag]:
    flags = []
    for class_id in store.list_classes(dataset_id):
        prompt_set = store.load(dataset_id, class_id)
        for i, cal in enumerate(prompt_set.calibration):
            if cal.status.startswith("flagged_"):
                flags.append(
                    ErrorFlag(class_id, i + 1, cal.status.removeprefix("flagged_"))
                )
    return flags


def collect_image_flags(store: ImageStore, dataset_id: str) -> list[ErrorFlag]:
    if not store.has_manifest(dataset_id):
        return []
    manifest = store.load_manifest(dataset_id)
    flags = []
    for class_id, jobs in manifest.jobs.items():
        for job in jobs:
            if job.flag_category is not None:
                flags.append(ErrorFlag(class_id, job.prompt_no, job.flag_category))
    return flags


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def apply_calibration(
    manifest: GenerationManifest,
    flags: Sequence[dict],
    *,
    queue_regeneration: bool = True,
) -> GenerationManifest:
    """Apply review verdicts to a generation manifest.

    Each flag is {"generation_id", "category", optional "note",
    "reviewer_id", "replacement_prompt"}. Flagged jobs leave the calibrated
    source set immediately; a replacement job is queued per flag so a later
    generation pass can fill the hole. Uncorrected runs keep reading the
    original attempt-0 outputs either way.
    """
    for flag in flags:
        job = set_flag(
            manifest,
            flag["generation_id"],
            flag["category"],
            note=flag.get("note"),
            reviewer_id=flag.get("reviewer_id"),
        )
        if queue_regeneration:
            replacement = regenerate(job, flag.get("replacement_prompt"))
            manifest.add_jobs(job.class_id, [replacement])
    return manifest


# ---------------------------------------------------------------------------
# evaluation runs
# ---------------------------------------------------------------------------

@dataclass
class EvalRun:
    run_id: str
    config: RunConfig
    overall: float
    macro: float
    per_class: dict
    score_digest: str
    prototypes: dict  # class_id -> {"source_count", "excluded"}
    deficits: dict  # class_id -> {"available", "expected"}
    baseline: dict | None
    errors: ErrorReport
    timing: dict
    run_dir: Path

    def report_json(self) -> dict:
        """The deterministic results document (no config, no clocks)."""
        return {
            "overall": self.overall,
            "macro": self.macro,
            "per_class": dict(sorted(self.per_class.items())),
            "n_classes": len(self.prototypes),
            "score_digest": self.score_digest,
            "prototypes": {k: self.prototypes[k] for k in sorted(self.prototypes)},
            "deficits": {k: self.deficits[k] for k in sorted(self.deficits)},
            "baseline": self.baseline,
            "errors": self.errors.to_json(),
        }


def run_eval(
    config: RunConfig,
    ws: Workspace,
    *,
    encoder: Encoder | None = None,
    save_cache: bool = True,
) -> EvalRun:
    """Execute one evaluation run end to end and persist its artifacts.

    All asset gaps are collected and raised together before any scoring;
    a class whose calibrated source set is empty raises the prototype
    builder's calibration error instead of being dropped.
    """
    t_start = time.perf_counter()
    dataset = ingest_dataset(ws.dataset_dir(config.dataset_id), config.dataset_id)
    image_store = ImageStore(ws.images_dir(config.prompt_style))

    gaps: list[str] = []
    if not image_store.has_manifest(config.dataset_id):
        raise GapError(
            [
                f"no generation manifest for dataset {config.dataset_id!r} "
                f"(style {config.prompt_style}); run image generation first"
            ]
        )
    gen_manifest = image_store.load_manifest(config.dataset_id)

    # pick prototype sources per class up front so every gap is visible
    # before the first feature is computed
    per_class_sources: dict[str, tuple[list, list[str]]] = {}
    for class_id in dataset.class_ids():
        selected, excluded = available_sources(
            gen_manifest, class_id, calibrated=config.calibration_applied
        )
        if not selected and not gen_manifest.jobs.get(class_id):
            gaps.append(
                f"class {class_id}: no generated images in the "
                f"{config.prompt_style} store"
            )
        per_class_sources[class_id] = (selected, excluded)
    if gaps:
        raise GapError(gaps)

    if encoder is None:
        manifest = resolve_manifest(load_manifests(ws.backends_file), config.backend_id)
        encoder = make_encoder(manifest)
    schedule = make_schedule(config.n_scales)
    normalize = not config.raw_aggregate
    cache_path = ws.feature_cache_file(encoder.manifest.backend_id)
    cache = FeatureCache.load(cache_path, dim=encoder.manifest.feature_dim)
    encode_calls_before = encoder.encode_calls

    def feature_for(record: ImageRecord) -> np.ndarray:
        return extract_multiscale(
            record, schedule, encoder, cache, normalize=normalize
        )

    # prototypes
    t_proto = time.perf_counter()
    prototypes: list[ClassPrototype] = []
    proto_summary: dict[str, dict] = {}
    deficits: dict[str, dict] = {}
    for class_id in dataset.class_ids():
        selected, excluded_ids = per_class_sources[class_id]
        if not selected:
            # every attempt is flagged or failed: route through the
            # prototype builder so the standard calibration error fires
            candidates = [
                j for j in gen_manifest.jobs.get(class_id, []) if j.output_path
            ]
            feats = [feature_for(_job_record(image_store, j)) for j in candidates]
            build_prototype(
                class_id,
                feats,
                excluded=set(range(len(feats))),
                source_ids=[j.generation_id for j in candidates],
            )
            raise AssertionError("empty source set must raise")  # pragma: no cover
        feats = [feature_for(_job_record(image_store, j)) for j in selected]
        proto = build_prototype(
            class_id,
            feats,
            source_ids=[j.generation_id for j in selected],
            normalize=normalize,
        )
        if excluded_ids:
            proto = dataclasses.replace(
                proto, excluded_sources=frozenset(excluded_ids)
            )
        prototypes.append(proto)
        proto_summary[class_id] = {
            "source_count": proto.source_count,
            "excluded": sorted(proto.excluded_sources),
        }
        if proto.source_count < config.n_g:
            deficits[class_id] = {
                "available": proto.source_count,
                "expected": config.n_g,
            }

    # test features and scoring
    t_test = time.perf_counter()
    test_features = [feature_for(record) for record in dataset.images]
    test_ids = [record.image_id for record in dataset.images]
    t_score = time.perf_counter()
    scores = score_all(test_features, prototypes, test_ids)
    predictions = predict(scores)
    ground_truth = {r.image_id: r.class_id for r in dataset.images}
    report = accuracy(predictions, ground_truth)
    t_done = time.perf_counter()

    if save_cache:
        cache.save(cache_path)

    prompt_store = PromptStore(ws.prompts_dir(config.prompt_style))
    errors = error_stats(
        collect_prompt_flags(prompt_store, config.dataset_id),
        collect_image_flags(image_store, config.dataset_id),
    )

    baseline = _baseline_summary(config, ws, report)

    run = EvalRun(
        run_id=config.run_id,
        config=config,
        overall=report.overall,
        macro=report.macro,
        per_class=dict(report.per_class),
        score_digest=_score_digest(scores),
        prototypes=proto_summary,
        deficits=deficits,
        baseline=baseline,
        errors=errors,
        timing={
            "prototype_s": round(t_test - t_proto, 6),
            "test_extract_s": round(t_score - t_test, 6),
            "score_s": round(t_done - t_score, 6),
            "total_s": round(t_done - t_start, 6),
            "encode_calls": encoder.encode_calls - encode_calls_before,
        },
        run_dir=ws.run_dir(config.run_id),
    )
    _persist_run(run, predictions, ground_truth)
    return run


def _job_record(store: ImageStore, job) -> ImageRecord:
    return ImageRecord.from_path(
        store.resolve(job.output_path),
        image_id=job.generation_id,
        source="generated",
        class_id=job.class_id,
        generation_id=job.generation_id,
    )


def _score_digest(scores: ScoreMatrix) -> str:
    h = hashlib.sha256()
    h.update("\x00".join(scores.rows).encode("utf-8"))
    h.update("\x00".join(scores.cols).encode("utf-8"))
    h.update(np.ascontiguousarray(scores.scores.astype("<f8")).tobytes())
    return h.hexdigest()[:16]


def _baseline_summary(
    config: RunConfig, ws: Workspace, report: AccuracyReport
) -> dict | None:
    """Pair this run with its no-language-model single-scale twin."""
    baseline_config = dataclasses.replace(
        config,
        prompt_style="baseline",
        multiscale_enabled=False,
        n_scales=1,
        calibration_applied=False,
    )
    if baseline_config.run_id == config.run_id:
        return None
    baseline_report_path = ws.run_dir(baseline_config.run_id) / "report.json"
    if not baseline_report_path.exists():
        return None
    doc = read_json(baseline_report_path)
    return {
        "run_id": baseline_config.run_id,
        "overall": doc["overall"],
        "macro": doc["macro"],
        "delta_overall": round(report.overall - doc["overall"], 10),
        "delta_macro": round(report.macro - doc["macro"], 10),
        "comparison_row": format_comparison_row(
            config.dataset_id, config.backend_id, report.overall, doc["overall"]
        ),
    }


def _persist_run(
    run: EvalRun, predictions: list[Prediction], ground_truth: dict
) -> None:
    run.run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_json(run.run_dir / "config.json", run.config.to_json())

    lines = []
    for p in predictions:
        lines.append(
            json.dumps(
                {
                    "image_id": p.test_image_id,
                    "true": ground_truth[p.test_image_id],
                    "predicted": p.predicted_class,
                    "score": p.score,
                    "margin": p.margin,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(run.run_dir / "predictions.jsonl", "\n".join(lines) + "\n")

    atomic_write_json(run.run_dir / "report.json", run.report_json())
    atomic_write_text(run.run_dir / "report.txt", render_report_text(run))
    atomic_write_json(run.run_dir / "timing.json", run.timing)

    _check_self_consistency(run)


def _check_self_consistency(run: EvalRun) -> None:
    """Recompute overall accuracy from the persisted predictions; the
    report must agree exactly."""
    lines = (run.run_dir / "predictions.jsonl").read_text().splitlines()
    docs = [json.loads(line) for line in lines if line.strip()]
    if not docs:
        raise RuntimeError("no predictions were persisted")
    recomputed = sum(1 for d in docs if d["predicted"] == d["true"]) / len(docs)
    if recomputed != run.overall:
        raise RuntimeError(
            f"self-consistency failure: report says {run.overall}, "
            f"predictions file yields {recomputed}"
        )


def backend_label(backend_id: str) -> str:
    return BACKEND_LABELS.get(backend_id, backend_id)


def format_comparison_row(
    dataset_id: str, backend_id: str, ours: float, baseline: float
) -> str:
    """Render the headline comparison line for one dataset and backend,
    e.g. "EUROSAT ViT-L/14: Ours 56.20, CLIP 27.78, Δ +28.42"."""
    delta = (ours - baseline) * 100.0
    return (
        f"{dataset_id.upper()} {backend_label(backend_id)}: "
        f"Ours {ours * 100.0:.2f}, CLIP {baseline * 100.0:.2f}, "
        f"Δ {delta:+.2f}"
    )


def render_report_text(run: EvalRun) -> str:
    """Aligned-text rendering of the results (config-free, like the JSON)."""
    out = []
    out.append(f"overall accuracy: {run.overall * 100.0:.2f}")
    out.append(f"macro accuracy:   {run.macro * 100.0:.2f}")
    out.append("")
    out.append("per-class accuracy:")
    width = max((len(c) for c in run.per_class), default=0)
    for class_id in sorted(run.per_class):
        sources = run.prototypes.get(class_id, {}).get("source_count", 0)
        out.append(
            f"  {class_id:<{width}}  {run.per_class[class_id] * 100.0:6.2f}  "
            f"({sources} prototype sources)"
        )
    if run.deficits:
        out.append("")
        out.append("source deficits:")
        for class_id in sorted(run.deficits):
            d = run.deficits[class_id]
            out.append(
                f"  {class_id}: {d['available']} of {d['expected']} usable images"
            )
    if run.errors.deduplicated_total:
        out.append("")
        e = run.errors
        out.append(
            f"flagged errors: {e.deduplicated_total} distinct "
            f"({e.prompt_errors} prompt, {e.image_errors} image)"
        )
        for cat in sorted(e.category_ratios):
            out.append(f"  {cat}: {e.category_counts[cat]} ({e.category_ratios[cat]:.2%})")
    if run.baseline:
        out.append("")
        out.append(run.baseline["comparison_row"])
    out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

@dataclass
class AblationGrid:
    dataset_id: str
    backends: list[str]
    rows: list[str]
    runs: dict  # (row_label, backend_id) -> EvalRun

    def overall(self, row: str, backend: str) -> float:
        return self.runs[(row, backend)].overall

    def render(self) -> str:
        """Aligned table, per-column best overall accuracy marked **."""
        best = {
            b: max(self.overall(r, b) for r in self.rows) for b in self.backends
        }
        cells: dict[tuple[str, str], str] = {}
        for r in self.rows:
            for b in self.backends:
                value = f"{self.overall(r, b) * 100.0:.2f}"
                if self.overall(r, b) == best[b]:
                    value = f"**{value}**"
                cells[(r, b)] = value
        row_w = max(len(r) for r in self.rows)
        col_w = {
            b: max(len(backend_label(b)), *(len(cells[(r, b)]) for r in self.rows))
            for b in self.backends
        }
        header = " " * row_w + "  " + "  ".join(
            f"{backend_label(b):>{col_w[b]}}" for b in self.backends
        )
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r:<{row_w}}  "
                + "  ".join(f"{cells[(r, b)]:>{col_w[b]}}" for b in self.backends)
            )
        return "\n".join(lines) + "\n"


def run_ablation_grid(
    dataset_id: str,
    backends: Sequence[str],
    ws: Workspace,
    *,
    n_scales: int = 3,
    n_g: int = 10,
    calibration_applied: bool = False,
    encoders: dict[str, Encoder] | None = None,
) -> AblationGrid:
    """Evaluate the four prompt-style x multi-scale arms per backend.

    The four configs differ only in the toggled dimensions; that property
    is asserted, not assumed.
    """
    if not backends:
        raise ValueError("at least one backend is required")
    runs = {}
    for backend_id in backends:
        configs = []
        for label, style, multiscale in ABLATION_ROWS:
            config = RunConfig(
                dataset_id=dataset_id,
                backend_id=backend_id,
                n_scales=n_scales if multiscale else 1,
                prompt_style=style,
                multiscale_enabled=multiscale,
                calibration_applied=calibration_applied,
                n_g=n_g,
            )
            configs.append((label, config))
        for (_, a) in configs:
            for (_, b) in configs:
                extra = config_diff(a, b) - ABLATION_TOGGLED_FIELDS
                if extra:
                    raise AssertionError(
                        f"ablation rows must differ only in "
                        f"{sorted(ABLATION_TOGGLED_FIELDS)}, got extra {sorted(extra)}"
                    )
        for label, config in configs:
            encoder = encoders.get(backend_id) if encoders else None
            runs[(label, backend_id)] = run_eval(config, ws, encoder=encoder)
    return AblationGrid(
        dataset_id=dataset_id,
        backends=list(backends),
        rows=[label for label, _, _ in ABLATION_ROWS],
        runs=runs,
    )
