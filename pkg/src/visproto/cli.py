"""Command-line entry point tying the pipeline stages together.

Stages mirror the data flow: describe classes, synthesize images, extract
features, build prototypes, classify, then inspect ablations and error
statistics or start the review service. Exit codes: 0 on success, 2 for
validation failures and missing assets, 3 for external-service failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .classifier import CalibrationError, build_prototype
from .encoder import (
    extract_multiscale,
    load_manifests,
    make_encoder,
    resolve_manifest,
)
from .evaluation import (
    GapError,
    RunConfig,
    collect_image_flags,
    collect_prompt_flags,
    error_stats,
    ingest_dataset,
    run_ablation_grid,
    run_eval,
)
from .feature_cache import FeatureCache
from .imagegen import (
    GenerationError,
    GenerationManifest,
    GenerationParams,
    HttpTextToImage,
    ImageStore,
    StubTextToImage,
    available_sources,
    execute,
    plan_jobs,
)
from .multiscale import make_schedule
from .promptgen import (
    HttpChatProvider,
    PromptProviderError,
    PromptSession,
    PromptStore,
    StubChatProvider,
    baseline_prompt_set,
)
from .workspace import Workspace

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_EXTERNAL = 3


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except GapError as exc:
        print("error: missing assets:", file=sys.stderr)
        for gap in exc.gaps:
            print(f"  {gap}", file=sys.stderr)
        return EXIT_VALIDATION
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PromptProviderError, GenerationError) as exc:
        print(f"error: external service: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visproto",
        description="zero-shot classification with generated visual prototypes",
    )
    parser.add_argument(
        "--root",
        default=os.environ.get("VISPROTO_ROOT", "workspace"),
        help="workspace root directory (env VISPROTO_ROOT)",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-prompts", help="describe each class via the language model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.add_argument("--n-g", type=int, default=10, help="prompts per class")
    p.add_argument("--provider", choices=("auto", "stub", "http"), default="auto")
    p.add_argument("--classes", help="comma-separated subset (default: all)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("gen-images", help="synthesize prototype images from stored prompts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, required=True, help="global generation seed")
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.add_argument("--guidance-scale", type=float, default=7.5)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--engine", choices=("auto", "stub", "http"), default="auto")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_gen_images)

    p = sub.add_parser("extract", help="warm the feature cache")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.add_argument("--include-generated", action="store_true")
    p.add_argument("--include-real", action="store_true")
    p.add_argument("--raw", action="store_true", help="skip re-normalization of aggregates")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-prototypes", help="average generated features per class")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.add_argument("--calibrated", action="store_true")
    p.add_argument("--raw", action="store_true")
    p.set_defaults(func=cmd_build_prototypes)

    p = sub.add_parser("classify", help="run evaluation configured by flags")
    _add_run_flags(p, require_core=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="run evaluation configured by a JSON file")
    p.add_argument("--config", required=True, help="path to a run config JSON")
    _add_run_flags(p, require_core=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="prompt-style x multi-scale grid per backend")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backends", required=True, help="comma-separated backend ids")
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--n-g", type=int, default=10)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("errors", help="flagged-error counts and category ratios")
    p.add_argument("--dataset", required=True)
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.set_defaults(func=cmd_errors)

    p = sub.add_parser("serve", help="start the review service")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--style", choices=("coarse_to_fine", "baseline"), default="coarse_to_fine")
    p.add_argument("--ui-dir", help="directory with the built review UI")
    p.set_defaults(func=cmd_serve)

    return parser


def _add_run_flags(p: argparse.ArgumentParser, *, require_core: bool) -> None:
    p.add_argument("--dataset", required=require_core, dest="dataset_id")
    p.add_argument("--backend", required=require_core, dest="backend_id")
    p.add_argument("--scales", type=int, dest="n_scales")
    p.add_argument(
        "--style",
        choices=("coarse_to_fine", "baseline"),
        dest="prompt_style",
    )
    p.add_argument(
        "--multiscale",
        action=argparse.BooleanOptionalAction,
        dest="multiscale_enabled",
    )
    p.add_argument(
        "--calibrated",
        action=argparse.BooleanOptionalAction,
        dest="calibration_applied",
    )
    p.add_argument("--raw", action=argparse.BooleanOptionalAction, dest="raw_aggregate")
    p.add_argument("--n-g", type=int, dest="n_g")


_RUN_FIELD_TYPES = {
    "dataset_id": str,
    "backend_id": str,
    "n_scales": int,
    "prompt_style": str,
    "multiscale_enabled": bool,
    "calibration_applied": bool,
    "raw_aggregate": bool,
    "n_g": int,
}


def resolve_run_config(args: argparse.Namespace, file_doc: dict | None = None) -> RunConfig:
    """Merge run settings by precedence: flags > config file > environment
    > built-in defaults."""
    merged: dict = {}
    for name, typ in _RUN_FIELD_TYPES.items():
        env_val = os.environ.get(f"VISPROTO_{name.upper()}")
        if env_val is not None:
            if typ is bool:
                merged[name] = env_val.lower() in ("1", "true", "yes", "on")
            else:
                merged[name] = typ(env_val)
    if file_doc:
        for name in _RUN_FIELD_TYPES:
            if name in file_doc:
                merged[name] = file_doc[name]
    for name in _RUN_FIELD_TYPES:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            merged[name] = flag_val
    missing = [k for k in ("dataset_id", "backend_id") if not merged.get(k)]
    if missing:
        raise ValueError(f"run config is missing {', '.join(missing)}")
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _workspace(args: argparse.Namespace) -> Workspace:
    ws = Workspace(Path(args.root))
    ws.ensure_layout()
    return ws


def _dataset_classes(ws: Workspace, dataset_id: str) -> list[str]:
    root = ws.dataset_dir(dataset_id)
    if not root.is_dir():
        raise GapError([f"dataset directory not found: {root}"])
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise GapError([f"dataset {dataset_id}: no class directories under {root}"])
    return classes


def cmd_gen_prompts(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    classes = (
        [c.strip() for c in args.classes.split(",") if c.strip()]
        if args.classes
        else _dataset_classes(ws, args.dataset)
    )
    store = PromptStore(ws.prompts_dir(args.style))

    if args.style == "baseline":
        for class_name in classes:
            prompt_set = baseline_prompt_set(args.dataset, class_name, args.n_g)
            store.store(prompt_set)
            print(f"{class_name}: stored {len(prompt_set.prompts)} template prompts")
        return EXIT_OK

    sampling = {}
    if args.temperature is not None:
        sampling["temperature"] = args.temperature
    if args.top_p is not None:
        sampling["top_p"] = args.top_p
    if args.provider == "http" or (
        args.provider == "auto" and os.environ.get("LLM_API_URL")
    ):
        provider = HttpChatProvider.from_env()
    else:
        provider = StubChatProvider(n_lines=args.n_g)
    session = PromptSession(
        provider,
        args.dataset,
        n_g=args.n_g,
        style=args.style,
        sampling=sampling or None,
    )
    for class_name in classes:
        prompt_set = session.request_prompts(class_name)
        store.store(prompt_set)
        note = " (DEFICIENT)" if prompt_set.deficient else ""
        print(
            f"{class_name}: stored {len(prompt_set.prompts)} of "
            f"{prompt_set.expected_count} prompts{note}"
        )
    return EXIT_OK


def cmd_gen_images(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    prompt_store = PromptStore(ws.prompts_dir(args.style))
    classes = prompt_store.list_classes(args.dataset)
    if not classes:
        raise GapError(
            [
                f"no stored prompts for dataset {args.dataset!r} "
                f"(style {args.style}); run gen-prompts first"
            ]
        )
    if args.engine == "http" or (
        args.engine == "auto" and os.environ.get("T2I_API_URL")
    ):
        engine = HttpTextToImage.from_env()
    else:
        engine = StubTextToImage()

    params = GenerationParams(
        guidance_scale=args.guidance_scale,
        num_inference_steps=args.steps,
        width=args.width,
        height=args.height,
    )
    store = ImageStore(ws.images_dir(args.style))
    manifest = GenerationManifest(
        dataset_id=args.dataset,
        global_seed=args.seed,
        engine_id=engine.engine_id,
    )
    for class_name in classes:
        prompt_set = prompt_store.load(args.dataset, class_name)
        manifest.add_jobs(class_name, plan_jobs(prompt_set, args.seed, params))

    pending = [j for js in manifest.jobs.values() for j in js]
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        list(pool.map(lambda job: execute(job, engine, store), pending))
    store.save_manifest(manifest)

    done = sum(1 for j in pending if j.status == "done")
    failed = [j for j in pending if j.status == "failed"]
    print(f"generated {done} of {len(pending)} images -> {store.root / args.dataset}")
    if failed:
        for job in failed:
            print(f"  failed {job.generation_id}: {job.error}", file=sys.stderr)
        return EXIT_EXTERNAL
    return EXIT_OK


def _make_encoder_for(ws: Workspace, backend_id: str):
    registry = load_manifests(ws.backends_file)
    return make_encoder(resolve_manifest(registry, backend_id))


def cmd_extract(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    include_generated = args.include_generated or not args.include_real
    include_real = args.include_real or not args.include_generated

    encoder = _make_encoder_for(ws, args.backend)
    schedule = make_schedule(args.scales)
    cache_path = ws.feature_cache_file(encoder.manifest.backend_id)
    cache = FeatureCache.load(cache_path, dim=encoder.manifest.feature_dim)
    normalize = not args.raw

    n_extracted = 0
    if include_generated:
        store = ImageStore(ws.images_dir(args.style))
        if not store.has_manifest(args.dataset):
            raise GapError(
                [f"no generation manifest for {args.dataset!r} (style {args.style})"]
            )
        manifest = store.load_manifest(args.dataset)
        from .encoder import ImageRecord

        for jobs in manifest.jobs.values():
            for job in jobs:
                if not job.output_path:
                    continue
                record = ImageRecord.from_path(
                    store.resolve(job.output_path),
                    image_id=job.generation_id,
                    source="generated",
                    class_id=job.class_id,
                    generation_id=job.generation_id,
                )
                extract_multiscale(record, schedule, encoder, cache, normalize=normalize)
                n_extracted += 1
    if include_real:
        dataset = ingest_dataset(ws.dataset_dir(args.dataset), args.dataset)
        for record in dataset.images:
            extract_multiscale(record, schedule, encoder, cache, normalize=normalize)
            n_extracted += 1

    cache.save(cache_path)
    print(
        f"processed {n_extracted} images, {encoder.encode_calls} encoder calls, "
        f"cache now holds {len(cache)} vectors -> {cache_path}"
    )
    return EXIT_OK


def cmd_build_prototypes(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    store = ImageStore(ws.images_dir(args.style))
    if not store.has_manifest(args.dataset):
        raise GapError(
            [f"no generation manifest for {args.dataset!r} (style {args.style})"]
        )
    manifest = store.load_manifest(args.dataset)
    encoder = _make_encoder_for(ws, args.backend)
    schedule = make_schedule(args.scales)
    cache_path = ws.feature_cache_file(encoder.manifest.backend_id)
    cache = FeatureCache.load(cache_path, dim=encoder.manifest.feature_dim)
    normalize = not args.raw

    from .encoder import ImageRecord

    for class_id in manifest.class_ids():
        selected, excluded = available_sources(
            manifest, class_id, calibrated=args.calibrated
        )
        if not selected:
            raise CalibrationError(
                f"class {class_id}: no usable generated images; flagged or "
                f"failed sources must be regenerated first"
            )
        feats = []
        ids = []
        for job in selected:
            record = ImageRecord.from_path(
                store.resolve(job.output_path),
                image_id=job.generation_id,
                source="generated",
                class_id=job.class_id,
                generation_id=job.generation_id,
            )
            feats.append(
                extract_multiscale(record, schedule, encoder, cache, normalize=normalize)
            )
            ids.append(job.generation_id)
        proto = build_prototype(class_id, feats, source_ids=ids, normalize=normalize)
        excl = f", {len(excluded)} excluded" if excluded else ""
        print(f"{class_id}: prototype from {proto.source_count} images{excl}")

    cache.save(cache_path)
    return EXIT_OK


def _print_run(run) -> None:
    print((run.run_dir / "report.txt").read_text(), end="")
    print(f"run {run.run_id} -> {run.run_dir}")
    if run.deficits:
        print(
            f"warning: {len(run.deficits)} class(es) below the configured "
            f"source count; see report",
            file=sys.stderr,
        )


def cmd_classify(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    config = resolve_run_config(args)
    run = run_eval(config, ws)
    _print_run(run)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = resolve_run_config(args, doc)
    run = run_eval(config, ws)
    _print_run(run)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    grid = run_ablation_grid(
        args.dataset, backends, ws, n_scales=args.scales, n_g=args.n_g
    )
    print(grid.render(), end="")
    return EXIT_OK


def cmd_errors(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    prompt_store = PromptStore(ws.prompts_dir(args.style))
    image_store = ImageStore(ws.images_dir(args.style))
    report = error_stats(
        collect_prompt_flags(prompt_store, args.dataset),
        collect_image_flags(image_store, args.dataset),
    )
    print(f"prompt errors:       {report.prompt_errors}")
    print(f"image errors:        {report.image_errors}")
    print(f"deduplicated total:  {report.deduplicated_total}")
    for cat in sorted(report.category_counts):
        print(
            f"  {cat}: {report.category_counts[cat]} "
            f"({report.category_ratios[cat]:.2%})"
        )
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    ws = _workspace(args)
    app = create_app(
        ServiceConfig(root=ws.root, style=args.style, ui_dir=args.ui_dir)
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
