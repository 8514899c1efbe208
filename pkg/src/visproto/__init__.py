"""Training-free image classification from generated visual prototypes."""

from .classifier import (
    AccuracyReport,
    CalibrationError,
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
    EncoderManifest,
    ExtractionError,
    ImageRecord,
    MockEncoder,
    OnnxEncoder,
    default_manifests,
    extract_multiscale,
    load_manifests,
    make_encoder,
    preprocess,
    resolve_manifest,
    save_manifests,
)
from .evaluation import (
    AblationGrid,
    DatasetManifest,
    ErrorFlag,
    ErrorReport,
    EvalRun,
    GapError,
    RunConfig,
    apply_calibration,
    error_stats,
    format_comparison_row,
    ingest_dataset,
    run_ablation_grid,
    run_eval,
)
from .feature_cache import FeatureCache, FeatureCacheEntry, cache_key
from .imagegen import (
    GenerationJob,
    GenerationManifest,
    GenerationParams,
    HttpTextToImage,
    ImageStore,
    StubTextToImage,
    available_sources,
    clear_flag,
    derive_seed,
    execute,
    plan_jobs,
    regenerate,
    set_flag,
)
from .multiscale import (
    CropRegion,
    ScaleSchedule,
    aggregate_multiscale,
    crop_region_for_scale,
    l2_normalize,
    make_schedule,
)
from .promptgen import (
    HttpChatProvider,
    PromptCalibration,
    PromptRequest,
    PromptSession,
    PromptSet,
    PromptStore,
    StubChatProvider,
    baseline_prompt_set,
    build_system_prompt,
    parse_prompt_response,
)
from .workspace import Workspace, sanitize_name, stable_digest

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "AccuracyReport",
    "CalibrationError",
    "ClassPrototype",
    "CropRegion",
    "DatasetManifest",
    "Encoder",
    "EncoderManifest",
    "ErrorFlag",
    "ErrorReport",
    "EvalRun",
    "ExtractionError",
    "FeatureCache",
    "FeatureCacheEntry",
    "GapError",
    "GenerationJob",
    "GenerationManifest",
    "GenerationParams",
    "HttpChatProvider",
    "HttpTextToImage",
    "ImageRecord",
    "ImageStore",
    "MockEncoder",
    "OnnxEncoder",
    "Prediction",
    "PromptCalibration",
    "PromptRequest",
    "PromptSession",
    "PromptSet",
    "PromptStore",
    "RunConfig",
    "ScaleSchedule",
    "ScoreMatrix",
    "StubChatProvider",
    "StubTextToImage",
    "Workspace",
    "accuracy",
    "aggregate_multiscale",
    "apply_calibration",
    "available_sources",
    "baseline_prompt_set",
    "build_prototype",
    "build_system_prompt",
    "cache_key",
    "clear_flag",
    "crop_region_for_scale",
    "default_manifests",
    "derive_seed",
    "error_stats",
    "execute",
    "extract_multiscale",
    "format_comparison_row",
    "ingest_dataset",
    "l2_normalize",
    "load_manifests",
    "make_encoder",
    "make_schedule",
    "parse_prompt_response",
    "plan_jobs",
    "predict",
    "preprocess",
    "regenerate",
    "resolve_manifest",
    "run_ablation_grid",
    "run_eval",
    "sanitize_name",
    "save_manifests",
    "score_all",
    "set_flag",
    "stable_digest",
]
