import json
from types import SimpleNamespace

import pytest

from visproto.classifier import CalibrationError
from visproto.evaluation import (
    ABLATION_ROWS,
    ABLATION_TOGGLED_FIELDS,
    AblationGrid,
    ErrorFlag,
    ErrorReport,
    GapError,
    RunConfig,
    apply_calibration,
    collect_image_flags,
    collect_prompt_flags,
    config_diff,
    error_stats,
    format_comparison_row,
    ingest_dataset,
    run_ablation_grid,
    run_eval,
)
from visproto.imagegen import set_flag
from visproto.promptgen import PromptCalibration

from conftest import build_fixture_workspace


def mock_config(fx, **overrides) -> RunConfig:
    base = dict(
        dataset_id=fx.dataset_id,
        backend_id="mock",
        n_g=fx.n_g,
    )
    base.update(overrides)
    return RunConfig(**base)


def run_files(run) -> dict[str, bytes]:
    return {
        name: (run.run_dir / name).read_bytes()
        for name in ("config.json", "predictions.jsonl", "report.json", "report.txt")
    }


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def test_ingest_scans_sorted_classes_and_images(fixture_ws):
    manifest = ingest_dataset(
        fixture_ws.ws.dataset_dir("synth"), "synth"
    )
    assert manifest.class_ids() == ["alpha", "beta", "gamma"]
    assert len(manifest.images) == 6
    assert manifest.images[0].image_id == "synth/alpha/t0.png"
    assert manifest.images[0].class_id == "alpha"
    assert manifest.empty_classes == ()


def test_ingest_skips_non_image_files(fixture_ws):
    root = fixture_ws.ws.dataset_dir("synth")
    (root / "alpha" / "notes.txt").write_text("not an image\n")
    manifest = ingest_dataset(root, "synth")
    assert len(manifest.images) == 6


def test_ingest_reports_empty_class_dirs(fixture_ws):
    root = fixture_ws.ws.dataset_dir("synth")
    (root / "empty").mkdir()
    manifest = ingest_dataset(root, "synth")
    assert manifest.class_ids() == ["alpha", "beta", "gamma"]
    assert manifest.empty_classes == ("empty",)


def test_ingest_missing_root_is_a_gap(tmp_path):
    with pytest.raises(GapError, match="not found"):
        ingest_dataset(tmp_path / "nowhere")


def test_ingest_all_empty_is_a_gap(tmp_path):
    (tmp_path / "ds" / "only").mkdir(parents=True)
    with pytest.raises(GapError, match="no classes"):
        ingest_dataset(tmp_path / "ds")


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

def test_config_round_trip_and_run_id():
    config = RunConfig("synth", "mock", n_g=4)
    assert RunConfig.from_json(config.to_json()) == config
    assert len(config.run_id) == 12
    assert config.run_id == RunConfig("synth", "mock", n_g=4).run_id
    assert config.run_id != RunConfig("synth", "mock", n_g=5).run_id


def test_config_disabling_multiscale_forces_single_scale():
    config = RunConfig("synth", "mock", n_scales=3, multiscale_enabled=False)
    assert config.n_scales == 1


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig("synth", "mock", prompt_style="florid")
    with pytest.raises(ValueError):
        RunConfig("synth", "mock", n_scales=0)
    with pytest.raises(ValueError):
        RunConfig("synth", "mock", n_g=0)


def test_config_diff_names_disagreeing_fields():
    a = RunConfig("synth", "mock")
    b = RunConfig("synth", "mock", prompt_style="baseline", multiscale_enabled=False)
    assert config_diff(a, a) == set()
    assert config_diff(a, b) == {"prompt_style", "multiscale_enabled", "n_scales"}
    c = RunConfig("synth", "vit-b-32")
    assert "backend_id" in config_diff(a, c)


# ---------------------------------------------------------------------------
# error statistics
# ---------------------------------------------------------------------------

def test_error_stats_overlap_counts_once():
    # 3 prompt flags, 2 image flags, 1 shared (class, prompt_no)
    prompt = [
        ErrorFlag("Boxer", 1, "wrong_category"),
        ErrorFlag("Boxer", 2, "wrong_category"),
        ErrorFlag("Beagle", 1, "wrong_category"),
    ]
    image = [
        ErrorFlag("Boxer", 1, "poor_composition"),
        ErrorFlag("Pug", 3, "poor_composition"),
    ]
    report = error_stats(prompt, image)
    assert report.deduplicated_total == 4
    assert report.prompt_errors == 3
    assert report.image_errors == 2
    # the shared item keeps the prompt-side category
    assert report.category_counts == {"wrong_category": 3, "poor_composition": 1}
    assert report.category_ratios == {
        "wrong_category": 0.75, "poor_composition": 0.25,
    }


def test_error_stats_ratios_over_dedup_total():
    prompt = [ErrorFlag("a", 1, "wrong_category")]
    image = [
        ErrorFlag("b", 1, "poor_composition"),
        ErrorFlag("b", 2, "wrong_category"),
    ]
    report = error_stats(prompt, image)
    assert report.deduplicated_total == 3
    assert report.category_ratios["wrong_category"] == pytest.approx(2 / 3)
    assert report.category_ratios["poor_composition"] == pytest.approx(1 / 3)


def test_error_stats_empty():
    report = error_stats([], [])
    assert report.deduplicated_total == 0
    assert report.category_ratios == {}
    assert report.to_json()["category_counts"] == {}


def test_collect_prompt_flags(fixture_ws):
    store = fixture_ws.prompt_store("coarse_to_fine")
    ps = store.load("synth", "alpha").with_calibration(
        0, PromptCalibration(status="flagged_wrong_category")
    )
    store.store(ps)
    flags = collect_prompt_flags(store, "synth")
    assert flags == [ErrorFlag("alpha", 1, "wrong_category")]


def test_collect_image_flags(fixture_ws):
    store = fixture_ws.image_store("coarse_to_fine")
    manifest = store.load_manifest("synth")
    set_flag(manifest, "synth:beta:2:a0", "poor_composition")
    store.save_manifest(manifest)
    flags = collect_image_flags(store, "synth")
    assert flags == [ErrorFlag("beta", 2, "poor_composition")]


def test_collect_image_flags_without_manifest(tmp_path):
    from visproto.imagegen import ImageStore

    assert collect_image_flags(ImageStore(tmp_path), "synth") == []


# ---------------------------------------------------------------------------
# calibration application
# ---------------------------------------------------------------------------

def test_apply_calibration_flags_and_queues_replacement(fixture_ws):
    store = fixture_ws.image_store("coarse_to_fine")
    manifest = store.load_manifest("synth")
    old_seed = manifest.find("synth:alpha:1:a0").seed
    apply_calibration(
        manifest,
        [
            {
                "generation_id": "synth:alpha:1:a0",
                "category": "wrong_category",
                "replacement_prompt": "a corrected alpha",
                "reviewer_id": "r1",
            }
        ],
    )
    flagged = manifest.find("synth:alpha:1:a0")
    assert flagged.status == "flagged"
    assert flagged.flag_reviewer == "r1"
    queued = manifest.find("synth:alpha:1:a1")
    assert queued.status == "pending"
    assert queued.prompt_text == "a corrected alpha"
    assert queued.seed == old_seed
    assert queued.parent_id == "synth:alpha:1:a0"


def test_apply_calibration_without_queue(fixture_ws):
    store = fixture_ws.image_store("coarse_to_fine")
    manifest = store.load_manifest("synth")
    apply_calibration(
        manifest,
        [{"generation_id": "synth:alpha:1:a0", "category": "poor_composition"}],
        queue_regeneration=False,
    )
    assert manifest.find("synth:alpha:1:a0").status == "flagged"
    with pytest.raises(KeyError):
        manifest.find("synth:alpha:1:a1")


# ---------------------------------------------------------------------------
# comparison row
# ---------------------------------------------------------------------------

def test_comparison_row_format():
    row = format_comparison_row("eurosat", "vit-l-14", 0.5620, 0.2778)
    assert row == "EUROSAT ViT-L/14: Ours 56.20, CLIP 27.78, Δ +28.42"


def test_comparison_row_negative_delta_and_unknown_backend():
    row = format_comparison_row("dtd", "custom-x", 0.25, 0.40)
    assert row == "DTD custom-x: Ours 25.00, CLIP 40.00, Δ -15.00"


# ---------------------------------------------------------------------------
# end-to-end runs
# ---------------------------------------------------------------------------

def test_run_eval_perfect_on_separated_fixture(fixture_ws):
    run = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    assert run.overall == 1.0
    assert run.macro == 1.0
    assert run.per_class == {"alpha": 1.0, "beta": 1.0, "gamma": 1.0}
    assert run.deficits == {}
    assert all(
        p["source_count"] == fixture_ws.n_g for p in run.prototypes.values()
    )
    for name in (
        "config.json", "predictions.jsonl", "report.json", "report.txt",
        "timing.json",
    ):
        assert (run.run_dir / name).exists(), name


def test_report_json_carries_no_config_or_clocks(fixture_ws):
    run = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    doc = json.loads((run.run_dir / "report.json").read_text())
    assert set(doc) == {
        "overall", "macro", "per_class", "n_classes", "score_digest",
        "prototypes", "deficits", "baseline", "errors",
    }
    config_doc = json.loads((run.run_dir / "config.json").read_text())
    assert config_doc == mock_config(fixture_ws).to_json()


def test_run_eval_byte_identical_across_reruns(fixture_ws):
    config = mock_config(fixture_ws)
    first = run_files(run_eval(config, fixture_ws.ws))
    second = run_files(run_eval(config, fixture_ws.ws))
    assert first == second


def test_second_run_serves_everything_from_cache(fixture_ws):
    config = mock_config(fixture_ws)
    run_eval(config, fixture_ws.ws)
    rerun = run_eval(config, fixture_ws.ws)
    assert rerun.timing["encode_calls"] == 0


def test_zero_flag_calibrated_run_equals_uncorrected(fixture_ws):
    plain = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    calibrated = run_eval(
        mock_config(fixture_ws, calibration_applied=True), fixture_ws.ws
    )
    assert plain.run_id != calibrated.run_id
    for name in ("report.json", "predictions.jsonl", "report.txt"):
        assert (plain.run_dir / name).read_bytes() == (
            calibrated.run_dir / name
        ).read_bytes(), name


def test_one_flag_changes_exactly_one_source_count(fixture_ws):
    store = fixture_ws.image_store("coarse_to_fine")
    manifest = store.load_manifest("synth")
    set_flag(manifest, "synth:beta:3:a0", "wrong_category")
    store.save_manifest(manifest)

    plain = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    calibrated = run_eval(
        mock_config(fixture_ws, calibration_applied=True), fixture_ws.ws
    )
    changed = {
        c for c in plain.prototypes
        if plain.prototypes[c]["source_count"]
        != calibrated.prototypes[c]["source_count"]
    }
    assert changed == {"beta"}
    assert calibrated.prototypes["beta"]["source_count"] == fixture_ws.n_g - 1
    assert calibrated.prototypes["beta"]["excluded"] == ["synth:beta:3:a0"]
    assert calibrated.deficits == {
        "beta": {"available": fixture_ws.n_g - 1, "expected": fixture_ws.n_g}
    }
    # identical per-class image bytes: the flag cannot move any prediction
    assert plain.overall == calibrated.overall == 1.0
    assert plain.errors.deduplicated_total == 1
    assert calibrated.errors.deduplicated_total == 1


def test_all_flagged_class_raises_calibration_error(fixture_ws):
    store = fixture_ws.image_store("coarse_to_fine")
    manifest = store.load_manifest("synth")
    for no in range(1, fixture_ws.n_g + 1):
        set_flag(manifest, f"synth:gamma:{no}:a0", "wrong_category")
    store.save_manifest(manifest)

    with pytest.raises(CalibrationError, match="regenerate"):
        run_eval(
            mock_config(fixture_ws, calibration_applied=True), fixture_ws.ws
        )


def test_missing_manifest_is_a_gap(tmp_path):
    fx = build_fixture_workspace(tmp_path / "ws", styles=())
    with pytest.raises(GapError, match="generation manifest"):
        run_eval(mock_config(fx), fx.ws)


def test_gap_report_lists_every_missing_class(fixture_ws):
    root = fixture_ws.ws.dataset_dir("synth")
    for extra in ("delta", "epsilon"):
        (root / extra).mkdir()
        (root / extra / "t0.png").write_bytes(
            fixture_ws.class_bytes["alpha"]
        )
    with pytest.raises(GapError) as excinfo:
        run_eval(mock_config(fixture_ws), fixture_ws.ws)
    gaps = excinfo.value.gaps
    assert len(gaps) == 2
    assert any("delta" in g for g in gaps)
    assert any("epsilon" in g for g in gaps)


def test_run_records_source_deficit(tmp_path):
    fx = build_fixture_workspace(tmp_path / "ws", n_g=3)
    run = run_eval(mock_config(fx, n_g=5), fx.ws)
    assert run.deficits == {
        c: {"available": 3, "expected": 5} for c in fx.classes
    }
    assert "source deficits" in (run.run_dir / "report.txt").read_text()


def test_baseline_pairing(fixture_ws):
    baseline_config = mock_config(
        fixture_ws, prompt_style="baseline", multiscale_enabled=False
    )
    run_eval(baseline_config, fixture_ws.ws)
    run = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    assert run.baseline is not None
    assert run.baseline["run_id"] == baseline_config.run_id
    assert run.baseline["delta_overall"] == 0.0
    assert run.baseline["comparison_row"] == (
        "SYNTH Mock: Ours 100.00, CLIP 100.00, Δ +0.00"
    )
    assert run.baseline["comparison_row"] in (
        run.run_dir / "report.txt"
    ).read_text()


def test_baseline_absent_when_twin_not_run(fixture_ws):
    run = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    assert run.baseline is None


def test_self_consistency_guard_detects_tampering(fixture_ws):
    from visproto.evaluation import _check_self_consistency

    run = run_eval(mock_config(fixture_ws), fixture_ws.ws)
    path = run.run_dir / "predictions.jsonl"
    lines = path.read_text().splitlines()
    doc = json.loads(lines[0])
    doc["predicted"] = "not-" + doc["predicted"]
    lines[0] = json.dumps(doc, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RuntimeError, match="self-consistency"):
        _check_self_consistency(run)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def test_ablation_row_definitions():
    assert [r[0] for r in ABLATION_ROWS] == [
        "CLIP", "CLIP&LLM", "CLIP&M_S", "CLIP&LLM&M_S",
    ]
    assert ABLATION_TOGGLED_FIELDS == {
        "prompt_style", "multiscale_enabled", "n_scales",
    }


def test_ablation_grid_runs_all_arms(fixture_ws):
    grid = run_ablation_grid(
        "synth", ["mock"], fixture_ws.ws, n_g=fixture_ws.n_g
    )
    assert grid.rows == ["CLIP", "CLIP&LLM", "CLIP&M_S", "CLIP&LLM&M_S"]
    assert set(grid.runs) == {(r, "mock") for r in grid.rows}
    for row in grid.rows:
        assert grid.overall(row, "mock") == 1.0

    configs = {row: grid.runs[(row, "mock")].config for row in grid.rows}
    assert configs["CLIP"].prompt_style == "baseline"
    assert configs["CLIP"].n_scales == 1
    assert configs["CLIP&LLM"].prompt_style == "coarse_to_fine"
    assert configs["CLIP&M_S"].multiscale_enabled
    assert configs["CLIP&LLM&M_S"].n_scales == 3
    for a in configs.values():
        for b in configs.values():
            assert config_diff(a, b) <= ABLATION_TOGGLED_FIELDS


def test_ablation_grid_requires_backends(fixture_ws):
    with pytest.raises(ValueError):
        run_ablation_grid("synth", [], fixture_ws.ws)


def test_ablation_render_bolds_column_best():
    rows = ["CLIP", "CLIP&LLM"]
    runs = {
        ("CLIP", "mock"): SimpleNamespace(overall=0.25),
        ("CLIP&LLM", "mock"): SimpleNamespace(overall=0.75),
        ("CLIP", "vit-b-32"): SimpleNamespace(overall=0.9),
        ("CLIP&LLM", "vit-b-32"): SimpleNamespace(overall=0.6),
    }
    grid = AblationGrid("synth", ["mock", "vit-b-32"], rows, runs)
    text = grid.render()
    assert text.count("**") == 4  # one bolded value per column
    assert "**75.00**" in text
    assert "**90.00**" in text
    assert "25.00" in text and "60.00" in text
    assert "ViT-B/32" in text.splitlines()[0]
