import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visproto.classifier import (
    CalibrationError,
    ClassPrototype,
    Prediction,
    ScoreMatrix,
    accuracy,
    build_prototype,
    predict,
    score_all,
)
from visproto.multiscale import l2_normalize


def unit(v) -> np.ndarray:
    return l2_normalize(np.asarray(v, dtype=np.float64))


def make_prototypes(features: list[np.ndarray]) -> list[ClassPrototype]:
    return [
        ClassPrototype(class_id=f"c{i}", feature=f, source_count=1)
        for i, f in enumerate(features)
    ]


# ---------------------------------------------------------------------------
# prototype building
# ---------------------------------------------------------------------------

def test_prototype_of_singleton_is_the_source():
    v = unit([1.0, 2.0, 2.0])
    proto = build_prototype("a", [v])
    np.testing.assert_allclose(proto.feature, v, atol=1e-7)
    assert proto.source_count == 1


def test_prototype_of_duplicates_is_the_source():
    v = unit([0.5, -0.5, 0.7])
    proto = build_prototype("a", [v, v.copy()])
    np.testing.assert_allclose(proto.feature, v, atol=1e-7)
    assert proto.source_count == 2


def test_prototype_of_orthonormal_pair():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    proto = build_prototype("a", [e1, e2])
    expected = np.array([1.0, 1.0]) / math.sqrt(2.0)
    np.testing.assert_allclose(proto.feature, expected, atol=1e-7)


def test_prototype_raw_mode_keeps_mean_norm():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    proto = build_prototype("a", [e1, e2], normalize=False)
    np.testing.assert_allclose(proto.feature, [0.5, 0.5], atol=1e-7)


def test_prototype_exclusion_equals_reduced_set():
    rng = np.random.default_rng(3)
    feats = [unit(rng.standard_normal(6)) for _ in range(5)]
    excluded = {1, 3}
    a = build_prototype("a", feats, excluded=excluded)
    b = build_prototype("a", [f for i, f in enumerate(feats) if i not in excluded])
    np.testing.assert_allclose(a.feature, b.feature, atol=1e-7)
    assert a.source_count == b.source_count == 3


def test_prototype_records_excluded_ids():
    feats = [unit([1, 0]), unit([0, 1])]
    proto = build_prototype("a", feats, excluded={1}, source_ids=["g1", "g2"])
    assert proto.excluded_sources == frozenset({"g2"})
    assert proto.source_count == 1


def test_prototype_empty_after_exclusion_is_calibration_error():
    feats = [unit([1, 0])]
    with pytest.raises(CalibrationError, match="regenerate"):
        build_prototype("a", feats, excluded={0})


def test_prototype_invalid_exclusion_index():
    with pytest.raises(ValueError):
        build_prototype("a", [unit([1, 0])], excluded={5})


def test_prototype_permutation_invariance():
    rng = np.random.default_rng(11)
    feats = [unit(rng.standard_normal(8)) for _ in range(6)]
    a = build_prototype("a", feats)
    b = build_prototype("a", list(reversed(feats)))
    np.testing.assert_allclose(a.feature, b.feature, atol=1e-7)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_score_identity_and_orthogonal():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    protos = make_prototypes([e1, e2])
    scores = score_all([e1], protos)
    assert scores.scores[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert scores.scores[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_score_matches_naive_double_loop():
    rng = np.random.default_rng(5)
    tests = [unit(rng.standard_normal(7)) for _ in range(4)]
    protos = make_prototypes([unit(rng.standard_normal(7)) for _ in range(3)])
    scores = score_all(tests, protos)
    for i, t in enumerate(tests):
        for c, p in enumerate(protos):
            naive = float(sum(a * b for a, b in zip(t, p.feature)))
            assert scores.scores[i, c] == pytest.approx(naive, abs=1e-6)


def test_score_dimension_mismatch():
    protos = make_prototypes([unit([1.0, 0.0])])
    with pytest.raises(ValueError):
        score_all([unit([1.0, 0.0, 0.0])], protos)


@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=2, max_value=16),
)
@settings(max_examples=40)
def test_scores_bounded_for_unit_inputs(n_test, n_proto, d):
    rng = np.random.default_rng(n_test * 1000 + n_proto * 10 + d)
    tests = [unit(rng.standard_normal(d)) for _ in range(n_test)]
    protos = make_prototypes([unit(rng.standard_normal(d)) for _ in range(n_proto)])
    scores = score_all(tests, protos)
    assert np.all(scores.scores <= 1.0 + 1e-6)
    assert np.all(scores.scores >= -1.0 - 1e-6)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def test_predict_simple_argmax():
    scores = ScoreMatrix(["t0"], ["a", "b"], np.array([[0.9, 0.1]]))
    (pred,) = predict(scores)
    assert pred.predicted_class == "a"
    assert pred.score == pytest.approx(0.9)
    assert pred.runner_up == "b"
    assert pred.margin == pytest.approx(0.8)


def test_predict_tie_goes_to_lexicographically_smaller():
    scores = ScoreMatrix(["t0"], ["b", "a"], np.array([[0.5, 0.5]]))
    (pred,) = predict(scores)
    assert pred.predicted_class == "a"
    assert pred.margin == pytest.approx(0.0)


def test_predict_single_class_has_no_runner_up():
    scores = ScoreMatrix(["t0"], ["only"], np.array([[0.3]]))
    (pred,) = predict(scores)
    assert pred.predicted_class == "only"
    assert pred.runner_up is None and pred.margin is None


def test_predict_matches_naive_row_scan():
    rng = np.random.default_rng(9)
    mat = rng.uniform(-1, 1, size=(10, 5))
    cols = [f"c{i}" for i in range(5)]
    preds = predict(ScoreMatrix([f"t{i}" for i in range(10)], cols, mat))
    for i, pred in enumerate(preds):
        # max() keeps the first maximal element, so scanning in lex class
        # order reproduces the documented tie-break
        lex_order = sorted(range(5), key=lambda c: cols[c])
        best = max(lex_order, key=lambda c: mat[i, c])
        assert pred.predicted_class == cols[best]


def test_predict_empty_matrix_rejected():
    with pytest.raises(ValueError):
        predict(ScoreMatrix([], [], np.zeros((0, 0))))


def test_score_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        ScoreMatrix(["t"], ["c"], np.array([[np.nan]]))


def test_argmax_invariant_under_positive_prototype_scaling():
    rng = np.random.default_rng(21)
    for trial in range(100):
        d = int(rng.integers(2, 10))
        n_c = int(rng.integers(2, 6))
        tests = [unit(rng.standard_normal(d)) for _ in range(4)]
        protos = make_prototypes([unit(rng.standard_normal(d)) for _ in range(n_c)])
        base = [p.predicted_class for p in predict(score_all(tests, protos))]
        k = float(rng.uniform(0.01, 50.0))
        scaled = [
            ClassPrototype(p.class_id, p.feature * k, p.source_count)
            for p in protos
        ]
        after = [p.predicted_class for p in predict(score_all(tests, scaled))]
        assert base == after


def test_oracle_equivalence_on_random_instances():
    # brute-force cosine-nearest-prototype oracle, ties skipped
    rng = np.random.default_rng(1234)
    checked = 0
    for _ in range(250):
        d = int(rng.integers(2, 17))
        n_c = int(rng.integers(1, 9))
        n_t = int(rng.integers(1, 33))
        tests = [unit(rng.standard_normal(d)) for _ in range(n_t)]
        protos = make_prototypes([unit(rng.standard_normal(d)) for _ in range(n_c)])
        preds = predict(score_all(tests, protos))
        for i, pred in enumerate(preds):
            cosines = {
                p.class_id: float(
                    np.dot(tests[i], p.feature)
                    / (np.linalg.norm(tests[i]) * np.linalg.norm(p.feature))
                )
                for p in protos
            }
            best = max(sorted(cosines), key=lambda c: cosines[c])
            if pred.margin is not None and abs(pred.margin) <= 1e-6:
                continue
            assert pred.predicted_class == best
            checked += 1
    assert checked >= 1000


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def _pred(image_id: str, cls: str) -> Prediction:
    return Prediction(image_id, cls, 1.0, None, None)


def test_accuracy_all_correct():
    preds = [_pred("t0", "a"), _pred("t1", "b")]
    report = accuracy(preds, {"t0": "a", "t1": "b"})
    assert report.overall == 1.0 and report.macro == 1.0


def test_accuracy_none_correct():
    preds = [_pred("t0", "b"), _pred("t1", "a")]
    report = accuracy(preds, {"t0": "a", "t1": "b"})
    assert report.overall == 0.0 and report.macro == 0.0


def test_accuracy_three_class_fixture():
    # A: 2/2, B: 1/2, C: 0/1 -> overall 3/5, macro (1 + 0.5 + 0)/3
    preds = [
        _pred("a0", "A"),
        _pred("a1", "A"),
        _pred("b0", "B"),
        _pred("b1", "A"),
        _pred("c0", "B"),
    ]
    truth = {"a0": "A", "a1": "A", "b0": "B", "b1": "B", "c0": "C"}
    report = accuracy(preds, truth)
    assert report.overall == 0.6
    assert report.macro == 0.5
    assert report.per_class == {"A": 1.0, "B": 0.5, "C": 0.0}


def test_accuracy_requires_ground_truth_for_every_prediction():
    with pytest.raises(ValueError):
        accuracy([_pred("t0", "a")], {})


def test_accuracy_empty_predictions_rejected():
    with pytest.raises(ValueError):
        accuracy([], {"t0": "a"})
