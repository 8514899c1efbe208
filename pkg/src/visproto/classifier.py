"""Class prototypes and nearest-prototype classification.

A class prototype is the (re-normalized) mean of the features of that
class's generated reference images. Real images are classified by inner
product against every prototype, row-wise argmax, with deterministic
lexicographic tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CalibrationError(ValueError):
    """Raised when calibration exclusions leave a class without sources."""


@dataclass
class ClassPrototype:
    class_id: str
    feature: np.ndarray
    source_count: int
    excluded_sources: frozenset[str] = field(default_factory=frozenset)


@dataclass
class ScoreMatrix:
    """Dense similarity matrix: one row per test image, one column per class."""

    rows: list[str]
    cols: list[str]
    scores: np.ndarray

    def __post_init__(self) -> None:
        if self.scores.shape != (len(self.rows), len(self.cols)):
            raise ValueError("score matrix shape does not match row/col labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("score matrix contains non-finite entries")


@dataclass
class Prediction:
    test_image_id: str
    predicted_class: str
    score: float
    runner_up: str | None
    margin: float | None


@dataclass
class AccuracyReport:
    overall: float
    macro: float
    per_class: dict[str, float]


def build_prototype(
    class_id: str,
    source_features: list[np.ndarray],
    excluded: set[int] | frozenset[int] = frozenset(),
    source_ids: list[str] | None = None,
    *,
    normalize: bool = True,
) -> ClassPrototype:
    """Average the non-excluded source features into one class prototype.

    ``excluded`` holds indices into ``source_features``; ``source_ids``,
    when given, names the sources so exclusions are recorded by id.
    The mean is re-normalized to unit length unless ``normalize=False``.
    """
    if not source_features:
        raise ValueError("at least one source feature is required")
    if source_ids is not None and len(source_ids) != len(source_features):
        raise ValueError("source_ids must parallel source_features")
    bad = [i for i in excluded if i < 0 or i >= len(source_features)]
    if bad:
        raise ValueError(f"excluded indices out of range: {bad}")

    included = [
        np.asarray(f, dtype=np.float64)
        for i, f in enumerate(source_features)
        if i not in excluded
    ]
    if not included:
        raise CalibrationError(
            f"class {class_id!r}: every source is excluded by calibration; "
            "regenerate corrected images before rebuilding the prototype"
        )
    dim = included[0].shape
    if any(f.shape != dim for f in included):
        raise ValueError("source features must share one dimension")

    mean = np.mean(np.stack(included, axis=0), axis=0)
    if normalize:
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise ValueError(f"class {class_id!r}: mean feature has zero norm")
        mean = mean / norm

    if source_ids is not None:
        excluded_names = frozenset(source_ids[i] for i in excluded)
    else:
        excluded_names = frozenset(str(i) for i in excluded)
    return ClassPrototype(
        class_id=class_id,
        feature=mean.astype(np.float32),
        source_count=len(included),
        excluded_sources=excluded_names,
    )


def score_all(
    test_features: list[np.ndarray],
    prototypes: list[ClassPrototype],
    test_ids: list[str] | None = None,
) -> ScoreMatrix:
    """Inner product of every test feature against every class prototype."""
    if not prototypes:
        raise ValueError("at least one prototype is required")
    if not test_features:
        raise ValueError("at least one test feature is required")
    if test_ids is None:
        test_ids = [str(i) for i in range(len(test_features))]
    if len(test_ids) != len(test_features):
        raise ValueError("test_ids must parallel test_features")

    proto_mat = np.stack(
        [np.asarray(p.feature, dtype=np.float64) for p in prototypes], axis=0
    )
    test_mat = np.stack(
        [np.asarray(f, dtype=np.float64) for f in test_features], axis=0
    )
    if test_mat.shape[1] != proto_mat.shape[1]:
        raise ValueError(
            f"feature dimension mismatch: test d={test_mat.shape[1]}, "
            f"prototype d={proto_mat.shape[1]}"
        )
    scores = test_mat @ proto_mat.T
    return ScoreMatrix(
        rows=list(test_ids),
        cols=[p.class_id for p in prototypes],
        scores=scores,
    )


def predict(scores: ScoreMatrix) -> list[Prediction]:
    """Row-wise argmax over the score matrix.

    Ties go to the lexicographically smallest class id, so predictions are
    deterministic regardless of column order.
    """
    if scores.scores.size == 0:
        raise ValueError("score matrix is empty")
    # Scan columns in lexicographic class order; first strict max wins.
    order = sorted(range(len(scores.cols)), key=lambda c: scores.cols[c])
    predictions = []
    for r, image_id in enumerate(scores.rows):
        row = scores.scores[r]
        best_c = order[0]
        for c in order[1:]:
            if row[c] > row[best_c]:
                best_c = c
        runner: str | None = None
        margin: float | None = None
        if len(order) > 1:
            runner_c = None
            for c in order:
                if c == best_c:
                    continue
                if runner_c is None or row[c] > row[runner_c]:
                    runner_c = c
            runner = scores.cols[runner_c]
            margin = float(row[best_c] - row[runner_c])
        predictions.append(
            Prediction(
                test_image_id=image_id,
                predicted_class=scores.cols[best_c],
                score=float(row[best_c]),
                runner_up=runner,
                margin=margin,
            )
        )
    return predictions


def accuracy(
    predictions: list[Prediction], ground_truth: dict[str, str]
) -> AccuracyReport:
    """Overall, per-class, and macro accuracy of the predictions.

    Overall is the mean correctness indicator; per-class restricts it to
    each true class; macro is the unweighted mean of the per-class values
    over classes that have at least one test image.
    """
    if not predictions:
        raise ValueError("prediction set is empty")
    missing = [p.test_image_id for p in predictions if p.test_image_id not in ground_truth]
    if missing:
        raise ValueError(f"predictions without ground truth: {missing[:5]}")

    correct_by_class: dict[str, int] = {}
    total_by_class: dict[str, int] = {}
    n_correct = 0
    for pred in predictions:
        true_class = ground_truth[pred.test_image_id]
        total_by_class[true_class] = total_by_class.get(true_class, 0) + 1
        if pred.predicted_class == true_class:
            correct_by_class[true_class] = correct_by_class.get(true_class, 0) + 1
            n_correct += 1

    per_class = {
        cls: correct_by_class.get(cls, 0) / total
        for cls, total in sorted(total_by_class.items())
    }
    overall = n_correct / len(predictions)
    macro = sum(per_class.values()) / len(per_class)
    return AccuracyReport(overall=overall, macro=macro, per_class=per_class)
