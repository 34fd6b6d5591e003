from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from PIL import Image
from sklearn.metrics import roc_auc_score

from fairdi.errors import FairDiError, ErrorCode
from fairdi.metrics import (
    REPORT_COLUMNS,
    ClassificationPredictions,
    MetricsReport,
    SegmentationPredictions,
    auc,
    decode_rle,
    dice,
    encode_rle,
    es_auc,
    es_overlap,
    group_auc,
    iou,
    load_mask,
    load_predictions,
    load_segmentation,
    pareto_front,
    psd,
    report,
    report_table,
    roc_points,
    save_mask,
    save_predictions,
)
from tests.fixtures import GROUP_AUC, PREDICTIONS, SEGMENTATION_INDEX


def brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize(
    "scores, labels, expected",
    [
        ((0.9, 0.8, 0.2, 0.1), (1, 1, 0, 0), 1.0),
        ((0.1, 0.2, 0.8, 0.9), (1, 1, 0, 0), 0.0),
        ((0.5, 0.5, 0.5, 0.5), (1, 0, 1, 0), 0.5),
        ((0.9, 0.3, 0.6, 0.6), (1, 0, 1, 0), 0.875),
    ],
)
def test_auc(scores: tuple, labels: tuple, expected: float) -> None:
    assert auc(scores, labels) == expected


def test_auc_matches_pair_counting(rng: np.random.Generator) -> None:
    for _ in range(200):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 5, size=n) / 4.0
        got = auc(scores, labels)
        assert got == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)
        assert got == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def pair_counting_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    diff = scores[labels == 1][:, None] - scores[labels == 0][None, :]
    return float(np.mean((diff > 0) + 0.5 * (diff == 0)))


@pytest.mark.parametrize(
    "levels, positive_rate",
    [
        (None, 0.5),
        (None, 0.05),
        (2, 0.5),
        (3, 0.3),
        (5, 0.5),
        (20, 0.9),
    ],
)
def test_auc_matches_oracles_at_scale(
    rng: np.random.Generator, levels: int | None, positive_rate: float
) -> None:
    for _ in range(5):
        labels = (rng.random(500) < positive_rate).astype(int)
        labels[:2] = (0, 1)
        scores = rng.normal(size=500) + 0.8 * labels
        if levels is not None:
            scores = np.digitize(scores, np.quantile(scores, np.linspace(0, 1, levels + 1)[1:-1]))
        got = auc(scores, labels)
        assert got == pytest.approx(pair_counting_auc(scores, labels), abs=1e-12)
        assert got == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_auc_constant_scores_at_scale(rng: np.random.Generator) -> None:
    labels = rng.integers(0, 2, size=500)
    labels[:2] = (0, 1)
    assert auc(np.full(500, 0.3), labels) == 0.5


@pytest.mark.parametrize("label", [0, 1])
def test_auc_single_class_at_scale(rng: np.random.Generator, label: int) -> None:
    with pytest.raises(FairDiError) as ctx:
        auc(rng.random(500), np.full(500, label))
    assert ctx.value.code == ErrorCode.UNDEFINED_METRIC


@pytest.mark.parametrize(
    "scores, labels, code",
    [
        ((0.1, 0.2), (1, 1), ErrorCode.UNDEFINED_METRIC),
        ((0.1, 0.2), (0, 0), ErrorCode.UNDEFINED_METRIC),
        ((0.1, 0.2, 0.3), (0, 1), ErrorCode.SHAPE_ERROR),
    ],
)
def test_auc_errors(scores: tuple, labels: tuple, code: ErrorCode) -> None:
    with pytest.raises(FairDiError) as ctx:
        auc(scores, labels)
    assert ctx.value.code == code


def test_group_auc_undefined_group() -> None:
    scores = np.array([0.9, 0.1, 0.7, 0.6])
    labels = np.array([1, 0, 1, 1])
    attributes = np.array([0, 0, 1, 1])
    with pytest.raises(FairDiError) as ctx:
        group_auc(scores, labels, attributes)
    assert ctx.value.code == ErrorCode.UNDEFINED_METRIC
    assert ctx.value.details["attribute"] == 1


def test_fairness_columns_of_published_results() -> None:
    frame = pd.read_csv(GROUP_AUC)
    for row in frame.itertuples():
        per_group = {0: row.min_auc, 1: row.min_auc + row.gap}
        mean_psd, max_psd = psd(row.overall, per_group)
        assert es_auc(row.overall, per_group) == pytest.approx(row.es_auc, abs=5e-4), row.task
        assert mean_psd == pytest.approx(row.mean_psd, abs=5e-4), row.task
        assert max_psd == pytest.approx(row.max_psd, abs=5e-4), row.task


def test_es_auc_equal_groups() -> None:
    assert es_auc(0.8, {0: 0.8, 1: 0.8, 2: 0.8}) == 0.8
    assert es_auc(0.9, {0: 0.8, 1: 1.0}) == pytest.approx(0.9 / 1.1)


def test_two_group_psd_ratio(rng: np.random.Generator) -> None:
    for _ in range(1000):
        a, b, overall = rng.uniform(0.01, 1.0, size=3)
        mean_psd, max_psd = psd(overall, {0: a, 1: b})
        assert max_psd == 2 * mean_psd
        assert mean_psd == pytest.approx(np.std([a, b]) / overall, rel=1e-12)


def test_psd_many_groups() -> None:
    values = {0: 0.7, 1: 0.8, 2: 0.9}
    mean_psd, max_psd = psd(0.8, values)
    assert mean_psd == pytest.approx(np.std([0.7, 0.8, 0.9]) / 0.8)
    assert max_psd == pytest.approx(0.2 / 0.8)


def test_psd_errors() -> None:
    with pytest.raises(FairDiError) as ctx:
        psd(0.0, {0: 0.0, 1: 0.0})
    assert ctx.value.code == ErrorCode.UNDEFINED_METRIC
    with pytest.raises(FairDiError) as ctx:
        psd(0.5, {})
    assert ctx.value.code == ErrorCode.INVALID_INPUT


@pytest.mark.parametrize(
    "truth, pred, expected_dice, expected_iou",
    [
        ([[1, 1], [0, 0]], [[1, 1], [0, 0]], 1.0, 1.0),
        ([[1, 1], [0, 0]], [[0, 0], [1, 1]], 0.0, 0.0),
        ([[0, 0], [0, 0]], [[0, 0], [0, 0]], 1.0, 1.0),
        ([[1, 1], [1, 1]], [[1, 1], [0, 0]], 2 / 3, 0.5),
        ([[1, 1, 0]], [[0, 1, 1]], 0.5, 1 / 3),
    ],
)
def test_dice_and_iou(truth: list, pred: list, expected_dice: float, expected_iou: float) -> None:
    assert dice(np.array(truth), np.array(pred)) == pytest.approx(expected_dice)
    assert iou(np.array(truth), np.array(pred)) == pytest.approx(expected_iou)


def test_mask_shape_mismatch() -> None:
    for fn in (dice, iou):
        with pytest.raises(FairDiError) as ctx:
            fn(np.zeros((2, 2)), np.zeros((2, 3)))
        assert ctx.value.code == ErrorCode.SHAPE_ERROR


@pytest.mark.parametrize(
    "overall, groups, expected",
    [
        (0.8532, (0.8386, 0.8527, 0.8555), 0.8386),
        (0.7543, (0.7359, 0.7552, 0.7591), 0.7365),
    ],
)
def test_es_overlap_published_values(overall: float, groups: tuple, expected: float) -> None:
    per_group = dict(enumerate(groups))
    assert es_overlap(overall, per_group) == pytest.approx(expected, abs=1e-4)


def test_segmentation_fixture_report() -> None:
    preds = load_segmentation(SEGMENTATION_INDEX)
    assert preds.ids == ["a", "b", "c"]
    assert preds.attributes.tolist() == [0, 1, 1]

    rep = report(preds)
    assert rep.metric == "dice"
    assert rep.overall == pytest.approx(8 / 9)
    assert rep.per_group == pytest.approx({0: 2 / 3, 1: 1.0})
    assert rep.equity_scaled == pytest.approx(2 / 3, abs=1e-12)
    assert rep.mean_psd is None and rep.max_psd is None
    assert rep.n_samples == 3

    iou_report = rep.secondary["iou"]
    assert iou_report.overall == pytest.approx(5 / 6)
    assert iou_report.per_group == pytest.approx({0: 0.5, 1: 1.0})
    assert iou_report.equity_scaled == pytest.approx(5 / 9, abs=1e-12)


def test_predictions_fixture_report() -> None:
    rep = report(load_predictions(PREDICTIONS))
    assert rep.metric == "auc"
    assert rep.overall == 0.875
    assert rep.per_group == {0: 1.0, 1: 0.5}
    assert rep.worst_case == 0.5
    assert rep.gap == 0.5
    assert rep.equity_scaled == pytest.approx(0.7)
    assert rep.mean_psd == pytest.approx(0.25 / 0.875)
    assert rep.max_psd == pytest.approx(0.5 / 0.875)
    assert rep.n_samples == 8


def test_report_task_mismatch() -> None:
    preds = load_predictions(PREDICTIONS)
    with pytest.raises(FairDiError) as ctx:
        report(preds, task="segmentation")
    assert ctx.value.code == ErrorCode.INVALID_INPUT
    with pytest.raises(FairDiError) as ctx:
        report(preds, task="detection")
    assert ctx.value.code == ErrorCode.CONFIGURATION_ERROR


def test_metrics_report_json() -> None:
    rep = report(load_segmentation(SEGMENTATION_INDEX))
    data = rep.to_json()
    assert data["per_group"] == {"0": pytest.approx(2 / 3), "1": 1.0}
    assert data["secondary"]["iou"]["metric"] == "iou"
    assert MetricsReport.from_json(data) == rep


def test_report_table() -> None:
    table = report_table(
        {
            "erm": report(load_predictions(PREDICTIONS)),
            "fairdi": report(load_segmentation(SEGMENTATION_INDEX)),
        }
    )
    names = [c.name for c in table.columns]
    assert names == [c.name for c in REPORT_COLUMNS] + ["group_0", "group_1"]
    assert [row[:2] for row in table.rows] == [
        ["erm", "auc"],
        ["fairdi", "dice"],
        ["fairdi", "iou"],
    ]
    assert table.rows[0][2] == 0.875
    assert table.rows[1][6] is None


def test_roc_points(caplog: pytest.LogCaptureFixture) -> None:
    frame = roc_points(load_predictions(PREDICTIONS))
    assert list(frame.columns) == ["group", "fpr", "tpr", "threshold"]
    assert set(frame["group"]) == {"overall", "0", "1"}
    for _, points in frame.groupby("group"):
        assert points["fpr"].iloc[-1] == 1.0
        assert points["tpr"].iloc[-1] == 1.0
        assert points["fpr"].is_monotonic_increasing

    preds = ClassificationPredictions(
        scores=[0.9, 0.2, 0.7, 0.6], labels=[1, 0, 1, 1], attributes=[0, 0, 1, 1]
    )
    with caplog.at_level(logging.WARNING, logger="fairdi.metrics"):
        frame = roc_points(preds)
    assert set(frame["group"]) == {"overall", "0"}
    assert "single class" in caplog.text


def test_pareto_front() -> None:
    points = {
        "erm": (0.90, 0.05),
        "fis": (0.89, 0.03),
        "fairdi": (0.91, 0.02),
        "swad": (0.91, 0.04),
        "tie": (0.91, 0.02),
    }
    assert pareto_front(points) == ["fairdi", "tie"]
    assert pareto_front({"a": (0.8, 0.1), "b": (0.9, 0.2)}) == ["a", "b"]


@pytest.mark.parametrize(
    "kwargs, code",
    [
        ({"scores": [], "labels": [], "attributes": []}, ErrorCode.INVALID_INPUT),
        ({"scores": [0.1, 0.2], "labels": [0], "attributes": [0, 1]}, ErrorCode.SHAPE_ERROR),
        ({"scores": [0.1, np.nan], "labels": [0, 1], "attributes": [0, 1]}, ErrorCode.INVALID_INPUT),
        ({"scores": [0.1, 0.2], "labels": [0, 2], "attributes": [0, 1]}, ErrorCode.INVALID_INPUT),
    ],
)
def test_classification_predictions_validation(kwargs: dict, code: ErrorCode) -> None:
    with pytest.raises(FairDiError) as ctx:
        ClassificationPredictions(**kwargs)
    assert ctx.value.code == code


def test_segmentation_predictions_validation() -> None:
    with pytest.raises(FairDiError) as ctx:
        SegmentationPredictions([], [], np.array([]))
    assert ctx.value.code == ErrorCode.INVALID_INPUT
    with pytest.raises(FairDiError) as ctx:
        SegmentationPredictions([np.zeros((2, 2))], [], np.array([0]))
    assert ctx.value.code == ErrorCode.SHAPE_ERROR


def test_predictions_round_trip(tmp_path: Path) -> None:
    preds = load_predictions(PREDICTIONS)
    save_predictions(preds, tmp_path / "out.csv")
    again = load_predictions(tmp_path / "out.csv")
    assert again.ids == preds.ids
    assert np.array_equal(again.scores, preds.scores)
    assert np.array_equal(again.labels, preds.labels)
    assert np.array_equal(again.attributes, preds.attributes)


@pytest.mark.parametrize(
    "content, line",
    [
        ("id,score,label,attribute\na,0.5,1,0\nb,0.4,2,1\n", 3),
        ("id,score,label,attribute\na,0.5,1,0\nb,0.4,0,1\nc,nan,0,1\n", 4),
        ("id,score,label,attribute\na,0.5,1,0\nb,0.4,0,male\n", 3),
        ("id,score,label\na,0.5,1\n", 1),
        ("id,score,label,attribute\n", 2),
    ],
)
def test_load_predictions_parse_errors(tmp_path: Path, content: str, line: int) -> None:
    path = tmp_path / "preds.csv"
    path.write_text(content)
    with pytest.raises(FairDiError) as ctx:
        load_predictions(path)
    assert ctx.value.code == ErrorCode.PARSE_ERROR
    assert ctx.value.details["line"] == line


def test_load_predictions_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FairDiError) as ctx:
        load_predictions(tmp_path / "nope.csv")
    assert ctx.value.code == ErrorCode.IO_ERROR


def test_run_length_codec() -> None:
    mask = decode_rle(4, 4, "1 4")
    assert mask[0].all() and not mask[1:].any()
    assert encode_rle(mask) == "1 4"
    assert encode_rle(np.zeros((3, 3))) == ""
    assert not decode_rle(3, 3, "").any()
    assert encode_rle(decode_rle(3, 4, "2 3 9 4")) == "2 3 9 4"


@pytest.mark.parametrize("runs", ["1", "0 2", "15 3", "3 -1", "a b"])
def test_run_length_errors(runs: str) -> None:
    with pytest.raises((FairDiError, ValueError)):
        decode_rle(4, 4, runs)


@pytest.mark.parametrize("suffix", [".pgm", ".png", ".csv"])
def test_mask_files(tmp_path: Path, suffix: str) -> None:
    mask = decode_rle(5, 4, "2 3 11 2 17 4")
    path = tmp_path / f"mask{suffix}"
    save_mask(mask, path)
    assert np.array_equal(load_mask(path), mask)


def test_load_bitmap_mask(tmp_path: Path) -> None:
    mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
    Image.fromarray(mask).save(tmp_path / "mask.pbm")
    assert np.array_equal(load_mask(tmp_path / "mask.pbm"), mask)


def test_load_mask_errors(tmp_path: Path) -> None:
    with pytest.raises(FairDiError) as ctx:
        load_mask(tmp_path / "missing.pgm")
    assert ctx.value.code == ErrorCode.IO_ERROR

    (tmp_path / "junk.pgm").write_text("not an image")
    with pytest.raises(FairDiError) as ctx:
        load_mask(tmp_path / "junk.pgm")
    assert ctx.value.code == ErrorCode.PARSE_ERROR
