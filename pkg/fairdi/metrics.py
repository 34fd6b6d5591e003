"""
Evaluation and fairness metrics.

Classification: pooled AUC, per-group AUC, worst-case AUC, AUC gap, ES-AUC,
MeanPSD and MaxPSD. Segmentation: Dice and IoU per image, macro-averaged
overall and per group, with ES-Dice / ES-IoU.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image
from scipy import stats
from sklearn import metrics as skmetrics

from fairdi.errors import FairDiError, ErrorCode
from fairdi.results import ResultColumn, ResultSet
from fairdi.types import ColumnType, Task, parse_enum

logger = logging.getLogger(__name__)

RE_ATTRIBUTE = re.compile(r"^\d+$")


@dataclass
class ClassificationPredictions:
    scores: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.int64)
        n = self.scores.shape[0]
        if n == 0:
            raise FairDiError("Empty prediction set", code=ErrorCode.INVALID_INPUT)
        if self.scores.shape != (n,) or self.labels.shape != (n,) or self.attributes.shape != (n,):
            raise FairDiError(
                "Scores, labels and attributes must be 1-D and equally long",
                code=ErrorCode.SHAPE_ERROR,
            )
        if not np.isfinite(self.scores).all():
            raise FairDiError("Scores must be finite", code=ErrorCode.INVALID_INPUT)
        if not np.isin(self.labels, (0, 1)).all():
            raise FairDiError("Labels must be 0 or 1", code=ErrorCode.INVALID_INPUT)
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass
class SegmentationPredictions:
    preds: list[np.ndarray]
    truths: list[np.ndarray]
    attributes: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.preds = [np.asarray(m, dtype=bool) for m in self.preds]
        self.truths = [np.asarray(m, dtype=bool) for m in self.truths]
        self.attributes = np.asarray(self.attributes, dtype=np.int64)
        n = len(self.preds)
        if n == 0:
            raise FairDiError("Empty prediction set", code=ErrorCode.INVALID_INPUT)
        if len(self.truths) != n or self.attributes.shape != (n,):
            raise FairDiError(
                "Need one truth mask and one attribute per predicted mask",
                code=ErrorCode.SHAPE_ERROR,
            )
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]

    def __len__(self) -> int:
        return len(self.preds)


PredictionSet = Union[ClassificationPredictions, SegmentationPredictions]


def auc(scores: np.ndarray | Sequence[float], labels: np.ndarray | Sequence[int]) -> float:
    """
    Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
    positive scores higher, ties counting one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise FairDiError("Scores and labels must be equally long", code=ErrorCode.SHAPE_ERROR)
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int(scores.shape[0]) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise FairDiError(
            f"AUC is undefined with {n_pos} positives and {n_neg} negatives",
            code=ErrorCode.UNDEFINED_METRIC,
        )
    # average ranks credit ties with one half
    ranks = stats.rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def group_auc(
    scores: np.ndarray, labels: np.ndarray, attributes: np.ndarray
) -> dict[int, float]:
    out = {}
    for g in np.unique(attributes).tolist():
        mask = attributes == g
        try:
            out[g] = auc(scores[mask], labels[mask])
        except FairDiError as e:
            raise FairDiError(
                f"Group {g}: {e.msg}", code=e.code, attribute=g
            ) from e
    return out


def _group_values(per_group: Mapping[Any, float]) -> np.ndarray:
    if not per_group:
        raise FairDiError("No groups given", code=ErrorCode.INVALID_INPUT)
    return np.array(list(per_group.values()), dtype=np.float64)


def es_auc(overall: float, per_group: Mapping[Any, float]) -> float:
    """overall / (1 + mean_g |overall - AUC_g|)"""
    values = _group_values(per_group)
    return float(overall / (1.0 + np.mean(np.abs(overall - values))))


def psd(overall: float, per_group: Mapping[Any, float]) -> tuple[float, float]:
    """(MeanPSD, MaxPSD): population std and range of group values over overall"""
    values = _group_values(per_group)
    if overall == 0:
        raise FairDiError(
            "Parity measures are undefined for an overall score of 0",
            code=ErrorCode.UNDEFINED_METRIC,
        )
    spread = float(values.max() - values.min())
    if values.shape[0] == 2:
        # population std of two points is half their range
        mean_psd = spread / 2.0 / overall
    else:
        mean_psd = float(np.std(values)) / overall
    return mean_psd, spread / overall


def _check_masks(y: np.ndarray, y_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=bool)
    y_hat = np.asarray(y_hat, dtype=bool)
    if y.shape != y_hat.shape:
        raise FairDiError(
            f"Mask shapes differ: {y.shape} vs {y_hat.shape}", code=ErrorCode.SHAPE_ERROR
        )
    return y, y_hat


def dice(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = _check_masks(y, y_hat)
    total = int(y.sum()) + int(y_hat.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, y_hat).sum()) / total


def iou(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = _check_masks(y, y_hat)
    union = int(np.logical_or(y, y_hat).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(y, y_hat).sum()) / union


def es_overlap(overall: float, per_group: Mapping[Any, float]) -> float:
    """overall / (1 + Delta) where Delta sums |overall - score_g| over groups"""
    values = _group_values(per_group)
    return float(overall / (1.0 + np.sum(np.abs(overall - values))))


@dataclass
class MetricsReport:
    metric: str
    overall: float
    per_group: dict[int, float]
    worst_case: float
    gap: float
    equity_scaled: float
    mean_psd: float | None = None
    max_psd: float | None = None
    n_samples: int = 0
    secondary: dict[str, MetricsReport] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "overall": self.overall,
            "per_group": {str(g): v for g, v in self.per_group.items()},
            "worst_case": self.worst_case,
            "gap": self.gap,
            "equity_scaled": self.equity_scaled,
            "mean_psd": self.mean_psd,
            "max_psd": self.max_psd,
            "n_samples": self.n_samples,
            "secondary": {k: v.to_json() for k, v in self.secondary.items()},
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> MetricsReport:
        return cls(
            metric=data["metric"],
            overall=data["overall"],
            per_group={int(g): v for g, v in data["per_group"].items()},
            worst_case=data["worst_case"],
            gap=data["gap"],
            equity_scaled=data["equity_scaled"],
            mean_psd=data.get("mean_psd"),
            max_psd=data.get("max_psd"),
            n_samples=data.get("n_samples", 0),
            secondary={k: cls.from_json(v) for k, v in data.get("secondary", {}).items()},
        )

    def reports(self) -> list[MetricsReport]:
        return [self, *self.secondary.values()]


def summarise(
    metric: str,
    overall: float,
    per_group: Mapping[int, float],
    with_psd: bool,
    n_samples: int = 0,
) -> MetricsReport:
    """Derive worst case, gap, equity scaling and (optionally) PSD from group scores"""
    values = _group_values(per_group)
    if with_psd:
        scaled = es_auc(overall, per_group)
        mean_psd, max_psd = psd(overall, per_group)
    else:
        scaled = es_overlap(overall, per_group)
        mean_psd = max_psd = None
    return MetricsReport(
        metric=metric,
        overall=float(overall),
        per_group={int(g): float(v) for g, v in per_group.items()},
        worst_case=float(values.min()),
        gap=float(values.max() - values.min()),
        equity_scaled=scaled,
        mean_psd=mean_psd,
        max_psd=max_psd,
        n_samples=n_samples,
    )


def _segmentation_report(preds: SegmentationPredictions) -> MetricsReport:
    scores = {
        "dice": np.array([dice(t, p) for t, p in zip(preds.truths, preds.preds)]),
        "iou": np.array([iou(t, p) for t, p in zip(preds.truths, preds.preds)]),
    }
    reports = {}
    for name, values in scores.items():
        per_group = {
            g: float(values[preds.attributes == g].mean())
            for g in np.unique(preds.attributes).tolist()
        }
        reports[name] = summarise(
            name, float(values.mean()), per_group, with_psd=False, n_samples=len(preds)
        )
    primary = reports.pop("dice")
    primary.secondary = reports
    return primary


def report(preds: PredictionSet, task: Task | str | None = None) -> MetricsReport:
    """
    Overall and per-group scores with every derived fairness column.

    Classification uses pooled AUC over all samples as the overall score.
    Segmentation reports Dice, with the IoU report under `secondary["iou"]`.
    """
    if task is None:
        task = (
            Task.CLASSIFICATION
            if isinstance(preds, ClassificationPredictions)
            else Task.SEGMENTATION
        )
    task = parse_enum(Task, task)  # type: ignore[assignment]
    if task is Task.CLASSIFICATION:
        if not isinstance(preds, ClassificationPredictions):
            raise FairDiError(
                "Classification needs score predictions", code=ErrorCode.INVALID_INPUT
            )
        overall = auc(preds.scores, preds.labels)
        per_group = group_auc(preds.scores, preds.labels, preds.attributes)
        return summarise("auc", overall, per_group, with_psd=True, n_samples=len(preds))
    if not isinstance(preds, SegmentationPredictions):
        raise FairDiError("Segmentation needs mask predictions", code=ErrorCode.INVALID_INPUT)
    return _segmentation_report(preds)


REPORT_COLUMNS = [
    ResultColumn("method", ColumnType.STRING),
    ResultColumn("metric", ColumnType.STRING),
    ResultColumn("overall", ColumnType.FLOAT),
    ResultColumn("worst_case", ColumnType.FLOAT),
    ResultColumn("equity_scaled", ColumnType.FLOAT),
    ResultColumn("gap", ColumnType.FLOAT),
    ResultColumn("mean_psd", ColumnType.SCIENTIFIC),
    ResultColumn("max_psd", ColumnType.SCIENTIFIC),
]


def report_table(reports: Mapping[str, MetricsReport]) -> ResultSet:
    """One row per (method, metric), then one column per group"""
    groups = sorted({g for r in reports.values() for sub in r.reports() for g in sub.per_group})
    columns = [*REPORT_COLUMNS, *(ResultColumn(f"group_{g}", ColumnType.FLOAT) for g in groups)]
    rows = []
    for method, rep in reports.items():
        for sub in rep.reports():
            rows.append(
                [
                    method,
                    sub.metric,
                    sub.overall,
                    sub.worst_case,
                    sub.equity_scaled,
                    sub.gap,
                    sub.mean_psd,
                    sub.max_psd,
                    *(sub.per_group.get(g) for g in groups),
                ]
            )
    return ResultSet(rows=rows, columns=columns)


def roc_points(preds: ClassificationPredictions) -> pd.DataFrame:
    """ROC curve points, pooled and per group, for offline plotting"""
    frames = []
    subsets = [("overall", np.ones(len(preds), dtype=bool))] + [
        (str(g), preds.attributes == g) for g in np.unique(preds.attributes).tolist()
    ]
    for name, mask in subsets:
        labels = preds.labels[mask]
        if labels.min() == labels.max():
            logger.warning("Skipping ROC points for group %s: single class", name)
            continue
        fpr, tpr, thresholds = skmetrics.roc_curve(labels, preds.scores[mask])
        frames.append(
            pd.DataFrame({"group": name, "fpr": fpr, "tpr": tpr, "threshold": thresholds})
        )
    return pd.concat(frames, ignore_index=True)


def pareto_front(points: Mapping[str, tuple[float, float]]) -> list[str]:
    """
    Names of the non-dominated (overall, gap) points: no other point has an
    overall score at least as high and a gap at least as low, with one of the
    two strictly better.
    """
    front = []
    for name, (overall, gap) in points.items():
        dominated = any(
            o >= overall and g <= gap and (o > overall or g < gap)
            for other, (o, g) in points.items()
            if other != name
        )
        if not dominated:
            front.append(name)
    return front


def _line_error(path: str | Path, msg: str, ok: np.ndarray) -> FairDiError:
    line = int(np.flatnonzero(~ok)[0]) + 2
    return FairDiError(f"{path}: {msg} on line {line}", code=ErrorCode.PARSE_ERROR, line=line)


def _read_csv(path: str | Path, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise FairDiError(f"No such file: {path}", code=ErrorCode.IO_ERROR) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FairDiError(f"Malformed CSV {path}: {e}", code=ErrorCode.PARSE_ERROR, line=1) from e
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise FairDiError(
            f"{path}: missing columns {missing} (line 1)", code=ErrorCode.PARSE_ERROR, line=1
        )
    if frame.empty:
        raise FairDiError(f"{path}: no rows", code=ErrorCode.PARSE_ERROR, line=2)
    return frame


def _attributes(path: str | Path, frame: pd.DataFrame) -> np.ndarray:
    attributes = frame["attribute"].str.strip()
    ok = attributes.str.match(RE_ATTRIBUTE).to_numpy(dtype=bool)
    if not ok.all():
        raise _line_error(path, "unknown attribute token", ok)
    return attributes.astype(np.int64).to_numpy()


def load_predictions(path: str | Path) -> ClassificationPredictions:
    """Classification predictions CSV with columns id, score, label, attribute"""
    frame = _read_csv(path, ["id", "score", "label", "attribute"])
    labels = frame["label"].str.strip()
    ok = labels.isin(["0", "1"]).to_numpy()
    if not ok.all():
        raise _line_error(path, "label must be 0 or 1", ok)
    scores = pd.to_numeric(frame["score"], errors="coerce").to_numpy(dtype=np.float64)
    ok = np.isfinite(scores)
    if not ok.all():
        raise _line_error(path, "score is not a finite number", ok)
    return ClassificationPredictions(
        scores=scores,
        labels=labels.astype(np.int64).to_numpy(),
        attributes=_attributes(path, frame),
        ids=frame["id"].tolist(),
    )


def save_predictions(preds: ClassificationPredictions, path: str | Path) -> None:
    frame = pd.DataFrame(
        {
            "id": preds.ids,
            "score": preds.scores,
            "label": preds.labels,
            "attribute": preds.attributes,
        }
    )
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise FairDiError(f"Cannot write {path}: {e}", code=ErrorCode.IO_ERROR) from e


def decode_rle(height: int, width: int, runs: str) -> np.ndarray:
    """
    Decode 1-based row-major "start length" pairs.
    For example:
        >>> decode_rle(2, 3, "2 2 6 1").astype(int).tolist()
        [[0, 1, 1], [0, 0, 1]]
    """
    flat = np.zeros(height * width, dtype=bool)
    values = [int(v) for v in runs.split()]
    if len(values) % 2:
        raise FairDiError("Run-length pairs are incomplete", code=ErrorCode.PARSE_ERROR)
    for start, length in zip(values[::2], values[1::2]):
        if start < 1 or length < 0 or start - 1 + length > flat.size:
            raise FairDiError(
                f"Run {start} {length} falls outside a {height}x{width} mask",
                code=ErrorCode.PARSE_ERROR,
            )
        flat[start - 1 : start - 1 + length] = True
    return flat.reshape(height, width)


def encode_rle(mask: np.ndarray) -> str:
    flat = np.concatenate([[False], np.asarray(mask, dtype=bool).ravel(), [False]])
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts, ends = edges[::2], edges[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def load_mask(path: str | Path) -> np.ndarray:
    """A binary mask from a PGM/PBM (any Pillow raster) or a run-length CSV"""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        frame = _read_csv(path, ["height", "width", "runs"])
        row = frame.iloc[0]
        try:
            return decode_rle(int(row["height"]), int(row["width"]), str(row["runs"]))
        except ValueError as e:
            raise FairDiError(f"{path}: {e}", code=ErrorCode.PARSE_ERROR, line=2) from e
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("L")) > 0
    except FileNotFoundError as e:
        raise FairDiError(f"No such mask: {path}", code=ErrorCode.IO_ERROR) from e
    except OSError as e:
        raise FairDiError(f"Unreadable mask {path}: {e}", code=ErrorCode.PARSE_ERROR) from e


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    mask = np.asarray(mask, dtype=bool)
    if path.suffix.lower() == ".csv":
        pd.DataFrame(
            [{"height": mask.shape[0], "width": mask.shape[1], "runs": encode_rle(mask)}]
        ).to_csv(path, index=False)
        return
    # uint8 arrays map to 8-bit grayscale
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def load_segmentation(index_path: str | Path) -> SegmentationPredictions:
    """
    Index CSV with columns id, pred_path, truth_path, attribute. Mask paths
    are relative to the index file's directory.
    """
    index_path = Path(index_path)
    frame = _read_csv(index_path, ["id", "pred_path", "truth_path", "attribute"])
    attributes = _attributes(index_path, frame)
    root = index_path.parent
    preds = [load_mask(root / p) for p in frame["pred_path"]]
    truths = [load_mask(root / p) for p in frame["truth_path"]]
    return SegmentationPredictions(
        preds=preds, truths=truths, attributes=attributes, ids=frame["id"].tolist()
    )
