from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Sequence

import numpy as np

from fairdi.errors import FairDiError, ErrorCode

N_CLASSES = 2


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"


class OptimizerKind(Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class WeightRescale(Enum):
    SUM_TO_N = "sum_to_N"
    SUM_TO_1 = "sum_to_1"


class KlDirection(Enum):
    STUDENT_FIRST = "student_first"
    TEACHER_FIRST = "teacher_first"


class LossKind(Enum):
    CROSS_ENTROPY = "cross_entropy"
    KL_STUDENT_FIRST = "kl_student_first"
    KL_TEACHER_FIRST = "kl_teacher_first"


class Stage(Enum):
    ERM = "erm"
    STEP0_FIS = "step0_fis"
    STEP1_TEACHER = "step1_teacher"
    STEP2_STUDENT = "step2_student"


class Method(Enum):
    ERM = "erm"
    FIS = "fis"
    FAIRDI = "fairdi"


class Task(Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"


class ColumnType(IntEnum):
    """How a report column renders its values"""

    STRING = 0
    INT = 1
    FLOAT = 2
    SCIENTIFIC = 3
    BOOL = 4


def parse_enum(enum: type, value: object) -> Enum:
    """
    Look up an enum member by value or by name.

    Args:
        enum: enum class
        value: member, value or (case-insensitive) name
    Returns:
        the enum member
    """
    if isinstance(value, enum):
        return value  # type: ignore[return-value]
    for member in enum:  # type: ignore[var-annotated]
        if member.value == value or member.name.lower() == str(value).lower():
            return member  # type: ignore[no-any-return]
    choices = ", ".join(str(m.value) for m in enum)  # type: ignore[attr-defined]
    raise FairDiError(
        f"Invalid {enum.__name__} {value!r}; expected one of: {choices}",
        code=ErrorCode.CONFIGURATION_ERROR,
    )


@dataclass
class Dataset:
    """
    Samples of (feature vector, binary label, sensitive attribute).

    In image mode `features` still holds flat rows, laid out as row-major
    image_side x image_side grids.
    """

    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    image_side: int | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.int64)
        if self.features.ndim != 2:
            raise FairDiError(
                f"Features must be a 2-D array, got {self.features.ndim} dimensions",
                code=ErrorCode.SHAPE_ERROR,
            )
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.attributes.shape != (n,):
            raise FairDiError(
                "Labels and attributes must have one entry per sample",
                code=ErrorCode.SHAPE_ERROR,
            )
        if n and not np.isin(self.labels, (0, 1)).all():
            raise FairDiError("Labels must be 0 or 1", code=ErrorCode.INVALID_INPUT)
        if n and self.attributes.min() < 0:
            raise FairDiError(
                "Attributes must be nonnegative integers", code=ErrorCode.INVALID_INPUT
            )
        if self.image_side is not None and self.image_side**2 != self.n_features:
            raise FairDiError(
                f"Image side {self.image_side} does not match {self.n_features} features",
                code=ErrorCode.SHAPE_ERROR,
            )

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def groups(self) -> list[int]:
        return [int(g) for g in np.unique(self.attributes)]

    def subset(self, index: Sequence[int] | np.ndarray) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            features=self.features[index],
            labels=self.labels[index],
            attributes=self.attributes[index],
            image_side=self.image_side,
        )

    def cohort(self, group: int) -> Dataset:
        return self.subset(np.flatnonzero(self.attributes == group))

    def targets(self) -> np.ndarray:
        return one_hot(self.labels)

    def to_batch(self) -> Batch:
        return Batch(
            x=self.features,
            targets=self.targets(),
            attributes=self.attributes,
            image_side=self.image_side,
        )

    def equals(self, other: Dataset) -> bool:
        return (
            self.image_side == other.image_side
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
        )


@dataclass
class Batch:
    """A mini-batch. `targets` are (possibly soft) label distributions."""

    x: np.ndarray
    targets: np.ndarray
    attributes: np.ndarray
    image_side: int | None = None

    def __len__(self) -> int:
        return int(self.x.shape[0])


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def image_side_for(n_features: int) -> int | None:
    side = math.isqrt(n_features)
    return side if side * side == n_features else None
