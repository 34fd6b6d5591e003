"""
Student objective: temperature-scaled KL towards the teacher of each sample's
own cohort, mixed by lambda with the FIS loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from fairdi.errors import FairDiError, ErrorCode
from fairdi.fairloss import FisConfig, fis_weights_from_losses
from fairdi.nnkernel import (
    DenseNet,
    Gradients,
    Head,
    cross_entropy,
    forward_cached,
    kl_rows,
    logit_gradients,
    softmax_temp,
)
from fairdi.types import Batch, KlDirection, LossKind, parse_enum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.95
    tau: float = 1.5
    fis: FisConfig = field(default_factory=lambda: FisConfig(c=0.5))
    kl_direction: KlDirection = KlDirection.STUDENT_FIRST
    temp_on_student: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise FairDiError(
                f"lambda must lie in [0, 1], got {self.lam}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if not self.tau > 0:
            raise FairDiError(
                f"tau must be positive, got {self.tau}", code=ErrorCode.INVALID_PARAMETER
            )
        object.__setattr__(
            self, "kl_direction", parse_enum(KlDirection, self.kl_direction)
        )


def _check_distribution(p: np.ndarray, name: str) -> None:
    if (
        not np.isfinite(p).all()
        or (p < 0).any()
        or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    ):
        raise FairDiError(f"{name} is not a probability distribution", code=ErrorCode.INVALID_INPUT)


def kl_divergence(p: np.ndarray | Sequence[float], q: np.ndarray | Sequence[float]) -> Any:
    """KL(p || q) along the last axis; a float for single distributions"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise FairDiError(
            f"Distributions of shape {p.shape} and {q.shape} differ",
            code=ErrorCode.INVALID_INPUT,
        )
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    kl = kl_rows(p, q)
    if kl.ndim == 0:
        return float(kl)
    return kl


class StudentTerms(NamedTuple):
    loss: float
    kl: np.ndarray
    ce: np.ndarray
    weights: np.ndarray
    dlogits: np.ndarray
    features: np.ndarray


def teacher_logits(
    features: np.ndarray, attributes: np.ndarray, teacher_heads: Mapping[int, Head]
) -> np.ndarray:
    """Each row scored by the teacher of its own attribute"""
    groups = sorted(set(np.unique(attributes).tolist()))
    missing = [g for g in groups if g not in teacher_heads]
    if missing:
        raise FairDiError(
            f"No teacher head for attribute {missing[0]}",
            code=ErrorCode.CONFIGURATION_ERROR,
            attribute=missing[0],
        )
    n_classes = next(iter(teacher_heads.values())).weight.shape[0]
    out = np.empty((features.shape[0], n_classes))
    for g in groups:
        mask = attributes == g
        out[mask] = teacher_heads[g].logits(features[mask])
    return out


def _student_terms(
    batch: Batch,
    backbone: DenseNet,
    student_head: Head,
    teacher_heads: Mapping[int, Head],
    cfg: DistillConfig,
) -> StudentTerms:
    n = len(batch)
    if n == 0:
        raise FairDiError("Cannot compute a loss on an empty batch", code=ErrorCode.EMPTY_BATCH)
    cache = forward_cached(backbone, student_head, batch.x)
    reference = softmax_temp(
        teacher_logits(cache.features, batch.attributes, teacher_heads), cfg.tau
    )

    student_temperature = cfg.tau if cfg.temp_on_student else 1.0
    kind = (
        LossKind.KL_STUDENT_FIRST
        if cfg.kl_direction is KlDirection.STUDENT_FIRST
        else LossKind.KL_TEACHER_FIRST
    )
    kl, dkl = logit_gradients(kind, cache.logits, student_temperature, reference)

    probs = softmax_temp(cache.logits, student_head.temperature)
    ce = np.atleast_1d(cross_entropy(probs, batch.targets, soft=True))
    weights = fis_weights_from_losses(ce, batch.attributes, cfg.fis)

    kd_scale = cfg.lam * cfg.tau**2
    per_sample = kd_scale * kl + (1.0 - cfg.lam) * weights * ce
    loss = float(np.mean(per_sample))
    if not np.isfinite(loss):
        raise FairDiError("Student loss is not finite", code=ErrorCode.NUMERIC_ERROR)

    dce = (probs - batch.targets) / student_head.temperature
    dlogits = (kd_scale * dkl + (1.0 - cfg.lam) * weights[:, None] * dce) / n
    return StudentTerms(loss, kl, ce, weights, dlogits, cache.features)


def student_loss(
    batch: Batch,
    backbone: DenseNet,
    student_head: Head,
    teacher_heads: Mapping[int, Head],
    cfg: DistillConfig,
) -> float:
    """
    Mean over the batch of
        lam * tau^2 * KL(student || teacher_a) + (1 - lam) * w * CE

    where teacher_a is the teacher of the sample's attribute, softened by tau.
    The student is softened too only when `cfg.temp_on_student` is set, and
    the KL arguments swap under `KlDirection.TEACHER_FIRST`.
    """
    return _student_terms(batch, backbone, student_head, teacher_heads, cfg).loss


def student_loss_and_grad(
    batch: Batch,
    backbone: DenseNet,
    student_head: Head,
    teacher_heads: Mapping[int, Head],
    cfg: DistillConfig,
) -> tuple[float, Gradients]:
    """Student loss and its gradient, which is nonzero for the student head only"""
    terms = _student_terms(batch, backbone, student_head, teacher_heads, cfg)
    head_grad = (terms.dlogits.T @ terms.features, terms.dlogits.sum(axis=0))
    logger.debug(
        "Distillation batch: kl=%.4g ce=%.4g loss=%.4g",
        terms.kl.mean(),
        terms.ce.mean(),
        terms.loss,
    )
    return terms.loss, Gradients(
        layers=[None] * len(backbone.layers), head=head_grad, loss=terms.loss
    )
