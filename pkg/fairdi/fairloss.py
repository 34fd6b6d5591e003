"""
Fair Identity Scaling: per-sample weights that mix individual difficulty with
group discrepancy, and the weighted batch objective built on them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import special, stats

from fairdi.errors import FairDiError, ErrorCode
from fairdi.nnkernel import (
    DenseNet,
    ForwardCache,
    Gradients,
    Head,
    backprop,
    cross_entropy,
    forward_cached,
    softmax_temp,
)
from fairdi.types import Batch, WeightRescale, parse_enum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FisConfig:
    c: float = 0.5
    weight_rescale: WeightRescale = WeightRescale.SUM_TO_N

    def __post_init__(self) -> None:
        if not 0.0 <= self.c <= 1.0:
            raise FairDiError(
                f"c must lie in [0, 1], got {self.c}", code=ErrorCode.INVALID_PARAMETER
            )
        object.__setattr__(
            self, "weight_rescale", parse_enum(WeightRescale, self.weight_rescale)
        )


@dataclass
class LossDistribution:
    values: np.ndarray
    group_id: int | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.isfinite(self.values).all():
            raise FairDiError(
                "Loss values must be finite", code=ErrorCode.INVALID_INPUT, group=self.group_id
            )

    def __len__(self) -> int:
        return int(self.values.shape[0])


Losses = Union[LossDistribution, np.ndarray, Sequence[float]]


def _values(losses: Losses) -> np.ndarray:
    if isinstance(losses, LossDistribution):
        return losses.values
    return LossDistribution(np.asarray(losses)).values


def individual_weights(batch_losses: np.ndarray | Sequence[float]) -> np.ndarray:
    """s^I: softmax over the batch's per-sample losses"""
    losses = np.asarray(batch_losses, dtype=np.float64)
    if losses.size == 0:
        raise FairDiError("Cannot weight an empty batch", code=ErrorCode.EMPTY_BATCH)
    if not np.isfinite(losses).all():
        raise FairDiError("Losses must be finite", code=ErrorCode.INVALID_INPUT)
    return special.softmax(losses)


def wasserstein1d(a: Losses, b: Losses) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions"""
    u = _values(a)
    v = _values(b)
    if u.size == 0 or v.size == 0:
        raise FairDiError(
            "Wasserstein distance needs two nonempty distributions",
            code=ErrorCode.EMPTY_DISTRIBUTION,
        )
    return float(stats.wasserstein_distance(u, v))


def group_weights(
    losses: np.ndarray | Sequence[float],
    attributes: np.ndarray | Sequence[int],
    groups_present: Iterable[int] | None = None,
) -> dict[int, float]:
    """
    s^G: softmax over groups of the distance between the whole batch's loss
    distribution and each group's.

    Groups listed in `groups_present` that have no sample in the batch are
    left out of the softmax.
    """
    losses = np.asarray(losses, dtype=np.float64)
    attributes = np.asarray(attributes, dtype=np.int64)
    if losses.size == 0:
        raise FairDiError("Cannot weight an empty batch", code=ErrorCode.EMPTY_BATCH)
    if attributes.shape != losses.shape:
        raise FairDiError(
            "Need one attribute per loss", code=ErrorCode.SHAPE_ERROR
        )
    in_batch = set(np.unique(attributes).tolist())
    wanted = sorted(in_batch if groups_present is None else set(groups_present))
    groups = [g for g in wanted if g in in_batch]
    absent = [g for g in wanted if g not in in_batch]
    if absent:
        logger.debug("Groups absent from batch, excluded from s^G: %s", absent)
    if not groups:
        raise FairDiError("No listed group has samples in the batch", code=ErrorCode.EMPTY_BATCH)

    overall = LossDistribution(losses)
    distances = np.array(
        [
            wasserstein1d(overall, LossDistribution(losses[attributes == g], group_id=g))
            for g in groups
        ]
    )
    return dict(zip(groups, special.softmax(distances).tolist()))


def _rescale(raw: np.ndarray, rescale: WeightRescale) -> np.ndarray:
    n = raw.shape[0]
    if np.all(raw == raw[0]):
        # exactly uniform, so c=0 on equal losses reduces to the plain mean
        return np.full(n, 1.0 if rescale is WeightRescale.SUM_TO_N else 1.0 / n)
    total = raw.sum()
    if rescale is WeightRescale.SUM_TO_N:
        return raw * (n / total)
    return raw / total


def fis_weights_from_losses(
    losses: np.ndarray, attributes: np.ndarray, cfg: FisConfig
) -> np.ndarray:
    s_ind = individual_weights(losses)
    s_grp: dict[int, float] = {}
    if cfg.c > 0:
        s_grp = group_weights(losses, attributes)
        s_grp_per_sample = np.array([s_grp[int(a)] for a in attributes])
    else:
        s_grp_per_sample = np.zeros_like(s_ind)
    raw = (1.0 - cfg.c) * s_ind + cfg.c * s_grp_per_sample
    weights = _rescale(raw, cfg.weight_rescale)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(
            "FIS weights: min=%.4g max=%.4g mean=%.4g s^G=%s",
            weights.min(),
            weights.max(),
            weights.mean(),
            {g: round(s, 4) for g, s in s_grp.items()},
        )
    return weights


def _batch_losses(
    batch: Batch, net: DenseNet, head: Head
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    cache = forward_cached(net, head, batch.x)
    probs = softmax_temp(cache.logits, head.temperature)
    losses = np.atleast_1d(cross_entropy(probs, batch.targets, soft=True))
    return losses, probs, cache


def fis_weights(batch: Batch, net: DenseNet, head: Head, cfg: FisConfig) -> np.ndarray:
    """w = (1 - c) s^I + c s^G(a), rescaled, for the model's current losses"""
    if len(batch) == 0:
        raise FairDiError("Cannot weight an empty batch", code=ErrorCode.EMPTY_BATCH)
    losses, _, _ = _batch_losses(batch, net, head)
    return fis_weights_from_losses(losses, batch.attributes, cfg)


def fis_loss(
    batch: Batch, net: DenseNet, head: Head, cfg: FisConfig
) -> tuple[float, np.ndarray]:
    """(1/N) sum_i w_i * loss_i, together with the weights w"""
    if len(batch) == 0:
        raise FairDiError("Cannot compute a loss on an empty batch", code=ErrorCode.EMPTY_BATCH)
    losses, _, _ = _batch_losses(batch, net, head)
    weights = fis_weights_from_losses(losses, batch.attributes, cfg)
    loss = float(np.mean(weights * losses))
    if not np.isfinite(loss):
        raise FairDiError("FIS loss is not finite", code=ErrorCode.NUMERIC_ERROR)
    return loss, weights


def fis_loss_and_grad(
    batch: Batch, net: DenseNet, head: Head, cfg: FisConfig
) -> tuple[float, np.ndarray, Gradients]:
    """FIS loss, weights and gradient from a single forward pass"""
    if len(batch) == 0:
        raise FairDiError("Cannot compute a loss on an empty batch", code=ErrorCode.EMPTY_BATCH)
    losses, probs, cache = _batch_losses(batch, net, head)
    weights = fis_weights_from_losses(losses, batch.attributes, cfg)
    loss = float(np.mean(weights * losses))
    if not np.isfinite(loss):
        raise FairDiError("FIS loss is not finite", code=ErrorCode.NUMERIC_ERROR)
    n = len(batch)
    dlogits = (probs - batch.targets) / head.temperature * (weights / n)[:, None]
    grads = backprop(net, head, cache, dlogits)
    grads.loss = loss
    return loss, weights, grads
