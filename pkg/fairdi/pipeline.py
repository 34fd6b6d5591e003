"""
Training stages: the ERM baseline and the three FairDi steps.

Step 0 trains backbone and head with the FIS loss, step 1 fits one head per
cohort on the frozen backbone, step 2 distils the cohort teachers into a
fresh student head.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd

from fairdi import context
from fairdi.distillation import DistillConfig, student_loss_and_grad
from fairdi.errors import FairDiError, ErrorCode
from fairdi.fairloss import FisConfig, fis_loss_and_grad
from fairdi.metrics import ClassificationPredictions, MetricsReport, auc, group_auc, report
from fairdi.nnkernel import (
    DenseNet,
    Gradients,
    Head,
    OptimizerState,
    backward,
    forward,
    model_parameters,
    optimizer_step,
    step_decay,
)
from fairdi.settings import Settings, train_settings
from fairdi.types import (
    Batch,
    Dataset,
    KlDirection,
    OptimizerKind,
    Stage,
    WeightRescale,
    parse_enum,
)
from fairdi.utils import apportion, check_ratios, spawn_generators

logger = logging.getLogger(__name__)

# ERM and step 0 share a stream so both start from the same initialisation
STAGE_STREAMS = {
    Stage.ERM: 0,
    Stage.STEP0_FIS: 0,
    Stage.STEP1_TEACHER: 1,
    Stage.STEP2_STUDENT: 2,
}

LossFn = Callable[[Batch, DenseNet, Head], Tuple[float, Gradients]]


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class TrainPlan:
    stage: Stage
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 64
    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lr_step: int | None = 10
    lr_gamma: float = 0.1
    c: float = 0.5
    weight_rescale: WeightRescale = WeightRescale.SUM_TO_N
    lam: float | None = None
    tau: float | None = None
    kl_direction: KlDirection = KlDirection.STUDENT_FIRST
    temp_on_student: bool = False
    cutmix: bool = True
    cutmix_beta: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    rng_seed: int = 42
    group: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", parse_enum(Stage, self.stage))
        object.__setattr__(self, "optimizer", parse_enum(OptimizerKind, self.optimizer))
        object.__setattr__(
            self, "weight_rescale", parse_enum(WeightRescale, self.weight_rescale)
        )
        object.__setattr__(self, "kl_direction", parse_enum(KlDirection, self.kl_direction))
        if self.patience < 1:
            raise FairDiError(
                f"patience must be at least 1, got {self.patience}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if self.max_epochs < 0 or self.batch_size < 1:
            raise FairDiError(
                "max_epochs must be nonnegative and batch_size positive",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if not self.cutmix_beta > 0:
            raise FairDiError(
                f"cutmix_beta must be positive, got {self.cutmix_beta}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if self.stage is Stage.STEP2_STUDENT and (self.lam is None or self.tau is None):
            raise FairDiError(
                "A student plan needs lam and tau", code=ErrorCode.CONFIGURATION_ERROR
            )
        # the loss configs range-check c, lam and tau
        _ = self.distill if self.stage is Stage.STEP2_STUDENT else self.fis

    @property
    def fis(self) -> FisConfig:
        return FisConfig(c=self.c, weight_rescale=self.weight_rescale)

    @property
    def distill(self) -> DistillConfig:
        assert self.lam is not None and self.tau is not None
        return DistillConfig(
            lam=self.lam,
            tau=self.tau,
            fis=self.fis,
            kl_direction=self.kl_direction,
            temp_on_student=self.temp_on_student,
        )

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def rngs(self) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
        """(initialisation, batching, CutMix) streams for this stage and group"""
        key = [self.rng_seed, STAGE_STREAMS[self.stage], -1 if self.group is None else self.group]
        # SeedSequence entropy must be nonnegative
        init, batches, mix = spawn_generators([k + 1 for k in key], 3)
        return init, batches, mix

    @classmethod
    def for_stage(
        cls,
        stage: Stage | str,
        settings: Settings | None = None,
        **overrides: Any,
    ) -> TrainPlan:
        """
        Plan with the stage's protocol defaults: Adam with step decay for ERM
        and step 0, constant-rate SGD with momentum and a longer epoch cap for
        the heads, c = 0 for the teachers.
        """
        settings = settings if settings is not None else train_settings()
        stage = parse_enum(Stage, stage)  # type: ignore[assignment]
        common: dict[str, Any] = {
            "stage": stage,
            "max_epochs": settings["max_epochs"],
            "patience": settings["patience"],
            "batch_size": settings["batch_size"],
            "momentum": settings["momentum"],
            "lr_gamma": settings["lr_gamma"],
            "weight_rescale": settings["weight_rescale"],
            "cutmix": settings["cutmix"],
            "cutmix_beta": settings["cutmix_beta"],
            "hidden": tuple(settings["hidden"]),
            "rng_seed": settings["seed"],
        }
        if stage in (Stage.ERM, Stage.STEP0_FIS):
            common.update(
                optimizer=OptimizerKind.ADAM,
                learning_rate=settings["backbone_lr"],
                weight_decay=settings["backbone_weight_decay"],
                lr_step=settings["lr_step"],
                c=settings["c"],
            )
        else:
            common.update(
                optimizer=OptimizerKind.SGD_MOMENTUM,
                learning_rate=settings["head_lr"],
                weight_decay=settings["head_weight_decay"],
                max_epochs=settings["head_max_epochs"],
                lr_step=None,
                c=0.0 if stage is Stage.STEP1_TEACHER else settings["c"],
            )
        if stage is Stage.STEP2_STUDENT:
            common.update(
                lam=settings["lam"],
                tau=settings["tau"],
                kl_direction=settings["kl_direction"],
                temp_on_student=settings["temp_on_student"],
            )
        common.update(overrides)
        return cls(**common)

    def to_json(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for key in ("stage", "optimizer", "weight_rescale", "kl_direction"):
            out[key] = out[key].value
        out["hidden"] = list(self.hidden)
        return out


def plans_from_settings(settings: Settings) -> dict[Stage, TrainPlan]:
    return {stage: TrainPlan.for_stage(stage, settings) for stage in Stage}


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_overall_auc: float
    val_worst_auc: float
    val_score: float
    learning_rate: float


@dataclass
class ExperimentRecord:
    name: str
    stage: Stage
    group: int | None = None
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoint_id: str | None = None
    stopped_early: bool = False
    # excluded from equality and from to_json()
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "stage": self.stage.value,
            "group": self.group,
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "checkpoint_id": self.checkpoint_id,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ExperimentRecord:
        return cls(
            name=data["name"],
            stage=Stage(data["stage"]),
            group=data.get("group"),
            epochs=[EpochLog(**e) for e in data.get("epochs", [])],
            best_epoch=data.get("best_epoch"),
            checkpoint_id=data.get("checkpoint_id"),
            stopped_early=data.get("stopped_early", False),
        )

    def epochs_frame(self) -> pd.DataFrame:
        columns = ["epoch", "train_loss", "val_overall_auc", "val_worst_auc"]
        return pd.DataFrame([dataclasses.asdict(e) for e in self.epochs], columns=columns)

    def write_csv(self, path: str | Path) -> None:
        try:
            self.epochs_frame().to_csv(path, index=False, float_format="%.17g")
        except OSError as e:
            raise FairDiError(f"Cannot write {path}: {e}", code=ErrorCode.IO_ERROR) from e


@dataclass
class EarlyStopping:
    """Tracks the best validation score; signals a stop after `patience` misses"""

    patience: int
    best_score: float = float("-inf")
    best_epoch: int | None = None
    bad_epochs: int = 0

    def update(self, epoch: int, score: float) -> bool:
        if self.best_epoch is None or score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class Validation(NamedTuple):
    score: float
    overall: float = float("nan")
    worst: float = float("nan")


Validator = Callable[[DenseNet, Head], Validation]


def predict(net: DenseNet, head: Head, dataset: Dataset) -> ClassificationPredictions:
    """Positive-class probabilities for every sample"""
    if not len(dataset):
        raise FairDiError("Cannot predict on an empty dataset", code=ErrorCode.INVALID_INPUT)
    probs = forward(net, head, dataset.features).probs
    return ClassificationPredictions(
        scores=probs[:, 1], labels=dataset.labels, attributes=dataset.attributes
    )


def evaluate(net: DenseNet, head: Head, dataset: Dataset) -> MetricsReport:
    return report(predict(net, head, dataset))


def worst_case_validator(dataset: Dataset) -> Validator:
    """Selection on the worst per-group AUC, also logging the pooled AUC"""

    def validate(net: DenseNet, head: Head) -> Validation:
        try:
            preds = predict(net, head, dataset)
            overall = auc(preds.scores, preds.labels)
            worst = min(group_auc(preds.scores, preds.labels, preds.attributes).values())
        except FairDiError as e:
            if e.code not in (ErrorCode.UNDEFINED_METRIC, ErrorCode.INVALID_INPUT):
                raise
            logger.warning("Validation metric undefined: %s", e.msg)
            return Validation(float("-inf"))
        return Validation(worst, overall, worst)

    return validate


def cohort_validator(dataset: Dataset, group: int) -> Validator:
    cohort = dataset.cohort(group)

    def validate(net: DenseNet, head: Head) -> Validation:
        try:
            preds = predict(net, head, cohort)
            score = auc(preds.scores, preds.labels)
        except FairDiError as e:
            if e.code not in (ErrorCode.UNDEFINED_METRIC, ErrorCode.INVALID_INPUT):
                raise
            logger.warning("Cohort %s validation metric undefined: %s", group, e.msg)
            return Validation(float("-inf"))
        return Validation(score, score, score)

    return validate


def _stratum_keys(dataset: Dataset, by_attribute: bool) -> np.ndarray:
    if by_attribute:
        return dataset.labels * (int(dataset.attributes.max()) + 1) + dataset.attributes
    return dataset.labels.copy()


def _allocate(stratum_sizes: Sequence[int], targets: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """
    Per-stratum split counts: each stratum's floor share, then leftovers
    handed out one per (stratum, split) towards the largest remaining
    split deficit, so every count stays within one sample of its exact share.
    """
    sizes = np.asarray(stratum_sizes, dtype=np.int64)
    exact = np.outer(sizes, ratios)
    counts = np.floor(exact).astype(np.int64)
    deficit = np.asarray(targets, dtype=np.int64) - counts.sum(axis=0)
    leftover = sizes - counts.sum(axis=1)
    remainder = exact - counts
    for s in sorted(range(len(sizes)), key=lambda i: (-leftover[i], i)):
        order = sorted(
            (j for j in range(len(ratios)) if ratios[j] > 0),
            key=lambda j: (-deficit[j], -remainder[s, j], j),
        )
        for j in order:
            if leftover[s] == 0:
                break
            if deficit[j] > 0:
                counts[s, j] += 1
                deficit[j] -= 1
                leftover[s] -= 1
        # infeasible unit allocation; keep the split sizes exact anyway
        for j in order:
            while leftover[s] and deficit[j] > 0:
                counts[s, j] += 1
                deficit[j] -= 1
                leftover[s] -= 1
    return counts


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 42) -> Splits:
    """
    Disjoint train/val/test split stratified by (label, attribute).

    Falls back to stratifying by label alone, with a warning, when some
    (label, attribute) stratum is too small to reach every nonempty split.
    """
    ratios = tuple(float(r) for r in ratios)
    check_ratios(ratios)
    if len(ratios) != 3:
        raise FairDiError(
            f"Need train, val and test ratios, got {list(ratios)}",
            code=ErrorCode.INVALID_PARAMETER,
        )
    n = len(dataset)
    if n == 0:
        raise FairDiError("Cannot split an empty dataset", code=ErrorCode.INVALID_INPUT)
    targets = apportion(n, ratios)
    n_splits = sum(1 for r in ratios if r > 0)

    keys = _stratum_keys(dataset, by_attribute=True)
    strata, stratum_sizes = np.unique(keys, return_counts=True)
    if stratum_sizes.min() < n_splits:
        logger.warning(
            "Stratum of %d samples cannot reach %d splits; stratifying by label only",
            int(stratum_sizes.min()),
            n_splits,
        )
        keys = _stratum_keys(dataset, by_attribute=False)
        strata, stratum_sizes = np.unique(keys, return_counts=True)

    counts = _allocate(stratum_sizes, targets, ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for s, key in enumerate(strata):
        members = rng.permutation(np.flatnonzero(keys == key))
        bounds = np.cumsum(counts[s])[:-1]
        for j, chunk in enumerate(np.split(members, bounds)):
            parts[j].append(chunk)
    train, val, test = (
        dataset.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64))
        for p in parts
    )
    logger.debug("Split sizes: %d/%d/%d", len(train), len(val), len(test))
    return Splits(train, val, test)


def stratified_batches(
    dataset: Dataset, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """
    Index batches for one epoch, dealt round-robin so every group is spread
    over the batches.

    Groups are shuffled and queued one after another, and queue slot k goes
    to batch k mod batch_count, so a group with at least batch_count members
    lands in every batch. When batch_size >= 2 * group_count, a smaller group
    is topped up with re-drawn members until it fills one slot per batch;
    every sample still appears at least once, and a batch may then exceed
    batch_size by one sample per topped-up group.
    """
    n = len(dataset)
    if n == 0:
        return []
    if batch_size < 1:
        raise FairDiError(
            f"batch_size must be positive, got {batch_size}", code=ErrorCode.INVALID_PARAMETER
        )
    n_batches = -(-n // batch_size)
    recycle = batch_size >= 2 * len(dataset.groups)
    queue = []
    for g in dataset.groups:
        members = np.flatnonzero(dataset.attributes == g)
        order = rng.permutation(members)
        if recycle and members.size < n_batches:
            rounds = -(-n_batches // members.size)
            refills = [rng.permutation(members) for _ in range(rounds - 1)]
            order = np.concatenate([order, *refills])[:n_batches]
            logger.debug(
                "Group %s: %d samples re-drawn to reach %d batches",
                g,
                n_batches - members.size,
                n_batches,
            )
        queue.append(order)
    dealt = np.concatenate(queue)
    slots = np.arange(dealt.size) % n_batches
    batches = [rng.permutation(dealt[slots == b]) for b in range(n_batches)]
    return [batches[i] for i in rng.permutation(n_batches)]


def cutmix(
    batch: Batch,
    beta: float,
    rng: np.random.Generator,
    lam: float | None = None,
    partners: Sequence[int] | np.ndarray | None = None,
) -> Batch:
    """
    Paste a region of a partner sample into each sample.

    Image batches swap a box of area ratio 1 - lam, flat batches a contiguous
    span. Targets mix as lam * own + (1 - lam) * partner, with lam recomputed
    from the integer region actually pasted. Each sample keeps its own
    attribute. `lam` and `partners` override the random draws.
    """
    n = len(batch)
    if n <= 1:
        return batch
    if partners is None:
        partners = rng.permutation(n)
    partners = np.asarray(partners, dtype=np.int64)
    draws = rng.beta(beta, beta, size=n) if lam is None else np.full(n, float(lam))

    x = batch.x.copy()
    mixed = np.empty(n)
    side = batch.image_side
    dim = batch.x.shape[1]
    for i in range(n):
        cut = np.sqrt(1.0 - draws[i]) if side else 1.0 - draws[i]
        if side:
            h = int(round(side * cut))
            top = int(rng.integers(0, side - h + 1))
            left = int(rng.integers(0, side - h + 1))
            image = x[i].reshape(side, side)
            partner = batch.x[partners[i]].reshape(side, side)
            image[top : top + h, left : left + h] = partner[top : top + h, left : left + h]
            mixed[i] = 1.0 - h * h / (side * side)
        else:
            width = int(round(dim * cut))
            start = int(rng.integers(0, dim - width + 1))
            x[i, start : start + width] = batch.x[partners[i], start : start + width]
            mixed[i] = 1.0 - width / dim
    targets = mixed[:, None] * batch.targets + (1.0 - mixed[:, None]) * batch.targets[partners]
    return Batch(x=x, targets=targets, attributes=batch.attributes, image_side=side)


class StageResult(NamedTuple):
    backbone: DenseNet
    head: Head
    record: ExperimentRecord


def _check_stage(plan: TrainPlan, *stages: Stage) -> None:
    if plan.stage not in stages:
        raise FairDiError(
            f"Plan for {plan.stage.value} cannot run {stages[0].value}",
            code=ErrorCode.CONFIGURATION_ERROR,
        )


def _fit(
    name: str,
    net: DenseNet,
    head: Head,
    train: Dataset,
    plan: TrainPlan,
    loss_fn: LossFn,
    validator: Validator,
    batch_rng: np.random.Generator,
    mix_rng: np.random.Generator,
) -> ExperimentRecord:
    """
    Epoch loop shared by every stage. Restores the best-validation parameters
    before returning; leaves the initial parameters when no epoch ran.
    """
    token = context.stage.set(name)
    started = time.perf_counter()
    record = ExperimentRecord(name=name, stage=plan.stage, group=plan.group)
    try:
        if not len(train):
            raise FairDiError(f"{name}: no training samples", code=ErrorCode.INVALID_INPUT)
        params = model_parameters(net, head)
        state = plan.optimizer_state()
        stopper = EarlyStopping(plan.patience)
        best: list[np.ndarray] | None = None

        for epoch in range(1, plan.max_epochs + 1):
            state.learning_rate = step_decay(
                plan.learning_rate, epoch, plan.lr_step, plan.lr_gamma
            )
            losses = []
            for b, index in enumerate(stratified_batches(train, plan.batch_size, batch_rng)):
                batch = train.subset(index).to_batch()
                if plan.cutmix:
                    batch = cutmix(batch, plan.cutmix_beta, mix_rng)
                try:
                    loss, grads = loss_fn(batch, net, head)
                    if not np.isfinite(loss):
                        raise FairDiError("Loss is not finite", code=ErrorCode.NUMERIC_ERROR)
                    optimizer_step(state, params, grads.flat())
                except FairDiError as e:
                    if e.code is not ErrorCode.NUMERIC_ERROR:
                        raise
                    raise FairDiError(
                        f"{name} aborted at epoch {epoch}, batch {b}: {e.msg}",
                        code=ErrorCode.TRAINING_ABORTED,
                        epoch=epoch,
                        batch=b,
                        **e.details,
                    ) from e
                losses.append(loss)

            val = validator(net, head)
            if stopper.update(epoch, val.score):
                best = [p.copy() for p in params]
            record.epochs.append(
                EpochLog(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)),
                    val_overall_auc=float(val.overall),
                    val_worst_auc=float(val.worst),
                    val_score=float(val.score),
                    learning_rate=state.learning_rate,
                )
            )
            logger.info(
                "epoch %d: train_loss=%.4f val=%.4f best=%s",
                epoch,
                record.epochs[-1].train_loss,
                val.score,
                stopper.best_epoch,
            )
            if stopper.should_stop:
                record.stopped_early = epoch < plan.max_epochs
                break

        if best is not None:
            for param, saved in zip(params, best):
                param[...] = saved
        record.best_epoch = stopper.best_epoch
        if stopper.best_epoch is not None:
            record.checkpoint_id = f"{name}@{stopper.best_epoch}"
    finally:
        record.wall_time = time.perf_counter() - started
        context.stage.reset(token)
    return record


def _init_model(plan: TrainPlan, in_dim: int, rng: np.random.Generator) -> tuple[DenseNet, Head]:
    net = DenseNet.init([in_dim, *plan.hidden], rng)
    head = Head.init(net.out_dim, rng)
    return net, head


def _frozen_copy(backbone: DenseNet) -> DenseNet:
    frozen = backbone.copy()
    frozen.freeze()
    return frozen


def train_erm(data: Splits, plan: TrainPlan, validator: Validator | None = None) -> StageResult:
    """Backbone and head trained on the plain mean cross-entropy"""
    _check_stage(plan, Stage.ERM)
    init_rng, batch_rng, mix_rng = plan.rngs()
    net, head = _init_model(plan, data.train.n_features, init_rng)

    def loss_fn(batch: Batch, net: DenseNet, head: Head) -> tuple[float, Gradients]:
        grads = backward(net, head, batch, np.ones(len(batch)))
        return grads.loss, grads

    record = _fit(
        "erm",
        net,
        head,
        data.train,
        plan,
        loss_fn,
        validator or worst_case_validator(data.val),
        batch_rng,
        mix_rng,
    )
    return StageResult(net, head, record)


def train_stage0(data: Splits, plan: TrainPlan, validator: Validator | None = None) -> StageResult:
    """Step 0: backbone and head trained end to end on the FIS loss"""
    _check_stage(plan, Stage.STEP0_FIS)
    init_rng, batch_rng, mix_rng = plan.rngs()
    net, head = _init_model(plan, data.train.n_features, init_rng)
    fis = plan.fis

    def loss_fn(batch: Batch, net: DenseNet, head: Head) -> tuple[float, Gradients]:
        loss, _, grads = fis_loss_and_grad(batch, net, head, fis)
        return loss, grads

    record = _fit(
        "step0",
        net,
        head,
        data.train,
        plan,
        loss_fn,
        validator or worst_case_validator(data.val),
        batch_rng,
        mix_rng,
    )
    return StageResult(net, head, record)


def train_stage1(
    data: Splits,
    backbone: DenseNet,
    plan: TrainPlan,
    group: int,
    validator: Validator | None = None,
) -> StageResult:
    """
    Step 1: a fresh head for one cohort on a frozen copy of the backbone,
    trained with c = 0 and selected on that cohort's validation AUC.
    """
    _check_stage(plan, Stage.STEP1_TEACHER)
    plan = dataclasses.replace(plan, group=group)
    cohort = data.train.cohort(group)
    if not len(cohort):
        raise FairDiError(
            f"Cohort {group} has no training samples",
            code=ErrorCode.COHORT_EMPTY,
            attribute=group,
        )
    init_rng, batch_rng, mix_rng = plan.rngs()
    net = _frozen_copy(backbone)
    head = Head.init(net.out_dim, init_rng)
    fis = plan.fis

    def loss_fn(batch: Batch, net: DenseNet, head: Head) -> tuple[float, Gradients]:
        loss, _, grads = fis_loss_and_grad(batch, net, head, fis)
        return loss, grads

    record = _fit(
        f"teacher_{group}",
        net,
        head,
        cohort,
        plan,
        loss_fn,
        validator or cohort_validator(data.val, group),
        batch_rng,
        mix_rng,
    )
    return StageResult(net, head, record)


def train_stage2(
    data: Splits,
    backbone: DenseNet,
    teachers: Mapping[int, Head],
    plan: TrainPlan,
    validator: Validator | None = None,
) -> StageResult:
    """Step 2: a fresh student head distilled from the cohort teachers"""
    _check_stage(plan, Stage.STEP2_STUDENT)
    missing = [g for g in data.train.groups if g not in teachers]
    if missing:
        raise FairDiError(
            f"No teacher for attribute {missing[0]}",
            code=ErrorCode.CONFIGURATION_ERROR,
            attribute=missing[0],
        )
    init_rng, batch_rng, mix_rng = plan.rngs()
    net = _frozen_copy(backbone)
    head = Head.init(net.out_dim, init_rng)
    frozen_teachers = {g: dataclasses.replace(t.copy(), frozen=True) for g, t in teachers.items()}
    distill = plan.distill

    def loss_fn(batch: Batch, net: DenseNet, head: Head) -> tuple[float, Gradients]:
        return student_loss_and_grad(batch, net, head, frozen_teachers, distill)

    record = _fit(
        "student",
        net,
        head,
        data.train,
        plan,
        loss_fn,
        validator or worst_case_validator(data.val),
        batch_rng,
        mix_rng,
    )
    return StageResult(net, head, record)


@dataclass
class StageTimings:
    step0: float = 0.0
    teachers: dict[int, float] = field(default_factory=dict)
    teachers_total: float = 0.0
    student: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "step0": self.step0,
            "teachers": {str(g): t for g, t in self.teachers.items()},
            "teachers_total": self.teachers_total,
            "student": self.student,
        }


@dataclass
class FairDiResult:
    backbone: DenseNet
    stage0_head: Head
    teachers: dict[int, Head]
    student: Head
    records: dict[str, ExperimentRecord]
    timings: StageTimings


def run_fairdi(
    data: Splits,
    plans: Mapping[Stage, TrainPlan],
    workers: int = 1,
    validators: Mapping[str, Validator] | None = None,
) -> FairDiResult:
    """
    Steps 0, 1 and 2 in order. Teachers train concurrently on `workers`
    threads; each draws from its own seeded stream, so the result does not
    depend on the worker count.

    `validators` may replace the default validator of "step0", "student" or
    any "teacher_<g>".
    """
    validators = validators or {}
    for stage in (Stage.STEP0_FIS, Stage.STEP1_TEACHER, Stage.STEP2_STUDENT):
        if stage not in plans:
            raise FairDiError(
                f"Missing plan for {stage.value}", code=ErrorCode.CONFIGURATION_ERROR
            )
    if workers < 1:
        raise FairDiError(f"workers must be positive, got {workers}", code=ErrorCode.INVALID_PARAMETER)

    step0 = train_stage0(data, plans[Stage.STEP0_FIS], validators.get("step0"))
    groups = data.train.groups
    logger.info("Training %d teachers on %d worker(s)", len(groups), workers)

    started = time.perf_counter()

    def teacher(group: int) -> StageResult:
        return train_stage1(
            data,
            step0.backbone,
            plans[Stage.STEP1_TEACHER],
            group,
            validators.get(f"teacher_{group}"),
        )

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="teacher") as pool:
        teacher_results = dict(zip(groups, pool.map(teacher, groups)))
    teachers_total = time.perf_counter() - started

    student = train_stage2(
        data,
        step0.backbone,
        {g: r.head for g, r in teacher_results.items()},
        plans[Stage.STEP2_STUDENT],
        validators.get("student"),
    )

    records = {"step0": step0.record}
    records.update({r.record.name: r.record for r in teacher_results.values()})
    records["student"] = student.record
    timings = StageTimings(
        step0=step0.record.wall_time,
        teachers={g: r.record.wall_time for g, r in teacher_results.items()},
        teachers_total=teachers_total,
        student=student.record.wall_time,
    )
    return FairDiResult(
        backbone=step0.backbone,
        stage0_head=step0.head,
        teachers={g: r.head for g, r in teacher_results.items()},
        student=student.head,
        records=records,
        timings=timings,
    )
