from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import pytest

from fairdi.datagen import GenSpec, generate
from fairdi.nnkernel import DenseNet, Head
from fairdi.pipeline import Splits, Validation, Validator, split
from fairdi.settings import SchemaSettings, train_settings
from fairdi.types import Activation, Batch, Dataset, one_hot


def mocked_validator(scores: Iterable[float]) -> Validator:
    """Validator replaying a fixed score sequence, one value per epoch"""
    it = iter(scores)

    def validate(net: DenseNet, head: Head) -> Validation:
        score = next(it)
        return Validation(score, score, score)

    return validate


def make_batch(
    x: np.ndarray | Sequence[Sequence[float]],
    labels: Sequence[int],
    attributes: Sequence[int],
    image_side: int | None = None,
) -> Batch:
    return Batch(
        x=np.asarray(x, dtype=np.float64),
        targets=one_hot(np.asarray(labels)),
        attributes=np.asarray(attributes),
        image_side=image_side,
    )


def numeric_gradient(objective: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        saved = param[idx]
        param[idx] = saved + h
        up = objective()
        param[idx] = saved - h
        down = objective()
        param[idx] = saved
        grad[idx] = (up - down) / (2 * h)
    return grad


def assert_matches_finite_differences(
    objective: Callable[[], float],
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
) -> None:
    for param, grad in zip(params, grads):
        assert grad is not None
        expected = numeric_gradient(objective, param)
        scale = np.maximum(np.abs(expected), 1e-3)
        assert np.max(np.abs(grad - expected) / scale) < 1e-4


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_model() -> Callable[..., tuple[DenseNet, Head]]:
    def make(
        sizes: Sequence[int] = (4, 6, 5),
        seed: int = 0,
        activation: Activation = Activation.RELU,
        temperature: float = 1.0,
    ) -> tuple[DenseNet, Head]:
        gen = np.random.default_rng(seed)
        net = DenseNet.init(sizes, gen, activation)
        for layer in net.layers:
            # nonzero biases so ReLU kinks are exercised away from zero
            layer.bias = gen.normal(0.0, 0.1, size=layer.bias.shape)
        head = Head.init(net.out_dim, gen, temperature=temperature)
        return net, head

    return make


@pytest.fixture
def random_batch(rng: np.random.Generator) -> Batch:
    n = 12
    return make_batch(
        rng.normal(size=(n, 4)),
        labels=rng.integers(0, 2, size=n).tolist(),
        attributes=[i % 2 for i in range(n)],
    )


@pytest.fixture
def biased_dataset() -> Dataset:
    return generate(GenSpec(n_samples=600, n_features=4, seed=7))


@pytest.fixture
def biased_splits(biased_dataset: Dataset) -> Splits:
    return split(biased_dataset, (0.6, 0.2, 0.2), seed=7)


@pytest.fixture
def fast_settings() -> SchemaSettings:
    settings = train_settings()
    settings.update_from(
        {
            "max_epochs": 3,
            "head_max_epochs": 3,
            "patience": 2,
            "batch_size": 32,
            "hidden": (8,),
            "backbone_lr": 1e-2,
            "head_lr": 1e-2,
        }
    )
    return settings
