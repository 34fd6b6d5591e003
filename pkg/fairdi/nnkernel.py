"""Dense-network engine: forward and backward passes, optimizers and checkpoints"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy import special

from fairdi.errors import FairDiError, ErrorCode
from fairdi.types import (
    Activation,
    Batch,
    LossKind,
    OptimizerKind,
    N_CLASSES,
    parse_enum,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1

Param = np.ndarray
ParamGrad = tuple[np.ndarray, np.ndarray]


def _finite(array: np.ndarray) -> bool:
    return bool(np.isfinite(array).all())


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU
    frozen: bool = False

    def __post_init__(self) -> None:
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise FairDiError(
                f"Layer weight {self.weight.shape} and bias {self.bias.shape} do not match",
                code=ErrorCode.SHAPE_ERROR,
            )

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


@dataclass
class DenseNet:
    """Stack of dense layers, f_theta. Its last activation is the feature vector."""

    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise FairDiError(
                "A network needs at least one layer", code=ErrorCode.INVALID_PARAMETER
            )
        for k in range(1, len(self.layers)):
            if self.layers[k].in_dim != self.layers[k - 1].out_dim:
                raise FairDiError(
                    f"Layer {k} expects {self.layers[k].in_dim} inputs but layer "
                    f"{k - 1} produces {self.layers[k - 1].out_dim}",
                    code=ErrorCode.SHAPE_ERROR,
                    layer=k,
                )
        for k, layer in enumerate(self.layers):
            if not (_finite(layer.weight) and _finite(layer.bias)):
                raise FairDiError(
                    f"Layer {k} has non-finite parameters",
                    code=ErrorCode.NUMERIC_ERROR,
                    layer=k,
                )

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: Activation = Activation.RELU,
    ) -> DenseNet:
        """
        He-uniform initialisation with zero biases.

        Args:
            sizes: input dimension followed by each layer's width
            rng: random generator
            activation: activation of every layer
        """
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise FairDiError(
                f"Invalid layer sizes: {list(sizes)}", code=ErrorCode.INVALID_PARAMETER
            )
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            layers.append(
                Layer(
                    weight=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                    bias=np.zeros(fan_out),
                    activation=activation,
                )
            )
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def freeze(self, frozen: bool = True) -> None:
        for layer in self.layers:
            layer.frozen = frozen

    @property
    def frozen(self) -> bool:
        return all(layer.frozen for layer in self.layers)

    def copy(self) -> DenseNet:
        return DenseNet(
            [
                Layer(layer.weight, layer.bias, layer.activation, layer.frozen)
                for layer in self.layers
            ]
        )


@dataclass
class Head:
    """Linear classification head h_phi with softmax temperature"""

    weight: np.ndarray
    bias: np.ndarray
    temperature: float = 1.0
    frozen: bool = False

    def __post_init__(self) -> None:
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if not self.temperature > 0:
            raise FairDiError(
                f"Temperature must be positive, got {self.temperature}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise FairDiError(
                f"Head weight {self.weight.shape} and bias {self.bias.shape} do not match",
                code=ErrorCode.SHAPE_ERROR,
            )
        if not (_finite(self.weight) and _finite(self.bias)):
            raise FairDiError("Head has non-finite parameters", code=ErrorCode.NUMERIC_ERROR)

    @classmethod
    def init(
        cls,
        feature_dim: int,
        rng: np.random.Generator,
        n_classes: int = N_CLASSES,
        temperature: float = 1.0,
    ) -> Head:
        limit = 1.0 / np.sqrt(feature_dim)
        return cls(
            weight=rng.uniform(-limit, limit, size=(n_classes, feature_dim)),
            bias=rng.uniform(-limit, limit, size=n_classes),
            temperature=temperature,
        )

    @property
    def feature_dim(self) -> int:
        return int(self.weight.shape[1])

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias

    def copy(self) -> Head:
        return Head(self.weight, self.bias, self.temperature, self.frozen)


def model_parameters(net: DenseNet, head: Head) -> list[Param]:
    return [*net.parameters(), *head.parameters()]


def softmax_temp(logits: np.ndarray | Sequence[float], tau: float = 1.0) -> np.ndarray:
    """Softmax of logits / tau along the last axis"""
    if not tau > 0:
        raise FairDiError(
            f"Temperature must be positive, got {tau}", code=ErrorCode.INVALID_PARAMETER
        )
    logits = np.asarray(logits, dtype=np.float64)
    if not _finite(logits):
        raise FairDiError("Logits must be finite", code=ErrorCode.INVALID_INPUT)
    # scipy subtracts the row maximum before exponentiating
    return special.softmax(logits / tau, axis=-1)


def cross_entropy(
    probs: np.ndarray | Sequence[float],
    label: np.ndarray | Sequence[float],
    soft: bool = False,
) -> Any:
    """
    Cross-entropy -sum(label * log(probs)) along the last axis, with probs
    clamped at PROB_FLOOR.

    `label` must be one-hot unless `soft`, in which case any distribution is
    accepted (CutMix targets). Returns a float for a single sample and an
    array for a batch.
    """
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if label.shape != probs.shape:
        raise FairDiError(
            f"Label shape {label.shape} does not match probabilities {probs.shape}",
            code=ErrorCode.INVALID_INPUT,
        )
    if (
        not _finite(label)
        or (label < 0).any()
        or not np.allclose(label.sum(axis=-1), 1.0, atol=1e-9)
    ):
        raise FairDiError("Label is not a distribution", code=ErrorCode.INVALID_INPUT)
    if not soft and not np.isin(label, (0.0, 1.0)).all():
        raise FairDiError(
            "Label must have exactly one hot entry", code=ErrorCode.INVALID_INPUT
        )
    losses = -np.sum(label * np.log(np.maximum(probs, PROB_FLOOR)), axis=-1)
    if losses.ndim == 0:
        return float(losses)
    return losses


class ForwardPass(NamedTuple):
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for backprop"""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray


def forward_cached(net: DenseNet, head: Head, x: np.ndarray) -> ForwardCache:
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise FairDiError(
            f"Input of shape {np.shape(x)} does not match network input {net.in_dim}",
            code=ErrorCode.SHAPE_ERROR,
        )
    if head.feature_dim != net.out_dim:
        raise FairDiError(
            f"Head expects {head.feature_dim} features, network produces {net.out_dim}",
            code=ErrorCode.SHAPE_ERROR,
        )
    inputs = []
    preacts = []
    for k, layer in enumerate(net.layers):
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        preacts.append(z)
        a = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
        if not _finite(a):
            raise FairDiError(
                f"Non-finite activations in layer {k}",
                code=ErrorCode.NUMERIC_ERROR,
                layer=k,
            )
    logits = head.logits(a)
    if not _finite(logits):
        raise FairDiError(
            f"Non-finite logits in layer {len(net.layers)} (head)",
            code=ErrorCode.NUMERIC_ERROR,
            layer=len(net.layers),
        )
    return ForwardCache(inputs=inputs, preacts=preacts, features=a, logits=logits)


def forward(net: DenseNet, head: Head, x: np.ndarray) -> ForwardPass:
    """h_{phi,tau}(f_theta(x)) for one sample (D,) or a batch (N, D)"""
    cache = forward_cached(net, head, x)
    probs = softmax_temp(cache.logits, head.temperature)
    if np.ndim(x) == 1:
        return ForwardPass(cache.features[0], cache.logits[0], probs[0])
    return ForwardPass(cache.features, cache.logits, probs)


@dataclass
class Gradients:
    """Gradient set. `None` marks frozen (or untouched) parameters."""

    layers: list[ParamGrad | None]
    head: ParamGrad | None
    loss: float = float("nan")

    def flat(self) -> list[np.ndarray | None]:
        out: list[np.ndarray | None] = []
        for pair in [*self.layers, self.head]:
            if pair is None:
                out.extend([None, None])
            else:
                out.extend(pair)
        return out


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with 0 log 0 = 0 and q clamped at PROB_FLOOR"""
    q = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def logit_gradients(
    kind: LossKind, logits: np.ndarray, temperature: float, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-sample losses and their derivative w.r.t. the logits.

    For cross-entropy `targets` are label distributions; for the KL kinds they
    are the reference distribution q compared against softmax(logits / T).
    """
    probs = softmax_temp(logits, temperature)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise FairDiError(
            f"Targets of shape {targets.shape} do not match logits {probs.shape}",
            code=ErrorCode.SHAPE_ERROR,
        )
    if kind is LossKind.CROSS_ENTROPY:
        losses = cross_entropy(probs, targets, soft=True)
        return losses, (probs - targets) / temperature
    if kind is LossKind.KL_STUDENT_FIRST:
        losses = kl_rows(probs, targets)
        log_ratio = np.log(np.maximum(probs, PROB_FLOOR)) - np.log(
            np.maximum(targets, PROB_FLOOR)
        )
        return losses, probs * (log_ratio - losses[:, None]) / temperature
    if kind is LossKind.KL_TEACHER_FIRST:
        return kl_rows(targets, probs), (probs - targets) / temperature
    raise FairDiError(f"Unknown loss kind: {kind}", code=ErrorCode.INVALID_PARAMETER)


def backprop(
    net: DenseNet, head: Head, cache: ForwardCache, dlogits: np.ndarray
) -> Gradients:
    """Propagate d(loss)/d(logits) back through head and backbone"""
    head_grad = None
    if not head.frozen:
        head_grad = (dlogits.T @ cache.features, dlogits.sum(axis=0))

    n_layers = len(net.layers)
    layer_grads: list[ParamGrad | None] = [None] * n_layers
    # deepest index at or below which some layer still needs a gradient
    lowest = next((k for k, layer in enumerate(net.layers) if not layer.frozen), None)
    if lowest is not None:
        delta = dlogits @ head.weight
        for k in range(n_layers - 1, lowest - 1, -1):
            layer = net.layers[k]
            if layer.activation is Activation.RELU:
                delta = delta * (cache.preacts[k] > 0)
            if not layer.frozen:
                layer_grads[k] = (delta.T @ cache.inputs[k], delta.sum(axis=0))
            if k > lowest:
                delta = delta @ layer.weight

    for k, pair in enumerate([*layer_grads, head_grad]):
        if pair is not None and not (_finite(pair[0]) and _finite(pair[1])):
            raise FairDiError(
                f"Non-finite gradient in layer {k}", code=ErrorCode.NUMERIC_ERROR, layer=k
            )
    return Gradients(layers=layer_grads, head=head_grad)


def check_weights(weights: np.ndarray | Sequence[float], n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise FairDiError(
            f"Expected {n} per-sample weights, got shape {weights.shape}",
            code=ErrorCode.SHAPE_ERROR,
        )
    if not _finite(weights):
        raise FairDiError("Per-sample weights must be finite", code=ErrorCode.INVALID_INPUT)
    return weights


def backward(
    net: DenseNet,
    head: Head,
    batch: Batch,
    per_sample_weights: np.ndarray | Sequence[float],
    loss_kind: LossKind = LossKind.CROSS_ENTROPY,
    targets: np.ndarray | None = None,
) -> Gradients:
    """
    Gradient of the weighted mean loss (1/N) sum_i w_i * loss_i.

    The weights are constants. `targets` overrides `batch.targets`, which is
    how the KL kinds receive their reference distribution.
    """
    n = len(batch)
    if n == 0:
        raise FairDiError("Cannot backpropagate an empty batch", code=ErrorCode.EMPTY_BATCH)
    weights = check_weights(per_sample_weights, n)
    cache = forward_cached(net, head, batch.x)
    losses, dlogits = logit_gradients(
        loss_kind,
        cache.logits,
        head.temperature,
        batch.targets if targets is None else targets,
    )
    grads = backprop(net, head, cache, dlogits * (weights / n)[:, None])
    grads.loss = float(np.mean(weights * losses))
    return grads


@dataclass
class OptimizerState:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    # parameter index -> [momentum buffer] (sgd) or [m, v] (adam)
    slots: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.kind = parse_enum(OptimizerKind, self.kind)  # type: ignore[assignment]
        if not self.learning_rate > 0:
            raise FairDiError(
                f"Learning rate must be positive, got {self.learning_rate}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if self.weight_decay < 0:
            raise FairDiError(
                f"Weight decay must be nonnegative, got {self.weight_decay}",
                code=ErrorCode.INVALID_PARAMETER,
            )
        if not (0 <= self.momentum < 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise FairDiError(
                "Momentum and betas must lie in [0, 1)", code=ErrorCode.INVALID_PARAMETER
            )
        if not self.eps > 0:
            raise FairDiError("eps must be positive", code=ErrorCode.INVALID_PARAMETER)


def optimizer_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
) -> list[np.ndarray]:
    """
    Update `params` in place. Parameters whose gradient is None are skipped,
    which is how frozen layers stay bit-identical.
    """
    if len(params) != len(grads):
        raise FairDiError(
            f"{len(params)} parameters but {len(grads)} gradients",
            code=ErrorCode.SHAPE_ERROR,
        )
    state.step_count += 1
    t = state.step_count
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise FairDiError(
                f"Gradient {i} has shape {grad.shape}, parameter has {param.shape}",
                code=ErrorCode.SHAPE_ERROR,
            )
        slots = state.slots.get(i)
        if slots is not None and slots[0].shape != param.shape:
            raise FairDiError(
                f"Optimizer state {i} has shape {slots[0].shape}, parameter has {param.shape}",
                code=ErrorCode.SHAPE_ERROR,
            )
        d = grad + state.weight_decay * param if state.weight_decay else grad

        if state.kind is OptimizerKind.SGD_MOMENTUM:
            if slots is None:
                buf = np.array(d, dtype=np.float64)
            else:
                buf = state.momentum * slots[0] + d
            state.slots[i] = [buf]
            param -= state.learning_rate * buf
        else:
            if slots is None:
                m, v = np.zeros_like(param), np.zeros_like(param)
            else:
                m, v = slots
            m = state.beta1 * m + (1 - state.beta1) * d
            v = state.beta2 * v + (1 - state.beta2) * d * d
            state.slots[i] = [m, v]
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return list(params)


def step_decay(base: float, epoch: int, step: int | None, gamma: float = 0.1) -> float:
    """
    Learning rate for a 1-based epoch under step decay.
    For example:
        >>> step_decay(1e-4, 10, 10)
        0.0001
        >>> round(step_decay(1e-4, 11, 10), 12)
        1e-05
        >>> step_decay(1e-3, 25, None)
        0.001
    """
    if not step:
        return base
    return base * gamma ** ((epoch - 1) // step)


@dataclass
class Checkpoint:
    """Backbone and named heads, plus the seed they were produced from"""

    backbone: DenseNet | None = None
    heads: dict[str, Head] = field(default_factory=dict)
    seed: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def _encode_layer(layer: Layer) -> dict[str, Any]:
    return {
        "shape": list(layer.weight.shape),
        "activation": layer.activation.value,
        "frozen": layer.frozen,
        "weight": layer.weight.tolist(),
        "bias": layer.bias.tolist(),
    }


def _encode_head(head: Head) -> dict[str, Any]:
    return {
        "shape": list(head.weight.shape),
        "temperature": head.temperature,
        "frozen": head.frozen,
        "weight": head.weight.tolist(),
        "bias": head.bias.tolist(),
    }


def _decode_array(values: Any, shape: Sequence[int], what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.shape != tuple(shape):
        raise FairDiError(
            f"{what} has shape {array.shape}, header says {tuple(shape)}",
            code=ErrorCode.PARSE_ERROR,
        )
    return array


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    payload = {
        "version": CHECKPOINT_VERSION,
        "seed": checkpoint.seed,
        "meta": checkpoint.meta,
        "backbone": (
            None
            if checkpoint.backbone is None
            else [_encode_layer(layer) for layer in checkpoint.backbone.layers]
        ),
        "heads": {name: _encode_head(head) for name, head in checkpoint.heads.items()},
    }
    try:
        Path(path).write_text(json.dumps(payload))
    except OSError as e:
        raise FairDiError(f"Cannot write checkpoint {path}: {e}", code=ErrorCode.IO_ERROR) from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as e:
        raise FairDiError(f"Cannot read checkpoint {path}: {e}", code=ErrorCode.IO_ERROR) from e
    except json.JSONDecodeError as e:
        raise FairDiError(
            f"Checkpoint {path} is not valid JSON: {e}", code=ErrorCode.PARSE_ERROR
        ) from e

    if payload.get("version") != CHECKPOINT_VERSION:
        raise FairDiError(
            f"Unsupported checkpoint version: {payload.get('version')}",
            code=ErrorCode.PARSE_ERROR,
        )
    try:
        backbone = None
        if payload["backbone"] is not None:
            backbone = DenseNet(
                [
                    Layer(
                        weight=_decode_array(item["weight"], item["shape"], f"layer {k} weight"),
                        bias=_decode_array(item["bias"], item["shape"][:1], f"layer {k} bias"),
                        activation=Activation(item["activation"]),
                        frozen=item["frozen"],
                    )
                    for k, item in enumerate(payload["backbone"])
                ]
            )
        heads = {
            name: Head(
                weight=_decode_array(item["weight"], item["shape"], f"head {name} weight"),
                bias=_decode_array(item["bias"], item["shape"][:1], f"head {name} bias"),
                temperature=item["temperature"],
                frozen=item["frozen"],
            )
            for name, item in payload["heads"].items()
        }
    except (KeyError, TypeError, ValueError) as e:
        raise FairDiError(
            f"Malformed checkpoint {path}: {e!r}", code=ErrorCode.PARSE_ERROR
        ) from e
    return Checkpoint(
        backbone=backbone, heads=heads, seed=payload.get("seed"), meta=payload.get("meta", {})
    )
