from __future__ import annotations

import abc
import json
import os
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, MutableMapping, Tuple

from fairdi.errors import FairDiError, ErrorCode


SettingType = Callable[[Any], Any]
SettingSchema = Tuple[SettingType, Any, str]

OUTPUT_ROOT_ENV = "FAIRDI_OUTPUT_ROOT"

# Keys a JSON config may carry for the command itself rather than the schema
COMMAND_KEYS = ("dataset", "out", "method")


def floats(value: Any) -> tuple[float, ...]:
    """
    Coerce a JSON list or a comma-separated string to a tuple of floats.
    For example:
        >>> floats("0.8,0.1,0.1")
        (0.8, 0.1, 0.1)
        >>> floats([1, 2])
        (1.0, 2.0)
    """
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(float(v) for v in value)


def ints(value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


def optional_floats(value: Any) -> tuple[float, ...] | None:
    return None if value in ("", None) else floats(value)


def optional_int(value: Any) -> int | None:
    return None if value in ("", None, 0, "0") else int(value)


def boolean(value: Any) -> bool:
    if isinstance(value, str):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return bool(value)


TRAIN_SETTINGS: dict[str, SettingSchema] = {
    # name: (type, default, description)
    "seed": (int, 42, "master seed for splits, initialisation and batching"),
    "ratios": (floats, (0.8, 0.1, 0.1), "train/val/test split ratios"),
    "hidden": (ints, (64, 64), "backbone hidden layer widths"),
    "max_epochs": (int, 30, "epoch cap for ERM and Step 0"),
    "head_max_epochs": (int, 100, "epoch cap for the teachers and the student"),
    "patience": (int, 5, "early-stopping patience in epochs"),
    "batch_size": (int, 64, "mini-batch size"),
    "backbone_lr": (float, 1e-4, "Adam learning rate for ERM and Step 0"),
    "backbone_weight_decay": (float, 1e-4, "weight decay for ERM and Step 0"),
    "lr_step": (optional_int, 10, "epochs between x0.1 decays (ERM and Step 0)"),
    "lr_gamma": (float, 0.1, "decay factor of the step schedule"),
    "head_lr": (float, 1e-3, "SGD learning rate for teachers and student"),
    "head_weight_decay": (float, 0.0, "weight decay for teachers and student"),
    "momentum": (float, 0.9, "SGD momentum"),
    "c": (float, 0.5, "FIS mixing of individual and group weights"),
    "weight_rescale": (str, "sum_to_N", "FIS weight normalisation"),
    "lam": (float, 0.95, "distillation weight lambda"),
    "tau": (float, 1.5, "distillation temperature"),
    "kl_direction": (str, "student_first", "argument order of the KL term"),
    "temp_on_student": (boolean, False, "soften the student with tau as well"),
    "cutmix": (boolean, True, "apply CutMix in every stage"),
    "cutmix_beta": (float, 1.0, "Beta parameter of the CutMix ratio"),
    "workers": (int, 1, "threads for training teachers concurrently"),
}

GEN_SETTINGS: dict[str, SettingSchema] = {
    "n_samples": (int, 6000, "number of samples"),
    "n_features": (int, 8, "feature dimension, or image side in image mode"),
    "n_groups": (int, 2, "number of attribute values"),
    "group_proportions": (optional_floats, None, "group proportions, equal if unset"),
    "base_separation": (float, 2.0, "class-mean distance of group 0"),
    "bias_strength": (float, 0.5, "per-group degradation of separation and labels"),
    "label_noise": (float, 0.05, "label-flip rate of group 0"),
    "group_shift": (float, 4.0, "label-independent offset between group means"),
    "signal_overlap": (float, 0.0, "cosine between the groups' signal directions"),
    "image": (boolean, False, "lay features out as square images"),
    "seed": (int, 42, "generator seed"),
}

EVAL_SETTINGS: dict[str, SettingSchema] = {
    "task": (str, "classification", "classification or segmentation"),
    "split": (str, "test", "dataset split to score: train, val, test or all"),
    "seed": (int, 42, "seed of the split"),
    "ratios": (floats, (0.8, 0.1, 0.1), "split ratios"),
    "alpha": (float, 0.05, "significance level"),
    "higher_is_better": (boolean, True, "direction of the scores"),
}


class Settings(abc.ABC, MutableMapping[str, Any]):
    """
    Abstract schema-checked settings store.
    """

    def __init__(self) -> None:
        # Values set explicitly, on top of schema defaults
        self._values: dict[str, Any] = {}
        self.commands: dict[str, Any] = {}

    def __getitem__(self, key: str) -> Any | None:
        try:
            return self.get_setting(key)
        except FairDiError as e:
            raise KeyError from e

    def __setitem__(self, key: str, value: Any) -> None:
        return self.set(key, value)

    def __delitem__(self, key: str) -> None:
        self._values.pop(key.lower(), None)

    def __iter__(self) -> Iterator[str]:
        return self.schema.__iter__()

    def __len__(self) -> int:
        return len(self.schema)

    def get_schema(self, name: str) -> SettingSchema:
        schema = self.schema.get(name)
        if not schema:
            raise FairDiError(
                f"Unknown setting: {name}", code=ErrorCode.CONFIGURATION_ERROR
            )
        return schema

    def set(self, name: str, value: Any) -> None:
        name = name.lower()
        type_, default, _ = self.get_schema(name)

        if value is None:
            self._values[name] = default
            return
        try:
            self._values[name] = type_(value)
        except (TypeError, ValueError) as e:
            raise FairDiError(
                f"Invalid value for {name}: {value!r}",
                code=ErrorCode.CONFIGURATION_ERROR,
            ) from e

    def get_setting(self, name: str) -> Any | None:
        name = name.lower()
        if name in self._values:
            return self._values[name]
        _, default, _ = self.get_schema(name)

        return default

    def list(self) -> list[tuple[str, Any]]:
        return [(name, self.get(name)) for name in sorted(self.schema)]

    def update_from(self, values: Mapping[str, Any], skip_none: bool = True) -> None:
        for name, value in values.items():
            if value is None and skip_none:
                continue
            self.set(name, value)

    def load_json(self, path: str | Path) -> None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as e:
            raise FairDiError(f"Cannot read config {path}: {e}", code=ErrorCode.IO_ERROR) from e
        except json.JSONDecodeError as e:
            raise FairDiError(
                f"Config {path} is not valid JSON: {e}", code=ErrorCode.PARSE_ERROR
            ) from e
        if not isinstance(values, dict):
            raise FairDiError(
                f"Config {path} must hold a JSON object", code=ErrorCode.CONFIGURATION_ERROR
            )
        unknown = sorted(
            k for k in values if k.lower() not in self.schema and k not in COMMAND_KEYS
        )
        if unknown:
            raise FairDiError(
                f"Unknown settings in {path}: {', '.join(unknown)}",
                code=ErrorCode.CONFIGURATION_ERROR,
            )
        self.commands.update({k: v for k, v in values.items() if k in COMMAND_KEYS})
        self.update_from({k: v for k, v in values.items() if k not in COMMAND_KEYS})

    def to_json(self) -> dict[str, Any]:
        return {name: _jsonable(value) for name, value in self.list()}

    @property
    @abc.abstractmethod
    def schema(self) -> dict[str, SettingSchema]: ...


def _jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


class SchemaSettings(Settings):
    def __init__(self, schema: dict[str, SettingSchema]):
        self._schema = schema
        super().__init__()

    @property
    def schema(self) -> dict[str, SettingSchema]:
        return self._schema


def train_settings() -> SchemaSettings:
    return SchemaSettings(TRAIN_SETTINGS)


def layered(
    schema: dict[str, SettingSchema],
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> SchemaSettings:
    """Defaults, then the JSON config file, then explicit overrides"""
    settings = SchemaSettings(schema)
    if config_path is not None:
        settings.load_json(config_path)
    if overrides:
        settings.update_from(overrides)
    return settings


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
