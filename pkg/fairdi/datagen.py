"""
Synthetic fairness benchmark with planted group bias, and dataset files.

Every group is a two-class Gaussian mixture with unit variance whose class
means sit +-d_g/2 along the group's own signal direction. Higher-index groups
get a smaller separation d_g and a higher label-flip rate, so their
Bayes-optimal AUC is lower and known in closed form. Signal directions of
different groups share a cosine of `signal_overlap`, and `group_shift` moves
the group means apart along a label-independent direction, so a model can
tell the groups apart.

Directions come from a cosine (DCT-II) basis: in flat mode over all
features, in image mode over the central patch, so every feature or pixel of
the support carries a share of the signal.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from scipy import fft, special

from fairdi.errors import FairDiError, ErrorCode
from fairdi.types import Dataset, image_side_for
from fairdi.utils import apportion, check_ratios, spawn_generators

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
ATTRIBUTE_COLUMN = "attribute"
FEATURE_PREFIX = "f"
PIXEL_PREFIX = "p"
RE_FEATURE_COLUMN = re.compile(r"^(?P<prefix>[fp])(?P<index>\d+)$")
RE_ATTRIBUTE = re.compile(r"^\d+$")


@dataclass
class GenSpec:
    n_samples: int = 6000
    # image side H in image mode
    n_features: int = 8
    n_groups: int = 2
    group_proportions: tuple[float, ...] | None = None
    base_separation: float = 2.0
    bias_strength: float = 0.5
    label_noise: float = 0.05
    seed: int = 42
    group_shift: float = 4.0
    image: bool = False
    # cosine between the signal directions of any two groups
    signal_overlap: float = 0.0

    def __post_init__(self) -> None:
        if self.n_groups < 2:
            raise FairDiError(
                f"Need at least 2 groups, got {self.n_groups}", code=ErrorCode.INVALID_SPEC
            )
        if self.group_proportions is None:
            self.group_proportions = tuple([1.0 / self.n_groups] * self.n_groups)
        self.group_proportions = tuple(float(p) for p in self.group_proportions)
        if len(self.group_proportions) != self.n_groups:
            raise FairDiError(
                f"{len(self.group_proportions)} proportions for {self.n_groups} groups",
                code=ErrorCode.INVALID_SPEC,
            )
        try:
            check_ratios(self.group_proportions, "group proportions")
        except FairDiError as e:
            raise FairDiError(e.msg, code=ErrorCode.INVALID_SPEC) from e
        if self.n_samples < 1 or self.n_features < 1:
            raise FairDiError(
                "n_samples and n_features must be positive", code=ErrorCode.INVALID_SPEC
            )
        if self.image and self.n_features < 3:
            raise FairDiError(
                "Image mode needs a side of at least 3", code=ErrorCode.INVALID_SPEC
            )
        if not 0.0 <= self.signal_overlap <= 1.0:
            raise FairDiError(
                f"signal_overlap must lie in [0, 1], got {self.signal_overlap}",
                code=ErrorCode.INVALID_SPEC,
            )
        support, needed = self.signal_support, self.signal_patterns
        if not self.image and self.group_shift:
            needed += 1
        if support < needed:
            where = "patch pixels" if self.image else "features"
            raise FairDiError(
                f"{needed} orthogonal directions do not fit in {support} {where}",
                code=ErrorCode.INVALID_SPEC,
            )
        if not self.base_separation > 0 or self.bias_strength < 0:
            raise FairDiError(
                "base_separation must be positive and bias_strength nonnegative",
                code=ErrorCode.INVALID_SPEC,
            )
        if not 0.0 <= self.label_noise <= 0.5:
            raise FairDiError(
                f"label_noise must lie in [0, 0.5], got {self.label_noise}",
                code=ErrorCode.INVALID_SPEC,
            )
        for g in range(self.n_groups):
            if self.separation(g) < 0:
                raise FairDiError(
                    f"Group {g} would have negative separation {self.separation(g)}",
                    code=ErrorCode.INVALID_SPEC,
                )
            if self.noise_rate(g) > 0.5:
                raise FairDiError(
                    f"Group {g} would have label-flip rate {self.noise_rate(g)} > 0.5",
                    code=ErrorCode.INVALID_SPEC,
                )

    def _severity(self, group: int) -> float:
        return self.bias_strength * group / (self.n_groups - 1)

    def separation(self, group: int) -> float:
        return self.base_separation * (1.0 - self._severity(group))

    def noise_rate(self, group: int) -> float:
        return self.label_noise * (1.0 + self._severity(group))

    @property
    def dim(self) -> int:
        return self.n_features**2 if self.image else self.n_features

    @property
    def patch(self) -> int:
        return max(1, self.n_features // 2)

    @property
    def signal_support(self) -> int:
        return self.patch**2 if self.image else self.n_features

    @property
    def signal_patterns(self) -> int:
        """Basis patterns the signal directions use: one shared, one per group"""
        shared = 1 if self.signal_overlap > 0 else 0
        own = self.n_groups if self.signal_overlap < 1 else 0
        return shared + own

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["group_proportions"] = list(self.group_proportions or ())
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> GenSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FairDiError(
                f"Unknown GenSpec fields: {', '.join(unknown)}", code=ErrorCode.INVALID_SPEC
            )
        return cls(**data)


def cosine_basis(n: int) -> np.ndarray:
    """
    Orthonormal DCT-II basis, one pattern per row, lowest frequency first.
    For example:
        >>> bool(np.allclose(cosine_basis(4)[0], 0.5))
        True
    """
    return fft.dct(np.eye(n), norm="ortho", axis=0)


def _patterns(spec: GenSpec) -> list[np.ndarray]:
    """Orthonormal patterns of the signal support, embedded in the full layout"""
    if not spec.image:
        return list(cosine_basis(spec.n_features))
    side, patch = spec.n_features, spec.patch
    start = (side - patch) // 2
    basis = cosine_basis(patch)
    order = sorted(
        ((i, j) for i in range(patch) for j in range(patch)), key=lambda k: (sum(k), k[0])
    )
    out = []
    for i, j in order:
        grid = np.zeros((side, side))
        grid[start : start + patch, start : start + patch] = np.outer(basis[i], basis[j])
        out.append(grid.ravel())
    return out


def signal_directions(spec: GenSpec) -> np.ndarray:
    """
    Unit signal direction of every group, one per row. Rows share the
    pattern weighted sqrt(overlap) and add their own pattern weighted
    sqrt(1 - overlap), so any two rows have cosine `signal_overlap`.
    """
    patterns = _patterns(spec)
    rho = spec.signal_overlap
    shared = patterns[0] if rho > 0 else np.zeros(spec.dim)
    own = patterns[1:] if rho > 0 else patterns
    rows = []
    for g in range(spec.n_groups):
        u = np.sqrt(rho) * shared
        if rho < 1:
            u = u + np.sqrt(1.0 - rho) * own[g]
        rows.append(u)
    return np.array(rows)


def signal_direction(spec: GenSpec, group: int = 0) -> np.ndarray:
    """Unit vector along which the class means of `group` differ"""
    return signal_directions(spec)[group]


def shift_direction(spec: GenSpec) -> np.ndarray:
    """
    Unit vector orthogonal to every signal direction, used for group offsets;
    zero when the groups are not shifted.
    """
    v = np.zeros(spec.dim)
    if not spec.group_shift:
        return v
    if spec.image:
        # the corner pixel lies outside the signal patch
        v[0] = 1.0
        return v
    return _patterns(spec)[spec.signal_patterns]


def generate(spec: GenSpec) -> Dataset:
    counts = apportion(spec.n_samples, spec.group_proportions or ())
    rngs = spawn_generators(spec.seed, spec.n_groups + 1)
    directions = signal_directions(spec)
    v = shift_direction(spec)
    centre = (spec.n_groups - 1) / 2

    features, labels, attributes = [], [], []
    for g, n_g in enumerate(counts):
        rng = rngs[g]
        n_neg = n_g // 2
        clean = np.concatenate([np.zeros(n_neg), np.ones(n_g - n_neg)])
        x = rng.standard_normal((n_g, spec.dim))
        x += np.outer(clean - 0.5, spec.separation(g) * directions[g])
        x += (g - centre) * spec.group_shift * v
        flips = rng.random(n_g) < spec.noise_rate(g)
        features.append(x)
        labels.append(np.where(flips, 1.0 - clean, clean))
        attributes.append(np.full(n_g, g))
        logger.debug(
            "Group %d: %d samples, separation %.4g, %d labels flipped",
            g,
            n_g,
            spec.separation(g),
            int(flips.sum()),
        )

    order = rngs[-1].permutation(spec.n_samples)
    return Dataset(
        features=np.concatenate(features)[order],
        labels=np.concatenate(labels).astype(np.int64)[order],
        attributes=np.concatenate(attributes)[order],
        image_side=spec.n_features if spec.image else None,
    )


def bayes_auc(spec: GenSpec, with_noise: bool = True) -> dict[int, float]:
    """
    Analytic per-group AUC of the Bayes-optimal score.

    Clean labels give Phi(d_g / sqrt(2)). With a flip rate eta and balanced
    classes, a positive/negative pair is mislabelled on one side with
    probability eta(1 - eta) each (AUC 1/2 between same-class scores) and on
    both sides with probability eta^2 (AUC 1 - A), which collapses to
    1/2 + (1 - 2 eta)(A - 1/2).
    """
    out = {}
    for g in range(spec.n_groups):
        clean = float(special.ndtr(spec.separation(g) / np.sqrt(2.0)))
        if with_noise:
            out[g] = 0.5 + (1.0 - 2.0 * spec.noise_rate(g)) * (clean - 0.5)
        else:
            out[g] = clean
    return out


def oracle(spec: GenSpec) -> dict[str, Any]:
    clean = bayes_auc(spec, with_noise=False)
    noisy = bayes_auc(spec)
    return {
        "groups": {
            str(g): {
                "separation": spec.separation(g),
                "label_noise": spec.noise_rate(g),
                "bayes_auc_clean": clean[g],
                "bayes_auc": noisy[g],
            }
            for g in range(spec.n_groups)
        },
        "bayes_auc_gap": max(noisy.values()) - min(noisy.values()),
    }


def bayes_scores(ds: Dataset, spec: GenSpec) -> np.ndarray:
    """Each sample projected on its own group's signal direction, Bayes-optimal per group"""
    directions = signal_directions(spec)
    return np.einsum("ij,ij->i", ds.features, directions[ds.attributes])


def save_dataset(ds: Dataset, path: str | Path) -> None:
    prefix = PIXEL_PREFIX if ds.image_side is not None else FEATURE_PREFIX
    frame = pd.DataFrame(
        ds.features, columns=[f"{prefix}{i}" for i in range(ds.n_features)]
    )
    frame[LABEL_COLUMN] = ds.labels
    frame[ATTRIBUTE_COLUMN] = ds.attributes
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise FairDiError(f"Cannot write dataset {path}: {e}", code=ErrorCode.IO_ERROR) from e


def _first_bad_line(ok: np.ndarray) -> int:
    # header is line 1, so data row i sits on line i + 2
    return int(np.flatnonzero(~ok)[0]) + 2


def load_dataset(path: str | Path) -> Dataset:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise FairDiError(f"No such dataset: {path}", code=ErrorCode.IO_ERROR) from e
    except OSError as e:
        raise FairDiError(f"Cannot read dataset {path}: {e}", code=ErrorCode.IO_ERROR) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FairDiError(
            f"Malformed dataset {path}: {e}", code=ErrorCode.PARSE_ERROR, line=1
        ) from e

    for column in (LABEL_COLUMN, ATTRIBUTE_COLUMN):
        if column not in frame.columns:
            raise FairDiError(
                f"{path}: missing column {column!r} (line 1)",
                code=ErrorCode.PARSE_ERROR,
                line=1,
            )
    matches = [RE_FEATURE_COLUMN.match(str(c)) for c in frame.columns]
    feature_cols = [m for m in matches if m]
    prefixes = {m.group("prefix") for m in feature_cols}
    expected = [
        f"{next(iter(prefixes), FEATURE_PREFIX)}{i}" for i in range(len(feature_cols))
    ]
    if not feature_cols or len(prefixes) != 1 or [m.string for m in feature_cols] != expected:
        raise FairDiError(
            f"{path}: feature columns must be f0..fD-1 or p0..pD-1 (line 1)",
            code=ErrorCode.PARSE_ERROR,
            line=1,
        )
    if frame.empty:
        raise FairDiError(f"{path}: no samples", code=ErrorCode.PARSE_ERROR, line=2)

    labels = frame[LABEL_COLUMN].str.strip()
    ok = labels.isin(["0", "1"]).to_numpy()
    if not ok.all():
        line = _first_bad_line(ok)
        raise FairDiError(
            f"{path}: label must be 0 or 1 on line {line}, got {labels[line - 2]!r}",
            code=ErrorCode.PARSE_ERROR,
            line=line,
        )
    attributes = frame[ATTRIBUTE_COLUMN].str.strip()
    ok = attributes.str.match(RE_ATTRIBUTE).to_numpy(dtype=bool)
    if not ok.all():
        line = _first_bad_line(ok)
        raise FairDiError(
            f"{path}: unknown attribute token {attributes[line - 2]!r} on line {line}",
            code=ErrorCode.PARSE_ERROR,
            line=line,
        )

    raw = frame[expected].to_numpy(dtype=object)
    try:
        # float() per cell parses exactly; 17 significant digits round-trip
        features = raw.astype(np.float64)
    except ValueError:
        features = None
    if features is None or not np.isfinite(features).all():
        for i, row in enumerate(raw):
            try:
                if np.isfinite([float(v) for v in row]).all():
                    continue
            except ValueError:
                pass
            raise FairDiError(
                f"{path}: non-numeric or non-finite feature on line {i + 2}",
                code=ErrorCode.PARSE_ERROR,
                line=i + 2,
            )
    assert features is not None

    side = None
    if prefixes == {PIXEL_PREFIX}:
        side = image_side_for(len(expected))
        if side is None:
            raise FairDiError(
                f"{path}: {len(expected)} pixel columns do not form a square image",
                code=ErrorCode.PARSE_ERROR,
                line=1,
            )
    return Dataset(
        features=features,
        labels=labels.astype(np.int64).to_numpy(),
        attributes=attributes.astype(np.int64).to_numpy(),
        image_side=side,
    )


def save_spec(spec: GenSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")


def load_spec(path: str | Path) -> GenSpec:
    try:
        return GenSpec.from_json(json.loads(Path(path).read_text()))
    except OSError as e:
        raise FairDiError(f"Cannot read spec {path}: {e}", code=ErrorCode.IO_ERROR) from e
    except (json.JSONDecodeError, TypeError) as e:
        raise FairDiError(f"Malformed spec {path}: {e}", code=ErrorCode.INVALID_SPEC) from e
