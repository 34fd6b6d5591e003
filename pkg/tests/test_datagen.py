from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from fairdi.datagen import (
    GenSpec,
    bayes_auc,
    bayes_scores,
    cosine_basis,
    generate,
    load_dataset,
    load_spec,
    oracle,
    save_dataset,
    save_spec,
    shift_direction,
    signal_direction,
    signal_directions,
)
from fairdi.errors import FairDiError, ErrorCode
from fairdi.metrics import auc
from tests.fixtures import DATASET_3

PHI_SQRT2 = 0.9213503964748575


def test_generate_is_deterministic(tmp_path: Path) -> None:
    spec = GenSpec(n_samples=300, seed=11)
    save_dataset(generate(spec), tmp_path / "a.csv")
    save_dataset(generate(spec), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    other = generate(GenSpec(n_samples=300, seed=12))
    assert not np.array_equal(other.features, generate(spec).features)


@pytest.mark.parametrize(
    "n_samples, proportions, expected",
    [
        (1000, None, [500, 500]),
        (1001, None, [501, 500]),
        (1000, (0.7, 0.3), [700, 300]),
        (10, (0.2, 0.3, 0.5), [2, 3, 5]),
    ],
)
def test_group_sizes(n_samples: int, proportions: tuple | None, expected: list) -> None:
    spec = GenSpec(
        n_samples=n_samples,
        n_groups=len(expected),
        group_proportions=proportions,
        seed=3,
    )
    ds = generate(spec)
    sizes = np.bincount(ds.attributes, minlength=len(expected)).tolist()
    assert sum(sizes) == n_samples
    assert all(abs(s - e) <= 1 for s, e in zip(sizes, expected))


def test_generate_shapes() -> None:
    ds = generate(GenSpec(n_samples=50, n_features=6))
    assert ds.features.shape == (50, 6)
    assert ds.image_side is None
    assert set(ds.labels.tolist()) <= {0, 1}

    image = generate(GenSpec(n_samples=40, n_features=5, image=True))
    assert image.features.shape == (40, 25)
    assert image.image_side == 5


def test_directions() -> None:
    spec = GenSpec(n_features=4, group_shift=1.0)
    directions = signal_directions(spec)
    v = shift_direction(spec)
    assert directions.shape == (2, 4)
    assert directions @ directions.T == pytest.approx(np.eye(2), abs=1e-12)
    assert directions @ v == pytest.approx([0.0, 0.0], abs=1e-12)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert signal_direction(spec, 1).tolist() == directions[1].tolist()
    assert not shift_direction(GenSpec(n_features=4, group_shift=0.0)).any()


def test_cosine_basis_is_orthonormal() -> None:
    basis = cosine_basis(5)
    assert basis @ basis.T == pytest.approx(np.eye(5), abs=1e-12)
    assert basis[0] == pytest.approx([5**-0.5] * 5)


def test_overlapping_directions() -> None:
    spec = GenSpec(n_groups=3, n_features=6, signal_overlap=0.25)
    gram = signal_directions(spec) @ signal_directions(spec).T
    expected = np.full((3, 3), 0.25) + 0.75 * np.eye(3)
    assert gram == pytest.approx(expected, abs=1e-12)
    assert signal_directions(spec) @ shift_direction(spec) == pytest.approx([0.0] * 3, abs=1e-12)

    shared = GenSpec(n_features=4, signal_overlap=1.0)
    assert signal_directions(shared) == pytest.approx(np.full((2, 4), 0.5))


def test_image_directions() -> None:
    shared = GenSpec(n_features=6, image=True, signal_overlap=1.0)
    u = signal_direction(shared).reshape(6, 6)
    assert u[0, 0] == 0.0
    assert u[1:4, 1:4] == pytest.approx(np.full((3, 3), 1 / 3))
    assert float(u.ravel() @ shift_direction(shared)) == 0.0

    image = GenSpec(n_features=6, image=True)
    grids = signal_directions(image).reshape(2, 6, 6)
    outside = np.ones((6, 6), dtype=bool)
    outside[1:4, 1:4] = False
    assert not grids[:, outside].any()
    assert float(grids[0].ravel() @ grids[1].ravel()) == pytest.approx(0.0, abs=1e-12)


def test_bayes_scores_use_own_direction() -> None:
    spec = GenSpec(n_samples=4000, n_features=4, label_noise=0.0, seed=13)
    ds = generate(spec)
    scores = bayes_scores(ds, spec)
    for g, expected in bayes_auc(spec).items():
        mask = ds.attributes == g
        assert auc(scores[mask], ds.labels[mask]) == pytest.approx(expected, abs=0.03)

    # group 1 carries no signal along group 0's direction
    mask = ds.attributes == 1
    crossed = ds.features[mask] @ signal_direction(spec, 0)
    assert auc(crossed, ds.labels[mask]) == pytest.approx(0.5, abs=0.06)


def test_no_bias_gives_equal_groups() -> None:
    spec = GenSpec(n_groups=3, bias_strength=0.0, label_noise=0.1)
    clean = bayes_auc(spec, with_noise=False)
    noisy = bayes_auc(spec)
    assert len(set(clean.values())) == 1
    assert len(set(noisy.values())) == 1
    assert oracle(spec)["bayes_auc_gap"] == 0.0


def test_closed_form_bayes_auc() -> None:
    spec = GenSpec(base_separation=2.0, bias_strength=0.0, label_noise=0.0)
    assert bayes_auc(spec) == pytest.approx({0: PHI_SQRT2, 1: PHI_SQRT2}, abs=1e-12)

    noisy = GenSpec(base_separation=2.0, bias_strength=0.0, label_noise=0.1)
    assert bayes_auc(noisy)[0] == pytest.approx(0.5 + 0.8 * (PHI_SQRT2 - 0.5), abs=1e-12)


@pytest.mark.parametrize("label_noise", [0.0, 0.1])
def test_bayes_scores_match_closed_form(label_noise: float) -> None:
    spec = GenSpec(
        n_samples=2000,
        n_features=4,
        base_separation=2.0,
        bias_strength=0.0,
        label_noise=label_noise,
        seed=5,
    )
    ds = generate(spec)
    empirical = auc(bayes_scores(ds, spec), ds.labels)
    assert empirical == pytest.approx(bayes_auc(spec)[0], abs=0.02)


def test_bayes_scores_image_mode() -> None:
    spec = GenSpec(n_samples=2000, n_features=4, image=True, bias_strength=0.0, seed=9)
    ds = generate(spec)
    empirical = auc(bayes_scores(ds, spec), ds.labels)
    assert empirical == pytest.approx(bayes_auc(spec)[0], abs=0.02)


@pytest.mark.parametrize("bias_strength", [0.25, 0.5, 1.0])
def test_planted_bias_is_monotone(bias_strength: float) -> None:
    spec = GenSpec(n_groups=4, bias_strength=bias_strength, label_noise=0.1)
    for with_noise in (True, False):
        values = list(bayes_auc(spec, with_noise).values())
        assert values == sorted(values, reverse=True)
        assert values[0] > values[-1]


def test_planted_bias_parameters() -> None:
    spec = GenSpec(n_groups=3, base_separation=2.0, bias_strength=0.5, label_noise=0.1)
    assert [spec.separation(g) for g in range(3)] == pytest.approx([2.0, 1.5, 1.0])
    assert [spec.noise_rate(g) for g in range(3)] == pytest.approx([0.1, 0.125, 0.15])

    groups = oracle(spec)["groups"]
    assert sorted(groups) == ["0", "1", "2"]
    assert groups["2"]["separation"] == pytest.approx(1.0)
    assert groups["2"]["label_noise"] == pytest.approx(0.15)
    assert oracle(spec)["bayes_auc_gap"] == pytest.approx(
        groups["0"]["bayes_auc"] - groups["2"]["bayes_auc"]
    )


def test_full_bias_group_is_chance() -> None:
    spec = GenSpec(bias_strength=1.0, label_noise=0.0)
    assert bayes_auc(spec)[1] == 0.5


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_groups": 1},
        {"group_proportions": (0.5, 0.6)},
        {"group_proportions": (1.0,)},
        {"n_samples": 0},
        {"base_separation": 0.0},
        {"bias_strength": -0.1},
        {"bias_strength": 1.5},
        {"label_noise": 0.6},
        {"label_noise": 0.4, "bias_strength": 0.5},
        {"image": True, "n_features": 2},
        {"n_features": 1, "group_shift": 1.0},
        {"n_features": 2},
        {"n_features": 3, "n_groups": 3},
        {"image": True, "n_features": 3},
        {"signal_overlap": 1.5},
        {"signal_overlap": -0.1},
    ],
)
def test_invalid_spec(kwargs: dict) -> None:
    with pytest.raises(FairDiError) as ctx:
        GenSpec(**kwargs)
    assert ctx.value.code == ErrorCode.INVALID_SPEC


def test_spec_files(tmp_path: Path) -> None:
    spec = GenSpec(n_samples=123, n_groups=3, group_proportions=(0.5, 0.25, 0.25), seed=8)
    path = tmp_path / "spec.json"
    save_spec(spec, path)
    assert load_spec(path) == spec

    path.write_text(json.dumps({**spec.to_json(), "depth": 3}))
    with pytest.raises(FairDiError) as ctx:
        load_spec(path)
    assert ctx.value.code == ErrorCode.INVALID_SPEC

    path.write_text("{not json")
    with pytest.raises(FairDiError) as ctx:
        load_spec(path)
    assert ctx.value.code == ErrorCode.INVALID_SPEC

    with pytest.raises(FairDiError) as ctx:
        load_spec(tmp_path / "missing.json")
    assert ctx.value.code == ErrorCode.IO_ERROR


def test_load_handcrafted_dataset() -> None:
    ds = load_dataset(DATASET_3)
    assert ds.features.tolist() == [[0.5, -1.25], [3.0, 0.1], [-2.5e-3, 7.0]]
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.attributes.tolist() == [0, 1, 1]
    assert ds.image_side is None


@pytest.mark.parametrize("image, n_features", [(False, 3), (True, 4)])
def test_dataset_round_trip(tmp_path: Path, image: bool, n_features: int) -> None:
    ds = generate(GenSpec(n_samples=64, n_features=n_features, image=image, seed=21))
    path = tmp_path / "data.csv"
    save_dataset(ds, path)
    assert load_dataset(path).equals(ds)


def test_save_dataset_io_error(tmp_path: Path) -> None:
    ds = load_dataset(DATASET_3)
    with pytest.raises(FairDiError) as ctx:
        save_dataset(ds, tmp_path / "missing" / "data.csv")
    assert ctx.value.code == ErrorCode.IO_ERROR


def test_label_error_cites_line(tmp_path: Path) -> None:
    rows = ["f0,label,attribute"] + [f"{i}.5,{i % 2},0" for i in range(5)] + ["9,2,1", "1,0,1"]
    path = tmp_path / "data.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(FairDiError) as ctx:
        load_dataset(path)
    assert ctx.value.code == ErrorCode.PARSE_ERROR
    assert ctx.value.details["line"] == 7
    assert "line 7" in str(ctx.value)


@pytest.mark.parametrize(
    "text, line",
    [
        ("f0,label\n1,0\n", 1),
        ("f0,attribute\n1,0\n", 1),
        ("f0,f2,label,attribute\n1,2,0,0\n", 1),
        ("f0,p1,label,attribute\n1,2,0,0\n", 1),
        ("label,attribute\n0,0\n", 1),
        ("p0,p1,label,attribute\n1,2,0,0\n", 1),
        ("f0,label,attribute\n", 2),
        ("f0,label,attribute\n1,0,0\n1,1,male\n", 3),
        ("f0,label,attribute\n1,0,0\n1,1,-1\n", 3),
        ("f0,label,attribute\n1,0,0\n1,1,1\nabc,0,0\n", 4),
        ("f0,label,attribute\ninf,0,0\n", 2),
    ],
)
def test_load_dataset_errors(tmp_path: Path, text: str, line: int) -> None:
    path = tmp_path / "data.csv"
    path.write_text(text)
    with pytest.raises(FairDiError) as ctx:
        load_dataset(path)
    assert ctx.value.code == ErrorCode.PARSE_ERROR
    assert ctx.value.details["line"] == line


def test_load_dataset_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FairDiError) as ctx:
        load_dataset(tmp_path / "missing.csv")
    assert ctx.value.code == ErrorCode.IO_ERROR
