from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from fairdi.errors import FairDiError, ErrorCode
from fairdi.stats import (
    RankTable,
    cd_diagram_data,
    cliques,
    friedman,
    friedman_exact,
    nemenyi_cd,
    rank_rows,
)
from tests.fixtures import ALL_EQUAL, OVERALL_AUC, RANKS_K3_N4


@pytest.mark.parametrize(
    "scores, higher_is_better, expected",
    [
        ([[0.9, 0.8, 0.7]], True, [[1.0, 2.0, 3.0]]),
        ([[0.9, 0.9, 0.7]], True, [[1.5, 1.5, 3.0]]),
        ([[0.5, 0.5, 0.5, 0.5]], True, [[2.5, 2.5, 2.5, 2.5]]),
        ([[0.1, 0.3, 0.2]], False, [[1.0, 3.0, 2.0]]),
    ],
)
def test_rank_rows(scores: list, higher_is_better: bool, expected: list) -> None:
    assert rank_rows(scores, higher_is_better).tolist() == expected


def test_rank_rows_sum(rng: np.random.Generator) -> None:
    scores = rng.integers(0, 4, size=(20, 6)).astype(float)
    ranks = rank_rows(scores)
    assert ranks.sum(axis=1) == pytest.approx(np.full(20, 21.0))


def test_rank_rows_nan_cell() -> None:
    with pytest.raises(FairDiError) as ctx:
        rank_rows([[0.1, 0.2], [0.3, float("nan")]])
    assert ctx.value.code == ErrorCode.INVALID_INPUT
    assert ctx.value.details["cell"] == (1, 1)


@pytest.mark.parametrize("scores", [[[0.5]], [], [0.1, 0.2]])
def test_rank_rows_shape(scores: list) -> None:
    with pytest.raises(FairDiError) as ctx:
        rank_rows(scores)
    assert ctx.value.code == ErrorCode.INVALID_INPUT


def test_rank_table_from_csv() -> None:
    table = RankTable.from_csv(OVERALL_AUC)
    assert table.algorithms == ["ERM", "GroupDRO", "SWAD", "FIS", "FairDi"]
    assert table.tasks[0] == "HAM10000 Age"
    assert (table.n_tasks, table.n_algorithms) == (11, 5)
    assert table.avg_ranks == pytest.approx([39 / 11, 49 / 11, 28 / 11, 32 / 11, 17 / 11])
    assert table.ranks_frame().loc["PAPILA Age"].tolist() == [5.0, 4.0, 3.0, 2.0, 1.0]


def test_rank_table_from_numeric_csv(tmp_path: Path) -> None:
    path = tmp_path / "scores.csv"
    path.write_text("x,y\n1,2\n4,3\n")
    table = RankTable.from_csv(path, higher_is_better=False)
    assert table.tasks == ["0", "1"]
    assert table.ranks.tolist() == [[1.0, 2.0], [2.0, 1.0]]


def test_rank_table_errors(tmp_path: Path) -> None:
    with pytest.raises(FairDiError) as ctx:
        RankTable.from_csv(tmp_path / "missing.csv")
    assert ctx.value.code == ErrorCode.IO_ERROR

    path = tmp_path / "bad.csv"
    path.write_text("task,A,B\nt1,0.5,high\n")
    with pytest.raises(FairDiError) as ctx:
        RankTable.from_csv(path)
    assert ctx.value.code == ErrorCode.PARSE_ERROR

    with pytest.raises(FairDiError) as ctx:
        RankTable(["A", "B"], ["t1"], np.zeros((2, 2)))
    assert ctx.value.code == ErrorCode.SHAPE_ERROR


def test_friedman_consistent_rankings() -> None:
    table = RankTable.from_csv(RANKS_K3_N4)
    statistic, p = friedman(table)
    assert statistic == pytest.approx(8.0, abs=1e-12)
    assert p == pytest.approx(math.exp(-4.0), rel=1e-12)

    statistic, p = friedman_exact(table)
    assert statistic == pytest.approx(8.0, abs=1e-12)
    assert p == pytest.approx(6 / 1296, rel=1e-12)


def test_friedman_all_equal() -> None:
    table = RankTable.from_csv(ALL_EQUAL)
    assert friedman(table) == (0.0, 1.0)
    assert friedman_exact(table) == (0.0, 1.0)


def test_friedman_published_table() -> None:
    statistic, p = friedman(RankTable.from_csv(OVERALL_AUC))
    assert statistic == pytest.approx(20.8727, abs=1e-4)
    assert p == pytest.approx(3.36e-4, rel=0.01)


@pytest.mark.parametrize("k", [3, 4, 6])
def test_friedman_matches_scipy_without_ties(rng: np.random.Generator, k: int) -> None:
    for _ in range(20):
        n = int(rng.integers(2, 15))
        scores = rng.normal(size=(n, k))
        expected = sps.friedmanchisquare(*scores.T)
        table = RankTable([str(j) for j in range(k)], [str(i) for i in range(n)], scores)
        statistic, p = friedman(table)
        assert statistic == pytest.approx(expected.statistic, rel=1e-10, abs=1e-9)
        assert p == pytest.approx(expected.pvalue, rel=1e-8)


def test_friedman_errors() -> None:
    with pytest.raises(FairDiError) as ctx:
        friedman(RankTable(["A", "B"], ["t1"], [[0.1, 0.2]]))
    assert ctx.value.code == ErrorCode.INVALID_INPUT

    with pytest.raises(FairDiError) as ctx:
        friedman_exact(RankTable.from_csv(OVERALL_AUC))
    assert ctx.value.code == ErrorCode.INVALID_INPUT


def test_friedman_exact_is_a_probability(rng: np.random.Generator) -> None:
    for _ in range(10):
        scores = rng.integers(0, 3, size=(3, 3)).astype(float)
        statistic, p = friedman_exact(RankTable(["A", "B", "C"], ["1", "2", "3"], scores))
        assert statistic >= 0
        assert 0 < p <= 1


@pytest.mark.parametrize(
    "k, n, expected",
    [
        (5, 11, 1.8392),
        (2, 10, 0.6198),
        (3, 4, 1.6567),
    ],
)
def test_nemenyi_cd(k: int, n: int, expected: float) -> None:
    assert nemenyi_cd(k, n) == pytest.approx(expected, abs=1e-4)


def test_nemenyi_cd_monotone() -> None:
    for alpha in (0.05, 0.10):
        by_k = [nemenyi_cd(k, 12, alpha) for k in range(2, 11)]
        assert by_k == sorted(by_k)
        by_n = [nemenyi_cd(5, n, alpha) for n in range(1, 30)]
        assert by_n == sorted(by_n, reverse=True)
    assert nemenyi_cd(5, 11, 0.10) < nemenyi_cd(5, 11, 0.05)


@pytest.mark.parametrize(
    "k, n, alpha, code",
    [
        (1, 10, 0.05, ErrorCode.UNSUPPORTED_K),
        (11, 10, 0.05, ErrorCode.UNSUPPORTED_K),
        (5, 10, 0.01, ErrorCode.INVALID_PARAMETER),
        (5, 0, 0.05, ErrorCode.INVALID_INPUT),
    ],
)
def test_nemenyi_cd_errors(k: int, n: int, alpha: float, code: ErrorCode) -> None:
    with pytest.raises(FairDiError) as ctx:
        nemenyi_cd(k, n, alpha)
    assert ctx.value.code == code


def test_cliques() -> None:
    names = ["A", "B", "C", "D"]
    assert cliques(names, [1.0, 1.5, 3.5, 4.0], 1.0) == [["A", "B"], ["C", "D"]]
    assert cliques(names, [1.0, 2.0, 3.0, 4.0], 5.0) == [["A", "B", "C", "D"]]
    assert cliques(names, [1.0, 2.0, 3.0, 4.0], 0.5) == [["A"], ["B"], ["C"], ["D"]]
    assert cliques(names, [4.0, 3.0, 2.0, 1.0], 1.0) == [["D", "C"], ["C", "B"], ["B", "A"]]


def test_cd_diagram_published_table() -> None:
    data = cd_diagram_data(RankTable.from_csv(OVERALL_AUC))
    assert data["algorithms"] == ["FairDi", "SWAD", "FIS", "ERM", "GroupDRO"]
    assert data["avg_ranks"] == pytest.approx([17 / 11, 28 / 11, 32 / 11, 39 / 11, 49 / 11])
    assert (data["n_tasks"], data["n_algorithms"], data["alpha"]) == (11, 5, 0.05)
    assert data["gate_passed"]
    assert data["cd"] == pytest.approx(1.8392, abs=1e-4)
    assert data["cliques"] == [
        ["FairDi", "SWAD", "FIS"],
        ["SWAD", "FIS", "ERM"],
        ["FIS", "ERM", "GroupDRO"],
    ]
    assert [pair[:2] for pair in data["significant_pairs"]] == [
        ["FairDi", "ERM"],
        ["FairDi", "GroupDRO"],
        ["SWAD", "GroupDRO"],
    ]
    assert data["significant_pairs"][0][2] == pytest.approx(2.0)


def test_cd_diagram_gate_fails() -> None:
    data = cd_diagram_data(RankTable.from_csv(ALL_EQUAL))
    assert not data["gate_passed"]
    assert data["p_value"] == 1.0
    assert data["cd"] is None
    assert data["cliques"] == []
    assert data["significant_pairs"] == []


def test_cd_diagram_lower_is_better() -> None:
    table = RankTable.from_csv(RANKS_K3_N4, higher_is_better=False)
    data = cd_diagram_data(table, alpha=0.05)
    assert data["algorithms"] == ["C", "B", "A"]
    assert data["gate_passed"]
    assert data["cd"] == pytest.approx(nemenyi_cd(3, 4))


def test_friedman_with_ties_is_uncorrected() -> None:
    scores = np.array([[0.9, 0.9, 0.1], [0.8, 0.5, 0.5], [0.7, 0.6, 0.7], [0.9, 0.4, 0.2]])
    table = RankTable(["a", "b", "c"], [str(i) for i in range(4)], scores)
    n, k = 4, 3
    rank_sums = table.ranks.sum(axis=0)
    expected = 12.0 / (n * k * (k + 1)) * np.sum(rank_sums**2) - 3 * n * (k + 1)
    statistic, _ = friedman(table)
    assert statistic == pytest.approx(expected, abs=1e-12)
    assert statistic < sps.friedmanchisquare(*scores.T).statistic
