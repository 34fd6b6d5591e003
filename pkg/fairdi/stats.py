"""
Rank statistics for comparing algorithms across tasks: average ranks, the
Friedman test, the Nemenyi critical difference and CD-diagram data.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from fairdi.errors import FairDiError, ErrorCode

logger = logging.getLogger(__name__)

# Two-tailed studentized range quantiles divided by sqrt(2), for k = 2..10
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
}
MAX_PERMUTATIONS = 10**6
EXACT_TOLERANCE = 1e-9


def rank_rows(scores: np.ndarray | Sequence[Sequence[float]], higher_is_better: bool = True) -> np.ndarray:
    """
    Fractional ranks per row, 1 for the best score, ties averaged.
    For example:
        >>> rank_rows([[0.9, 0.9, 0.7]]).tolist()
        [[1.5, 1.5, 3.0]]
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
        raise FairDiError(
            f"Need at least one row and two columns, got shape {scores.shape}",
            code=ErrorCode.INVALID_INPUT,
        )
    bad = np.argwhere(np.isnan(scores))
    if bad.size:
        row, col = (int(v) for v in bad[0])
        raise FairDiError(
            f"Score at row {row}, column {col} is NaN",
            code=ErrorCode.INVALID_INPUT,
            cell=(row, col),
        )
    return stats.rankdata(-scores if higher_is_better else scores, axis=1)


@dataclass
class RankTable:
    algorithms: list[str]
    tasks: list[str]
    scores: np.ndarray
    higher_is_better: bool = True
    ranks: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.tasks), len(self.algorithms)):
            raise FairDiError(
                f"Scores of shape {self.scores.shape} do not match "
                f"{len(self.tasks)} tasks x {len(self.algorithms)} algorithms",
                code=ErrorCode.SHAPE_ERROR,
            )
        self.ranks = rank_rows(self.scores, self.higher_is_better)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_algorithms(self) -> int:
        return len(self.algorithms)

    @property
    def avg_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    @classmethod
    def from_csv(cls, path: str | Path, higher_is_better: bool = True) -> RankTable:
        """
        Rows are tasks and columns algorithms. A leading non-numeric column
        holds task names; without one, tasks are numbered.
        """
        try:
            frame = pd.read_csv(path)
        except FileNotFoundError as e:
            raise FairDiError(f"No such file: {path}", code=ErrorCode.IO_ERROR) from e
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise FairDiError(f"Malformed CSV {path}: {e}", code=ErrorCode.PARSE_ERROR) from e
        if frame.shape[1] and not pd.api.types.is_numeric_dtype(frame.iloc[:, 0]):
            tasks = frame.iloc[:, 0].astype(str).tolist()
            frame = frame.iloc[:, 1:]
        else:
            tasks = [str(i) for i in range(len(frame))]
        try:
            scores = frame.to_numpy(dtype=np.float64)
        except ValueError as e:
            raise FairDiError(f"{path}: non-numeric score: {e}", code=ErrorCode.PARSE_ERROR) from e
        return cls(
            algorithms=[str(c) for c in frame.columns],
            tasks=tasks,
            scores=scores,
            higher_is_better=higher_is_better,
        )

    def ranks_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.ranks, index=self.tasks, columns=self.algorithms)


def _chi_square(rank_sums: np.ndarray, n: int, k: int) -> float:
    # centred form so equal rank sums give exactly zero
    centred = rank_sums - n * (k + 1) / 2.0
    return float(12.0 / (n * k * (k + 1)) * np.sum(centred**2))


def _check_table(table: RankTable) -> None:
    if table.n_tasks < 2 or table.n_algorithms < 2:
        raise FairDiError(
            f"Friedman test needs N >= 2 and k >= 2, got N={table.n_tasks}, "
            f"k={table.n_algorithms}",
            code=ErrorCode.INVALID_INPUT,
        )


def friedman(table: RankTable) -> tuple[float, float]:
    """
    Friedman chi-square over column rank sums, with the p-value of the
    chi-square approximation on k - 1 degrees of freedom.
    """
    _check_table(table)
    n, k = table.n_tasks, table.n_algorithms
    statistic = _chi_square(table.ranks.sum(axis=0), n, k)
    p = float(special.gammaincc((k - 1) / 2.0, statistic / 2.0))
    return statistic, p


def friedman_exact(table: RankTable) -> tuple[float, float]:
    """
    Friedman chi-square with the exact permutation p-value: the share of
    within-row rank permutations whose statistic reaches the observed one.
    """
    _check_table(table)
    n, k = table.n_tasks, table.n_algorithms
    if math.factorial(k) ** n > MAX_PERMUTATIONS:
        raise FairDiError(
            f"Exact enumeration of ({k}!)^{n} permutations is too large",
            code=ErrorCode.INVALID_INPUT,
        )
    statistic = _chi_square(table.ranks.sum(axis=0), n, k)

    # distribution of column rank-sum vectors, built one row at a time
    counts: dict[tuple[float, ...], int] = {(0.0,) * k: 1}
    for row in table.ranks:
        row_perms = list(itertools.permutations(row.tolist()))
        step: dict[tuple[float, ...], int] = {}
        for sums, count in counts.items():
            for perm in row_perms:
                key = tuple(s + r for s, r in zip(sums, perm))
                step[key] = step.get(key, 0) + count
        counts = step

    total = 0
    extreme = 0
    for sums, count in counts.items():
        total += count
        if _chi_square(np.array(sums), n, k) >= statistic - EXACT_TOLERANCE:
            extreme += count
    return statistic, extreme / total


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """
    Nemenyi critical difference q_alpha(k) * sqrt(k(k+1) / (6N)).
    For example:
        >>> round(nemenyi_cd(2, 10), 4)
        0.6198
    """
    if alpha not in NEMENYI_Q:
        raise FairDiError(
            f"Unsupported significance level {alpha}; choose one of {sorted(NEMENYI_Q)}",
            code=ErrorCode.INVALID_PARAMETER,
        )
    q = NEMENYI_Q[alpha]
    if not 2 <= k <= len(q) + 1:
        raise FairDiError(
            f"Nemenyi constants cover 2 <= k <= {len(q) + 1}, got {k}",
            code=ErrorCode.UNSUPPORTED_K,
        )
    if n < 1:
        raise FairDiError(f"Need at least one task, got {n}", code=ErrorCode.INVALID_INPUT)
    return q[k - 2] * math.sqrt(k * (k + 1) / (6.0 * n))


def cliques(names: Sequence[str], avg_ranks: Sequence[float], cd: float) -> list[list[str]]:
    """
    Maximal contiguous runs of the rank-sorted algorithms whose average ranks
    all lie within `cd` of each other. Runs contained in a longer run are
    dropped; an algorithm far from every other forms a singleton.
    """
    order = sorted(range(len(names)), key=lambda i: (avg_ranks[i], i))
    ranks = [avg_ranks[i] for i in order]
    intervals = []
    for i in range(len(order)):
        j = i
        while j + 1 < len(order) and ranks[j + 1] - ranks[i] <= cd:
            j += 1
        intervals.append((i, j))
    maximal = [
        (i, j)
        for i, j in intervals
        if not any(a <= i and j <= b and (a, b) != (i, j) for a, b in intervals)
    ]
    return [[names[order[m]] for m in range(i, j + 1)] for i, j in maximal]


def cd_diagram_data(table: RankTable, alpha: float = 0.05) -> dict[str, Any]:
    """
    Machine-readable critical-difference diagram.

    The Friedman test gates the post-hoc step: when p >= alpha the payload
    carries `gate_passed: False` and no cliques.
    """
    statistic, p = friedman(table)
    avg = table.avg_ranks
    order = sorted(range(table.n_algorithms), key=lambda i: (avg[i], i))
    data: dict[str, Any] = {
        "algorithms": [table.algorithms[i] for i in order],
        "avg_ranks": [float(avg[i]) for i in order],
        "n_tasks": table.n_tasks,
        "n_algorithms": table.n_algorithms,
        "alpha": alpha,
        "chi2": statistic,
        "p_value": p,
        "gate_passed": p < alpha,
    }
    if not data["gate_passed"]:
        logger.info("Friedman test not significant (p=%.4g >= %s); skipping post-hoc", p, alpha)
        data.update(cd=None, cliques=[], significant_pairs=[])
        return data

    cd = nemenyi_cd(table.n_algorithms, table.n_tasks, alpha)
    names = data["algorithms"]
    ranks = data["avg_ranks"]
    pairs = [
        [names[a], names[b], ranks[b] - ranks[a]]
        for a, b in itertools.combinations(range(len(names)), 2)
        if ranks[b] - ranks[a] > cd
    ]
    data.update(cd=cd, cliques=cliques(names, ranks, cd), significant_pairs=pairs)
    return data
