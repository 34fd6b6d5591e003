from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from fairdi.errors import FairDiError, ErrorCode


def apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """
    Split an integer total by ratios using largest remainders.

    Ties between equal remainders go to the earlier ratio.
    For example:
        >>> apportion(100, [0.8, 0.1, 0.1])
        [80, 10, 10]
        >>> apportion(7, [0.5, 0.5])
        [4, 3]
        >>> apportion(5, [1.0, 0.0, 0.0])
        [5, 0, 0]

    Args:
        total: nonnegative integer to split
        ratios: nonnegative weights summing to 1
    Returns:
        list of integer counts summing to `total`
    """
    if total < 0:
        raise FairDiError(f"Cannot apportion {total}", code=ErrorCode.INVALID_PARAMETER)
    check_ratios(ratios)
    exact = [total * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def check_ratios(ratios: Sequence[float], name: str = "ratios") -> None:
    if not ratios:
        raise FairDiError(f"No {name} given", code=ErrorCode.INVALID_PARAMETER)
    if any(r < 0 or not np.isfinite(r) for r in ratios):
        raise FairDiError(
            f"{name} must be finite and nonnegative: {list(ratios)}",
            code=ErrorCode.INVALID_PARAMETER,
        )
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise FairDiError(
            f"{name} must sum to 1, got {sum(ratios)}",
            code=ErrorCode.INVALID_PARAMETER,
        )


def spawn_generators(seed: int | Sequence[int], n: int) -> list[np.random.Generator]:
    """Independent RNG streams derived from a master seed (or a seed key)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def params_digest(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over the raw bytes (and shapes) of a sequence of arrays"""
    h = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array, dtype=np.float64)
        h.update(repr(array.shape).encode())
        h.update(array.tobytes())
    return h.hexdigest()
