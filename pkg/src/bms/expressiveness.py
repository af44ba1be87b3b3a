"""How many distinct behaviors each description scheme can separate.

Observation counts a behavior as a single opaque event (one state).
Representation assigns one of k values to each of n dimensions: k^n.
Structure records one of k connectivity states per ordered pair: k^(n(n-1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

MODES = ("observation", "representation", "structure")
DIGIT_CAP = 10**6


@dataclass(frozen=True)
class Power:
    mode: str
    n: int
    k: int
    exponent: int
    log2: float
    exact: int | None
    overflow: bool = False


def _exponent(mode: str, n: int) -> int:
    if mode == "observation":
        return 0
    if mode == "representation":
        return n
    if mode == "structure":
        return n * (n - 1)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def power(mode: str, n: int, k: int, digit_cap: int = DIGIT_CAP) -> Power:
    """Count as ``k ** exponent``; the big integer is kept only under ``digit_cap`` digits."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    e = _exponent(mode, n)
    log2 = e * math.log2(k) if e else 0.0
    digits = e * math.log10(k) + 1 if k > 1 else 1
    if digits > digit_cap:
        return Power(mode, n, k, e, log2, None, overflow=True)
    return Power(mode, n, k, e, log2, k**e)


def crossover(k_rep: int, k_struct: int) -> int | None:
    """Smallest n with k_struct^(n(n-1)) >= k_rep^n, or None when structure never catches up.

    For n >= 1 the inequality reduces to k_struct^(n-1) >= k_rep, tested in
    exact integers.
    """
    if k_rep < 1 or k_struct < 1:
        raise ValueError("k values must be >= 1")
    if k_struct == 1:
        return None
    n, lhs = 1, 1
    while lhs < k_rep:
        lhs *= k_struct
        n += 1
    return n


def curve(ns: Iterable[int], modes: Sequence[str] = MODES, k_rep: int = 100, k_struct: int = 2
          ) -> list[tuple[int, str, float]]:
    """Rows ``(n, mode, log2 count)``, n-major."""
    ns = list(ns)
    if not ns:
        raise ValueError("empty n range")
    rows = []
    for n in ns:
        for mode in modes:
            k = k_struct if mode == "structure" else k_rep
            rows.append((n, mode, power(mode, n, k).log2))
    return rows
