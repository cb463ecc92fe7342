"""Counting length-2k tuples over an l-symbol alphabet in which every
symbol appears an even number of times, and checking the moment-style
bound (2k-1)!! * l^k against the exact counts.

The closed form (1/2^l) sum_s C(l,s) (2s-l)^{2k} is evaluated in exact
integer arithmetic; brute-force enumeration is available as an
independent cross-check on small ranges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

K_MAX = 6
L_MAX = 8
ENUM_CAP = 1 << 24


def double_factorial(n: int) -> int:
    """n!! with (-1)!! = 1."""
    if n < 0:
        return 1
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def count_even_tuples(k: int, l: int) -> int:
    """Exact count of even-occurrence tuples of length 2k over l symbols."""
    if not (1 <= k <= K_MAX and 1 <= l <= L_MAX):
        raise ValueError(f"supported range is 1 <= k <= {K_MAX}, 1 <= l <= {L_MAX}")
    total = sum(math.comb(l, s) * (2 * s - l) ** (2 * k) for s in range(l + 1))
    count, rem = divmod(total, 1 << l)
    if rem:
        raise ArithmeticError("closed form did not divide evenly")
    return count


def count_even_tuples_enumerated(k: int, l: int) -> int:
    """Independent brute-force count: walk all l^(2k) tuples tracking a
    per-symbol parity bitmask."""
    if not (1 <= k <= K_MAX and 1 <= l <= L_MAX):
        raise ValueError(f"supported range is 1 <= k <= {K_MAX}, 1 <= l <= {L_MAX}")
    total = l ** (2 * k)
    if total > ENUM_CAP:
        raise ValueError(f"enumeration capped at {ENUM_CAP} tuples, need {total}")
    count = 0
    chunk = 1 << 20
    for lo in range(0, total, chunk):
        ids = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        parity = np.zeros_like(ids)
        rest = ids.copy()
        for _ in range(2 * k):
            parity ^= np.int64(1) << (rest % l)
            rest //= l
        count += int(np.count_nonzero(parity == 0))
    return count


@dataclass(frozen=True)
class TupleBoundRow:
    k: int
    l: int
    count: int
    bound: int
    passed: bool


def check_khintchine_bound(k_max: int, l_max: int) -> list:
    """Table of exact counts against (2k-1)!! * l^k over the full grid."""
    rows = []
    for k in range(1, k_max + 1):
        for l in range(1, l_max + 1):
            count = count_even_tuples(k, l)
            bound = double_factorial(2 * k - 1) * l ** k
            rows.append(TupleBoundRow(k, l, count, bound, count <= bound))
    return rows
