"""Independent reference implementations used only as test oracles.

None of these import production code paths they are meant to check.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import accumulate

import mpmath

M64 = (1 << 64) - 1


# -- recursive splitter, prefix-sum formulation ----------------------------


def naive_fragments(text: str, seps: tuple[str, ...], max_chars: int, level: int = 0) -> list[str]:
    j = level
    while seps[j] != "" and seps[j] not in text:
        j += 1
    sep = seps[j]
    if sep == "":
        pieces = list(text)
    else:
        raw = text.split(sep)
        pieces = [p + sep for p in raw[:-1]]
        if raw[-1]:
            pieces.append(raw[-1])
    out: list[str] = []
    for p in pieces:
        if len(p) > max_chars and j + 1 < len(seps):
            out += naive_fragments(p, seps, max_chars, j + 1)
        else:
            out.append(p)
    return out


def naive_split(
    text: str, max_chars: int = 3000, overlap: int = 1000, seps: tuple[str, ...] = ("\n\n", "\n", " ", "")
) -> list[tuple[int, int]]:
    """Chunk spans from greedy merging with a whole-fragment overlap seed."""
    if not text:
        return []
    frags = naive_fragments(text, seps, max_chars)
    starts = [0] + list(accumulate(len(f) for f in frags))  # starts[k] = offset of fragment k
    n = len(frags)

    def total(a: int, b: int) -> int:  # length of fragments a..b-1
        return starts[b] - starts[a]

    spans = []
    i = 0
    while True:
        j = i + 1
        while j < n and total(i, j + 1) <= max_chars:
            j += 1
        spans.append((starts[i], starts[j]))
        if j == n:
            return spans
        k = i + 1
        while not (total(k, j) <= overlap and total(k, j + 1) <= max_chars):
            k += 1
        i = k


# -- hashing / PRNG ---------------------------------------------------------


def ref_fnv1a_64(data: bytes) -> int:
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % (1 << 64)
    return h


def ref_splitmix64(seed: int, count: int) -> list[int]:
    out = []
    x = seed
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) % (1 << 64)
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % (1 << 64)
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % (1 << 64)
        out.append(z ^ (z >> 31))
    return out


def ref_hash_embed(text: str, dim: int) -> list[float]:
    vals = [(x >> 11) / 2.0**53 * 2.0 - 1.0 for x in ref_splitmix64(ref_fnv1a_64(text.encode()), dim)]
    norm = math.sqrt(math.fsum(v * v for v in vals))
    return [v / norm for v in vals]


# -- exact nearest neighbours ----------------------------------------------


def brute_force_topk(rows, query, k: int) -> list[int]:
    """Row ordinals of the k largest inner products; ties to the lower row."""
    scored = []
    for r, row in enumerate(rows):
        s = math.fsum(float(a) * float(b) for a, b in zip(row, query))
        scored.append((-s, r))
    scored.sort()
    return [r for _, r in scored[:k]]


# -- proportions ------------------------------------------------------------


def ref_proportion_test(x1: int, n1: int, x2: int, n2: int, correction: bool) -> tuple[float, float, float]:
    """(z, one-sided p, two-sided p) in exact rationals and 40-digit floats."""
    mpmath.mp.dps = 40
    p1, p2 = Fraction(x1, n1), Fraction(x2, n2)
    pooled = Fraction(x1 + x2, n1 + n2)
    inv = Fraction(1, n1) + Fraction(1, n2)
    cc = min(abs(p1 - p2), inv / 2) if correction else Fraction(0)
    num = abs(p1 - p2) - cc
    var = pooled * (1 - pooled) * inv
    z = mpmath.mpf(num.numerator) / num.denominator / mpmath.sqrt(mpmath.mpf(var.numerator) / var.denominator)
    if p1 < p2:
        z = -z
    one = 1 - mpmath.ncdf(z)
    two = min(1, 2 * (1 - mpmath.ncdf(abs(z))))
    return float(z), float(one), float(two)


def full_sort_topk(rows, query, k: int) -> list[int]:
    """Score every row, fully sort by (-score, row) and cut at k."""
    import numpy as np

    scores = np.asarray(rows, dtype=np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(r) for r in order[:k]]
