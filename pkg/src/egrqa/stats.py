"""Two-sample test for equality of proportions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Literal

from .errors import ContractError

Sided = Literal["one", "two"]


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal, ``1 - Phi(z)``."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class ProportionTestResult:
    x1: int
    n1: int
    x2: int
    n2: int
    pooled_p: float
    z: float
    p_value: float
    sided: Sided
    continuity_correction: bool
    degenerate: bool = False

    @property
    def p1(self) -> float:
        return self.x1 / self.n1

    @property
    def p2(self) -> float:
        return self.x2 / self.n2

    def variant(self) -> str:
        cc = "with" if self.continuity_correction else "without"
        return f"{self.sided}-sided pooled z-test {cc} continuity correction"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant()
        return d


def two_proportion_test(
    x1: int,
    n1: int,
    x2: int,
    n2: int,
    sided: Sided = "one",
    continuity_correction: bool = True,
) -> ProportionTestResult:
    """Pooled z-test of ``x1/n1`` against ``x2/n2``.

    The one-sided alternative is ``p1 > p2``. With the correction the
    absolute difference is shrunk by ``(1/n1 + 1/n2) / 2``, never past zero.
    """
    if n1 <= 0 or n2 <= 0:
        raise ContractError("sample sizes must be positive")
    if not (0 <= x1 <= n1 and 0 <= x2 <= n2):
        raise ContractError("successes must lie in [0, n]")
    if sided not in ("one", "two"):
        raise ContractError(f"sided must be 'one' or 'two', not {sided!r}")
    pooled = (x1 + x2) / (n1 + n2)
    if x1 + x2 == 0 or x1 + x2 == n1 + n2:
        return ProportionTestResult(x1, n1, x2, n2, pooled, 0.0, 1.0, sided, continuity_correction, degenerate=True)
    # numerators over the common denominator 2*n1*n2 keep the shrinkage exact
    gap = 2 * abs(x1 * n2 - x2 * n1)
    shrunk = max(0, gap - (n1 + n2)) if continuity_correction else gap
    inv = 1.0 / n1 + 1.0 / n2
    se = math.sqrt(pooled * (1.0 - pooled) * inv)
    z = shrunk / (2 * n1 * n2) / se
    if x1 * n2 < x2 * n1:
        z = -z
    if sided == "one":
        p = normal_sf(z)
    else:
        p = min(1.0, 2.0 * normal_sf(abs(z)))
    return ProportionTestResult(x1, n1, x2, n2, pooled, z, p, sided, continuity_correction)


def format_percent(correct: int, total: int) -> str:
    """``correct/total`` as a percentage, two decimals, rounding half up."""
    if total <= 0:
        return "0.00%"
    pct = (Decimal(correct) * 100 / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{pct}%"
