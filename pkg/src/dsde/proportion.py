"""Estimators of the proportion of true nulls among a vector of p-values.

Two estimators are provided: Storey's fixed-lambda estimator and the
DOS-Storey estimator, which picks lambda at the change-point of the sorted
p-value plot located by maximising the difference-of-slopes (DOS)
statistic. Scalar versions operate on one ``SortedPValues``; the
``*_batch`` versions take an (N, m) array whose rows are already sorted and
are used by the Monte Carlo and evaluation paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from dsde.errors import DsdeError


class Pi0Method(str, Enum):
    STOREY_FIXED = "STOREY_FIXED"
    DOS_STOREY = "DOS_STOREY"


@dataclass(frozen=True)
class SortedPValues:
    values: np.ndarray
    m: int

    def __post_init__(self) -> None:
        v = self.values
        if self.m < 1 or len(v) != self.m:
            raise DsdeError("EMPTY_PVALUES", "need at least one p-value")
        if np.any(np.isnan(v)) or np.any(v < 0) or np.any(v > 1):
            raise DsdeError("PVALUE_OUT_OF_RANGE", "p-values must lie in [0, 1]")
        if np.any(np.diff(v) < 0):
            raise DsdeError("UNSORTED_PVALUES", "values must be non-decreasing")

    @classmethod
    def of(cls, pvalues: Iterable[float]) -> SortedPValues:
        arr = np.sort(np.asarray(list(pvalues), dtype=float), kind="stable")
        arr.flags.writeable = False
        return cls(arr, int(arr.size))

    def __getitem__(self, rank: int) -> float:
        """1-based order statistic p_(rank)."""
        if not 1 <= rank <= self.m:
            raise DsdeError("INDEX_OUT_OF_RANGE", f"rank {rank} outside 1..{self.m}")
        return float(self.values[rank - 1])


@dataclass(frozen=True)
class Pi0Estimate:
    value: float
    method: Pi0Method
    lambda_used: float
    changepoint: int | None = None
    raw_value: float = math.nan


def _clip(raw: float, floor: float) -> float:
    return min(1.0, max(floor, raw))


def storey_pi0(p: SortedPValues, lam: float = 0.5, floor: float = 0.0) -> Pi0Estimate:
    """``#{p > lam} / (m (1 - lam))``, clipped to ``[floor, 1]``."""
    if not 0 < lam < 1:
        raise DsdeError("LAMBDA_OUT_OF_RANGE", f"lambda={lam!r} not in (0, 1)")
    above = int(np.count_nonzero(p.values > lam))
    raw = above / (p.m * (1.0 - lam))
    return Pi0Estimate(_clip(raw, floor), Pi0Method.STOREY_FIXED, lam, None, raw)


def dos_statistic(p: SortedPValues, i: int, beta: float = 1.0) -> float:
    """``(p_(2i) - 2 p_(i)) / i**beta`` for ``1 <= i <= m // 2``."""
    if not 1 <= i <= p.m // 2:
        raise DsdeError("INDEX_OUT_OF_RANGE", f"i={i} outside 1..{p.m // 2}")
    return (p[2 * i] - 2.0 * p[i]) / i**beta


def search_range(m: int, c_m: float) -> tuple[int, int]:
    """Inclusive index range ``[ceil(m c_m), floor(m / 2)]``; lower end at least 1."""
    # 1e-9 absorbs products such as 7 * (2/7) landing a hair above an integer
    lo = max(1, math.ceil(m * c_m - 1e-9))
    return lo, m // 2


def dos_changepoint(p: SortedPValues, beta: float = 1.0, c_m: float = 2 / 7) -> int:
    """Index maximising the DOS statistic; ties go to the smallest index."""
    if not 0 < c_m < 1:
        raise DsdeError("CM_OUT_OF_RANGE", f"c_m={c_m!r} not in (0, 1)")
    lo, hi = search_range(p.m, c_m)
    if lo > hi:
        raise DsdeError("EMPTY_SEARCH_RANGE", f"no DOS candidates for m={p.m}, c_m={c_m}")
    best_i, best_d = lo, dos_statistic(p, lo, beta)
    for i in range(lo + 1, hi + 1):
        d = dos_statistic(p, i, beta)
        if d > best_d:
            best_i, best_d = i, d
    return best_i


def dos_storey_pi0(
    p: SortedPValues,
    beta: float = 1.0,
    c_m: float = 2 / 7,
    form: str = "RATIO",
    floor: float = 0.0,
) -> Pi0Estimate:
    """Storey estimate evaluated at lambda = p_(k), k the DOS change-point.

    ``form="RATIO"`` divides by ``1 - p_(k)`` as the Storey estimator does;
    ``form="LITERAL_EQ15"`` multiplies instead. When ``p_(k) == 1`` the ratio
    is undefined and the estimate falls back to 1.
    """
    form = getattr(form, "value", form)
    k = dos_changepoint(p, beta, c_m)
    lam = p[k]
    head = 1.0 - k / p.m
    if form == "RATIO":
        raw = head / (1.0 - lam) if lam < 1.0 else math.inf
    elif form == "LITERAL_EQ15":
        raw = head * (1.0 - lam)
    else:
        raise DsdeError("UNKNOWN_PI0_FORM", f"unknown pi0 form {form!r}")
    return Pi0Estimate(_clip(raw, floor), Pi0Method.DOS_STOREY, lam, k, raw)


# ---------------------------------------------------------------------------
# Batched versions over row-sorted (N, m) arrays
# ---------------------------------------------------------------------------


def storey_pi0_batch(p_sorted: np.ndarray, lam: float = 0.5) -> np.ndarray:
    """Unclipped Storey estimates, one per row."""
    if not 0 < lam < 1:
        raise DsdeError("LAMBDA_OUT_OF_RANGE", f"lambda={lam!r} not in (0, 1)")
    m = p_sorted.shape[1]
    return np.count_nonzero(p_sorted > lam, axis=1) / (m * (1.0 - lam))


def dos_changepoint_batch(p_sorted: np.ndarray, beta: float, c_m: float) -> np.ndarray:
    m = p_sorted.shape[1]
    lo, hi = search_range(m, c_m)
    if lo > hi:
        raise DsdeError("EMPTY_SEARCH_RANGE", f"no DOS candidates for m={m}, c_m={c_m}")
    idx = np.arange(lo, hi + 1)
    d = (p_sorted[:, 2 * idx - 1] - 2.0 * p_sorted[:, idx - 1]) / idx.astype(float) ** beta
    # argmax returns the first maximum, i.e. the smallest index on ties
    return idx[np.argmax(d, axis=1)]


def dos_storey_pi0_batch(
    p_sorted: np.ndarray,
    beta: float,
    c_m: float,
    form: str = "RATIO",
    floor: float = 0.0,
    clip: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(pi0, k)`` per row. Unclipped RATIO values at ``p_(k)=1`` are inf."""
    form = getattr(form, "value", form)
    n, m = p_sorted.shape
    k = dos_changepoint_batch(p_sorted, beta, c_m)
    lam = p_sorted[np.arange(n), k - 1]
    head = 1.0 - k / m
    if form == "RATIO":
        with np.errstate(divide="ignore"):
            raw = np.where(lam < 1.0, head / np.where(lam < 1.0, 1.0 - lam, 1.0), np.inf)
    elif form == "LITERAL_EQ15":
        raw = head * (1.0 - lam)
    else:
        raise DsdeError("UNKNOWN_PI0_FORM", f"unknown pi0 form {form!r}")
    if clip:
        raw = np.minimum(1.0, np.maximum(floor, raw))
    return raw, k
