"""Empirical CDFs over calibration scores and the p-values derived from them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from dsde.errors import DsdeError

if TYPE_CHECKING:
    from dsde.datamodel import CalibrationBank, PValueMatrix, PValueMode, ScoreMatrix


@dataclass(frozen=True)
class EmpiricalCdf:
    sorted_scores: np.ndarray
    n: int

    def __post_init__(self) -> None:
        if self.n < 1 or self.n != len(self.sorted_scores):
            raise DsdeError("EMPTY_CALIBRATION", "calibration needs at least one score")
        if np.any(np.diff(self.sorted_scores) < 0):
            raise DsdeError("UNSORTED_CALIBRATION", "sorted_scores must be non-decreasing")

    def count_le(self, s: float | np.ndarray) -> np.ndarray:
        """Number of calibration scores <= s (vectorised)."""
        return np.searchsorted(self.sorted_scores, s, side="right")


def build_ecdf(scores: Iterable[float]) -> EmpiricalCdf:
    arr = np.array(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=float)
    if arr.size == 0:
        raise DsdeError("EMPTY_CALIBRATION", "calibration needs at least one score")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise DsdeError("NONFINITE_SCORE", f"calibration score at index {bad} is {arr[bad]!r}")
    arr = np.sort(arr.ravel(), kind="stable")
    arr.flags.writeable = False
    return EmpiricalCdf(arr, int(arr.size))


def ecdf_eval(F: EmpiricalCdf, s: float) -> float:
    """Fraction of calibration scores <= s."""
    return int(F.count_le(s)) / F.n


def p_value(F: EmpiricalCdf, s_star: float, mode: PValueMode | str = "SMOOTHED") -> float:
    """Left-tail p-value of a test score against the calibration scores.

    LITERAL returns the ECDF value itself and can be exactly 0. SMOOTHED
    returns ``(count + 1) / (n + 1)``, which is never 0 and is a valid
    p-value in finite samples when the test score is exchangeable with the
    calibration scores.
    """
    return float(p_values(F, np.asarray([s_star], dtype=float), mode)[0])


def p_values(F: EmpiricalCdf, s: np.ndarray, mode: PValueMode | str = "SMOOTHED") -> np.ndarray:
    count = F.count_le(np.asarray(s, dtype=float))
    mode = getattr(mode, "value", mode)
    if mode == "LITERAL":
        return count / F.n
    if mode == "SMOOTHED":
        return (count + 1.0) / (F.n + 1.0)
    raise DsdeError("UNKNOWN_PVALUE_MODE", f"unknown p-value mode {mode!r}")


def tpr_threshold(F: EmpiricalCdf, alpha: float) -> float:
    """Smallest calibration score whose ECDF value reaches ``alpha``.

    A detector declaring ID iff ``score > threshold`` keeps a fraction of
    roughly ``1 - alpha`` of in-distribution samples.
    """
    if not 0 < alpha <= 1:
        raise DsdeError("ALPHA_OUT_OF_RANGE", f"alpha={alpha!r} not in (0, 1]")
    # F(x_(k)) >= k/n, with equality for distinct scores; ties only push it up,
    # so start at ceil(alpha*n) and step back while the earlier order
    # statistic already qualifies.
    k = max(1, math.ceil(alpha * F.n - 1e-12))
    xs = F.sorted_scores
    while k > 1 and ecdf_eval(F, xs[k - 2]) >= alpha:
        k -= 1
    while ecdf_eval(F, xs[k - 1]) < alpha:
        k += 1
    return float(xs[k - 1])


def single_model_detect(F: EmpiricalCdf, score: float, alpha: float) -> bool:
    """Thresholded single-model detector; True means the sample is OoD."""
    return score <= tpr_threshold(F, alpha)


def pvalue_matrix(
    matrix: ScoreMatrix,
    bank: CalibrationBank,
    mode: PValueMode | str = "SMOOTHED",
) -> PValueMatrix:
    """Convert every cell of a score matrix to a p-value using the bank."""
    from dsde.datamodel import PValueMatrix

    p = np.empty_like(matrix.scores, dtype=float)
    for j, model_id in enumerate(matrix.model_ids):
        p[:, j] = p_values(bank[model_id], matrix.scores[:, j], mode)
    p.flags.writeable = False
    return PValueMatrix(
        sample_ids=matrix.sample_ids,
        model_ids=matrix.model_ids,
        p=p,
        labels=matrix.labels,
        dataset_ids=(matrix.dataset_id,) * len(matrix.sample_ids),
    )
