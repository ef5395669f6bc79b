"""Post-hoc OoD scores computed from exported logits and embeddings.

All scores follow the package orientation (larger = more in-distribution):
MSP and the negative energy already do; the KNN distance is negated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dsde.datamodel import Label, ScoreRow
from dsde.errors import ScorerError

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LogitRecord:
    sample_id: str
    logits: np.ndarray


@dataclass(frozen=True)
class FeatureBank:
    """Unit-norm in-distribution embeddings of one model."""

    model_id: str
    vectors: np.ndarray
    d: int

    def __post_init__(self) -> None:
        v = self.vectors
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] != self.d:
            raise ScorerError("DIMENSION_MISMATCH", f"bank must be (n, {self.d}) with n >= 1")
        if not np.all(np.isfinite(v)):
            raise ScorerError("NONFINITE_FEATURE", "bank contains non-finite entries")
        norms = np.linalg.norm(v, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            raise ScorerError(
                "UNNORMALIZED_BANK",
                f"bank vector {int(bad[0])} has norm {norms[bad[0]]:.6g}; "
                "banks must be L2-normalised",
            )

    @classmethod
    def from_vectors(cls, model_id: str, vectors: np.ndarray, normalize: bool = False) -> FeatureBank:
        v = np.array(vectors, dtype=float)
        if v.ndim != 2:
            raise ScorerError("DIMENSION_MISMATCH", "bank vectors must form a 2-D array")
        if normalize:
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ScorerError("ZERO_VECTOR", "cannot normalise a zero bank vector")
            v = v / norms
        v.flags.writeable = False
        return cls(model_id, v, v.shape[1])


def _check_logits(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float).ravel()
    if z.size == 0:
        raise ScorerError("EMPTY_LOGITS", "logit vector is empty")
    if not np.all(np.isfinite(z)):
        raise ScorerError("NONFINITE_LOGIT", "logits must be finite")
    return z


def msp_score(logits: Sequence[float] | np.ndarray) -> float:
    """Maximum softmax probability."""
    z = _check_logits(logits)
    e = np.exp(z - z.max())
    return float(e.max() / e.sum())


def energy_score(logits: Sequence[float] | np.ndarray, T: float = 1.0) -> float:
    """Negative free energy ``T * log sum exp(z / T)``."""
    if not T > 0:
        raise ScorerError("NONPOSITIVE_TEMPERATURE", f"T={T!r} must be > 0")
    z = _check_logits(logits) / T
    zmax = z.max()
    return float(T * (zmax + math.log(np.exp(z - zmax).sum())))


def _unit(feature: Sequence[float] | np.ndarray) -> np.ndarray:
    q = np.asarray(feature, dtype=float).ravel()
    if not np.all(np.isfinite(q)):
        raise ScorerError("NONFINITE_FEATURE", "feature vector must be finite")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ScorerError("ZERO_VECTOR", "cannot normalise a zero feature vector")
    return q / norm


def knn_score(feature: Sequence[float] | np.ndarray, bank: FeatureBank, k: int = 50) -> float:
    """Negated distance from the normalised query to its k-th nearest bank vector."""
    n = bank.vectors.shape[0]
    if not 1 <= k <= n:
        raise ScorerError("K_OUT_OF_RANGE", f"k={k} outside 1..{n}")
    q = np.asarray(feature, dtype=float).ravel()
    if q.size != bank.d:
        raise ScorerError("DIMENSION_MISMATCH", f"feature has dimension {q.size}, bank has {bank.d}")
    dist = np.linalg.norm(bank.vectors - _unit(q), axis=1)
    return -float(np.partition(dist, k - 1)[k - 1])


def score_dataset(
    records: Iterable[tuple[str, Sequence[float] | np.ndarray]],
    scorer: str,
    *,
    model_id: str,
    dataset_id: str,
    label: Label | str = Label.UNKNOWN,
    bank: FeatureBank | None = None,
    k: int = 50,
    temperature: float = 1.0,
) -> list[ScoreRow]:
    """Apply one scorer to ``(sample_id, vector)`` records of a single model.

    All records must share one dimension (the bank's, for KNN). Errors from
    the scorer are re-raised with the offending sample id.
    """
    label = Label(getattr(label, "value", label))
    scorer = scorer.lower()
    if scorer == "knn" and bank is None:
        raise ScorerError("MISSING_BANK", "knn scoring needs a feature bank")
    if scorer not in ("msp", "energy", "knn"):
        raise ScorerError("UNKNOWN_SCORER", f"unknown scorer {scorer!r}")

    rows = []
    dim = bank.d if bank is not None else None
    for sample_id, vec in records:
        n = np.asarray(vec).size
        if dim is None:
            dim = n
        elif n != dim:
            raise ScorerError(
                "DIMENSION_MISMATCH", f"sample {sample_id!r}: dimension {n}, expected {dim}"
            )
        try:
            if scorer == "msp":
                s = msp_score(vec)
            elif scorer == "energy":
                s = energy_score(vec, temperature)
            else:
                s = knn_score(vec, bank, k)
        except ScorerError as exc:
            raise ScorerError(exc.code, f"sample {sample_id!r}: {exc.message}") from exc
        rows.append(ScoreRow(dataset_id, sample_id, model_id, s, label))
    return rows
