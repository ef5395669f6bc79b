"""Per-sample ensemble verdicts.

Every decision function takes the unsorted ``(model_id, p)`` pairs of one
test sample, sorts them itself (ties broken by model id) and returns a
:class:`~dsde.datamodel.Verdict`. ``ood_onset`` is the vectorised
counterpart used for Monte Carlo runs and alpha sweeps; it reproduces the
per-sample rules comparison for comparison.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from dsde.datamodel import Decision, ExperimentConfig, Method, Verdict, parse_method
from dsde.errors import DsdeError
from dsde.proportion import (
    SortedPValues,
    dos_storey_pi0,
    dos_storey_pi0_batch,
    search_range,
    storey_pi0,
    storey_pi0_batch,
)

log = logging.getLogger(__name__)

PValues = Mapping[str, float] | Iterable[tuple[str, float]]


@dataclass(frozen=True)
class RejectionResult:
    k_hat: int | None
    rejected_ranks: frozenset[int]
    q_values: np.ndarray
    pi0_used: float


def _sorted_pairs(pvals: PValues) -> tuple[list[str], np.ndarray]:
    pairs = list(pvals.items()) if isinstance(pvals, Mapping) else list(pvals)
    if not pairs:
        raise DsdeError("EMPTY_PVALUES", "need at least one (model_id, p) pair")
    ids = [m for m, _ in pairs]
    if len(set(ids)) != len(ids):
        raise DsdeError("DUPLICATE_MODEL", "model ids must be unique within a sample")
    pairs = sorted(((m, float(p)) for m, p in pairs), key=lambda t: (t[1], t[0]))
    values = np.array([p for _, p in pairs])
    if np.any(np.isnan(values)) or np.any(values < 0) or np.any(values > 1):
        raise DsdeError("PVALUE_OUT_OF_RANGE", "p-values must lie in [0, 1]")
    return [m for m, _ in pairs], values


def harmonic(m: int) -> float:
    return math.fsum(1.0 / j for j in range(1, m + 1))


def adaptive_bh(p: SortedPValues, pi0: float, alpha: float) -> RejectionResult:
    """Step-up rejection at ``pi0 * m * p_(i) / i <= alpha``.

    ``k_hat`` is the largest qualifying rank; the reported q-values are the
    running minimum from the top, so they are monotone in rank.
    """
    if not 0 <= pi0 <= 1:
        raise DsdeError("PI0_OUT_OF_RANGE", f"pi0={pi0!r} not in [0, 1]")
    if not 0 < alpha < 1:
        raise DsdeError("ALPHA_OUT_OF_RANGE", f"alpha={alpha!r} not in (0, 1)")
    ranks = np.arange(1, p.m + 1)
    q_raw = pi0 * p.m * p.values / ranks
    hits = np.flatnonzero(q_raw <= alpha)
    k_hat = int(hits[-1]) + 1 if hits.size else None
    q = np.minimum.accumulate(q_raw[::-1])[::-1]
    rejected = frozenset(range(1, k_hat + 1)) if k_hat else frozenset()
    return RejectionResult(k_hat, rejected, q, pi0)


def _verdict(
    method: Method,
    ids: list[str],
    values: np.ndarray,
    k_hat: int | None,
    pi0: float,
    sample_id: str,
    dataset_id: str,
) -> Verdict:
    if k_hat:
        # models tied with p_(k) must not depend on sort order
        while k_hat < len(values) and values[k_hat] == values[k_hat - 1]:
            k_hat += 1
        decision, flagged = Decision.OOD, tuple(ids[:k_hat])
    else:
        k_hat, decision, flagged = None, Decision.ID, ()
    return Verdict(
        sample_id=sample_id,
        decision=decision,
        k_hat=k_hat,
        pi0_hat=float(pi0),
        flagged_models=flagged,
        sorted_pvalues=tuple(float(v) for v in values),
        method=method,
        pvalues=dict(zip(ids, (float(v) for v in values))),
        dataset_id=dataset_id,
    )


def dsde_pi0(p: SortedPValues, cfg: ExperimentConfig) -> float:
    try:
        est = dos_storey_pi0(p, cfg.beta, cfg.c_m, cfg.pi0_form, cfg.floor_for(p.m))
    except DsdeError as exc:
        if exc.code != "EMPTY_SEARCH_RANGE":
            raise
        return 1.0
    if math.isinf(est.raw_value):
        log.debug("p_(k)=1 at change-point %d; pi0 falls back to 1", est.changepoint)
    return est.value


def dsde_decide(
    pvals: PValues,
    cfg: ExperimentConfig | None = None,
    *,
    sample_id: str = "",
    dataset_id: str = "",
) -> Verdict:
    """DOS-Storey detection ensemble for a single test sample.

    Sort the p-values, locate the DOS change-point, estimate pi0 from the
    p-value at that point, then run the adaptive step-up at level
    ``cfg.alpha``. The sample is OoD iff at least one hypothesis is rejected;
    the rejected models are reported in ``flagged_models``. When the library
    is too small for a change-point search (``m <= 1``) pi0 is taken as 1,
    which reduces to comparing the single p-value with alpha.
    """
    cfg = cfg or ExperimentConfig()
    ids, values = _sorted_pairs(pvals)
    sp = SortedPValues(values, len(values))
    pi0 = dsde_pi0(sp, cfg)
    res = adaptive_bh(sp, pi0, cfg.alpha)
    return _verdict(Method.DSDE, ids, values, res.k_hat, pi0, sample_id, dataset_id)


def bh_decide(pvals: PValues, alpha: float = 0.05, *, sample_id: str = "", dataset_id: str = "") -> Verdict:
    ids, values = _sorted_pairs(pvals)
    res = adaptive_bh(SortedPValues(values, len(values)), 1.0, alpha)
    return _verdict(Method.BH, ids, values, res.k_hat, 1.0, sample_id, dataset_id)


def by_decide(pvals: PValues, alpha: float = 0.05, *, sample_id: str = "", dataset_id: str = "") -> Verdict:
    """Benjamini-Yekutieli: BH with alpha shrunk by the harmonic number H_m."""
    ids, values = _sorted_pairs(pvals)
    m = len(values)
    q_raw = m * harmonic(m) * values / np.arange(1, m + 1)
    hits = np.flatnonzero(q_raw <= alpha)
    k_hat = int(hits[-1]) + 1 if hits.size else None
    return _verdict(Method.BY, ids, values, k_hat, 1.0, sample_id, dataset_id)


def bonferroni_decide(
    pvals: PValues, alpha: float = 0.05, *, sample_id: str = "", dataset_id: str = ""
) -> Verdict:
    ids, values = _sorted_pairs(pvals)
    k = int(np.count_nonzero(values <= alpha / len(values)))
    return _verdict(Method.BONFERRONI, ids, values, k or None, 1.0, sample_id, dataset_id)


def naive_decide(pvals: PValues, alpha: float = 0.05, *, sample_id: str = "", dataset_id: str = "") -> Verdict:
    """Uncorrected: OoD as soon as any single model has ``p <= alpha``."""
    ids, values = _sorted_pairs(pvals)
    k = int(np.count_nonzero(values <= alpha))
    return _verdict(Method.NAIVE, ids, values, k or None, 1.0, sample_id, dataset_id)


def vote_decide(
    pvals: PValues,
    alpha: float = 0.05,
    tau: float = 0.5,
    *,
    sample_id: str = "",
    dataset_id: str = "",
) -> Verdict:
    """OoD iff at least a fraction ``tau`` of the models have ``p <= alpha``."""
    if not 0 < tau <= 1:
        raise DsdeError("TAU_OUT_OF_RANGE", f"tau={tau!r} not in (0, 1]")
    ids, values = _sorted_pairs(pvals)
    k = int(np.count_nonzero(values <= alpha))
    ood = k / len(values) >= tau
    return _verdict(Method.VOTE, ids, values, k if ood and k else None, 1.0, sample_id, dataset_id)


def storey_fixed_decide(
    pvals: PValues,
    alpha: float = 0.05,
    lam: float = 0.5,
    floor: float | None = None,
    *,
    sample_id: str = "",
    dataset_id: str = "",
) -> Verdict:
    ids, values = _sorted_pairs(pvals)
    sp = SortedPValues(values, len(values))
    pi0 = storey_pi0(sp, lam, 1.0 / sp.m if floor is None else floor).value
    res = adaptive_bh(sp, pi0, alpha)
    return _verdict(Method.STOREY_FIXED, ids, values, res.k_hat, pi0, sample_id, dataset_id)


def decide(
    pvals: PValues,
    cfg: ExperimentConfig,
    method: Method | str | None = None,
    *,
    sample_id: str = "",
    dataset_id: str = "",
) -> Verdict:
    """Dispatch to the decision rule named by ``method`` (default ``cfg.method``)."""
    method = parse_method(method or cfg.method)
    kw = {"sample_id": sample_id, "dataset_id": dataset_id}
    if method is Method.DSDE:
        return dsde_decide(pvals, cfg, **kw)
    if method is Method.BH:
        return bh_decide(pvals, cfg.alpha, **kw)
    if method is Method.BY:
        return by_decide(pvals, cfg.alpha, **kw)
    if method is Method.BONFERRONI:
        return bonferroni_decide(pvals, cfg.alpha, **kw)
    if method is Method.NAIVE:
        return naive_decide(pvals, cfg.alpha, **kw)
    if method is Method.VOTE:
        return vote_decide(pvals, cfg.alpha, cfg.vote_tau, **kw)
    if method is Method.STOREY_FIXED:
        return storey_fixed_decide(pvals, cfg.alpha, cfg.storey_lambda, cfg.pi0_floor, **kw)
    raise AssertionError(method)


# ---------------------------------------------------------------------------
# Vectorised path
# ---------------------------------------------------------------------------


def _row_sort(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[1] < 1:
        raise DsdeError("SHAPE_MISMATCH", "expected an (N, m) array with m >= 1")
    return np.sort(p, axis=1)


def batch_pi0(method: Method, p_sorted: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    n, m = p_sorted.shape
    if method is Method.DSDE:
        lo, hi = search_range(m, cfg.c_m)
        if lo > hi:
            return np.ones(n)
        pi0, _ = dos_storey_pi0_batch(p_sorted, cfg.beta, cfg.c_m, cfg.pi0_form, cfg.floor_for(m))
        return pi0
    if method is Method.STOREY_FIXED:
        raw = storey_pi0_batch(p_sorted, cfg.storey_lambda)
        return np.minimum(1.0, np.maximum(cfg.floor_for(m), raw))
    return np.ones(n)


def ood_onset(
    p: np.ndarray,
    cfg: ExperimentConfig,
    alphas: Sequence[float],
    method: Method | str | None = None,
) -> np.ndarray:
    """For each row of ``p``, the first index into ``alphas`` at which the
    method declares OoD (``len(alphas)`` if never).

    ``alphas`` must be increasing. Nothing in any rule except the rejection
    threshold depends on alpha, so a single sort per row suffices for the
    whole sweep.
    """
    method = parse_method(method or cfg.method)
    alphas = np.asarray(alphas, dtype=float)
    ps = _row_sort(p)
    n, m = ps.shape
    ranks = np.arange(1, m + 1)

    if method in (Method.DSDE, Method.STOREY_FIXED, Method.BH):
        pi0 = batch_pi0(method, ps, cfg)
        crit = (pi0[:, None] * m * ps / ranks).min(axis=1)
        return np.searchsorted(alphas, crit, side="left")
    if method is Method.BY:
        crit = (m * harmonic(m) * ps / ranks).min(axis=1)
        return np.searchsorted(alphas, crit, side="left")
    if method is Method.BONFERRONI:
        return np.searchsorted(alphas / m, ps[:, 0], side="left")
    if method is Method.NAIVE:
        return np.searchsorted(alphas, ps[:, 0], side="left")
    if method is Method.VOTE:
        need = next(r for r in range(1, m + 1) if r / m >= cfg.vote_tau)
        return np.searchsorted(alphas, ps[:, need - 1], side="left")
    raise AssertionError(method)


def batch_decide(
    p: np.ndarray, cfg: ExperimentConfig, method: Method | str | None = None, alpha: float | None = None
) -> np.ndarray:
    """Boolean OoD flags, one per row of ``p``, at ``alpha`` (default ``cfg.alpha``)."""
    a = cfg.alpha if alpha is None else alpha
    return ood_onset(p, cfg, [a], method) == 0
