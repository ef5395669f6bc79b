"""Synthetic generators, Monte Carlo checks and brute-force oracles.

Random streams: every generator is a numpy ``Generator`` over ``PCG64``
seeded from ``SeedSequence(seed, spawn_key=key)``. Monte Carlo runs split
their trials into fixed blocks of ``BLOCK`` trials and give block ``b`` the
key ``(..., b)``, so results do not depend on how many worker threads
process the blocks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from dsde.datamodel import (
    ExperimentConfig,
    Label,
    Method,
    ScoreRow,
    ScoreTable,
    SyntheticScenario,
    parse_method,
)
from dsde.decision import batch_decide, harmonic
from dsde.errors import DsdeError
from dsde.proportion import dos_storey_pi0_batch, storey_pi0_batch

BLOCK = 8192


def make_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def worker_count() -> int:
    """Thread cap from ``DSDE_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("DSDE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise DsdeError("INVALID_THREADS", f"DSDE_THREADS={raw!r} is not an integer") from None
    return n if n > 0 else (os.cpu_count() or 1)


def _map_blocks(fn: Callable[[int], Any], n_blocks: int) -> list[Any]:
    threads = min(worker_count(), n_blocks)
    if threads <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, range(n_blocks)))


def _blocks(trials: int) -> list[int]:
    sizes = [BLOCK] * (trials // BLOCK)
    if trials % BLOCK:
        sizes.append(trials % BLOCK)
    return sizes


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def gen_pvalue_batch(scenario: SyntheticScenario, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, m) p-values: columns ``0..m0-1`` uniform, the rest Beta(a, 1).

    Beta(a, 1) is drawn as ``U ** (1 / a)``.
    """
    u = rng.random((n, scenario.m))
    u[:, scenario.m0:] **= 1.0 / scenario.alt_shape
    return u


def gen_pvalues(scenario: SyntheticScenario, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng if rng is not None else make_rng(scenario.seed)
    return gen_pvalue_batch(scenario, 1, rng)[0]


@dataclass(frozen=True)
class GeneratedScores:
    calibration: ScoreTable
    test: ScoreTable


def model_names(m: int) -> list[str]:
    width = len(str(m - 1))
    return [f"model{j:0{width}d}" for j in range(m)]


def gen_score_arrays(
    scenario: SyntheticScenario, rng: np.random.Generator | None = None
) -> dict[str, np.ndarray]:
    """Raw score arrays: ``calib`` (n_calib, m), ``id`` (n_id, m), ``ood`` (n_ood, m)
    and ``group`` (n_ood,) giving each OoD sample's subpopulation."""
    rng = rng if rng is not None else make_rng(scenario.seed)
    mean = np.asarray(scenario.id_mean)
    m = scenario.m
    calib = rng.standard_normal((scenario.n_calib, m)) + mean
    id_test = rng.standard_normal((scenario.n_id, m)) + mean
    n_groups = max(1, len(scenario.ood_shifts))
    group = np.arange(scenario.n_ood) % n_groups
    shifts = np.asarray(scenario.ood_shifts or [(0.0,) * m])
    ood = rng.standard_normal((scenario.n_ood, m)) + mean - shifts[group]
    return {"calib": calib, "id": id_test, "ood": ood, "group": group}


def gen_scores(
    scenario: SyntheticScenario,
    rng: np.random.Generator | None = None,
    *,
    id_dataset: str = "id_test",
    ood_dataset: str = "ood",
) -> GeneratedScores:
    """Score-level scenario: Normal(id_mean, 1) for ID, shifted down for OoD.

    Calibration rows are labelled ID under dataset ``calib``. All OoD
    subpopulations share one dataset; their sample ids carry the group index.
    """
    arr = gen_score_arrays(scenario, rng)
    names = model_names(scenario.m)

    def rows(ds: str, mat: np.ndarray, ids: Sequence[str], label: Label) -> list[ScoreRow]:
        return [
            ScoreRow(ds, sid, names[j], float(mat[i, j]), label)
            for i, sid in enumerate(ids)
            for j in range(scenario.m)
        ]

    calib = rows("calib", arr["calib"], [f"c{i}" for i in range(scenario.n_calib)], Label.ID)
    test = rows(id_dataset, arr["id"], [f"id{i}" for i in range(scenario.n_id)], Label.ID)
    ood_ids = [f"ood-g{g}-{i}" for i, g in enumerate(arr["group"])]
    test += rows(ood_dataset, arr["ood"], ood_ids, Label.OOD)
    return GeneratedScores(ScoreTable(tuple(calib)), ScoreTable(tuple(test)))


# ---------------------------------------------------------------------------
# Oracles and Monte Carlo reports
# ---------------------------------------------------------------------------


def bruteforce_stepup_oracle(pvals: Sequence[float], alpha: float, pi0: float) -> frozenset[int]:
    """Rejected ranks by direct enumeration: scan k = m..1, find the k-th
    smallest p-value by counting, stop at the first k meeting its threshold."""
    p = [float(x) for x in pvals]
    m = len(p)
    if m > 64:
        raise DsdeError("ORACLE_TOO_LARGE", "oracle is limited to m <= 64")
    at_most = [sum(1 for w in p if w <= v) for v in p]
    for k in range(m, 0, -1):
        # k-th order statistic: smallest value with at least k entries <= it
        pk = min(v for v, c in zip(p, at_most) if c >= k)
        if pi0 * m * pk / k <= alpha:
            return frozenset(range(1, k + 1))
    return frozenset()


@dataclass(frozen=True)
class NullRateReport:
    method: str
    m: int
    alpha: float
    trials: int
    observed_id_rate: float
    analytic_id_rate: float | None
    mc_stderr: float
    seed: int = 0

    def to_json_obj(self) -> dict[str, Any]:
        return asdict(self)


def analytic_null_id_rate(method: Method, m: int, alpha: float, tau: float = 0.5) -> float | None:
    """Probability of an ID verdict when all m p-values are independent uniforms."""
    if method is Method.NAIVE:
        return (1 - alpha) ** m
    if method is Method.BONFERRONI:
        return (1 - alpha / m) ** m
    if method is Method.BH:
        return 1 - alpha
    if method is Method.BY:
        return 1 - alpha / harmonic(m)
    if method is Method.VOTE:
        need = next(r for r in range(1, m + 1) if r / m >= tau)
        return math.fsum(
            math.comb(m, c) * alpha**c * (1 - alpha) ** (m - c) for c in range(need)
        )
    return None


def mc_null_rate(
    method: Method | str,
    m: int,
    alpha: float,
    trials: int,
    seed: int,
    cfg: ExperimentConfig | None = None,
) -> NullRateReport:
    """Fraction of all-null (ID) samples declared ID, with its Monte Carlo stderr."""
    method = parse_method(method)
    if trials < 1000:
        raise DsdeError("TOO_FEW_TRIALS", "mc_null_rate needs trials >= 1000")
    if m < 1:
        raise DsdeError("INVALID_SCENARIO", "m must be >= 1")
    cfg = (cfg or ExperimentConfig()).replace(alpha=alpha, method=method)
    sizes = _blocks(trials)

    def run(b: int) -> int:
        p = make_rng(seed, b).random((sizes[b], m))
        return int(np.count_nonzero(~batch_decide(p, cfg)))

    n_id = sum(_map_blocks(run, len(sizes)))
    rate = n_id / trials
    return NullRateReport(
        method=method.value,
        m=m,
        alpha=alpha,
        trials=trials,
        observed_id_rate=rate,
        analytic_id_rate=analytic_null_id_rate(method, m, alpha, cfg.vote_tau),
        mc_stderr=math.sqrt(rate * (1 - rate) / trials),
        seed=seed,
    )


@dataclass(frozen=True)
class EstimatorReport:
    estimator: str
    scenario: dict[str, Any]
    mean: float
    bias: float
    variance: float
    rmse: float

    def to_json_obj(self) -> dict[str, Any]:
        return asdict(self)


ESTIMATORS = (
    "storey_0.5_unclipped",
    "storey_0.5_clipped",
    "dos_storey_beta0.5",
    "dos_storey_beta1",
)


def _estimate(name: str, p_sorted: np.ndarray, c_m: float) -> np.ndarray:
    if name == "storey_0.5_unclipped":
        return storey_pi0_batch(p_sorted, 0.5)
    if name == "storey_0.5_clipped":
        return np.clip(storey_pi0_batch(p_sorted, 0.5), 0.0, 1.0)
    if name.startswith("dos_storey_beta"):
        beta = float(name.removeprefix("dos_storey_beta"))
        return dos_storey_pi0_batch(p_sorted, beta, c_m, "RATIO", 0.0)[0]
    raise DsdeError("UNKNOWN_ESTIMATOR", f"unknown estimator {name!r}")


def estimator_rmse(
    estimators: Iterable[str],
    scenario_grid: Sequence[SyntheticScenario],
    trials: int,
    seed: int,
    c_m: float = 0.05,
) -> list[EstimatorReport]:
    """Mean, bias, variance and RMSE of pi0 estimators against the true m0/m.

    Variance uses the 1/N normalisation so that ``rmse**2 == bias**2 + variance``
    holds exactly up to rounding. DOS-Storey estimates use the RATIO form
    clipped to [0, 1] with change-point search fraction ``c_m``.
    """
    if trials < 1000:
        raise DsdeError("TOO_FEW_TRIALS", "estimator_rmse needs trials >= 1000")
    names = list(estimators)
    reports = []
    for s_idx, sc in enumerate(scenario_grid):
        sizes = _blocks(trials)

        def run(b: int, sc: SyntheticScenario = sc, s_idx: int = s_idx) -> dict[str, np.ndarray]:
            p = np.sort(gen_pvalue_batch(sc, sizes[b], make_rng(seed, s_idx, b)), axis=1)
            return {n: _estimate(n, p, c_m) for n in names}

        parts = _map_blocks(run, len(sizes))
        label = {"m": sc.m, "m0": sc.m0, "pi0": sc.pi0, "alt_shape": sc.alt_shape, "c_m": c_m}
        for n in names:
            est = np.concatenate([part[n] for part in parts])
            mean = float(np.mean(est))
            bias = mean - sc.pi0
            variance = float(np.mean((est - mean) ** 2))
            rmse = float(np.sqrt(np.mean((est - sc.pi0) ** 2)))
            reports.append(EstimatorReport(n, label, mean, bias, variance, rmse))
    return reports
