"""Core domain types: score tables, calibration banks, p-value matrices,
verdicts and run configuration.

Orientation contract: every score is "larger = more in-distribution".
Scorers whose natural output runs the other way (distances) negate at the
source so that nothing downstream needs a per-method branch.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from dsde.ecdf import EmpiricalCdf, build_ecdf
from dsde.errors import CalibrationError, DsdeError


class Label(str, Enum):
    ID = "ID"
    OOD = "OOD"
    UNKNOWN = "UNKNOWN"


class Decision(str, Enum):
    ID = "ID"
    OOD = "OOD"


class Method(str, Enum):
    DSDE = "DSDE"
    BH = "BH"
    BY = "BY"
    BONFERRONI = "BONFERRONI"
    STOREY_FIXED = "STOREY_FIXED"
    NAIVE = "NAIVE"
    VOTE = "VOTE"


class PValueMode(str, Enum):
    LITERAL = "LITERAL"
    SMOOTHED = "SMOOTHED"


class Pi0Form(str, Enum):
    RATIO = "RATIO"
    LITERAL_EQ15 = "LITERAL_EQ15"


# CLI spellings -> Method
METHOD_ALIASES = {
    "dsde": Method.DSDE,
    "bh": Method.BH,
    "by": Method.BY,
    "bonferroni": Method.BONFERRONI,
    "storey": Method.STOREY_FIXED,
    "storey_fixed": Method.STOREY_FIXED,
    "naive": Method.NAIVE,
    "vote": Method.VOTE,
}


def parse_method(value: str | Method) -> Method:
    if isinstance(value, Method):
        return value
    try:
        return METHOD_ALIASES[value.strip().lower()]
    except KeyError:
        raise DsdeError("UNKNOWN_METHOD", f"unknown method {value!r}") from None


# ---------------------------------------------------------------------------
# Score tables
# ---------------------------------------------------------------------------


class ScoreRow(NamedTuple):
    dataset_id: str
    sample_id: str
    model_id: str
    score: float
    label: Label = Label.UNKNOWN


@dataclass(frozen=True)
class Violation:
    kind: str  # DUPLICATE_KEY | NONFINITE_SCORE | RAGGED_COVERAGE | LABEL_CONFLICT
    dataset_id: str
    sample_id: str
    model_id: str | None
    row: int | None  # index into table.rows; None for a missing cell
    message: str


@dataclass(frozen=True)
class ScoreTable:
    """Long-form (dataset, sample, model, score, label) records."""

    rows: tuple[ScoreRow, ...] = ()

    @classmethod
    def from_rows(cls, rows: Iterable[ScoreRow | Sequence[Any]]) -> ScoreTable:
        out = []
        for r in rows:
            if not isinstance(r, ScoreRow):
                r = ScoreRow(*r)
            if not isinstance(r.label, Label):
                r = r._replace(label=Label(r.label))
            out.append(r)
        return cls(tuple(out))

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[ScoreRow]:
        return iter(self.rows)

    def __add__(self, other: ScoreTable) -> ScoreTable:
        return ScoreTable(self.rows + other.rows)

    def dataset_ids(self) -> list[str]:
        """Dataset ids in first-appearance order."""
        return list(dict.fromkeys(r.dataset_id for r in self.rows))

    def model_ids(self) -> list[str]:
        return sorted({r.model_id for r in self.rows})

    def filter(self, dataset_id: str) -> ScoreTable:
        return ScoreTable(tuple(r for r in self.rows if r.dataset_id == dataset_id))


def validate_table(table: ScoreTable) -> list[Violation]:
    """Check table invariants and report every failure; never raises.

    Besides the key/finiteness/coverage rules, a sample must carry a single
    label across all of its model rows.
    """
    violations: list[Violation] = []
    seen: dict[tuple[str, str, str], int] = {}
    # dataset -> sample -> set(models), in first-appearance order
    coverage: dict[str, dict[str, set[str]]] = defaultdict(dict)
    labels: dict[tuple[str, str], tuple[Label, int]] = {}

    for i, r in enumerate(table.rows):
        key = (r.dataset_id, r.sample_id, r.model_id)
        if key in seen:
            violations.append(
                Violation(
                    "DUPLICATE_KEY", *key, i,
                    f"row {i} repeats key already seen at row {seen[key]}",
                )
            )
        else:
            seen[key] = i
        if not math.isfinite(r.score):
            violations.append(
                Violation("NONFINITE_SCORE", *key, i, f"row {i} has score {r.score!r}")
            )
        coverage[r.dataset_id].setdefault(r.sample_id, set()).add(r.model_id)
        lkey = (r.dataset_id, r.sample_id)
        if lkey not in labels:
            labels[lkey] = (r.label, i)
        elif labels[lkey][0] != r.label:
            violations.append(
                Violation(
                    "LABEL_CONFLICT", *key, i,
                    f"row {i} label {r.label.value} differs from "
                    f"{labels[lkey][0].value} at row {labels[lkey][1]}",
                )
            )

    for ds, samples in coverage.items():
        all_models = sorted(set().union(*samples.values()))
        for sid, models in samples.items():
            for mid in all_models:
                if mid not in models:
                    violations.append(
                        Violation(
                            "RAGGED_COVERAGE", ds, sid, mid, None,
                            f"sample {sid!r} in dataset {ds!r} has no score for model {mid!r}",
                        )
                    )
    return violations


@dataclass(frozen=True)
class ScoreMatrix:
    """Dense samples x models view of one dataset."""

    dataset_id: str
    sample_ids: tuple[str, ...]
    model_ids: tuple[str, ...]
    scores: np.ndarray
    labels: tuple[Label, ...]

    def flatten(self) -> ScoreTable:
        rows = []
        for i, sid in enumerate(self.sample_ids):
            for j, mid in enumerate(self.model_ids):
                rows.append(
                    ScoreRow(self.dataset_id, sid, mid, float(self.scores[i, j]), self.labels[i])
                )
        return ScoreTable(tuple(rows))


def to_matrix(table: ScoreTable, dataset_id: str) -> ScoreMatrix:
    """Reshape one dataset into a dense matrix.

    Rows follow first appearance of each sample id, columns are model ids in
    lexicographic order.
    """
    cells: dict[str, dict[str, float]] = {}
    labels: dict[str, Label] = {}
    for r in table.rows:
        if r.dataset_id != dataset_id:
            continue
        cells.setdefault(r.sample_id, {})[r.model_id] = r.score
        labels.setdefault(r.sample_id, r.label)
    if not cells:
        raise DsdeError("UNKNOWN_DATASET", f"dataset {dataset_id!r} not present in table")

    model_ids = sorted(set().union(*(c.keys() for c in cells.values())))
    scores = np.empty((len(cells), len(model_ids)), dtype=float)
    for i, (sid, c) in enumerate(cells.items()):
        if len(c) != len(model_ids):
            missing = [m for m in model_ids if m not in c]
            raise DsdeError(
                "RAGGED_COVERAGE",
                f"sample {sid!r} in dataset {dataset_id!r} lacks models {missing}",
            )
        scores[i] = [c[m] for m in model_ids]
    scores.flags.writeable = False
    return ScoreMatrix(
        dataset_id=dataset_id,
        sample_ids=tuple(cells),
        model_ids=tuple(model_ids),
        scores=scores,
        labels=tuple(labels[s] for s in cells),
    )


# ---------------------------------------------------------------------------
# Calibration and p-values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBank:
    """Per-model empirical CDFs built from in-distribution validation scores."""

    cdfs: Mapping[str, EmpiricalCdf]

    @classmethod
    def from_scores(cls, scores: Mapping[str, Iterable[float]]) -> CalibrationBank:
        return cls({m: build_ecdf(list(s)) for m, s in sorted(scores.items())})

    @classmethod
    def from_table(cls, table: ScoreTable) -> CalibrationBank:
        """Pool every row of each model regardless of dataset or sample."""
        by_model: dict[str, list[float]] = defaultdict(list)
        for r in table.rows:
            by_model[r.model_id].append(r.score)
        return cls.from_scores(by_model)

    @property
    def model_ids(self) -> list[str]:
        return sorted(self.cdfs)

    def __getitem__(self, model_id: str) -> EmpiricalCdf:
        try:
            return self.cdfs[model_id]
        except KeyError:
            raise CalibrationError(
                "MISSING_CALIBRATION", f"no calibration scores for model {model_id!r}"
            ) from None

    def __contains__(self, model_id: object) -> bool:
        return model_id in self.cdfs

    def to_json_obj(self) -> dict[str, dict[str, Any]]:
        return {
            m: {"n": self.cdfs[m].n, "scores": [float(x) for x in self.cdfs[m].sorted_scores]}
            for m in self.model_ids
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, Any]) -> CalibrationBank:
        cdfs = {}
        for m, entry in obj.items():
            scores = list(entry["scores"])
            if int(entry["n"]) != len(scores):
                raise DsdeError(
                    "BANK_CORRUPT", f"model {m!r}: n={entry['n']} but {len(scores)} scores"
                )
            cdfs[m] = build_ecdf(scores)
        return cls(dict(sorted(cdfs.items())))


@dataclass(frozen=True)
class PValueMatrix:
    sample_ids: tuple[str, ...]
    model_ids: tuple[str, ...]
    p: np.ndarray
    labels: tuple[Label, ...]
    dataset_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.p.shape != (len(self.sample_ids), len(self.model_ids)):
            raise DsdeError(
                "SHAPE_MISMATCH",
                f"p has shape {self.p.shape}, ids give "
                f"({len(self.sample_ids)}, {len(self.model_ids)})",
            )
        if len(self.labels) != len(self.sample_ids):
            raise DsdeError("SHAPE_MISMATCH", "one label per sample required")
        if self.p.size and (np.any(self.p < 0) or np.any(self.p > 1) or np.any(np.isnan(self.p))):
            raise DsdeError("PVALUE_OUT_OF_RANGE", "p-values must lie in [0, 1]")

    def row(self, i: int) -> list[tuple[str, float]]:
        return list(zip(self.model_ids, (float(x) for x in self.p[i])))

    def subset(self, mask: np.ndarray) -> PValueMatrix:
        idx = np.flatnonzero(mask)
        return PValueMatrix(
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            model_ids=self.model_ids,
            p=self.p[idx],
            labels=tuple(self.labels[i] for i in idx),
            dataset_ids=tuple(self.dataset_ids[i] for i in idx) if self.dataset_ids else (),
        )


# ---------------------------------------------------------------------------
# Verdicts and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    sample_id: str
    decision: Decision
    k_hat: int | None
    pi0_hat: float
    flagged_models: tuple[str, ...]
    sorted_pvalues: tuple[float, ...]
    method: Method = Method.DSDE
    pvalues: Mapping[str, float] = field(default_factory=dict)
    dataset_id: str = ""

    def __post_init__(self) -> None:
        ood = self.k_hat is not None and self.k_hat >= 1
        if ood != (self.decision is Decision.OOD):
            raise DsdeError("BAD_VERDICT", "decision must be OOD iff k_hat >= 1")
        if len(self.flagged_models) != (self.k_hat if ood else 0):
            raise DsdeError("BAD_VERDICT", "flagged model count must equal k_hat")

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "sample_id": self.sample_id,
            "method": self.method.value,
            "decision": self.decision.value,
            "k_hat": self.k_hat,
            "pi0_hat": self.pi0_hat,
            "flagged_models": list(self.flagged_models),
            "pvalues": {m: self.pvalues[m] for m in sorted(self.pvalues)},
        }


def default_alpha_grid() -> tuple[float, ...]:
    return tuple(round(i * 0.001, 3) for i in range(1, 1000))


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs for the decision procedures.

    ``pi0_floor=None`` means the floor is ``1/m`` for whatever library size
    the estimate is computed on. ``c_m`` defaults to 2/7, the setting used for
    a seven-model library; it is library-size dependent and should be set
    explicitly for other sizes.
    """

    alpha: float = 0.05
    beta: float = 1.0
    c_m: float = 2 / 7
    method: Method = Method.DSDE
    vote_tau: float = 0.5
    storey_lambda: float = 0.5
    pvalue_mode: PValueMode = PValueMode.SMOOTHED
    pi0_floor: float | None = None
    pi0_form: Pi0Form = Pi0Form.RATIO
    alpha_grid: tuple[float, ...] = field(default_factory=default_alpha_grid)
    seed: int = 0

    def __post_init__(self) -> None:
        # normalise enum spellings so JSON/CLI strings are accepted
        object.__setattr__(self, "method", parse_method(self.method))
        object.__setattr__(self, "pvalue_mode", PValueMode(str(_enum_value(self.pvalue_mode)).upper()))
        object.__setattr__(self, "pi0_form", Pi0Form(str(_enum_value(self.pi0_form)).upper()))
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))

        def bad(name: str, why: str) -> DsdeError:
            return DsdeError("INVALID_CONFIG", f"{name}={getattr(self, name)!r}: {why}")

        if not 0 < self.alpha < 1:
            raise bad("alpha", "must be in (0, 1)")
        if not 0.5 <= self.beta <= 1:
            raise bad("beta", "must be in [0.5, 1]")
        if not 0 < self.c_m < 1:
            raise bad("c_m", "must be in (0, 1)")
        if not 0 < self.vote_tau <= 1:
            raise bad("vote_tau", "must be in (0, 1]")
        if not 0 < self.storey_lambda < 1:
            raise bad("storey_lambda", "must be in (0, 1)")
        if self.pi0_floor is not None and not 0 <= self.pi0_floor <= 1:
            raise bad("pi0_floor", "must be in [0, 1]")
        grid = self.alpha_grid
        if not grid:
            raise bad("alpha_grid", "must be non-empty")
        if any(not 0 < a < 1 for a in grid):
            raise bad("alpha_grid", "entries must be in (0, 1)")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise bad("alpha_grid", "must be strictly increasing")

    def floor_for(self, m: int) -> float:
        return 1.0 / m if self.pi0_floor is None else self.pi0_floor

    def replace(self, **changes: Any) -> ExperimentConfig:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ExperimentConfig(**d)

    def to_json_obj(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        d["alpha_grid"] = list(self.alpha_grid)
        return d

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, Any]) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DsdeError("INVALID_CONFIG", f"unknown config keys {sorted(unknown)}")
        return cls(**obj)


def _enum_value(v: Any) -> Any:
    return v.value if isinstance(v, Enum) else v


@dataclass(frozen=True)
class SyntheticScenario:
    """Generative settings for Monte Carlo validation.

    p-value level: ``m0`` of the ``m`` p-values are Uniform(0, 1) and the
    rest Beta(``alt_shape``, 1).

    Score level: model ``j`` draws ID scores from Normal(id_mean[j], 1). OoD
    samples are split evenly over the subpopulations in ``ood_shifts``; a
    sample of subpopulation ``g`` draws from Normal(id_mean[j] - ood_shifts[g][j], 1).
    With no subpopulations the OoD draws are unshifted.
    """

    m: int
    m0: int = 0
    alt_shape: float = 0.1
    trials: int = 1
    seed: int = 0
    id_mean: tuple[float, ...] | None = None
    ood_shifts: tuple[tuple[float, ...], ...] = ()
    n_calib: int = 1000
    n_id: int = 1000
    n_ood: int = 1000

    def __post_init__(self) -> None:
        if self.m < 1:
            raise DsdeError("INVALID_SCENARIO", "m must be >= 1")
        if not 0 <= self.m0 <= self.m:
            raise DsdeError("INVALID_SCENARIO", "need 0 <= m0 <= m")
        if self.trials < 1:
            raise DsdeError("INVALID_SCENARIO", "trials must be >= 1")
        if not 0 < self.alt_shape <= 1:
            raise DsdeError("INVALID_SCENARIO", "alt_shape must be in (0, 1]")
        if self.id_mean is None:
            object.__setattr__(self, "id_mean", (0.0,) * self.m)
        object.__setattr__(self, "id_mean", tuple(float(x) for x in self.id_mean))
        object.__setattr__(
            self, "ood_shifts", tuple(tuple(float(x) for x in s) for s in self.ood_shifts)
        )
        if len(self.id_mean) != self.m:
            raise DsdeError("INVALID_SCENARIO", "id_mean needs one entry per model")
        if any(len(s) != self.m for s in self.ood_shifts):
            raise DsdeError("INVALID_SCENARIO", "each ood_shifts entry needs one shift per model")
        if min(self.n_calib, self.n_id, self.n_ood) < 0 or self.n_calib < 1:
            raise DsdeError("INVALID_SCENARIO", "sample counts must be non-negative, n_calib >= 1")
        if not 0 <= self.seed < 2**64:
            raise DsdeError("INVALID_SCENARIO", "seed must be a 64-bit unsigned integer")

    @property
    def pi0(self) -> float:
        return self.m0 / self.m

    def to_json_obj(self) -> dict[str, Any]:
        d = asdict(self)
        d["id_mean"] = list(self.id_mean or ())
        d["ood_shifts"] = [list(s) for s in self.ood_shifts]
        return d

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, Any]) -> SyntheticScenario:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DsdeError("INVALID_SCENARIO", f"unknown scenario keys {sorted(unknown)}")
        return cls(**obj)
