"""Detection metrics and experiment orchestration.

Positives are in-distribution samples: TPR is the fraction of ID samples
kept as ID and FPR the fraction of OoD samples wrongly kept as ID.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from dsde.datamodel import (
    CalibrationBank,
    Decision,
    ExperimentConfig,
    Label,
    Method,
    PValueMatrix,
    ScoreTable,
    Verdict,
    parse_method,
    to_matrix,
)
from dsde.decision import ood_onset
from dsde.ecdf import p_values, tpr_threshold
from dsde.errors import CalibrationError, DsdeError, LabelError

AVERAGE = "Average"


@dataclass(frozen=True)
class MetricRow:
    method: str
    dataset_id: str
    tpr: float
    fpr: float
    auroc: float | None
    alpha_used: float

    def to_json_obj(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]  # (fpr, tpr), sorted by fpr
    area: float


def confusion(
    verdicts: Sequence[Verdict],
    labels: Sequence[Label | str] | Mapping[str, Label | str],
) -> tuple[float, float]:
    """(TPR, FPR) of a list of verdicts.

    ``labels`` is either aligned with ``verdicts`` or keyed by sample id.
    """
    if isinstance(labels, Mapping):
        try:
            labs = [labels[v.sample_id] for v in verdicts]
        except KeyError as exc:
            raise LabelError("UNLABELED_SAMPLE", f"no label for sample {exc.args[0]!r}") from None
    else:
        labs = list(labels)
        if len(labs) != len(verdicts):
            raise LabelError("LABEL_MISMATCH", "one label per verdict required")
    labs = [Label(getattr(x, "value", x)) for x in labs]
    kept = np.array([v.decision is Decision.ID for v in verdicts], dtype=bool)
    return _rates(kept, np.array([x.value for x in labs], dtype=object), [v.sample_id for v in verdicts])


def _check_labels(labels: np.ndarray, sample_ids: Sequence[str] = ()) -> None:
    unknown = np.flatnonzero(labels == Label.UNKNOWN.value)
    if unknown.size:
        who = sample_ids[unknown[0]] if len(sample_ids) else int(unknown[0])
        raise LabelError("UNLABELED_SAMPLE", f"sample {who!r} has label UNKNOWN")
    n_id = int(np.count_nonzero(labels == Label.ID.value))
    if n_id == 0 or n_id == len(labels):
        raise LabelError(
            "EMPTY_CLASS", f"need both classes, got {n_id} ID and {len(labels) - n_id} OOD"
        )


def _rates(kept_id: np.ndarray, labels: np.ndarray, sample_ids: Sequence[str] = ()) -> tuple[float, float]:
    _check_labels(labels, sample_ids)
    is_id = labels == Label.ID.value
    n_id, n_ood = int(is_id.sum()), int((~is_id).sum())
    tpr = int(np.count_nonzero(kept_id & is_id)) / n_id
    fpr = int(np.count_nonzero(kept_id & ~is_id)) / n_ood
    return tpr, fpr


def auroc_single(id_scores: Sequence[float] | np.ndarray, ood_scores: Sequence[float] | np.ndarray) -> float:
    """P(ID score > OoD score) + P(tie) / 2, via midranks (Mann-Whitney U)."""
    a = np.asarray(id_scores, dtype=float).ravel()
    b = np.asarray(ood_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise LabelError("EMPTY_CLASS", "both score sets must be non-empty")
    allv = np.concatenate([a, b])
    uniq, inverse, counts = np.unique(allv, return_inverse=True, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)[:-1]])
    midrank = below + (counts + 1) / 2.0
    r_id = midrank[inverse[: a.size]].sum()
    u = r_id - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def _roc_from_onset(onset: np.ndarray, is_id: np.ndarray, n_grid: int) -> RocCurve:
    # decided ID at grid index g  <=>  onset > g
    n_id, n_ood = int(is_id.sum()), int((~is_id).sum())
    ood_by_g_id = np.cumsum(np.bincount(onset[is_id], minlength=n_grid + 1))[:n_grid]
    ood_by_g_ood = np.cumsum(np.bincount(onset[~is_id], minlength=n_grid + 1))[:n_grid]
    tpr = (n_id - ood_by_g_id) / n_id
    fpr = (n_ood - ood_by_g_ood) / n_ood
    fs = np.concatenate([[0.0], fpr, [1.0]])
    ts = np.concatenate([[0.0], tpr, [1.0]])
    order = np.lexsort((ts, fs))
    fs, ts = fs[order], ts[order]
    area = float(np.sum((fs[1:] - fs[:-1]) * (ts[1:] + ts[:-1]) / 2.0))
    return RocCurve(tuple(zip(fs.tolist(), ts.tolist())), area)


def _check_grid(grid: Sequence[float]) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.size == 0 or np.any(g <= 0) or np.any(g >= 1) or np.any(np.diff(g) <= 0):
        raise DsdeError("INVALID_GRID", "alpha grid must be non-empty, strictly increasing, in (0, 1)")
    return g


def ensemble_roc(
    method: Method | str,
    pmatrix: PValueMatrix,
    cfg: ExperimentConfig,
    alpha_grid: Sequence[float] | None = None,
) -> RocCurve:
    """ROC of a decision method traced by sweeping alpha over a grid.

    Each grid point contributes the (FPR, TPR) pair of the method run at that
    alpha; (0, 0) and (1, 1) close the curve and the area is the trapezoid sum.
    """
    grid = _check_grid(cfg.alpha_grid if alpha_grid is None else alpha_grid)
    labels = np.array([x.value for x in pmatrix.labels], dtype=object)
    _check_labels(labels, pmatrix.sample_ids)
    onset = ood_onset(pmatrix.p, cfg, grid, parse_method(method))
    return _roc_from_onset(onset, labels == Label.ID.value, grid.size)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    """A row label of the results table.

    ``"dsde"``, ``"bh"`` etc. name ensemble rules; ``"vote:0.6"`` overrides
    the vote fraction; ``"single:<model_id>"`` is the thresholded detector of
    one model.
    """

    name: str
    method: Method | None
    model_id: str | None = None
    tau: float | None = None

    @classmethod
    def parse(cls, text: str) -> MethodSpec:
        text = text.strip()
        head, _, arg = text.partition(":")
        if head.lower() == "single":
            if not arg:
                raise DsdeError("UNKNOWN_METHOD", "single:<model_id> needs a model id")
            return cls(text, None, model_id=arg)
        method = parse_method(head)
        tau = None
        if arg:
            if method is not Method.VOTE:
                raise DsdeError("UNKNOWN_METHOD", f"only vote takes a parameter: {text!r}")
            try:
                tau = float(arg)
            except ValueError:
                raise DsdeError("UNKNOWN_METHOD", f"bad vote fraction in {text!r}") from None
        return cls(text.lower(), method, tau=tau)


@dataclass
class ExperimentReport:
    rows: list[MetricRow]
    config: ExperimentConfig
    curves: dict[tuple[str, str], RocCurve] = field(default_factory=dict)
    manifest: dict[str, Any] = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def datasets(self) -> list[str]:
        return [d for d in dict.fromkeys(r.dataset_id for r in self.rows) if d != AVERAGE]

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "manifest": self.manifest,
            "config": self.config.to_json_obj(),
            "rows": [r.to_json_obj() for r in self.rows],
        }

    def to_markdown(self) -> str:
        datasets = self.datasets()
        cells = {(r.method, r.dataset_id): r for r in self.rows}
        head = ["Method", "TPR"] + [f"{d} (FPR/AUC)" for d in datasets] + [f"{AVERAGE} (FPR/AUC)"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for meth in self.methods():
            first = cells[(meth, datasets[0])] if datasets else cells[(meth, AVERAGE)]
            out = [meth, f"{100 * first.tpr:.2f}"]
            for d in datasets + [AVERAGE]:
                r = cells[(meth, d)]
                auc = "-" if r.auroc is None else f"{100 * r.auroc:.2f}"
                out.append(f"{100 * r.fpr:.2f}/{auc}")
            lines.append("| " + " | ".join(out) + " |")
        return "\n".join(lines) + "\n"


def _average_rows(rows: list[MetricRow]) -> list[MetricRow]:
    out = []
    for meth in dict.fromkeys(r.method for r in rows):
        mine = [r for r in rows if r.method == meth]
        aucs = [r.auroc for r in mine]
        out.append(
            MetricRow(
                method=meth,
                dataset_id=AVERAGE,
                tpr=float(np.mean([r.tpr for r in mine])),
                fpr=float(np.mean([r.fpr for r in mine])),
                auroc=None if any(a is None for a in aucs) else float(np.mean(aucs)),
                alpha_used=mine[0].alpha_used,
            )
        )
    return out


@dataclass(frozen=True)
class _TestSet:
    model_ids: tuple[str, ...]
    scores: np.ndarray
    p: np.ndarray
    labels: np.ndarray  # object array of label strings
    datasets: np.ndarray
    sample_ids: tuple[str, ...]


def _assemble(test: ScoreTable, bank: CalibrationBank, cfg: ExperimentConfig) -> _TestSet:
    blocks, model_ids = [], None
    for ds in test.dataset_ids():
        mat = to_matrix(test, ds)
        if model_ids is None:
            model_ids = mat.model_ids
        elif mat.model_ids != model_ids:
            raise DsdeError("RAGGED_COVERAGE", f"dataset {ds!r} has a different model set")
        blocks.append(mat)
    if not blocks:
        raise LabelError("EMPTY_CLASS", "test table is empty")
    for mid in model_ids:
        if mid not in bank:
            raise CalibrationError("MISSING_CALIBRATION", f"no calibration scores for model {mid!r}")
    scores = np.vstack([b.scores for b in blocks])
    p = np.column_stack([p_values(bank[mid], scores[:, j], cfg.pvalue_mode) for j, mid in enumerate(model_ids)])
    labels = np.array([lab.value for b in blocks for lab in b.labels], dtype=object)
    datasets = np.array([b.dataset_id for b in blocks for _ in b.sample_ids], dtype=object)
    sample_ids = tuple(s for b in blocks for s in b.sample_ids)
    return _TestSet(model_ids, scores, p, labels, datasets, sample_ids)


def pvalue_matrix_for(test: ScoreTable, bank: CalibrationBank, cfg: ExperimentConfig) -> PValueMatrix:
    ts = _assemble(test, bank, cfg)
    return PValueMatrix(
        sample_ids=ts.sample_ids,
        model_ids=ts.model_ids,
        p=ts.p,
        labels=tuple(Label(x) for x in ts.labels),
        dataset_ids=tuple(ts.datasets),
    )


def run_experiment(
    test: ScoreTable,
    bank: CalibrationBank,
    cfg: ExperimentConfig,
    methods: Iterable[str] = ("dsde",),
) -> ExperimentReport:
    """Evaluate each method on each OoD dataset against the pooled ID test split.

    TPR comes from all ID-labelled test samples. For every dataset holding
    OoD-labelled samples a row reports FPR at ``cfg.alpha`` and AUROC (alpha
    sweep for ensembles, rank statistic for single models), followed by an
    unweighted Average row per method.
    """
    specs = [MethodSpec.parse(m) for m in methods]
    ts = _assemble(test, bank, cfg)
    _check_labels(ts.labels, ts.sample_ids)
    is_id = ts.labels == Label.ID.value
    ood_sets = [d for d in dict.fromkeys(ts.datasets[~is_id])]
    grid = _check_grid(cfg.alpha_grid)

    rows: list[MetricRow] = []
    curves: dict[tuple[str, str], RocCurve] = {}
    for spec in specs:
        if spec.model_id is not None:
            if spec.model_id not in ts.model_ids:
                raise CalibrationError("MISSING_MODEL", f"model {spec.model_id!r} not in test table")
            j = ts.model_ids.index(spec.model_id)
            s = ts.scores[:, j]
            thr = tpr_threshold(bank[spec.model_id], cfg.alpha)
            kept = s > thr
            for d in ood_sets:
                sel = is_id | (ts.datasets == d)
                tpr, fpr = _rates(kept[sel], ts.labels[sel])
                auc = auroc_single(s[is_id], s[(ts.datasets == d) & ~is_id])
                rows.append(MetricRow(spec.name, d, tpr, fpr, auc, cfg.alpha))
            continue

        mcfg = cfg if spec.tau is None else cfg.replace(vote_tau=spec.tau)
        onset = ood_onset(ts.p, mcfg, grid, spec.method)
        at_alpha = ood_onset(ts.p, mcfg, [cfg.alpha], spec.method)
        kept = at_alpha > 0
        for d in ood_sets:
            sel = is_id | (ts.datasets == d)
            tpr, fpr = _rates(kept[sel], ts.labels[sel])
            curve = _roc_from_onset(onset[sel], is_id[sel], grid.size)
            curves[(spec.name, d)] = curve
            rows.append(MetricRow(spec.name, d, tpr, fpr, curve.area, cfg.alpha))

    return ExperimentReport(rows + _average_rows(rows), cfg, curves)


def metrics_from_verdicts(
    verdicts: Sequence[Verdict],
    labels: Mapping[tuple[str, str], Label],
    alpha: float,
) -> list[MetricRow]:
    """Per-dataset TPR/FPR rows for already-decided samples; AUROC is None.

    ``labels`` maps ``(dataset_id, sample_id)`` to the true label.
    """
    by_method: dict[str, list[Verdict]] = {}
    for v in verdicts:
        by_method.setdefault(v.method.value.lower(), []).append(v)
    rows: list[MetricRow] = []
    for meth, vs in by_method.items():
        vs = sorted(vs, key=lambda v: (v.dataset_id, v.sample_id))
        try:
            labs = np.array([labels[(v.dataset_id, v.sample_id)].value for v in vs], dtype=object)
        except KeyError as exc:
            raise LabelError("UNLABELED_SAMPLE", f"no label for sample {exc.args[0]!r}") from None
        kept = np.array([v.decision is Decision.ID for v in vs])
        ds = np.array([v.dataset_id for v in vs], dtype=object)
        is_id = labs == Label.ID.value
        sids = [v.sample_id for v in vs]
        _check_labels(labs, sids)
        for d in dict.fromkeys(ds[~is_id]):
            sel = is_id | (ds == d)
            tpr, fpr = _rates(kept[sel], labs[sel])
            rows.append(MetricRow(meth, d, tpr, fpr, None, alpha))
    return rows + _average_rows(rows)
