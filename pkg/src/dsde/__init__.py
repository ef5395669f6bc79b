"""Combine OoD detection scores from a library of models into one verdict
per sample with multiple-testing control (DOS-Storey detector ensemble)."""

__version__ = "0.1.0"

from dsde.datamodel import (  # noqa: E402
    CalibrationBank,
    Decision,
    ExperimentConfig,
    Label,
    Method,
    PValueMatrix,
    ScoreRow,
    ScoreTable,
    SyntheticScenario,
    Verdict,
    to_matrix,
    validate_table,
)
from dsde.decision import (  # noqa: E402
    adaptive_bh,
    bh_decide,
    bonferroni_decide,
    by_decide,
    decide,
    dsde_decide,
    naive_decide,
    storey_fixed_decide,
    vote_decide,
)
from dsde.ecdf import build_ecdf, ecdf_eval, p_value, tpr_threshold  # noqa: E402
from dsde.proportion import (  # noqa: E402
    SortedPValues,
    dos_changepoint,
    dos_statistic,
    dos_storey_pi0,
    storey_pi0,
)

__all__ = [
    "CalibrationBank",
    "Decision",
    "ExperimentConfig",
    "Label",
    "Method",
    "PValueMatrix",
    "ScoreRow",
    "ScoreTable",
    "SortedPValues",
    "SyntheticScenario",
    "Verdict",
    "adaptive_bh",
    "bh_decide",
    "bonferroni_decide",
    "build_ecdf",
    "by_decide",
    "decide",
    "dos_changepoint",
    "dos_statistic",
    "dos_storey_pi0",
    "dsde_decide",
    "ecdf_eval",
    "naive_decide",
    "p_value",
    "storey_fixed_decide",
    "storey_pi0",
    "to_matrix",
    "tpr_threshold",
    "validate_table",
    "vote_decide",
]
