"""Command-line entry point.

Exit codes: 0 success, 2 input format/config, 3 scorer, 4 missing
calibration or unknown model, 5 label/metric problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from dsde.datamodel import (
    CalibrationBank,
    ExperimentConfig,
    Label,
    SyntheticScenario,
    to_matrix,
    validate_table,
)
from dsde.decision import decide
from dsde.ecdf import p_values
from dsde.errors import CalibrationError, DsdeError, FormatError, LabelError, ScorerError
from dsde.evaluation import ExperimentReport, metrics_from_verdicts, run_experiment
from dsde.io import (
    dump_json,
    format_score_rows,
    format_verdicts,
    read_bank,
    read_score_csv,
    read_vectors_ndjson,
    read_verdicts_ndjson,
    run_manifest,
    write_bank,
    write_score_csv,
)
from dsde.scorers import FeatureBank, score_dataset
from dsde.synth import ESTIMATORS, estimator_rmse, gen_scores, make_rng, mc_null_rate

log = logging.getLogger("dsde")

EXIT_FORMAT, EXIT_SCORER, EXIT_CALIBRATION, EXIT_LABEL = 2, 3, 4, 5
DEFAULT_CM_LIBRARY_SIZE = 7


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.exit_code = code


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decision config (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--cm", dest="c_m", type=float, help="change-point search fraction c_m (2/7 for 7 models)")
    g.add_argument("--method", choices=["dsde", "bh", "by", "bonferroni", "storey", "naive", "vote"])
    g.add_argument("--vote-tau", dest="vote_tau", type=float)
    g.add_argument("--storey-lambda", dest="storey_lambda", type=float)
    g.add_argument("--pvalue-mode", dest="pvalue_mode", type=str.upper, choices=["LITERAL", "SMOOTHED"])
    g.add_argument("--pi0-form", dest="pi0_form", type=str.upper, choices=["RATIO", "LITERAL_EQ15"])
    g.add_argument("--pi0-floor", dest="pi0_floor", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--alpha-grid", dest="alpha_grid", type=_floats, help="comma-separated increasing alphas")


def _load_config(args: argparse.Namespace) -> tuple[ExperimentConfig, bool]:
    """Config from file + flags; second value tells whether c_m was set explicitly."""
    obj: dict[str, Any] = {}
    if args.config is not None:
        try:
            obj = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_FORMAT, f"cannot read config {args.config}: {exc}") from None
        if not isinstance(obj, dict):
            raise CliError(EXIT_FORMAT, "config must be a JSON object")
    for key in ("alpha", "beta", "c_m", "method", "vote_tau", "storey_lambda", "pvalue_mode",
                "pi0_form", "pi0_floor", "seed", "alpha_grid"):
        val = getattr(args, key, None)
        if val is not None:
            obj[key] = val
    return ExperimentConfig.from_json_obj(obj), "c_m" in obj


def _warn_cm(explicit: bool, m: int) -> None:
    if not explicit and m != DEFAULT_CM_LIBRARY_SIZE:
        log.warning(
            "c_m defaults to 2/7, the setting for a %d-model library, but this library has %d models; "
            "pass --cm explicitly (2/15 was used for an 18-model library)",
            DEFAULT_CM_LIBRARY_SIZE,
            m,
        )


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _require_valid(table, what: str) -> None:
    problems = validate_table(table)
    if problems:
        first = problems[0]
        where = f"data row {first.row + 1} (line {first.row + 2})" if first.row is not None else "table"
        raise CliError(EXIT_FORMAT, f"{what}: {first.kind} at {where}: {first.message}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> None:
    records = read_vectors_ndjson(args.input)
    bank = None
    if args.scorer == "knn":
        if args.bank is None:
            raise CliError(EXIT_SCORER, "knn scoring needs --bank")
        raw = read_vectors_ndjson(args.bank)
        if not raw:
            raise CliError(EXIT_SCORER, f"feature bank {args.bank} is empty")
        bank = FeatureBank.from_vectors(args.model_id, [v for _, v in raw], normalize=args.normalize_bank)
    rows = score_dataset(
        records,
        args.scorer,
        model_id=args.model_id,
        dataset_id=args.dataset_id,
        label=args.label,
        bank=bank,
        k=args.k,
        temperature=args.temperature,
    )
    if args.output is None:
        sys.stdout.write(format_score_rows(rows))
    else:
        write_score_csv(rows, args.output, append=args.append)


def cmd_calibrate(args: argparse.Namespace) -> None:
    table = read_score_csv(args.input)
    if not len(table):
        raise CliError(EXIT_FORMAT, f"{args.input} holds no calibration rows")
    _require_valid(table, str(args.input))
    write_bank(CalibrationBank.from_table(table), args.output)


def _detect(args: argparse.Namespace) -> tuple[list, ExperimentConfig]:
    cfg, explicit_cm = _load_config(args)
    table = read_score_csv(args.scores)
    _require_valid(table, str(args.scores))
    bank = read_bank(args.bank)
    verdicts = []
    for ds in table.dataset_ids():
        mat = to_matrix(table, ds)
        _warn_cm(explicit_cm, len(mat.model_ids))
        for mid in mat.model_ids:
            if mid not in bank:
                raise CalibrationError("MISSING_CALIBRATION", f"model {mid!r} has no calibration scores")
        cols = [p_values(bank[mid], mat.scores[:, j], cfg.pvalue_mode) for j, mid in enumerate(mat.model_ids)]
        for i, sid in enumerate(mat.sample_ids):
            pv = [(mid, float(cols[j][i])) for j, mid in enumerate(mat.model_ids)]
            verdicts.append(decide(pv, cfg, sample_id=sid, dataset_id=ds))
    verdicts.sort(key=lambda v: (v.dataset_id, v.sample_id))
    return verdicts, cfg


def cmd_detect(args: argparse.Namespace) -> None:
    verdicts, cfg = _detect(args)
    _write_text(args.output, format_verdicts(verdicts))
    if args.output is not None:
        manifest = run_manifest(cfg.to_json_obj(), [args.scores, args.bank], cfg.seed, args.timestamp)
        _write_text(args.output.with_name(args.output.name + ".manifest.json"), dump_json(manifest))


def cmd_eval(args: argparse.Namespace) -> None:
    cfg, explicit_cm = _load_config(args)
    out_dir: Path = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.verdicts is not None:
        if args.labels is None:
            raise CliError(EXIT_LABEL, "--verdicts needs --labels (a score CSV carrying labels)")
        verdicts = read_verdicts_ndjson(args.verdicts)
        labels = {(r.dataset_id, r.sample_id): r.label for r in read_score_csv(args.labels)}
        rows = metrics_from_verdicts(verdicts, labels, cfg.alpha)
        report = ExperimentReport(rows, cfg)
        inputs = [args.verdicts, args.labels]
    else:
        if args.scores is None or args.bank is None:
            raise CliError(EXIT_FORMAT, "eval needs --scores and --bank, or --verdicts and --labels")
        table = read_score_csv(args.scores)
        _require_valid(table, str(args.scores))
        bank = read_bank(args.bank)
        _warn_cm(explicit_cm, len(table.model_ids()))
        report = run_experiment(table, bank, cfg, args.methods.split(","))
        inputs = [args.scores, args.bank]
    report.manifest = run_manifest(cfg.to_json_obj(), inputs, cfg.seed, args.timestamp)
    _write_text(out_dir / "report.json", dump_json(report.to_json_obj()))
    _write_text(out_dir / "report.md", report.to_markdown())
    if not args.no_figures and report.curves:
        from dsde.plotting import plot_roc_curves

        plot_roc_curves(report, out_dir)


def cmd_synth(args: argparse.Namespace) -> None:
    cfg, _ = _load_config(args)
    seed = cfg.seed
    if args.kind == "scores":
        if args.scenario is None:
            raise CliError(EXIT_FORMAT, "synth scores needs --scenario")
        scenario = _read_scenario(args.scenario)
        gen = gen_scores(scenario, make_rng(scenario.seed))
        out: Path = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        write_score_csv(gen.calibration.rows, out / "calib.csv")
        write_score_csv(gen.test.rows, out / "test.csv")
        manifest = run_manifest({"scenario": scenario.to_json_obj()}, [args.scenario], scenario.seed, args.timestamp)
        _write_text(out / "manifest.json", dump_json(manifest))
        return

    if args.kind == "null-rate":
        methods = [m for m in args.methods.split(",") if m]
        reports = [mc_null_rate(m, args.m, cfg.alpha, args.trials, seed, cfg) for m in methods]
        params = {"m": args.m, "alpha": cfg.alpha, "trials": args.trials, "config": cfg.to_json_obj()}
        payload = [r.to_json_obj() for r in reports]
        plot = "null_rates"
    else:
        pi0s = _floats(args.pi0)
        grid = [
            SyntheticScenario(m=args.m, m0=round(p * args.m), alt_shape=args.alt_shape, trials=args.trials, seed=seed)
            for p in pi0s
        ]
        reports = estimator_rmse(ESTIMATORS, grid, args.trials, seed, c_m=args.estimator_cm)
        params = {"m": args.m, "pi0": pi0s, "alt_shape": args.alt_shape, "trials": args.trials, "c_m": args.estimator_cm}
        payload = [r.to_json_obj() for r in reports]
        plot = "estimator_rmse"

    doc = {
        "manifest": run_manifest(params, [], seed, args.timestamp),
        "reports": payload,
    }
    _write_text(args.output, dump_json(doc))
    if args.output is not None and not args.no_figures:
        from dsde.plotting import plot_estimator_rmse, plot_null_rates

        fig_path = args.output.with_name(f"{args.output.stem}_{plot}.png")
        (plot_null_rates if plot == "null_rates" else plot_estimator_rmse)(reports, fig_path)


def _read_scenario(path: Path) -> SyntheticScenario:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_FORMAT, f"cannot read scenario {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise CliError(EXIT_FORMAT, "scenario must be a JSON object")
    try:
        return SyntheticScenario.from_json_obj(obj)
    except TypeError as exc:
        raise CliError(EXIT_FORMAT, f"invalid scenario: {exc}") from None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score exported logits/embeddings into a score CSV")
    p.add_argument("--scorer", required=True, choices=["msp", "energy", "knn"])
    p.add_argument("--input", required=True, type=Path, help="NDJSON of {sample_id, vector}")
    p.add_argument("--model-id", required=True)
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--label", default="UNKNOWN", type=str.upper, choices=[x.value for x in Label])
    p.add_argument("--bank", type=Path, help="NDJSON feature bank (knn)")
    p.add_argument("--normalize-bank", action="store_true", help="L2-normalise bank vectors on load")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--append", action="store_true", help="append rows (header only if file is new)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="build a calibration bank from ID validation scores")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("-o", "--output", required=True, type=Path)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="per-sample verdicts as NDJSON")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--timestamp", action="store_true", help="record wall-clock time in the manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="metrics table (JSON + Markdown + ROC figures)")
    p.add_argument("--scores", type=Path, help="labelled test score CSV")
    p.add_argument("--bank", type=Path)
    p.add_argument("--methods", default="dsde,bh,by,bonferroni,naive,vote:0.5,vote:0.6")
    p.add_argument("--verdicts", type=Path, help="verdict NDJSON from `dsde detect`")
    p.add_argument("--labels", type=Path, help="score CSV supplying labels for --verdicts")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--timestamp", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthetic data and Monte Carlo reports")
    p.add_argument("kind", choices=["scores", "null-rate", "rmse"])
    p.add_argument("--scenario", type=Path, help="scenario JSON (scores)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (scores)")
    p.add_argument("--methods", default="naive,bonferroni,bh,dsde", help="null-rate methods")
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--pi0", default="0.5,0.8,0.95", help="true null proportions (rmse)")
    p.add_argument("--alt-shape", type=float, default=0.1, help="a of the Beta(a, 1) alternative (rmse)")
    p.add_argument("--estimator-cm", type=float, default=0.05, help="c_m for DOS-Storey in rmse runs")
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--timestamp", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ScorerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCORER
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except LabelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LABEL
    except DsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return 0


if __name__ == "__main__":
    sys.exit(main())
