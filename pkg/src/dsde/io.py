"""On-disk formats.

* score CSV: header ``dataset_id,sample_id,model_id,score,label``; floats
  written with ``repr`` so they round-trip exactly.
* vectors NDJSON: ``{"sample_id": ..., "vector": [...]}`` per line, one
  dimension per file.
* calibration bank JSON: ``{model_id: {"n": int, "scores": [sorted floats]}}``.
* verdicts NDJSON: one verdict object per line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from dsde import __version__
from dsde.datamodel import CalibrationBank, Decision, Label, Method, ScoreRow, ScoreTable, Verdict
from dsde.errors import DsdeError, FormatError

SCORE_HEADER = ["dataset_id", "sample_id", "model_id", "score", "label"]


def read_score_csv(path: str | os.PathLike) -> ScoreTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return ScoreTable()
        if [h.strip() for h in header] != SCORE_HEADER:
            raise FormatError("BAD_HEADER", f"expected header {','.join(SCORE_HEADER)}", line=1)
        for rec in reader:
            line = reader.line_num
            if not rec:
                continue
            if len(rec) != len(SCORE_HEADER):
                raise FormatError("BAD_ROW", f"expected 5 fields, got {len(rec)}", line=line)
            ds, sid, mid, raw, lab = rec
            try:
                score = float(raw)
            except ValueError:
                raise FormatError("BAD_SCORE", f"score {raw!r} is not a number", line=line) from None
            if not math.isfinite(score):
                raise FormatError("NONFINITE_SCORE", f"score {raw!r} is not finite", line=line)
            try:
                label = Label(lab.strip().upper() or "UNKNOWN")
            except ValueError:
                raise FormatError("BAD_LABEL", f"label {lab!r} not in ID/OOD/UNKNOWN", line=line) from None
            rows.append(ScoreRow(ds, sid, mid, score, label))
    return ScoreTable(tuple(rows))


def format_score_rows(rows: Iterable[ScoreRow], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(SCORE_HEADER)
    for r in rows:
        w.writerow([r.dataset_id, r.sample_id, r.model_id, repr(float(r.score)), r.label.value])
    return buf.getvalue()


def write_score_csv(rows: Iterable[ScoreRow], path: str | os.PathLike, append: bool = False) -> None:
    path = Path(path)
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as fh:
        fh.write(format_score_rows(rows, header=header))


def read_vectors_ndjson(path: str | os.PathLike) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = obj["sample_id"]
                vec = np.asarray(obj["vector"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError("BAD_RECORD", f"cannot parse record ({exc})", line=line_no) from None
            if not isinstance(sid, str) or vec.ndim != 1 or vec.size == 0:
                raise FormatError("BAD_RECORD", "need a string sample_id and a non-empty flat vector", line=line_no)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(
                    "DIMENSION_MISMATCH", f"vector length {vec.size}, file dimension is {dim}", line=line_no
                )
            out.append((sid, vec))
    return out


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_bank(bank: CalibrationBank, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_json(bank.to_json_obj()), encoding="utf-8")


def read_bank(path: str | os.PathLike) -> CalibrationBank:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("BAD_BANK", f"bank is not valid JSON ({exc.msg})", line=exc.lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("BAD_BANK", "bank must be a JSON object")
    try:
        return CalibrationBank.from_json_obj(obj)
    except (KeyError, TypeError) as exc:
        raise FormatError("BAD_BANK", f"malformed bank entry ({exc})") from None


def format_verdicts(verdicts: Iterable[Verdict]) -> str:
    return "".join(json.dumps(v.to_json_obj(), allow_nan=False) + "\n" for v in verdicts)


def read_verdicts_ndjson(path: str | os.PathLike) -> list[Verdict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                o = json.loads(line)
                pvals = {m: float(p) for m, p in o.get("pvalues", {}).items()}
                out.append(
                    Verdict(
                        sample_id=o["sample_id"],
                        decision=Decision(o["decision"]),
                        k_hat=o["k_hat"],
                        pi0_hat=float(o["pi0_hat"]),
                        flagged_models=tuple(o["flagged_models"]),
                        sorted_pvalues=tuple(sorted(pvals.values())),
                        method=Method(o.get("method", "DSDE")),
                        pvalues=pvals,
                        dataset_id=o.get("dataset_id", ""),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DsdeError) as exc:
                raise FormatError("BAD_VERDICT", f"cannot parse verdict ({exc})", line=line_no) from None
    return out


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_manifest(
    config: Mapping[str, Any],
    inputs: Iterable[str | os.PathLike],
    seed: int | None,
    stamp_time: bool = False,
) -> dict[str, Any]:
    """Provenance block embedded in reports.

    The timestamp is ``SOURCE_DATE_EPOCH`` when that variable is set, the
    current UTC time when ``stamp_time`` is requested, and otherwise null so
    that reruns stay byte-identical.
    """
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        ts = datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()
    elif stamp_time:
        ts = datetime.now(tz=timezone.utc).isoformat(timespec="seconds")
    else:
        ts = None
    return {
        "tool": "dsde",
        "version": __version__,
        "seed": seed,
        "timestamp": ts,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "config": dict(config),
    }
