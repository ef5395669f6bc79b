"""Acceptance criteria A1-A13.

Each test prints one ``A<n> PASS|FAIL: ...`` line (shown even under output
capture) and then asserts. Run ``python tests/test_acceptance.py`` for the
bare list of lines.
"""

import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from dsde.cli import main
from dsde.datamodel import CalibrationBank, ExperimentConfig, SyntheticScenario
from dsde.decision import adaptive_bh, bh_decide, bonferroni_decide, by_decide, naive_decide
from dsde.ecdf import build_ecdf, tpr_threshold
from dsde.evaluation import AVERAGE, run_experiment
from dsde.proportion import SortedPValues, dos_changepoint, dos_statistic, dos_storey_pi0
from dsde.scorers import FeatureBank, energy_score, knn_score, msp_score
from dsde.synth import ESTIMATORS, bruteforce_stepup_oracle, estimator_rmse, gen_scores, make_rng, mc_null_rate

from conftest import random_pvectors

RESULTS = []


@pytest.fixture(autouse=True)
def _report(request):
    yield
    if RESULTS and RESULTS[-1][0] == request.node.name:
        _, line = RESULTS[-1]
        tr = request.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)


def report(tag, ok, detail):
    name = _current_test()
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append((name, line))
    if name is None:
        print(line)
    assert ok, line


def _current_test():
    cur = os.environ.get("PYTEST_CURRENT_TEST", "")
    return cur.split("::")[-1].split(" ")[0] if cur else None


def null_rate_check(tag, method, target, tol, budget=None):
    t0 = time.perf_counter()
    r = mc_null_rate(method, 7, 0.05, 100_000, seed=2024)
    dt = time.perf_counter() - t0
    ok = abs(r.observed_id_rate - target) <= tol and (budget is None or dt < budget)
    report(tag, ok, f"{method} ID rate {r.observed_id_rate:.5f} vs {target:.6f} +/- {tol} ({dt:.2f}s)")


def test_a1_naive_null_rate():
    null_rate_check("A1", "naive", 0.95**7, 0.006, budget=5.0)


def test_a2_bonferroni_null_rate():
    null_rate_check("A2", "bonferroni", (1 - 0.05 / 7) ** 7, 0.004)


def test_a3_bh_null_rate():
    null_rate_check("A3", "bh", 0.95, 0.004)


def test_a4_dsde_null_rate():
    cfg = ExperimentConfig(beta=1.0, c_m=2 / 7, pi0_form="RATIO")
    r = mc_null_rate("dsde", 7, 0.05, 100_000, seed=2024, cfg=cfg)
    report("A4", 0.90 <= r.observed_id_rate <= 0.97, f"dsde ID rate {r.observed_id_rate:.5f} in [0.90, 0.97]")


def test_a5_oracle_equivalence():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mismatches = 0
    for p in random_pvectors(rng, 10_000):
        alpha = float(rng.choice([0.01, 0.05, 0.1]))
        pi0 = float(rng.choice([0.2, 0.5, 1.0]))
        got = adaptive_bh(SortedPValues.of(p), pi0, alpha).rejected_ranks
        mismatches += got != bruteforce_stepup_oracle(p, alpha, pi0)
    dt = time.perf_counter() - t0
    report("A5", mismatches == 0 and dt < 30, f"{mismatches} mismatches on 10000 vectors ({dt:.1f}s)")


def test_a6_nesting():
    rng = np.random.default_rng(6)

    def rej(v):
        return set(range(1, v.k_hat + 1)) if v.k_hat else set()

    violations = 0
    for p in random_pvectors(rng, 10_000):
        pv = [(f"m{j:02d}", float(x)) for j, x in enumerate(p)]
        bon, bh, nai, by = (rej(f(pv, 0.05)) for f in (bonferroni_decide, bh_decide, naive_decide, by_decide))
        violations += not (bon <= bh <= nai and by <= bh)
        sp = SortedPValues.of(p)
        sets = [adaptive_bh(sp, pi0, 0.05).rejected_ranks for pi0 in (1.0, 0.8, 0.5, 0.2, 0.05)]
        violations += any(not a <= b for a, b in zip(sets, sets[1:]))
    report("A6", violations == 0, f"{violations} nesting violations on 10000 vectors")


def test_a7_complementarity():
    t0 = time.perf_counter()
    shift_a = (4.0, 4.0, 4.0, 0.0, 0.0, 0.0, 0.0)
    shift_b = (0.0, 0.0, 0.0, 4.0, 4.0, 4.0, 0.0)
    sc = SyntheticScenario(m=7, seed=77, ood_shifts=(shift_a, shift_b), n_calib=10_000, n_id=10_000, n_ood=10_000)
    gen = gen_scores(sc, make_rng(sc.seed))
    bank = CalibrationBank.from_table(gen.calibration)
    models = bank.model_ids
    rep = run_experiment(gen.test, bank, ExperimentConfig(c_m=2 / 7), ["dsde"] + [f"single:{m}" for m in models])
    fpr = {r.method: r.fpr for r in rep.rows if r.dataset_id != AVERAGE}
    best_single = min(v for k, v in fpr.items() if k.startswith("single:"))
    dt = time.perf_counter() - t0
    ok = fpr["dsde"] <= best_single + 0.02 and dt < 120
    report("A7", ok, f"DSDE FPR {fpr['dsde']:.4f} vs best single-model FPR {best_single:.4f} ({dt:.1f}s)")


def test_a8_single_model_tpr():
    rng = make_rng(8)
    F = build_ecdf(rng.standard_normal(10_000))
    thr = tpr_threshold(F, 0.05)
    tpr = float(np.mean(rng.standard_normal(10_000) > thr))
    report("A8", 0.94 <= tpr <= 0.96, f"TPR {tpr:.4f} in [0.94, 0.96] at threshold {thr:.4f}")


def test_a9_storey_null_mean():
    sc = SyntheticScenario(m=100, m0=100, trials=10_000, seed=9)
    (r,) = estimator_rmse(["storey_0.5_unclipped"], [sc], 10_000, 9)
    report("A9", 0.99 <= r.mean <= 1.01, f"unclipped Storey mean {r.mean:.5f} in [0.99, 1.01]")


def test_a10_dos_worked_values():
    sp = SortedPValues.of([0.01, 0.02, 0.5, 0.9])
    d2 = dos_statistic(sp, 2, 1.0)
    k = dos_changepoint(sp, 1.0, 0.25)
    ratio = dos_storey_pi0(sp, 1.0, 0.25, "RATIO").value
    lit = dos_storey_pi0(sp, 1.0, 0.25, "LITERAL_EQ15").value
    ok = (
        abs(d2 - 0.43) <= 1e-9 and k == 2 and abs(ratio - 0.5 / 0.98) <= 1e-9 and abs(lit - 0.49) <= 1e-9
        and abs(ratio - 0.510204) <= 1e-6
    )
    report("A10", ok, f"d_2={d2:.9f} k={k} pi0 RATIO={ratio:.9f} LITERAL_EQ15={lit:.9f}")


def test_a11_scorers():
    rng = make_rng(11)
    checks = [
        abs(energy_score([0.0, 0.0], 1.0) - math.log(2)) <= 1e-12,
        msp_score([1000.0, 0.0]) >= 1 - 1e-12,
        abs(knn_score([0.0, 1.0], FeatureBank.from_vectors("m", [[1.0, 0.0]]), 1) + math.sqrt(2)) <= 1e-12,
    ]
    bank = FeatureBank.from_vectors("m", rng.standard_normal((200, 16)), normalize=True)
    worst = 0.0
    for q in rng.standard_normal((100, 16)):
        qn = q / np.linalg.norm(q)
        ref = -sorted(float(np.sqrt(((qn - b) ** 2).sum())) for b in bank.vectors)[49]
        worst = max(worst, abs(knn_score(q, bank, 50) - ref))
    checks.append(worst <= 1e-12)
    report("A11", all(checks), f"energy/msp/knn-orthonormal/knn-oracle checks {checks}, knn max err {worst:.1e}")


def test_a12_determinism(tmp_path):
    sc = {"m": 4, "seed": 12, "n_calib": 300, "n_id": 100, "n_ood": 100, "ood_shifts": [[2.0, 2.0, 0.0, 0.0]]}
    (tmp_path / "sc.json").write_text(json.dumps(sc))
    outputs = []
    d = tmp_path / "run"
    for _ in range(2):
        assert main(["synth", "scores", "--scenario", str(tmp_path / "sc.json"), "--out-dir", str(d)]) == 0
        assert main(["calibrate", "--input", str(d / "calib.csv"), "-o", str(d / "bank.json")]) == 0
        assert main(["detect", "--scores", str(d / "test.csv"), "--bank", str(d / "bank.json"), "--cm", "0.25",
                     "-o", str(d / "v.ndjson")]) == 0
        assert main(["synth", "null-rate", "--trials", "5000", "--seed", "3", "-o", str(d / "nr.json")]) == 0
        names = ("calib.csv", "test.csv", "bank.json", "v.ndjson", "v.ndjson.manifest.json", "nr.json",
                 "nr_null_rates.png")
        outputs.append([(d / n).read_bytes() for n in names])
    same = outputs[0] == outputs[1]
    report("A12", same, "detect and synth reruns byte-identical" if same else "rerun outputs differ")


def test_a13_estimator_rmse():
    grid = [SyntheticScenario(m=100, m0=round(100 * p), alt_shape=0.1, trials=10_000, seed=13)
            for p in (0.5, 0.8, 0.95)]
    reps = estimator_rmse(ESTIMATORS, grid, 10_000, 13)
    worst = max(abs(r.rmse**2 - (r.bias**2 + r.variance)) / max(r.rmse**2, 1e-300) for r in reps)
    table = "; ".join(f"pi0={r.scenario['pi0']:g} {r.estimator} rmse={r.rmse:.4f}" for r in reps)
    report("A13", worst <= 1e-9 and len(reps) == 12, f"identity max rel err {worst:.1e}; {table}")


if __name__ == "__main__":
    failed = 0
    tests = [(n, f) for n, f in globals().items() if n.startswith("test_a")]
    for _, fn in sorted(tests, key=lambda t: int(t[0].split("_")[1][1:])):
        try:
            if fn.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as td:
                    fn(Path(td))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
