import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsde.datamodel import (
    CalibrationBank,
    ExperimentConfig,
    Label,
    Method,
    ScoreRow,
    ScoreTable,
    SyntheticScenario,
    to_matrix,
    validate_table,
)
from dsde.errors import CalibrationError, DsdeError


def grid_table(samples=("s1", "s2", "s3"), models=("m1", "m2"), ds="d"):
    rows = []
    for i, s in enumerate(samples):
        for j, m in enumerate(models):
            rows.append(ScoreRow(ds, s, m, float(10 * i + j), Label.ID))
    return ScoreTable(tuple(rows))


class TestValidateTable:
    def test_well_formed(self):
        assert validate_table(grid_table()) == []

    def test_duplicate_key(self):
        t = grid_table()
        t = ScoreTable(t.rows + (t.rows[0],))
        v = validate_table(t)
        assert [x.kind for x in v] == ["DUPLICATE_KEY"]
        assert v[0].row == len(t) - 1

    def test_ragged_coverage(self):
        rows = [r for r in grid_table().rows if not (r.sample_id == "s2" and r.model_id == "m2")]
        v = validate_table(ScoreTable(tuple(rows)))
        # oracle: expected cross product minus observed cells
        expected = {(s, m) for s in ("s1", "s2", "s3") for m in ("m1", "m2")}
        observed = {(r.sample_id, r.model_id) for r in rows}
        assert [(x.kind, x.sample_id, x.model_id) for x in v] == [
            ("RAGGED_COVERAGE", s, m) for s, m in sorted(expected - observed)
        ]

    def test_nonfinite(self):
        t = ScoreTable((ScoreRow("d", "s", "m", float("nan"), Label.ID),))
        assert [x.kind for x in validate_table(t)] == ["NONFINITE_SCORE"]

    def test_label_conflict(self):
        t = ScoreTable((ScoreRow("d", "s", "a", 1.0, Label.ID), ScoreRow("d", "s", "b", 1.0, Label.OOD)))
        assert [x.kind for x in validate_table(t)] == ["LABEL_CONFLICT"]

    def test_idempotent_and_pure(self):
        rows = list(grid_table().rows)
        rows.append(rows[0])
        t = ScoreTable(tuple(rows))
        before = t.rows
        assert validate_table(t) == validate_table(t)
        assert t.rows == before


class TestToMatrix:
    def test_single_cell(self):
        t = ScoreTable((ScoreRow("d", "s", "m", 0.3, Label.ID),))
        mat = to_matrix(t, "d")
        assert mat.scores.tolist() == [[0.3]]

    def test_model_major_equals_sample_major(self):
        t = grid_table()
        model_major = ScoreTable(tuple(sorted(t.rows, key=lambda r: (r.model_id, r.sample_id))))
        a, b = to_matrix(t, "d"), to_matrix(model_major, "d")
        assert a.sample_ids == b.sample_ids
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_shuffled_matches_lookup(self, rng):
        t = grid_table()
        rows = list(t.rows)
        rng.shuffle(rows)
        mat = to_matrix(ScoreTable(tuple(rows)), "d")
        lookup = {(r.sample_id, r.model_id): r.score for r in rows}
        assert mat.model_ids == ("m1", "m2")
        # first-appearance order of samples in the shuffled input
        assert list(mat.sample_ids) == list(dict.fromkeys(r.sample_id for r in rows))
        for i, s in enumerate(mat.sample_ids):
            for j, m in enumerate(mat.model_ids):
                assert mat.scores[i, j] == lookup[(s, m)]

    def test_unknown_dataset(self):
        with pytest.raises(DsdeError) as e:
            to_matrix(grid_table(), "nope")
        assert e.value.code == "UNKNOWN_DATASET"

    def test_ragged(self):
        rows = grid_table().rows[:-1]
        with pytest.raises(DsdeError) as e:
            to_matrix(ScoreTable(rows), "d")
        assert e.value.code == "RAGGED_COVERAGE"

    @settings(max_examples=50, deadline=None)
    @given(
        n_s=st.integers(1, 6),
        n_m=st.integers(1, 5),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip(self, n_s, n_m, seed):
        r = np.random.default_rng(seed)
        rows = [
            ScoreRow("d", f"s{i}", f"m{j}", float(r.normal()), Label.OOD)
            for i, j in itertools.product(range(n_s), range(n_m))
        ]
        other = [ScoreRow("e", "x", "m0", 1.0, Label.ID)]
        all_rows = rows + other
        r.shuffle(all_rows)
        flat = to_matrix(ScoreTable(tuple(all_rows)), "d").flatten()
        assert sorted(flat.rows) == sorted(rows)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.alpha, cfg.beta, cfg.c_m) == (0.05, 1.0, 2 / 7)
        assert cfg.alpha_grid[0] == 0.001 and cfg.alpha_grid[-1] == 0.999
        assert len(cfg.alpha_grid) == 999
        assert cfg.floor_for(7) == 1 / 7

    def test_string_enums(self):
        cfg = ExperimentConfig(method="storey", pvalue_mode="literal", pi0_form="literal_eq15")
        assert cfg.method is Method.STOREY_FIXED

    @pytest.mark.parametrize(
        "kw",
        [
            {"alpha": 0.0},
            {"alpha": 1.0},
            {"beta": 0.4},
            {"c_m": 1.0},
            {"vote_tau": 0.0},
            {"storey_lambda": 1.0},
            {"pi0_floor": 1.5},
            {"alpha_grid": (0.1, 0.1)},
            {"alpha_grid": ()},
            {"method": "magic"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(DsdeError):
            ExperimentConfig(**kw)

    def test_json_round_trip(self):
        cfg = ExperimentConfig(alpha=0.1, method="bh", alpha_grid=(0.01, 0.5))
        assert ExperimentConfig.from_json_obj(cfg.to_json_obj()) == cfg


class TestBankAndScenario:
    def test_bank_json_round_trip(self):
        bank = CalibrationBank.from_scores({"b": [3.0, 1.0], "a": [2.0]})
        again = CalibrationBank.from_json_obj(bank.to_json_obj())
        assert bank.to_json_obj() == again.to_json_obj() == {
            "a": {"n": 1, "scores": [2.0]},
            "b": {"n": 2, "scores": [1.0, 3.0]},
        }

    def test_bank_missing_model(self):
        bank = CalibrationBank.from_scores({"a": [1.0]})
        with pytest.raises(CalibrationError) as e:
            bank["z"]
        assert e.value.code == "MISSING_CALIBRATION"

    @pytest.mark.parametrize(
        "kw", [{"m": 0}, {"m": 3, "m0": 4}, {"m": 3, "trials": 0}, {"m": 2, "id_mean": (0.0,)}]
    )
    def test_bad_scenario(self, kw):
        with pytest.raises(DsdeError):
            SyntheticScenario(**kw)
