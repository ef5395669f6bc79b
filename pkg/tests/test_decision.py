import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsde.datamodel import Decision, ExperimentConfig, Method
from dsde.decision import (
    adaptive_bh,
    batch_decide,
    bh_decide,
    bonferroni_decide,
    by_decide,
    decide,
    dsde_decide,
    naive_decide,
    ood_onset,
    storey_fixed_decide,
    vote_decide,
)
from dsde.errors import DsdeError
from dsde.proportion import SortedPValues
from dsde.synth import bruteforce_stepup_oracle

from conftest import random_pvectors


def named(p):
    return [(f"m{j:02d}", float(x)) for j, x in enumerate(p)]


def rejected(v):
    return set(range(1, v.k_hat + 1)) if v.k_hat else set()


class TestAdaptiveBH:
    def test_enumerated(self):
        res = adaptive_bh(SortedPValues.of([0.01, 0.02, 0.5, 0.9]), 0.5, 0.05)
        # q~_i = 0.5 * 4 * p_i / i
        expected = [0.5 * 4 * 0.01 / 1, 0.5 * 4 * 0.02 / 2, 0.5 * 4 * 0.5 / 3, 0.5 * 4 * 0.9 / 4]
        np.testing.assert_allclose(expected, [0.02, 0.02, 0.333333, 0.45], atol=1e-6)
        np.testing.assert_allclose(res.q_values, expected, atol=1e-15)
        assert res.k_hat == 2 and res.rejected_ranks == {1, 2}

    def test_all_ones(self):
        res = adaptive_bh(SortedPValues.of([1.0] * 5), 1.0, 0.05)
        assert res.k_hat is None and res.rejected_ranks == frozenset()

    def test_q_envelope_monotone(self, rng):
        for p in random_pvectors(rng, 200):
            res = adaptive_bh(SortedPValues.of(p), 0.7, 0.05)
            assert np.all(np.diff(res.q_values) >= 0) and np.all(res.q_values >= 0)
            k_env = max((i + 1 for i, q in enumerate(res.q_values) if q <= 0.05), default=None)
            assert k_env == res.k_hat

    def test_pi0_one_is_bh(self, rng):
        for p in random_pvectors(rng, 10_000, m_max=20):
            a = adaptive_bh(SortedPValues.of(p), 1.0, 0.05).rejected_ranks
            assert a == bruteforce_stepup_oracle(p, 0.05, 1.0)


class TestDsde:
    def test_worked_example(self, worked_pvals, cfg4):
        v = dsde_decide(worked_pvals, cfg4)
        assert v.pi0_hat == pytest.approx(0.510204, abs=1e-6)
        assert v.decision is Decision.OOD and v.k_hat == 2
        assert v.flagged_models == ("A", "B")
        # composed by hand: q~ = pi0 * 4 * p_(i) / i
        q = [v.pi0_hat * 4 * p / i for i, p in enumerate([0.01, 0.02, 0.5, 0.9], start=1)]
        np.testing.assert_allclose(q, [0.020408, 0.020408, 0.340136, 0.459184], atol=1e-6)

    def test_all_large(self, cfg4):
        assert dsde_decide({k: 0.99 for k in "ABCD"}, cfg4).decision is Decision.ID

    @pytest.mark.parametrize("p,ood", [(0.05, True), (0.0500001, False), (0.01, True), (0.9, False)])
    def test_single_model_reduces_to_threshold(self, p, ood):
        v = dsde_decide({"only": p}, ExperimentConfig())
        assert v.pi0_hat == 1.0
        assert (v.decision is Decision.OOD) == ood

    def test_flag_ties_by_model_id(self, cfg4):
        v = dsde_decide({"Z": 0.001, "A": 0.001, "C": 0.6, "B": 0.9}, cfg4)
        assert v.flagged_models == ("A", "Z")

    def test_deterministic(self, rng):
        cfg = ExperimentConfig()
        for p in random_pvectors(rng, 100, m_max=12):
            pv = named(p)
            assert dsde_decide(pv, cfg) == dsde_decide(list(reversed(pv)), cfg)

    def test_input_validation(self):
        with pytest.raises(DsdeError):
            dsde_decide({"a": 1.5})
        with pytest.raises(DsdeError):
            dsde_decide([("a", 0.1), ("a", 0.2)])
        with pytest.raises(DsdeError):
            dsde_decide({})


class TestBaselines:
    def test_bh_example(self):
        p = [0.01, 0.02, 0.5, 0.9]
        thresholds = [i * 0.05 / 4 for i in range(1, 5)]
        np.testing.assert_allclose(thresholds, [0.0125, 0.025, 0.0375, 0.05], atol=1e-15)
        k = max(i + 1 for i in range(4) if p[i] <= thresholds[i])
        v = bh_decide(named(p), 0.05)
        assert v.k_hat == k == 2 and v.decision is Decision.OOD

    def test_bh_all_large(self):
        assert bh_decide(named([0.2, 0.3, 0.06]), 0.05).decision is Decision.ID

    def test_by_example(self):
        h4 = 1 + 1 / 2 + 1 / 3 + 1 / 4
        assert h4 == pytest.approx(2.083333, abs=1e-6)
        assert 0.05 / (4 * h4) == pytest.approx(0.006, abs=1e-12)
        v = by_decide(named([0.005, 0.02, 0.5, 0.9]), 0.05)
        assert v.k_hat == 1 and v.decision is Decision.OOD
        assert by_decide(named([1.0] * 4), 0.05).decision is Decision.ID

    def test_bonferroni(self):
        p = [0.5, 0.004, 0.3, 0.9, 0.2, 0.7, 0.6]
        assert 0.004 <= 0.05 / 7
        assert bonferroni_decide(named(p), 0.05).decision is Decision.OOD
        assert bonferroni_decide(named([0.05 / 7, 0.5]), 0.05 * 2 / 7 * 3.5).decision is Decision.OOD
        for m in range(1, 65):
            edge = [0.05 / m] + [0.9] * (m - 1)
            assert bonferroni_decide(named(edge), 0.05).decision is Decision.OOD
        assert bonferroni_decide(named([0.008] * 7), 0.05).decision is Decision.ID

    def test_naive(self):
        v = naive_decide(named([0.03, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]), 0.05)
        assert v.decision is Decision.OOD and len(v.flagged_models) == 1
        assert naive_decide(named([0.06] * 7), 0.05).decision is Decision.ID

    def test_vote(self):
        p = [0.01, 0.02, 0.03, 0.04, 0.5, 0.6, 0.7]
        assert 4 / 7 == pytest.approx(0.571, abs=1e-3)
        v = vote_decide(named(p), 0.05, 0.5)
        assert v.decision is Decision.OOD and v.k_hat == 4
        assert vote_decide(named(p), 0.05, 0.6).decision is Decision.ID
        assert vote_decide(named([0.5] * 7), 0.05, 0.01).decision is Decision.ID
        # inclusive boundary: 3 of 6 is exactly 50%
        assert vote_decide(named([0.01] * 3 + [0.9] * 3), 0.05, 0.5).decision is Decision.OOD

    def test_storey_fixed(self):
        v = storey_fixed_decide(named([0.01, 0.02, 0.6, 0.7]), 0.05, 0.5)
        assert v.pi0_hat == 2 / (4 * 0.5) == 1.0 and v.k_hat == 2
        assert v.flagged_models == bh_decide(named([0.01, 0.02, 0.6, 0.7]), 0.05).flagged_models
        v = storey_fixed_decide(named([0.01, 0.1, 0.2, 0.3]), 0.05, 0.5)
        assert v.pi0_hat == 0.25
        # thresholds four times looser than BH: p_(i) <= i * 0.05 / (0.25 * 4)
        p = [0.01, 0.1, 0.2, 0.3]
        assert v.k_hat == max(i for i, x in enumerate(p, 1) if x <= i * 0.05 / (0.25 * 4)) == 2
        assert bh_decide(named(p), 0.05).k_hat == 1
        assert storey_fixed_decide(named([1.0] * 4), 0.05, 0.5).decision is Decision.ID


class TestProperties:
    METHODS = list(Method)

    def test_nesting(self, rng):
        for p in random_pvectors(rng, 10_000):
            pv = named(p)
            bon, bh, nai, by = (
                rejected(bonferroni_decide(pv, 0.05)),
                rejected(bh_decide(pv, 0.05)),
                rejected(naive_decide(pv, 0.05)),
                rejected(by_decide(pv, 0.05)),
            )
            assert bon <= bh <= nai
            assert by <= bh

    def test_pi0_antimonotone(self, rng):
        for p in random_pvectors(rng, 2000):
            sp = SortedPValues.of(p)
            prev = None
            for pi0 in (1.0, 0.8, 0.5, 0.2, 0.05):
                cur = adaptive_bh(sp, pi0, 0.05).rejected_ranks
                if prev is not None:
                    assert prev <= cur
                prev = cur

    @settings(max_examples=200, deadline=None)
    @given(
        p=st.lists(st.floats(0, 1), min_size=1, max_size=16),
        a1=st.floats(0.001, 0.999),
        a2=st.floats(0.001, 0.999),
        method=st.sampled_from(list(Method)),
    )
    def test_alpha_monotone_and_contiguous(self, p, a1, a2, method):
        lo, hi = sorted((a1, a2))
        pv = named(p)
        v_lo = decide(pv, ExperimentConfig(alpha=lo, c_m=0.2), method)
        v_hi = decide(pv, ExperimentConfig(alpha=hi, c_m=0.2), method)
        assert rejected(v_lo) <= rejected(v_hi)
        for v in (v_lo, v_hi):
            # step-up contiguity: flagged models are exactly the k smallest
            if v.k_hat:
                assert list(v.sorted_pvalues[: v.k_hat]) == sorted(v.pvalues[m] for m in v.flagged_models)
                if v.k_hat < len(p):
                    assert v.sorted_pvalues[v.k_hat] > v.sorted_pvalues[v.k_hat - 1]


class TestBatchPath:
    @pytest.mark.parametrize("method", list(Method))
    def test_onset_matches_per_sample(self, rng, method):
        cfg = ExperimentConfig(vote_tau=0.6)
        alphas = np.array([0.001, 0.01, 0.02, 0.05, 0.05 * 2 / 7, 0.1, 0.25, 0.5, 0.9])
        alphas = np.unique(alphas)
        for m in (1, 2, 4, 7, 11):
            p = rng.random((150, m)) ** 2
            p[:20] = rng.choice([0.0, 0.01, 0.02, 0.05, 1.0, 0.05 / m], size=(20, m))
            onset = ood_onset(p, cfg, alphas, method)
            for i in range(p.shape[0]):
                for g, a in enumerate(alphas):
                    v = decide(named(p[i]), cfg.replace(alpha=float(a)), method)
                    assert (v.decision is Decision.OOD) == (onset[i] <= g), (m, i, a)

    def test_batch_decide_default_alpha(self, rng):
        p = rng.random((50, 7))
        cfg = ExperimentConfig()
        flags = batch_decide(p, cfg)
        assert flags.tolist() == [dsde_decide(named(r), cfg).decision is Decision.OOD for r in p]
