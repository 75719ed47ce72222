import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fediptw.evaluation import (
    MetricError,
    MetricReport,
    PluginLearnerConfig,
    auroc_auprc,
    if_pehe,
    if_pehe_from_plugins,
    influence_terms,
    mae_ate,
    mean_std,
    pehe,
    weighted_cov,
)
from fediptw.numerics import make_rng

# fixed five-record instance for the influence-function PEHE
T5 = [1, 0, 1, 0, 1]
Y5 = [1, 0, 0, 1, 1]
PI5 = [0.5, 0.3, 0.8, 0.6, 0.2]
MU0 = [0.2, 0.4, 0.1, 0.7, 0.5]
MU1 = [0.6, 0.5, 0.3, 0.9, 0.4]
EH5 = [0.3, 0.0, 0.25, 0.1, -0.2]
IF_PEHE_5 = 0.92675  # scalar transcription, evaluated once and frozen


def transcribed_if_pehe(t, y, pi, mu0, mu1, e_hat):
    total = 0.0
    for i in range(len(t)):
        e = mu1[i] - mu0[i]
        Z = pi[i] * (1 - pi[i])
        W = t[i] - pi[i]
        B = 2 * t[i] * (t[i] - pi[i]) / Z
        l = (1 - B) * e_hat[i] ** 2 + B * y[i] * (e - e_hat[i]) - W * (e - e_hat[i]) ** 2 + e_hat[i] ** 2
        total += (e_hat[i] - e) ** 2 + l
    return total


class TestPehe:
    def test_identical(self):
        assert pehe([0.3, -1.0], [0.3, -1.0]) == (0.0, 0.0)

    def test_arithmetic(self):
        assert pehe([1, 1], [0, 2]) == (1.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 10))
    def test_loop_oracle(self, seed, n):
        rng = make_rng(seed)
        a, b = rng.normal(size=n), rng.normal(size=n)
        s = 0.0
        for x, z in zip(a, b):
            s += (x - z) ** 2
        v, r = pehe(a, b)
        assert v == pytest.approx(s / n, rel=1e-14, abs=1e-300)
        assert r == pytest.approx(math.sqrt(s / n), rel=1e-14, abs=1e-300)

    def test_errors(self):
        with pytest.raises(MetricError):
            pehe([1, 2], [1])
        with pytest.raises(MetricError):
            pehe([], [])


class TestMae:
    def test_same_mean(self):
        assert mae_ate([0, 2], [1, 1]) == 0.0

    def test_arithmetic(self):
        assert mae_ate([1.0, 1.0], [0.6, 0.6]) == pytest.approx(0.4, abs=1e-15)

    def test_permutation(self):
        e = make_rng(0).normal(size=10)
        assert mae_ate(np.ones(10), e) == pytest.approx(mae_ate(np.ones(10), e[::-1]), abs=1e-15)

    def test_loop_oracle(self):
        rng = make_rng(1)
        a, b = rng.normal(size=7), rng.normal(size=7)
        assert mae_ate(a, b) == pytest.approx(abs(sum(a) / 7 - sum(b) / 7), abs=1e-14)

    def test_empty(self):
        with pytest.raises(MetricError):
            mae_ate([], [1.0])


class TestIfPehe:
    def test_five_record_transcription(self):
        oracle = transcribed_if_pehe(T5, Y5, PI5, MU0, MU1, EH5)
        assert oracle == pytest.approx(IF_PEHE_5, abs=1e-12)
        got = if_pehe_from_plugins(T5, Y5, PI5, np.subtract(MU1, MU0), EH5)
        assert got == pytest.approx(oracle, abs=1e-10)

    def test_intermediates_at_half(self):
        terms = influence_terms([1.0], [1.0], [0.5], [0.2], [0.1])
        assert terms["Z"][0] == 0.25 and terms["W"][0] == 0.5
        # 2 t (t - pi) / Z with t = 1, pi = 0.5
        assert terms["B"][0] == 4.0

    def test_plugin_equal_to_estimate(self):
        e = np.subtract(MU1, MU0)
        got = if_pehe_from_plugins(T5, Y5, PI5, e, e)
        terms = influence_terms(T5, Y5, PI5, e, e)
        assert got == pytest.approx(float(np.sum(terms["l"])), abs=1e-14)
        np.testing.assert_allclose(terms["l"], (2 - terms["B"]) * e**2, rtol=0, atol=1e-15)

    def test_propensity_is_clipped(self):
        a = if_pehe_from_plugins([1], [1], [1.0], [0.2], [0.1])
        b = if_pehe_from_plugins([1], [1], [0.99], [0.2], [0.1])
        assert a == b and np.isfinite(a)

    def test_external_plugins(self):
        mu0 = lambda X: np.full(len(X), 0.2)
        mu1 = lambda X: np.full(len(X), 0.5)
        pi = lambda X: np.full(len(X), 0.4)
        X = np.zeros((4, 2))
        t, y, eh = np.array([1, 0, 1, 0.0]), np.array([1, 0, 0, 1.0]), np.full(4, 0.1)
        got = if_pehe(X, t, y, X, t, y, eh, plugins=(mu0, mu1, pi))
        assert got == pytest.approx(transcribed_if_pehe(t, y, [0.4] * 4, [0.2] * 4, [0.5] * 4, eh), abs=1e-12)

    def test_unavailable_cases(self):
        X = make_rng(2).normal(size=(20, 2))
        t = np.r_[np.ones(10), np.zeros(10)]
        assert if_pehe(X, t, X[:, 0], X, t, X[:, 0], np.zeros(20)) is None
        y = np.r_[np.ones(10), np.zeros(10)]  # the treated arm has a single outcome class
        assert if_pehe(X, t, y, X, t, y, np.zeros(20)) is None

    def test_builtin_learners_run(self):
        rng = make_rng(3)
        X = rng.normal(size=(80, 3))
        t = (rng.random(80) < 0.5).astype(float)
        y = (rng.random(80) < 0.4).astype(float)
        v = if_pehe(X, t, y, X, t, y, np.zeros(80), PluginLearnerConfig(epochs=2, seed=1))
        assert v is not None and np.isfinite(v)


def pair_auroc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_auprc(s, y):
    n_pos = sum(y)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(s), reverse=True):
        tp = sum(1 for a, l in zip(s, y) if a >= thr and l == 1)
        fp = sum(1 for a, l in zip(s, y) if a >= thr and l == 0)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


class TestRanking:
    def test_separated(self):
        assert auroc_auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == (1.0, 1.0)

    def test_six_point_instance(self):
        s = [0.9, 0.4, 0.4, 0.7, 0.1, 0.4]
        y = [1, 0, 1, 0, 0, 1]
        a, p = auroc_auprc(s, y)
        assert a == pair_auroc(s, y)
        assert p == pytest.approx(brute_auprc(s, y), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(data=st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=10))
    def test_small_instances_match_enumeration(self, data):
        s = [float(a) for a, _ in data]
        y = [b for _, b in data]
        if len(set(y)) < 2:
            with pytest.raises(MetricError):
                auroc_auprc(s, y)
            return
        a, p = auroc_auprc(s, y)
        assert a == pytest.approx(pair_auroc(s, y), abs=1e-15)
        assert p == pytest.approx(brute_auprc(s, y), abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_strictly_monotone_transform(self, seed):
        rng = make_rng(seed)
        s = np.round(rng.normal(size=12), 1)
        y = np.r_[1, 0, (rng.random(10) < 0.5)].astype(float)
        assert auroc_auprc(s, y) == auroc_auprc(np.exp(3 * s) + 2, y)

    def test_uninformative_scores(self):
        rng = make_rng(4)
        a, _ = auroc_auprc(rng.random(20_000), (rng.random(20_000) < 0.3).astype(float))
        assert abs(a - 0.5) < 0.02

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc_auprc([0.1, 0.2], [1, 1])


class TestCovariance:
    def test_unit_weights_match_biased_covariance(self):
        rng = make_rng(5)
        X, t = rng.normal(size=(30, 4)), (rng.random(30) < 0.5).astype(float)
        res = weighted_cov([X], [t], level="global")
        ref = np.array([np.cov(X[:, j], t, bias=True)[0, 1] for j in range(4)])
        np.testing.assert_allclose(res.per_feature / 30, ref, rtol=0, atol=1e-12)

    def test_independent_by_construction(self):
        X = np.array([[0.0], [1.0], [0.0], [1.0]])
        t = np.array([0.0, 0.0, 1.0, 1.0])
        res = weighted_cov([X], [t], level="local")
        np.testing.assert_allclose(res.per_feature, 0.0, atol=1e-10)
        assert res.summary == pytest.approx(0.0, abs=1e-10)

    def test_loop_oracle_with_hospital_weights(self):
        rng = make_rng(6)
        Xs = [rng.normal(size=(n, 2)) for n in (4, 6)]
        ts = [(rng.random(n) < 0.5).astype(float) for n in (4, 6)]
        pw = [rng.random(n) + 0.1 for n in (4, 6)]
        hw = [0.5, 3.0]
        recs = [(hw[c] * pw[c][i], Xs[c][i], ts[c][i]) for c in range(2) for i in range(len(ts[c]))]
        ws = sum(w for w, _, _ in recs)
        xbar = sum(w * x for w, x, _ in recs) / ws
        tbar = sum(w * t for w, _, t in recs) / ws
        cov = sum(w * (x - xbar) * (t - tbar) for w, x, t in recs)
        res = weighted_cov(Xs, ts, pw, hw, level="global")
        np.testing.assert_allclose(res.per_feature, cov, rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_and_relabeling(self, seed):
        rng = make_rng(seed)
        sizes = [5, 7, 4]
        Xs = [rng.normal(size=(n, 3)) for n in sizes]
        ts = [(rng.random(n) < 0.5).astype(float) for n in sizes]
        pw = [rng.random(n) + 0.05 for n in sizes]
        hw = list(rng.random(3) + 0.1)
        g = weighted_cov(Xs, ts, pw, hw, level="global")
        order = [2, 0, 1]
        g2 = weighted_cov([Xs[k] for k in order], [ts[k] for k in order], [pw[k] for k in order],
                          [hw[k] for k in order], level="global")
        np.testing.assert_allclose(g.per_feature, g2.per_feature, rtol=0, atol=1e-12)
        assert g.summary == pytest.approx(g2.summary, abs=1e-12)
        perms = [rng.permutation(n) for n in sizes]
        loc = weighted_cov(Xs, ts, pw, level="local")
        loc2 = weighted_cov([x[p] for x, p in zip(Xs, perms)], [t[p] for t, p in zip(ts, perms)],
                            [w[p] for w, p in zip(pw, perms)], level="local")
        np.testing.assert_allclose(loc.per_feature, loc2.per_feature, rtol=0, atol=1e-12)

    def test_zero_weight_sum(self):
        with pytest.raises(MetricError):
            weighted_cov([np.ones((2, 1))], [np.array([0.0, 1.0])], [np.zeros(2)], level="local")

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            weighted_cov([np.ones((2, 1))], [np.array([0.0, 1.0])], level="pooled")


def test_mean_std_skips_missing():
    assert mean_std([1.0, None, 3.0, float("nan")]) == (2.0, 1.0)
    assert mean_std([None]) == (None, None)


def test_report_serializes():
    d = MetricReport("fed-iptw", rpehe=1.0).to_dict()
    assert d["method"] == "fed-iptw" and d["if_pehe"] is None
