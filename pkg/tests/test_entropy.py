import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import brentq

from attnlipkit.attention import softmax_rows
from attnlipkit.entropy import (
    W_MAX,
    CalibrationStatus,
    NeighborhoodScores,
    calibrate_graph,
    calibrate_node,
    calibrate_segments,
    entropy_and_efficiency,
    initial_guess,
    scaled_efficiency,
    segment_efficiency,
)

Status = CalibrationStatus


def _eff_oracle(s, w):
    p = softmax_rows((w * np.asarray(s)).reshape(1, -1))[0]
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)) / math.log(len(s)))


class TestEntropy:
    def test_uniform(self):
        H, eta = entropy_and_efficiency(np.full(4, 0.25))
        assert H == pytest.approx(math.log(4))
        assert eta == pytest.approx(1.0)

    def test_one_hot(self):
        assert entropy_and_efficiency([0.0, 1.0, 0.0]) == (0.0, 0.0)

    def test_two_point(self):
        H, eta = entropy_and_efficiency([1 / 3, 2 / 3])
        want = -(1 / 3) * math.log(1 / 3) - (2 / 3) * math.log(2 / 3)
        assert H == pytest.approx(want, abs=1e-15)
        assert H == pytest.approx(0.63651, abs=1e-5)
        assert eta == pytest.approx(0.91830, abs=1e-5)

    def test_singleton(self):
        assert entropy_and_efficiency([1.0]) == (0.0, 1.0)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            entropy_and_efficiency([0.5, 0.6])
        with pytest.raises(ValueError):
            entropy_and_efficiency([1.5, -0.5])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 20), elements=st.floats(0.0, 1.0)))
    def test_entropy_at_most_log_n(self, raw):
        if raw.sum() <= 0:
            return
        H, eta = entropy_and_efficiency(raw / raw.sum())
        assert 0.0 <= H <= math.log(raw.size) + 1e-12
        assert 0.0 <= eta <= 1.0 + 1e-12


class TestScaledEfficiency:
    def test_zero_weight(self):
        assert scaled_efficiency([3.0, -1.0, 7.0], 0.0) == 1.0

    def test_sharp(self):
        assert scaled_efficiency([0.0, 1.0], 20.0) < 0.01

    def test_ties(self):
        for w in (0.0, 1.0, 1e3):
            assert scaled_efficiency([2.0, 2.0, 2.0], w) == pytest.approx(1.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal(9)
        for w in (0.1, 1.0, 5.0):
            assert scaled_efficiency(s, w) == pytest.approx(_eff_oracle(s, w), abs=1e-13)

    def test_monotone_grid(self):
        rng = np.random.default_rng(1)
        ws = np.linspace(0.0, 30.0, 50)
        for _ in range(100):
            s = rng.standard_normal(int(rng.integers(2, 40)))
            etas = [scaled_efficiency(s, w) for w in ws]
            assert np.all(np.diff(etas) <= 1e-12)


class TestInitialGuess:
    def test_uniform_target(self):
        assert initial_guess([0.0, 1.0, 3.0], 1.0) == 0.0

    def test_formula(self):
        assert initial_guess([0.0, 1.0], 0.5) == pytest.approx(math.sqrt(2 * 0.5 * math.log(2) / 0.25))
        assert initial_guess([0.0, 1.0], 0.5) == pytest.approx(1.665, abs=1e-3)

    def test_zero_variance(self):
        assert initial_guess([2.0, 2.0], 0.5, with_flag=True) == (1.0, True)
        assert initial_guess([0.0, 1.0], 0.5, with_flag=True)[1] is False


class TestCalibrateNode:
    def test_binary_oracle(self):
        # binary entropy in nats equal to 0.5 ln 2 at q, then c = logit(q)
        q = brentq(lambda q: -q * math.log(q) - (1 - q) * math.log(1 - q) - 0.5 * math.log(2), 0.5, 1 - 1e-12)
        r = calibrate_node([0.0, 1.0], 0.5)
        assert r.status is Status.CONVERGED
        assert r.c == pytest.approx(math.log(q / (1 - q)), abs=1e-5)
        assert r.c == pytest.approx(2.09, abs=5e-3)
        assert abs(r.achieved_eta - 0.5) <= 1e-6

    def test_uniform_target_zero(self):
        r = calibrate_node([0.0, 1.0, 2.0], 1.0)
        assert r.c == 0.0 and r.status is Status.CONVERGED

    def test_all_equal(self):
        r = calibrate_node([1.0, 1.0, 1.0], 0.5)
        assert r.status is Status.DEGENERATE_UNIFORM and r.c == 1.0

    def test_singleton(self):
        r = calibrate_node([4.0], 0.3)
        assert r.status is Status.DEGENERATE_SINGLETON and r.c == 1.0

    def test_unreachable_below_floor(self):
        # two tied maxima among four: floor = ln 2 / ln 4 = 0.5
        r = calibrate_node([1.0, 1.0, 0.0, 0.0], 0.4)
        assert r.status is Status.TARGET_UNREACHABLE and r.c == W_MAX
        r = calibrate_node([1.0, 1.0, 0.0, 0.0], 0.6)
        assert r.status is Status.CONVERGED

    @pytest.mark.parametrize("T", [0.0, -0.1, 1.5])
    def test_bad_target(self, T):
        with pytest.raises(ValueError):
            calibrate_node([0.0, 1.0], T)

    def test_random_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = rng.standard_normal(int(rng.integers(2, 201))) * rng.choice([0.01, 1, 100])
            for T in (0.3, 0.5, 0.8):
                r = calibrate_node(s, T)
                if r.status is Status.CONVERGED:
                    assert abs(_eff_oracle(s, r.c) - T) <= 1e-6
                    assert r.evaluations <= 100

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_shift_invariance(self, seed, k):
        s = np.random.default_rng(seed).standard_normal(7)
        a, b = calibrate_node(s, 0.6), calibrate_node(s + k, 0.6)
        assert a.status == b.status
        assert a.c == pytest.approx(b.c, rel=1e-6)


class TestCalibrateGraph:
    def test_singletons(self):
        res, _ = calibrate_graph([NeighborhoodScores(i, [float(i)]) for i in range(4)], 0.5)
        assert all(r.status is Status.DEGENERATE_SINGLETON for r in res)

    def test_empty(self):
        assert calibrate_graph([], 0.5) == ([], [])

    def test_popular_node(self):
        rng = np.random.default_rng(171)
        s = rng.standard_normal(171) * 0.31
        assert scaled_efficiency(s, 1.0) == pytest.approx(0.9905, abs=5e-3)
        res, scaled = calibrate_graph([NeighborhoodScores(0, s)], 0.5)
        assert abs(res[0].achieved_eta - 0.5) <= 1e-6
        assert abs(scaled_efficiency(scaled[0].scores, 1.0) - 0.5) <= 1e-6

    def test_rescaled_scores(self):
        s = np.array([0.0, 1.0, 3.0])
        res, scaled = calibrate_graph([NeighborhoodScores(7, s)], 0.4)
        np.testing.assert_allclose(scaled[0].scores, res[0].c * s)
        assert scaled[0].node == 7

    def test_random_graph(self):
        rng = np.random.default_rng(3)
        sets = [NeighborhoodScores(u, rng.standard_normal(int(rng.integers(1, 12)))) for u in range(50)]
        res, scaled = calibrate_graph(sets, 0.7)
        for r, ns in zip(res, scaled):
            if r.status is Status.CONVERGED:
                assert abs(_eff_oracle(ns.scores, 1.0) - 0.7) <= 1e-6
            w = softmax_rows(ns.scores.reshape(1, -1))
            assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_invalid_scores(self):
        with pytest.raises(ValueError):
            NeighborhoodScores(0, [])
        with pytest.raises(ValueError):
            NeighborhoodScores(0, [np.nan])


class TestSegments:
    def test_matches_scalar(self):
        rng = np.random.default_rng(4)
        sizes = rng.integers(0, 30, size=40)
        seg = np.repeat(np.arange(40), sizes)
        s = rng.standard_normal(seg.size)
        c, eta, statuses, _ = calibrate_segments(s, seg, 40, 0.5)
        for u in range(40):
            mine = s[seg == u]
            if mine.size == 0:
                assert statuses[u] is Status.DEGENERATE_SINGLETON and c[u] == 1.0
                continue
            ref = calibrate_node(mine, 0.5)
            assert statuses[u] is ref.status
            if ref.status is Status.CONVERGED:
                assert abs(eta[u] - 0.5) <= 1e-6
                assert abs(_eff_oracle(mine, c[u]) - 0.5) <= 1e-6

    def test_efficiency_oracle(self):
        seg = np.array([0, 0, 0, 1, 1, 2])
        s = np.array([0.1, 0.5, -0.3, 2.0, 1.0, 4.0])
        w = np.array([2.0, 0.5, 1.0])
        got = segment_efficiency(s, seg, 3, w)
        assert got[0] == pytest.approx(_eff_oracle(s[:3], 2.0))
        assert got[1] == pytest.approx(_eff_oracle(s[3:5], 0.5))
        assert got[2] == 1.0
