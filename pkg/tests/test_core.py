import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbmhe.core import (DimensionError, LinearSystemModel, NotPositiveDefiniteError, SamplingSchedule,
                        ScheduleError, Signal, SystemModel, WeightedNorm, generalized_eig_max, grid_index,
                        matrix_from_json, schedule_instants, to_json, weighted_norm_sq)

gaps_st = st.lists(st.floats(0.0, 3.0, allow_nan=False), min_size=1, max_size=25)


class TestSchedule:
    def test_first_set(self):
        s = SamplingSchedule.from_gaps([1, 2, 1])
        assert schedule_instants(s, 1, (0, 4)) == [1, 3, 4]

    def test_shifted_set(self):
        s = SamplingSchedule.from_gaps([1, 2, 1])
        assert schedule_instants(s, 2, (0, 3)) == [2, 3]

    def test_uniform(self):
        s = SamplingSchedule.from_gaps([0.5] * 12)
        got = schedule_instants(s, 1, (0, 3.0))
        assert got == pytest.approx([0.5 * k for k in range(1, 7)])

    def test_empty_window(self):
        s = SamplingSchedule.from_gaps([2.0, 2.0])
        assert schedule_instants(s, 1, (0.5, 1.5)) == []

    def test_window_outside_horizon(self):
        s = SamplingSchedule.from_gaps([1, 1])
        with pytest.raises(ScheduleError):
            schedule_instants(s, 1, (0, 5))
        with pytest.raises(ScheduleError):
            schedule_instants(s, 2, (0, 1.5))

    def test_gap_above_dmax(self):
        with pytest.raises(ScheduleError):
            SamplingSchedule.from_gaps([1, 3], d_max=2)

    def test_bad_index(self):
        with pytest.raises(ScheduleError):
            SamplingSchedule.from_gaps([1, 1]).instants(0)

    def test_from_instants(self):
        s = SamplingSchedule.from_instants([0.5, 1.0, 2.5])
        assert s.gaps == (0.5, 0.5, 1.5)
        assert list(s.instants()) == [0.5, 1.0, 2.5]

    def test_random_is_seeded_and_bounded(self):
        a = SamplingSchedule.random(1.0, 0.5, 30, seed=4, grid_step=0.05)
        b = SamplingSchedule.random(1.0, 0.5, 30, seed=4, grid_step=0.05)
        assert a == b
        assert all(0.5 - 1e-9 <= g <= 1.5 + 1e-9 for g in a.gaps)
        assert all(abs(g / 0.05 - round(g / 0.05)) < 1e-9 for g in a.gaps)

    def test_dict_round_trip(self):
        s = SamplingSchedule.from_gaps([1, 0.25, 2], d_max=3, horizon_end=3)
        assert SamplingSchedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    @given(gaps_st, st.integers(1, 10))
    def test_shift_structure(self, gaps, i):
        s = SamplingSchedule.from_gaps(gaps, d_max=3.0)
        i = min(i, len(gaps))
        k1 = s.instants(1)
        ki = s.instants(i)
        off = s.offset(i)
        expected = np.unique(np.cumsum(gaps)[i - 1:] - off)
        np.testing.assert_allclose(ki, expected[expected <= s.covered(i) * (1 + 1e-12)], atol=1e-12)
        # every instant of K_i is an instant of K_1 moved back by the offset
        for t in ki:
            assert np.min(np.abs(k1 - (t + off))) < 1e-9

    @given(gaps_st)
    def test_consecutive_gaps_bounded(self, gaps):
        s = SamplingSchedule.from_gaps(gaps, d_max=3.0)
        inst = np.concatenate([[0.0], s.instants()])
        assert np.all(np.diff(inst) <= s.d_max + 1e-9)
        assert np.all(np.diff(inst) >= 0)

    @given(gaps_st, st.floats(0, 1), st.floats(0, 1))
    def test_window_query_exact(self, gaps, a, b):
        s = SamplingSchedule.from_gaps(gaps, d_max=3.0)
        lo, hi = sorted((a * s.covered(), b * s.covered()))
        got = schedule_instants(s, 1, (lo, hi))
        inst = s.instants()
        assert got == sorted(got)
        assert set(got) == {float(t) for t in inst if lo - 1e-12 <= t <= hi + 1e-12}


class TestWeightedNorm:
    def test_examples(self):
        assert weighted_norm_sq(WeightedNorm.identity(2), [3, 4]) == pytest.approx(25)
        assert weighted_norm_sq(WeightedNorm.diag([1, 5]), [1, 1]) == pytest.approx(6)
        assert weighted_norm_sq(WeightedNorm.diag([2, 7]), [0, 0]) == 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            weighted_norm_sq(WeightedNorm.identity(2), [1, 2, 3])

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            WeightedNorm(np.diag([1.0, 0.0]))
        with pytest.raises(ValueError):
            WeightedNorm(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_factor(self):
        rng = np.random.default_rng(0)
        M = rng.normal(size=(3, 3))
        P = WeightedNorm(M @ M.T + np.eye(3))
        x = rng.normal(size=3)
        assert np.sum((P.factor @ x) ** 2) == pytest.approx(x @ P.P @ x, rel=1e-12)

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-5, 5))
    def test_homogeneous(self, x, a):
        P = WeightedNorm(np.array([[2.0, 0.5, 0], [0.5, 1.0, 0.1], [0, 0.1, 3.0]]))
        x = np.array(x)
        assert weighted_norm_sq(P, a * x) == pytest.approx(a * a * weighted_norm_sq(P, x), rel=1e-9, abs=1e-9)


class TestGeneralizedEig:
    def test_examples(self):
        assert generalized_eig_max(np.eye(3), np.eye(3)) == pytest.approx(1)
        assert generalized_eig_max(2 * np.eye(2), np.eye(2)) == pytest.approx(2)
        assert generalized_eig_max(np.diag([1, 8]), np.diag([1, 2])) == pytest.approx(4)

    def test_rayleigh_scan_oracle(self):
        # brute-force maximum of the Rayleigh quotient over the unit circle
        P = np.array([[3.0, 1.0], [1.0, 2.0]])
        Q = np.array([[2.0, -0.5], [-0.5, 1.0]])
        th = np.linspace(0, np.pi, 200001)
        X = np.stack([np.cos(th), np.sin(th)])
        ratio = np.einsum("ik,ij,jk->k", X, P, X) / np.einsum("ik,ij,jk->k", X, Q, X)
        assert generalized_eig_max(P, Q) == pytest.approx(ratio.max(), rel=1e-8)

    def test_whitened_route(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            A = rng.normal(size=(4, 4))
            B = rng.normal(size=(4, 4))
            P, Q = A @ A.T + 0.1 * np.eye(4), B @ B.T + 0.1 * np.eye(4)
            Li = np.linalg.inv(np.linalg.cholesky(Q))
            ref = np.linalg.eigvalsh(Li @ P @ Li.T).max()
            assert generalized_eig_max(P, Q) == pytest.approx(ref, rel=1e-9)

    def test_non_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            generalized_eig_max(np.eye(2), np.diag([1.0, -1.0]))

    @given(st.lists(st.floats(0.1, 10), min_size=3, max_size=3), st.lists(st.floats(0.1, 10), min_size=3, max_size=3))
    def test_product_at_least_one(self, a, b):
        P, Q = np.diag(a), np.diag(b)
        assert generalized_eig_max(P, Q) * generalized_eig_max(Q, P) >= 1 - 1e-12

    @settings(max_examples=50)
    @given(st.integers(0, 10 ** 6))
    def test_pencil_inequality(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        P, Q = A @ A.T + 0.1 * np.eye(3), B @ B.T + 0.1 * np.eye(3)
        lam = generalized_eig_max(P, Q)
        x = rng.normal(size=3)
        assert x @ P @ x <= lam * (x @ Q @ x) * (1 + 1e-9)


class TestSignal:
    def test_zoh(self):
        s = Signal(0.5, np.array([[1.0], [2.0], [3.0]]))
        assert s(0.0)[0] == 1 and s(0.49)[0] == 1 and s(0.5)[0] == 2 and s(1.5)[0] == 3

    def test_ess_sup(self):
        s = Signal(1.0, np.array([[3.0, 4.0], [0.0, 1.0], [0.0, 0.0]]))
        assert s.ess_sup(0, 3) == pytest.approx(5)
        assert s.ess_sup(1, 3) == pytest.approx(1)
        # a window touching a cell only at a point does not count
        assert s.ess_sup(1.0, 2.0) == pytest.approx(1)

    def test_immutable(self):
        s = Signal.zeros(2, 0.1, 1.0)
        with pytest.raises(ValueError):
            s.values[0, 0] = 1.0


class TestModels:
    def test_linear_dims(self):
        m = LinearSystemModel(np.eye(2), C=[[1, 0]])
        assert (m.state_dim, m.output_dim, m.disturbance_dim, m.noise_dim) == (2, 1, 2, 1)
        assert m.dynamics(np.array([1.0, 2.0]), np.zeros(0), np.array([0.5, 0.5])) == pytest.approx([1.5, 2.5])
        assert m.output(np.array([1.0, 2.0]), np.zeros(0), np.array([0.1])) == pytest.approx([1.1])

    def test_bad_dims(self):
        with pytest.raises(DimensionError):
            LinearSystemModel(np.ones((2, 3)))
        with pytest.raises(DimensionError):
            LinearSystemModel(np.eye(2), C=np.ones((1, 3)))

    def test_boxes_must_contain_zero(self):
        with pytest.raises(ValueError):
            LinearSystemModel(np.eye(1), W=(np.array([0.1]), np.array([1.0])))

    def test_batched_matches_rowwise(self):
        def f(x, u, w):
            return -x ** 3 + w

        def h(x, u, v):
            return x[:1] + v

        m = SystemModel(f, h, 2, 0, 1, 2, 1, vectorized=False)
        X = np.array([[1.0, 2.0], [0.5, -1.0]])
        W = np.array([[0.1, 0.2], [0.0, 0.0]])
        np.testing.assert_allclose(m.dynamics(X, np.zeros(0), W), -X ** 3 + W)

    def test_json(self):
        m = LinearSystemModel([[0, 1], [-1, 0]], C=[[1, 0]])
        back = LinearSystemModel.from_dict(json.loads(to_json(m.to_dict())))
        assert back == m
        np.testing.assert_array_equal(matrix_from_json({"diag": [1, 2], "scale": 3}), np.diag([3.0, 6.0]))


def test_grid_index():
    assert grid_index(0.3, 0.1) == 3
    with pytest.raises(ScheduleError):
        grid_index(0.35, 0.1)
