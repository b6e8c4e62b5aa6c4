import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbmhe.core import DivergenceError, LinearSystemModel, SamplingSchedule, Signal, SystemModel
from sbmhe.linear import matrix_exp
from sbmhe.sim import (generate_noise, integrate, sample_outputs, write_samples_csv,
                       write_trajectory_csv)


def scalar(a=-1.0, with_noise=False):
    return LinearSystemModel([[a]], C=[[1.0]], with_noise=with_noise)


def test_constant_dynamics():
    m = LinearSystemModel(np.zeros((2, 2)))
    traj = integrate(m, [1.5, -2.0], None, None, 1.0, 0.1)
    np.testing.assert_array_equal(traj.states, np.tile([1.5, -2.0], (11, 1)))


def test_exponential_decay():
    traj = integrate(scalar(), [1.0], None, None, 1.0, 1e-3)
    assert abs(traj.states[-1, 0] - math.exp(-1)) < 1e-6


def test_matches_matrix_exp():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(3, 3))
    A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(3)
    x0 = rng.normal(size=3)
    traj = integrate(LinearSystemModel(A), x0, None, None, 1.0, 1e-3)
    np.testing.assert_allclose(traj.states[-1], matrix_exp(A, 1.0) @ x0, atol=1e-6)


def test_rk4_order():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    x0 = np.array([1.0, 0.5])
    exact = matrix_exp(A, 2.0) @ x0
    errs = [np.linalg.norm(integrate(LinearSystemModel(A), x0, None, None, 2.0, dt).states[-1] - exact)
            for dt in (0.1, 0.05)]
    assert 12 <= errs[0] / errs[1] <= 20


@settings(max_examples=25)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_superposition(c1, c2):
    m = LinearSystemModel([[0.0, 1.0], [-1.0, -0.1]])
    a = integrate(m, np.add(c1, c2), None, None, 2.0, 0.05).states
    b = integrate(m, c1, None, None, 2.0, 0.05).states + integrate(m, c2, None, None, 2.0, 0.05).states
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_divergence_reports_time():
    m = SystemModel(lambda x, u, w: x ** 2, lambda x, u, v: x, 1, 0, 1, 0, 0)
    with pytest.raises(DivergenceError) as info:
        integrate(m, [1.0], None, None, 3.0, 0.01)
    assert 0.9 < info.value.time < 1.2


def test_state_violations_flagged_not_clipped():
    m = LinearSystemModel([[-1.0]], X=(np.array([0.5]), np.array([2.0])))
    traj = integrate(m, [1.0], None, None, 2.0, 0.1)
    assert traj.violations
    assert traj.states[-1, 0] < 0.5


def test_signal_must_cover_horizon():
    with pytest.raises(ValueError):
        integrate(scalar(), [1.0], None, Signal.zeros(1, 0.1, 0.5), 1.0, 0.1)


class TestSampling:
    def test_identity_output(self):
        m = LinearSystemModel([[0.0, 1.0], [-1.0, 0.0]], C=np.eye(2), with_noise=False)
        traj = integrate(m, [1.0, 0.0], None, None, 3.0, 0.05)
        s = SamplingSchedule.from_gaps([0.5, 1.0, 1.0])
        samples = sample_outputs(traj, s)
        assert list(samples) == pytest.approx([0.5, 1.5, 2.5])
        for t, y in samples.items():
            np.testing.assert_array_equal(y, traj.states[round(t / 0.05)])

    def test_pure_restriction(self):
        m = LinearSystemModel([[-0.5]], C=[[2.0]], with_noise=False)
        traj = integrate(m, [1.0], None, None, 2.0, 0.1)
        s = SamplingSchedule.from_gaps([0.3, 0.4, 0.8])
        for t, y in sample_outputs(traj, s).items():
            np.testing.assert_array_equal(y, traj.outputs[round(t / 0.1)])

    def test_empty(self):
        traj = integrate(scalar(), [1.0], None, None, 1.0, 0.1)
        assert sample_outputs(traj, SamplingSchedule.from_gaps([2.0, 1.0])) == {}

    def test_additive_noise_exact(self):
        m = LinearSystemModel([[-0.2, 0.0], [0.0, 0.1]], C=[[1.0, 1.0]])
        traj = integrate(m, [1.0, 1.0], None, None, 2.0, 0.1)
        v = generate_noise([0.3], 5, 0.1, 2.0)
        for t, y in sample_outputs(traj, SamplingSchedule.from_gaps([0.4] * 5), v=v).items():
            k = round(t / 0.1)
            assert y[0] - traj.outputs[k, 0] == pytest.approx(v.values[min(k, 19), 0], abs=1e-14)

    def test_off_grid_instant_rejected(self):
        traj = integrate(scalar(), [1.0], None, None, 1.0, 0.1)
        with pytest.raises(ValueError):
            sample_outputs(traj, SamplingSchedule.from_gaps([0.25, 0.5]))


class TestNoise:
    def test_zero_bounds(self):
        assert not np.any(generate_noise([0.0, 0.0], 1, 0.1, 2.0).values)

    def test_bounds_respected(self):
        v = generate_noise([1e-13, 0.6], 3, 0.05, 30.0)
        assert np.all(np.abs(v.values[:, 1]) <= 0.6)
        assert np.all(np.abs(v.values[:, 0]) <= 1e-13)
        assert np.abs(v.values[:, 1]).max() > 0.5

    def test_seeded(self):
        np.testing.assert_array_equal(generate_noise([1.0], 9, 0.1, 5).values,
                                      generate_noise([1.0], 9, 0.1, 5).values)

    def test_negative_bound(self):
        with pytest.raises(ValueError):
            generate_noise([-1.0], 0, 0.1, 1.0)


def test_csv_export(tmp_path):
    m = LinearSystemModel([[0.0, 1.0], [-1.0, 0.0]], C=[[1.0, 0.0]])
    traj = integrate(m, [1.0, 0.0], None, None, 1.0, 0.25)
    samples = sample_outputs(traj, SamplingSchedule.from_gaps([0.5, 0.5]))
    write_trajectory_csv(traj, tmp_path / "t.csv")
    write_samples_csv(samples, tmp_path / "s.csv", 1)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["time", "x_1", "x_2", "y_1"]
    assert len(rows) == 6
    assert float(rows[-1][1]) == traj.states[-1, 0]
    srows = list(csv.reader(open(tmp_path / "s.csv")))
    assert srows[0] == ["instant", "y_1"] and len(srows) == 3
