import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbmhe.benchmark import linear_benchmark_2d
from sbmhe.certificates import ExponentialIiossParams
from sbmhe.core import LinearSystemModel, SamplingSchedule, WeightedNorm
from sbmhe.mhe import (EstimationRun, HorizonProblem, MheConfig, build_cost, fit_decay_rate,
                       horizon_condition, make_horizon_problem, run_estimator, solve_horizon,
                       verify_rges_bound)
from sbmhe.sim import generate_noise, integrate, sample_outputs, with_samples

DT = 0.05
SCHED = SamplingSchedule.random(1.25, 0.6, 50.0, seed=3, grid_step=DT)


def cfg_for(model, horizon=4.0, eta=0.5, dt=DT, qw=10.0, qv=10.0, r=10.0, **kw):
    n, q, p = model.state_dim, model.disturbance_dim, model.output_dim
    return MheConfig(horizon=horizon, eta=eta, P2=WeightedNorm.identity(n), Qw=WeightedNorm.identity(q, qw),
                     Qv=WeightedNorm.identity(model.noise_dim, qv) if model.noise_dim else None,
                     R=WeightedNorm.identity(p, r), dt=dt, **kw)


def truth_run(model, x0=(1.0, -1.0), t_end=40.0, schedule=SCHED, w=None, v=None, dt=DT):
    traj = integrate(model, list(x0), None, w, t_end, dt)
    return with_samples(traj, sample_outputs(traj, schedule, v=v))


@pytest.fixture(scope="module")
def clean_run():
    model = linear_benchmark_2d()
    truth = truth_run(model)
    return model, truth, run_estimator(model, SCHED, None, truth, cfg_for(model), [0.0, 0.0])


class TestHorizonRule:
    def test_short_and_full(self):
        model = linear_benchmark_2d()
        cfg = cfg_for(model)
        u = np.zeros((1000, 0))
        p = make_horizon_problem(model, cfg, 1.5, [0, 0], u, {1.5: [0.2]})
        assert p.m_eff == 1.5 and p.k0 == 0 and p.n_cells == 30
        p = make_horizon_problem(model, cfg, 6.0, [0, 0], u, {1.0: [0.0], 2.0: [0.1], 6.0: [0.2]})
        assert p.m_eff == 4.0 and p.k0 == 40 and p.n_cells == 80
        assert p.meas_local == (0, 80)
        assert p.n_vars == 2 + 80 * 2 + 2 * 1

    def test_every_solved_problem(self, clean_run):
        run = clean_run[2]
        assert run.records[0].t_i < 4.0
        for r in run.records:
            assert r.m_eff == min(r.t_i, 4.0)

    def test_horizon_shorter_than_dmax(self):
        model = linear_benchmark_2d()
        with pytest.raises(ValueError):
            cfg_for(model, horizon=1.0).validate(model, SCHED)

    def test_measurement_outside_window(self):
        model = linear_benchmark_2d()
        p = HorizonProblem(t_i=1.0, m_eff=1.0, k0=0, prior=np.zeros(2), u_cells=np.zeros((20, 0)),
                           u_last=np.zeros(0), meas_local=(25,), meas_values=np.zeros((1, 1)),
                           state_dim=2, dist_dim=2, noise_dim=1)
        with pytest.raises(ValueError):
            build_cost(p, cfg_for(model), model)


class TestCost:
    def _problem(self, model, cfg, t_i=6.0):
        truth = truth_run(model, t_end=10.0)
        return make_horizon_problem(model, cfg, t_i, [0.3, 0.1], np.zeros((200, 0)),
                                    {t: y for t, y in truth.sampled_outputs.items() if t <= t_i})

    @pytest.mark.parametrize("seed", range(5))
    def test_residuals_match_formula(self, seed):
        model = linear_benchmark_2d()
        cfg = cfg_for(model, eta=0.35)
        cost = build_cost(self._problem(model, cfg), cfg, model)
        z = np.random.default_rng(seed).normal(size=cost.p.n_vars)
        assert cost.cost(z) == pytest.approx(cost.direct_cost(z), rel=1e-10)

    def test_residuals_match_formula_nondiagonal(self):
        model = LinearSystemModel([[0.0, 1.0], [-2.0, -0.1]], C=[[1.0, 0.5], [0.0, 1.0]])
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        cfg = MheConfig(horizon=2.0, eta=0.7, P2=WeightedNorm(A), Qw=WeightedNorm(A + np.eye(2)),
                        Qv=WeightedNorm(3 * A), R=WeightedNorm(np.array([[1.0, -0.2], [-0.2, 0.5]])), dt=0.1)
        truth = truth_run(model, t_end=4.0, dt=0.1, schedule=SamplingSchedule.from_gaps([0.3] * 20))
        p = make_horizon_problem(model, cfg, 3.0, [0.0, 0.0], np.zeros((40, 0)),
                                 {t: y for t, y in truth.sampled_outputs.items() if t <= 3.0})
        cost = build_cost(p, cfg, model)
        z = np.random.default_rng(9).normal(size=p.n_vars)
        assert cost.cost(z) == pytest.approx(cost.direct_cost(z), rel=1e-10)

    def test_zero_residuals(self):
        model = linear_benchmark_2d(with_noise=False)
        cfg = cfg_for(model)
        chi = np.array([0.4, -0.7])
        truth = truth_run(model, x0=chi, t_end=4.0)
        p = make_horizon_problem(model, cfg, 4.0, chi, np.zeros((80, 0)), truth.sampled_outputs)
        cost = build_cost(p, cfg, model)
        z = cost.initial_guess()
        assert np.all(cost(z) == 0) and cost.cost(z) == 0

    def test_prior_term_alone(self):
        model = linear_benchmark_2d()
        cfg = cfg_for(model, eta=0.35, horizon=5.0)
        p = make_horizon_problem(model, cfg, 7.0, [1.0, 2.0], np.zeros((200, 0)), {})
        cost = build_cost(p, cfg, model)
        z = cost.initial_guess()
        delta = np.array([0.3, -0.4])
        z[:2] += delta
        assert cost.cost(z) == pytest.approx(2 * math.exp(-0.35 * 5) * delta @ delta, rel=1e-12)

    def test_discount_value(self):
        cfg = cfg_for(linear_benchmark_2d(), eta=0.35, horizon=5.0)
        assert cfg.prior_weight(5.0) / 2 == pytest.approx(0.1738, abs=1e-4)

    @given(st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.floats(0.05, 20.0))
    def test_discount_monotone(self, a, b, m):
        lo, hi = sorted((a, b))
        if hi - lo < 1e-6:
            return
        model = linear_benchmark_2d()
        assert cfg_for(model, eta=hi).prior_weight(m) < cfg_for(model, eta=lo).prior_weight(m)


class TestSolver:
    def test_exact_prior_is_optimal(self):
        model = linear_benchmark_2d()
        cfg = cfg_for(model)
        chi = np.array([0.4, -0.7])
        truth = truth_run(model, x0=chi, t_end=4.0)
        p = make_horizon_problem(model, cfg, 4.0, chi, np.zeros((80, 0)), truth.sampled_outputs)
        sol = solve_horizon(p, cfg, model)
        assert sol.cost == 0 and sol.iterations == 0 and sol.converged
        np.testing.assert_array_equal(sol.chi, chi)
        assert not np.any(sol.w) and not np.any(sol.v)

    def _scalar(self, with_noise):
        model = LinearSystemModel([[0.0]], C=[[1.0]], G=np.zeros((1, 0)), with_noise=with_noise)
        cfg = MheConfig(horizon=1.0, eta=1e-12, P2=WeightedNorm.identity(1), Qw=WeightedNorm(np.zeros((0, 0))),
                        Qv=WeightedNorm.identity(1, 1.5) if with_noise else None,
                        R=WeightedNorm.identity(1), dt=0.1)
        p = make_horizon_problem(model, cfg, 1.0, [0.0], np.zeros((10, 0)), {1.0: [1.0]})
        return solve_horizon(p, cfg, model)

    def test_scalar_closed_form(self):
        assert self._scalar(False).chi[0] == pytest.approx(1.0 / 3.0, abs=1e-8)

    def test_scalar_closed_form_with_noise_channel(self):
        r_eff = 2 * 1.5 * 1.0 / (2 * 1.5 + 1.0)
        sol = self._scalar(True)
        assert sol.chi[0] == pytest.approx(r_eff / (2 + r_eff), abs=1e-8)

    def test_local_minimum_probe(self):
        model = linear_benchmark_2d()
        cfg = cfg_for(model)
        v = generate_noise([0.05], 1, DT, 10.0)
        truth = truth_run(model, t_end=10.0, v=v, w=generate_noise([0.05, 0.05], 2, DT, 10.0))
        p = make_horizon_problem(model, cfg, 8.0, [0.5, 0.5], np.zeros((200, 0)),
                                 {t: y for t, y in truth.sampled_outputs.items() if t <= 8.0})
        sol = solve_horizon(p, cfg, model)
        assert sol.converged
        cost = build_cost(p, cfg, model)
        J = cost.cost(sol.z)
        for j in range(p.state_dim):
            for s in (1e-4, -1e-4):
                z = sol.z.copy()
                z[j] += s
                assert cost.cost(z) >= J * (1 - 1e-12)

    def test_warm_start_shape(self):
        model = linear_benchmark_2d()
        cfg = cfg_for(model)
        p = make_horizon_problem(model, cfg, 2.0, [0, 0], np.zeros((40, 0)), {})
        with pytest.raises(ValueError):
            solve_horizon(p, cfg, model, warm_start=np.zeros(3))

    def test_projection_keeps_bounds(self):
        box = (-0.01 * np.ones(2), 0.01 * np.ones(2))
        model = LinearSystemModel([[0, 1], [-1, 0.2]], C=[[1, 0]], W=box, V=(np.array([-0.02]), np.array([0.02])))
        cfg = cfg_for(model)
        truth = truth_run(model, t_end=4.0)
        p = make_horizon_problem(model, cfg, 4.0, [0.0, 0.0], np.zeros((80, 0)), truth.sampled_outputs)
        sol = solve_horizon(p, cfg, model)
        assert np.all(np.abs(sol.w) <= 0.01) and np.all(np.abs(sol.v) <= 0.02)


class TestRun:
    def test_noise_free_convergence(self, clean_run):
        model, truth, run = clean_run
        err = run.error_norms()
        k = round(40.0 / DT)
        assert err[k] <= 1e-4 * err[0]
        assert run.all_converged

    def test_open_loop_segments_reintegrate(self, clean_run):
        model, truth, run = clean_run
        ks = [0] + [round(t / DT) for t in run.instants] + [len(run.x_hat) - 1]
        for a, b in zip(ks[:-1], ks[1:]):
            if b - a < 2:
                continue
            seg = integrate(model, run.x_hat[a], None, None, (b - a) * DT, DT).states
            np.testing.assert_array_equal(seg[1:-1], run.x_hat[a + 1:b])

    def test_monotone_after_first_horizon(self, clean_run):
        model, truth, run = clean_run
        # below ~1e-7 relative error the sequence has small non-monotone steps that persist
        # with solver tolerances at 1e-15, so the check stops at 1e-6 of the initial error
        floor = 1e-6 * np.linalg.norm(run.errors[0])
        errs = [np.linalg.norm(r.x_hat - truth.states[round(r.t_i / DT)]) for r in run.records if r.t_i >= 4.0]
        assert errs[-1] < floor
        above = [e for e in errs if e >= floor]
        assert len(above) >= 10
        assert all(e1 <= e0 for e0, e1 in zip(above[:-1], above[1:]))

    def test_empty_schedule_is_open_loop(self):
        model = linear_benchmark_2d()
        sched = SamplingSchedule.from_gaps([3.0] * 10)
        truth = truth_run(model, t_end=2.5, schedule=sched)
        run = run_estimator(model, sched, None, truth, cfg_for(model), [0.2, 0.1])
        assert run.records == []
        ref = integrate(model, [0.2, 0.1], None, None, 2.5, DT).states
        np.testing.assert_array_equal(run.x_hat, ref)

    def test_first_instant_uses_initial_prior(self):
        model = linear_benchmark_2d()
        sched = SamplingSchedule.from_gaps([1.0, 1.0, 1.0])
        truth = truth_run(model, t_end=3.0, schedule=sched)
        cfg = cfg_for(model)
        run = run_estimator(model, sched, None, truth, cfg, [0.2, 0.1])
        first = run.records[0]
        assert first.m_eff == 1.0
        p = make_horizon_problem(model, cfg, 1.0, [0.2, 0.1], np.zeros((60, 0)), {1.0: truth.sampled_outputs[1.0]})
        assert p.k0 == 0
        np.testing.assert_allclose(first.x_hat, solve_horizon(p, cfg, model).x_terminal, atol=1e-12)

    def test_dense_information_no_worse(self):
        model = linear_benchmark_2d(with_noise=False)
        dt, t_end = 0.1, 12.0
        cfg = cfg_for(model, dt=dt, horizon=2.0)
        sparse = SamplingSchedule.random(1.25, 0.6, 20.0, seed=5, grid_step=dt)
        dense = SamplingSchedule.from_gaps([dt] * 200)
        out = []
        for s in (sparse, dense):
            truth = truth_run(model, t_end=t_end, schedule=s, dt=dt)
            out.append(run_estimator(model, s, None, truth, cfg, [0.0, 0.0]).error_norms()[-1])
        assert out[1] <= out[0] + 1e-8

    def test_missing_measurement(self):
        model = linear_benchmark_2d()
        truth = integrate(model, [1.0, 0.0], None, None, 4.0, DT)
        with pytest.raises(ValueError):
            run_estimator(model, SCHED, None, truth, cfg_for(model), [0.0, 0.0])


class TestBound:
    P = ExponentialIiossParams(P1=WeightedNorm.identity(2), P2=WeightedNorm.identity(2),
                               Qw=WeightedNorm.identity(2, 10.0), Qv=WeightedNorm.identity(1, 10.0),
                               R=WeightedNorm.identity(1, 10.0), eta=0.5)

    def test_condition_value(self):
        assert horizon_condition(self.P.P1, self.P.P2, 0.5, 4.0) == pytest.approx(4 * math.exp(-2.0))
        assert horizon_condition(WeightedNorm.identity(1), WeightedNorm.identity(1, 3.0), 1.0, 1.0) \
            == pytest.approx(36 * math.exp(-1.0))

    def test_initial_node_for_equal_weights(self, clean_run):
        rep = verify_rges_bound(clean_run[2], self.P, 0.3)
        assert rep.lhs[0] <= rep.rhs[0]
        assert rep.condition_holds

    def test_zero_error(self):
        model = linear_benchmark_2d()
        truth = truth_run(model, t_end=10.0)
        run = run_estimator(model, SCHED, None, truth, cfg_for(model), [1.0, -1.0])
        rep = verify_rges_bound(run, self.P, 0.5)
        assert rep.holds and rep.worst_margin == 0

    def test_noise_free_bound_with_fitted_rate(self, clean_run):
        run = clean_run[2]
        rate = verify_rges_bound(run, self.P, 0.0).fitted_decay_rate
        assert rate > 0
        rep = verify_rges_bound(run, self.P, rate)
        assert rep.holds and rep.worst_margin >= -1e-9

    def test_fit_decay_rate(self):
        t = np.linspace(0, 5, 51)
        assert fit_decay_rate(t, 3.0 * np.exp(-2 * t), 3.0) == pytest.approx(2.0)
        assert fit_decay_rate(t, np.zeros(51), 1.0) == math.inf

    def test_needs_true_states(self, clean_run):
        run = clean_run[2]
        bare = EstimationRun(dt=run.dt, cfg=run.cfg, records=run.records, x_hat=run.x_hat)
        with pytest.raises(ValueError):
            verify_rges_bound(bare, self.P, 0.1)
