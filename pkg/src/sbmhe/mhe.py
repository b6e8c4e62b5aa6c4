"""Sample-based moving horizon estimation.

At each measurement instant ``t_i`` a discounted least-squares problem over
``[t_i - M_i, t_i]`` with ``M_i = min(t_i, M)`` is solved by single shooting;
between instants the estimate is propagated open loop with ``w = 0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certificates import ExponentialIiossParams, discounted_integral, discounted_sum
from .core import (Array, DivergenceError, SamplingSchedule, Signal, SystemModel, WeightedNorm,
                   generalized_eig_max, grid_index, schedule_instants)
from .sim import Trajectory, _cells, rk4_step
from .solver import SolverOptions, fd_jacobian, levenberg_marquardt


@dataclass(frozen=True)
class MheConfig:
    horizon: float
    eta: float
    P2: WeightedNorm
    Qw: WeightedNorm
    Qv: Optional[WeightedNorm]
    R: WeightedNorm
    dt: float
    solver: SolverOptions = SolverOptions()
    constraint_handling: str = "projection"
    penalty_weight: float = 1e6

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("discount eta must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon M must be positive")
        grid_index(self.horizon, self.dt)
        if self.constraint_handling not in ("projection", "penalty"):
            raise ValueError("constraint_handling must be 'projection' or 'penalty'")

    @property
    def horizon_cells(self) -> int:
        return grid_index(self.horizon, self.dt)

    def validate(self, model: SystemModel, schedule: Optional[SamplingSchedule] = None) -> None:
        if self.P2.dim != model.state_dim:
            raise ValueError("P2 does not match the state dimension")
        if self.Qw.dim != model.disturbance_dim:
            raise ValueError("Qw does not match the disturbance dimension")
        if model.noise_dim and (self.Qv is None or self.Qv.dim != model.noise_dim):
            raise ValueError("Qv does not match the measurement-noise dimension")
        if self.R.dim != model.output_dim:
            raise ValueError("R does not match the output dimension")
        if schedule is not None and self.horizon < schedule.d_max * (1 - 1e-12):
            raise ValueError(f"horizon M={self.horizon} is shorter than d_max={schedule.d_max}")

    def prior_weight(self, m_eff: float) -> float:
        return 2.0 * math.exp(-self.eta * m_eff)


@dataclass(frozen=True)
class HorizonProblem:
    t_i: float
    m_eff: float
    k0: int
    prior: Array
    u_cells: Array
    u_last: Array
    meas_local: tuple
    meas_values: Array
    state_dim: int
    dist_dim: int
    noise_dim: int

    @property
    def n_cells(self) -> int:
        return len(self.u_cells)

    @property
    def n_meas(self) -> int:
        return len(self.meas_local)

    @property
    def n_vars(self) -> int:
        return self.state_dim + self.n_cells * self.dist_dim + self.n_meas * self.noise_dim


def make_horizon_problem(model: SystemModel, cfg: MheConfig, t_i: float, prior, u_cells_global: Array,
                         measurements: dict) -> HorizonProblem:
    """Window ``[t_i - min(t_i, M), t_i]`` with the measurements falling inside it (closed)."""
    dt = cfg.dt
    k_i = grid_index(t_i, dt)
    m_eff = min(t_i, cfg.horizon)
    k0 = k_i - grid_index(m_eff, dt)
    local, values = [], []
    for t, y in measurements.items():
        k = grid_index(t, dt)
        if k0 <= k <= k_i:
            local.append(k - k0)
            values.append(np.asarray(y, dtype=float))
    u_seg = np.asarray(u_cells_global[k0:k_i])
    n_global = len(u_cells_global)
    u_last = u_cells_global[min(k_i, n_global - 1)] if n_global else np.zeros(model.input_dim)
    vals = np.array(values).reshape(len(values), model.output_dim)
    return HorizonProblem(t_i=float(t_i), m_eff=float(m_eff), k0=k0, prior=np.asarray(prior, dtype=float),
                          u_cells=u_seg, u_last=np.asarray(u_last), meas_local=tuple(local),
                          meas_values=vals, state_dim=model.state_dim,
                          dist_dim=model.disturbance_dim, noise_dim=model.noise_dim)


class HorizonCost:
    """Weighted residual stack whose squared norm is the horizon cost ``J``.

    Layout: prior (n) | disturbance cells | noise at measurements | output fit |
    penalties for violated path constraints (zero when feasible).
    """

    def __init__(self, problem: HorizonProblem, cfg: MheConfig, model: SystemModel):
        self.p, self.cfg, self.model = problem, cfg, model
        n, q, pv = problem.state_dim, problem.dist_dim, problem.noise_dim
        N, nm = problem.n_cells, problem.n_meas
        for k in problem.meas_local:
            if not 0 <= k <= N:
                raise ValueError("measurement outside the horizon window")
        self.sizes = (n, N * q, nm * pv)
        dt, eta, M = cfg.dt, cfg.eta, problem.m_eff
        tau_cells = dt * np.arange(N)
        tau_meas = dt * np.asarray(problem.meas_local, dtype=float)
        self.w_scale = np.sqrt(2.0 * dt * np.exp(-eta * (M - tau_cells)))
        self.v_scale = np.sqrt(2.0 * np.exp(-eta * (M - tau_meas)))
        self.y_scale = np.sqrt(np.exp(-eta * (M - tau_meas)))
        self.prior_scale = math.sqrt(cfg.prior_weight(M))
        self.u_nodes = [problem.u_cells[min(k, N - 1)] if N else problem.u_last for k in problem.meas_local]
        self.penalize = cfg.constraint_handling == "penalty"
        xlo, xhi = model.X
        ylo, yhi = model.Y
        self._x_fin = np.isfinite(xlo) | np.isfinite(xhi)
        self._y_fin = np.isfinite(ylo) | np.isfinite(yhi)
        if self.penalize:
            wlo, whi = model.W
            vlo, vhi = model.V
            self._w_fin = np.isfinite(wlo) | np.isfinite(whi)
            self._v_fin = np.isfinite(vlo) | np.isfinite(vhi)

    # -- decision vector helpers
    def split(self, z: Array):
        n, nw, nv = self.sizes
        p = self.p
        chi = z[..., :n]
        w = z[..., n:n + nw].reshape(z.shape[:-1] + (p.n_cells, p.dist_dim))
        v = z[..., n + nw:].reshape(z.shape[:-1] + (p.n_meas, p.noise_dim))
        return chi, w, v

    def initial_guess(self) -> Array:
        z = np.zeros(self.p.n_vars)
        z[: self.p.state_dim] = self.p.prior
        return z

    def bounds(self):
        m, p = self.model, self.p
        if self.penalize:
            return np.full(p.n_vars, -np.inf), np.full(p.n_vars, np.inf)
        lo = np.concatenate([m.X[0], np.tile(m.W[0], p.n_cells), np.tile(m.V[0], p.n_meas)])
        hi = np.concatenate([m.X[1], np.tile(m.W[1], p.n_cells), np.tile(m.V[1], p.n_meas)])
        return lo, hi

    def typical(self) -> Array:
        """Per-variable magnitude used for finite-difference steps and step tolerance."""
        m, p = self.model, self.p

        def width(box, dim):
            lo, hi = box
            wdt = np.where(np.isfinite(hi - lo), 0.5 * (hi - lo), 1.0)
            return np.where(wdt > 0, wdt, 1.0) if dim else np.zeros(0)

        chi_t = np.where(np.abs(p.prior) > 0, np.abs(p.prior), 1.0)
        return np.concatenate([chi_t, np.tile(width(m.W, p.dist_dim), p.n_cells),
                               np.tile(width(m.V, p.noise_dim), p.n_meas)])

    # -- evaluation
    def rollout(self, chi: Array, w: Array) -> Array:
        """States at the horizon nodes; ``chi`` (B, n), ``w`` (B, N, q) -> (B, N+1, n)."""
        B = chi.shape[0]
        N = self.p.n_cells
        X = np.empty((B, N + 1, self.p.state_dim))
        X[:, 0] = chi
        x = chi
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(N):
                x = rk4_step(self.model, x, self.p.u_cells[j], w[:, j], self.cfg.dt)
                X[:, j + 1] = x
        return X

    def predicted_outputs(self, X: Array, v: Array) -> Array:
        m = self.model
        out = np.empty((X.shape[0], self.p.n_meas, m.output_dim))
        for l, k in enumerate(self.p.meas_local):
            vv = v[:, l] if m.noise_dim else np.zeros((X.shape[0], 0))
            out[:, l] = m.output(X[:, k], self.u_nodes[l], vv)
        return out

    def batch(self, Z: Array) -> Array:
        Z = np.atleast_2d(Z)
        B = Z.shape[0]
        chi, w, v = self.split(Z)
        X = self.rollout(chi, w)
        cfg = self.cfg
        parts = [self.prior_scale * (chi - self.p.prior) @ cfg.P2.factor.T]
        if self.p.dist_dim:
            parts.append((self.w_scale[None, :, None] * (w @ cfg.Qw.factor.T)).reshape(B, -1))
        if self.p.noise_dim:
            parts.append((self.v_scale[None, :, None] * (v @ cfg.Qv.factor.T)).reshape(B, -1))
        if self.p.n_meas:
            yhat = self.predicted_outputs(X, v)
            fit = (yhat - self.p.meas_values[None]) @ cfg.R.factor.T
            parts.append((self.y_scale[None, :, None] * fit).reshape(B, -1))
        parts.extend(self._penalties(X, chi, w, v))
        return np.concatenate(parts, axis=1)

    def __call__(self, z: Array) -> Array:
        return self.batch(z[None])[0]

    def _penalties(self, X, chi, w, v) -> list:
        m, s = self.model, math.sqrt(self.cfg.penalty_weight)
        out = []

        def viol(val, box, finite):
            lo, hi = box
            lo_, hi_ = lo[finite], hi[finite]
            val = val[..., finite]
            return s * (np.maximum(val - hi_, 0.0) + np.maximum(lo_ - val, 0.0))

        B = X.shape[0]
        if self._x_fin.any():
            first = 0 if self.penalize else 1
            out.append(viol(X[:, first:], m.X, self._x_fin).reshape(B, -1))
        if self._y_fin.any() and self.p.n_meas:
            out.append(viol(self.predicted_outputs(X, v), m.Y, self._y_fin).reshape(B, -1))
        if self.penalize:
            if self.p.dist_dim and self._w_fin.any():
                out.append(viol(w, m.W, self._w_fin).reshape(B, -1))
            if self.p.noise_dim and self._v_fin.any():
                out.append(viol(v, m.V, self._v_fin).reshape(B, -1))
        return out

    def cost(self, z: Array) -> float:
        r = self(z)
        return float(r @ r)

    def direct_cost(self, z: Array) -> float:
        """The horizon cost written term by term with the weight matrices themselves."""
        cfg, p, eta, M, dt = self.cfg, self.p, self.cfg.eta, self.p.m_eff, self.cfg.dt
        chi, w, v = self.split(z)
        X = self.rollout(chi[None], w[None])[0]
        J = 2 * math.exp(-eta * M) * cfg.P2(chi - p.prior)
        for j in range(p.n_cells):
            if p.dist_dim:
                J += dt * math.exp(-eta * (M - j * dt)) * 2 * cfg.Qw(w[j])
        for l, k in enumerate(p.meas_local):
            tau = k * dt
            disc = math.exp(-eta * (M - tau))
            vv = v[l] if p.noise_dim else np.zeros(0)
            if p.noise_dim:
                J += disc * 2 * cfg.Qv(vv)
            yhat = self.model.output(X[k], self.u_nodes[l], vv)
            J += disc * cfg.R(yhat - p.meas_values[l])
        return float(J)


def build_cost(problem: HorizonProblem, cfg: MheConfig, model: SystemModel) -> HorizonCost:
    return HorizonCost(problem, cfg, model)


@dataclass
class HorizonSolution:
    chi: Array
    w: Array
    v: Array
    states: Array
    x_terminal: Array
    cost: float
    iterations: int
    gradient_norm: float
    converged: bool
    message: str
    z: Array = field(repr=False, default=None)


def solve_horizon(problem: HorizonProblem, cfg: MheConfig, model: SystemModel,
                  warm_start: Optional[Array] = None) -> HorizonSolution:
    cost = build_cost(problem, cfg, model)
    z0 = cost.initial_guess() if warm_start is None else np.asarray(warm_start, dtype=float)
    if z0.shape != (problem.n_vars,):
        raise ValueError(f"warm start has shape {z0.shape}, expected ({problem.n_vars},)")
    lo, hi = cost.bounds()
    typ = cost.typical()

    def jac(z, r):
        return fd_jacobian(cost.batch, z, r, typ, cfg.solver.fd_step)

    try:
        res = levenberg_marquardt(cost, jac, z0, lo, hi, typ, cfg.solver)
    except FloatingPointError as exc:
        raise DivergenceError(f"horizon rollout diverged: {exc}", problem.t_i) from exc
    chi, w, v = cost.split(res.x)
    X = cost.rollout(chi[None], w[None])[0]
    return HorizonSolution(chi=chi.copy(), w=w.copy(), v=v.copy(), states=X, x_terminal=X[-1].copy(),
                           cost=res.cost, iterations=res.iterations, gradient_norm=res.gradient_norm,
                           converged=res.converged, message=res.message, z=res.x)


# ---------------------------------------------------------------------------
# full estimator run


@dataclass(frozen=True)
class InstantRecord:
    t_i: float
    m_eff: float
    chi: Array
    x_hat: Array
    cost: float
    iterations: int
    gradient_norm: float
    converged: bool


@dataclass
class EstimationRun:
    dt: float
    cfg: MheConfig
    records: list
    x_hat: Array
    x_true: Optional[Array] = None
    w_cells: Optional[Array] = None
    v_at_instants: dict = field(default_factory=dict)
    instants: tuple = ()

    @property
    def times(self) -> Array:
        return self.dt * np.arange(self.x_hat.shape[0])

    @property
    def errors(self) -> Array:
        if self.x_true is None:
            raise ValueError("run has no true states")
        return self.x_true - self.x_hat

    def error_norms(self) -> Array:
        return np.linalg.norm(self.errors, axis=1)

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.records)

    def write_estimates_csv(self, path) -> None:
        n = self.x_hat.shape[1]
        err = self.errors if self.x_true is not None else np.full_like(self.x_hat, np.nan)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["time"] + [f"xhat_{j + 1}" for j in range(n)] + [f"e_{j + 1}" for j in range(n)])
            for t, x, e in zip(self.times, self.x_hat, err):
                wr.writerow([repr(float(t))] + [repr(float(a)) for a in x] + [repr(float(a)) for a in e])

    def write_diagnostics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t_i", "horizon", "iterations", "cost", "gradient_norm", "converged"])
            for r in self.records:
                wr.writerow([repr(r.t_i), repr(r.m_eff), r.iterations, repr(r.cost),
                             repr(r.gradient_norm), int(r.converged)])


def open_loop(model: SystemModel, x0, u_cells: Array, dt: float, k_from: int, k_to: int,
              out: Array) -> Array:
    """Propagate with ``w = 0`` from node ``k_from`` to ``k_to``, writing into ``out``."""
    x = np.asarray(x0, dtype=float)
    out[k_from] = x
    zero_w = np.zeros(model.disturbance_dim)
    for k in range(k_from, k_to):
        x = rk4_step(model, x, u_cells[k], zero_w, dt)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("open-loop prediction diverged", (k + 1) * dt)
        out[k + 1] = x
    return x


def _warm_start(prob: HorizonProblem, prev) -> Optional[Array]:
    """Initial guess reusing the previous horizon's disturbance and noise estimates
    where the two windows overlap; ``chi`` starts at the prior."""
    if prev is None:
        return None
    pp, sol = prev
    w = np.zeros((prob.n_cells, prob.dist_dim))
    lo = max(prob.k0, pp.k0)
    hi = min(prob.k0 + prob.n_cells, pp.k0 + pp.n_cells)
    if hi > lo and prob.dist_dim:
        w[lo - prob.k0:hi - prob.k0] = sol.w[lo - pp.k0:hi - pp.k0]
    v = np.zeros((prob.n_meas, prob.noise_dim))
    old = {pp.k0 + k: l for l, k in enumerate(pp.meas_local)}
    for l, k in enumerate(prob.meas_local):
        if prob.k0 + k in old and prob.noise_dim:
            v[l] = sol.v[old[prob.k0 + k]]
    return np.concatenate([prob.prior, w.ravel(), v.ravel()])


def run_estimator(model: SystemModel, schedule: SamplingSchedule, u: Optional[Signal], truth: Trajectory,
                  cfg: MheConfig, x0_hat, index: int = 1, w: Optional[Signal] = None,
                  v: Optional[Signal] = None, measurements: Optional[dict] = None) -> EstimationRun:
    """Run the estimator over the horizon of ``truth``.

    ``measurements`` defaults to ``truth.sampled_outputs``; ``w``/``v`` are the
    true noise signals, kept only for bound evaluation.
    """
    cfg.validate(model, schedule)
    dt = cfg.dt
    if not math.isclose(truth.dt, dt, rel_tol=1e-12):
        raise ValueError("truth grid step differs from the estimator grid step")
    N = truth.n_cells
    u_cells = _cells(u, model.input_dim, N, dt)
    meas = dict(truth.sampled_outputs if measurements is None else measurements)
    t_hi = min(truth.t_end, schedule.covered(index))
    instants = [t for t in schedule_instants(schedule, index, (0.0, t_hi))]
    missing = [t for t in instants if t not in meas]
    if missing:
        raise ValueError(f"no measurement supplied for instants {missing[:3]}")
    x_hat = np.empty((N + 1, model.state_dim))
    x_hat[0] = np.asarray(x0_hat, dtype=float)
    records = []
    k_prev = 0
    x_cur = x_hat[0]
    prev = None
    for t_i in instants:
        k_i = grid_index(t_i, dt)
        open_loop(model, x_cur, u_cells, dt, k_prev, k_i, x_hat)
        m_eff = min(t_i, cfg.horizon)
        k0 = k_i - grid_index(m_eff, dt)
        window = {t: meas[t] for t in instants if k0 <= grid_index(t, dt) <= k_i}
        prob = make_horizon_problem(model, cfg, t_i, x_hat[k0], u_cells, window)
        sol = solve_horizon(prob, cfg, model, _warm_start(prob, prev))
        prev = (prob, sol)
        x_hat[k_i] = sol.x_terminal
        records.append(InstantRecord(t_i=float(t_i), m_eff=float(m_eff), chi=sol.chi, x_hat=sol.x_terminal,
                                     cost=sol.cost, iterations=sol.iterations,
                                     gradient_norm=sol.gradient_norm, converged=sol.converged))
        x_cur, k_prev = sol.x_terminal, k_i
    open_loop(model, x_cur, u_cells, dt, k_prev, N, x_hat)
    v_inst = {}
    if v is not None and model.noise_dim:
        for t in instants:
            v_inst[t] = np.asarray(v(t))
    w_cells = _cells(w, model.disturbance_dim, N, dt) if w is not None else None
    return EstimationRun(dt=dt, cfg=cfg, records=records, x_hat=x_hat, x_true=np.asarray(truth.states),
                         w_cells=w_cells, v_at_instants=v_inst, instants=tuple(instants))


# ---------------------------------------------------------------------------
# robust stability bound


@dataclass(frozen=True)
class RgesReport:
    holds: bool
    worst_margin: float
    worst_t: float
    fitted_decay_rate: float
    eta_tilde: float
    condition_value: float
    condition_holds: bool
    lhs: Array = field(repr=False, compare=False, default=None)
    rhs: Array = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"holds": self.holds, "worst_margin": self.worst_margin, "worst_t": self.worst_t,
                "fitted_decay_rate": self.fitted_decay_rate, "eta_tilde": self.eta_tilde,
                "horizon_condition": {"value": self.condition_value, "holds": self.condition_holds}}


def horizon_condition(P1: WeightedNorm, P2: WeightedNorm, eta: float, M: float) -> float:
    """``4 lambda_max(P2, P1)^2 exp(-eta M)``; the horizon is long enough when this is < 1."""
    lam = generalized_eig_max(P2, P1)
    return 4.0 * lam * lam * math.exp(-eta * M)


def fit_decay_rate(times: Array, err_sq: Array, c0: float) -> float:
    """Largest rate ``r`` with ``err_sq(t) <= c0 exp(-r t)`` at every node with ``t > 0``."""
    t = np.asarray(times)
    e = np.asarray(err_sq)
    sel = (t > 0) & (e > 0)
    if c0 <= 0:
        return 0.0 if np.any(e > 0) else math.inf
    if not sel.any():
        return math.inf
    return float(np.min(np.log(c0 / e[sel]) / t[sel]))


def verify_rges_bound(run: EstimationRun, params: ExponentialIiossParams, eta_tilde: float) -> RgesReport:
    if run.x_true is None:
        raise ValueError("run has no true states")
    P1, P2 = params.P1, params.P2
    lam = generalized_eig_max(P2, P1)
    cond = horizon_condition(P1, P2, params.eta, run.cfg.horizon)
    e = run.errors
    lhs = P1(e)
    t = run.times
    e0 = P2(e[0])
    inner = e0 * np.exp(-eta_tilde * t)
    if run.w_cells is not None and run.w_cells.shape[1]:
        inner = inner + discounted_integral(params.Qw(run.w_cells), eta_tilde, run.dt)
    if run.v_at_instants and params.Qv is not None:
        s = np.zeros(len(t))
        for tau, val in run.v_at_instants.items():
            s[grid_index(tau, run.dt)] += params.Qv(val)
        inner = inner + discounted_sum(s, eta_tilde, run.dt)
    rhs = 4.0 * lam * inner
    margins = rhs - lhs
    ok = lhs <= rhs + 1e-9 + 1e-6 * rhs
    k = int(np.argmin(margins))
    rate = fit_decay_rate(t, lhs, 4.0 * lam * e0)
    return RgesReport(holds=bool(np.all(ok)), worst_margin=float(margins[k]), worst_t=float(t[k]),
                      fitted_decay_rate=rate, eta_tilde=float(eta_tilde), condition_value=cond,
                      condition_holds=cond < 1.0, lhs=lhs, rhs=rhs)
