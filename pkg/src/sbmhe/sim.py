"""Fixed-step trajectory integration, sampled outputs and bounded noise."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (Array, DivergenceError, SamplingSchedule, Signal, SystemModel,
                   grid_index, schedule_instants)


def rk4_step(model: SystemModel, x: Array, u: Array, w: Array, dt: float) -> Array:
    """One classical Runge-Kutta step with ``u`` and ``w`` held over the step.

    ``x`` may carry a leading batch axis.
    """
    f = model.dynamics
    k1 = f(x, u, w)
    k2 = f(x + 0.5 * dt * k1, u, w)
    k3 = f(x + 0.5 * dt * k2, u, w)
    k4 = f(x + dt * k3, u, w)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _cells(sig: Optional[Signal], dim: int, n: int, dt: float) -> Array:
    """Per-cell values of ``sig`` on a grid of ``n`` cells with step ``dt``."""
    if sig is None or dim == 0:
        return np.zeros((n, dim))
    if sig.dim != dim:
        raise ValueError(f"signal dimension {sig.dim} != expected {dim}")
    if sig.t_end < n * dt * (1 - 1e-9):
        raise ValueError(f"signal covers [0, {sig.t_end}] but [0, {n * dt}] is needed")
    if np.isclose(sig.dt, dt):
        return np.asarray(sig.values[:n])
    return np.stack([sig((k + 0.5) * dt) for k in range(n)])


@dataclass(frozen=True)
class Trajectory:
    """Dense state/output record on the grid ``t_k = k dt``, ``k = 0..N``."""

    dt: float
    states: Array
    outputs: Array
    model: SystemModel = field(repr=False, compare=False)
    u_cells: Array = field(repr=False, compare=False)
    w_cells: Array = field(repr=False, compare=False)
    sampled_outputs: dict = field(default_factory=dict)
    violations: tuple = ()

    @property
    def times(self) -> Array:
        return self.dt * np.arange(self.states.shape[0])

    @property
    def t_end(self) -> float:
        return self.dt * (self.states.shape[0] - 1)

    @property
    def n_cells(self) -> int:
        return self.states.shape[0] - 1

    def input_at_node(self, k: int) -> Array:
        # the last node reads the last cell's held value
        return self.u_cells[min(k, self.n_cells - 1)] if self.n_cells else np.zeros(self.model.input_dim)

    def state_at(self, t: float) -> Array:
        return self.states[grid_index(t, self.dt)]

    def noisy_outputs(self, v: Optional[Signal]) -> Array:
        m = self.model
        vc = _cells(v, m.noise_dim, self.n_cells, self.dt)
        vc = np.vstack([vc, vc[-1:]]) if len(vc) else np.zeros((self.states.shape[0], m.noise_dim))
        return np.stack([m.output(self.states[k], self.input_at_node(k), vc[k])
                         for k in range(self.states.shape[0])])


def integrate(model: SystemModel, chi, u: Optional[Signal], w: Optional[Signal],
              t_end: float, dt: float) -> Trajectory:
    """Integrate ``x' = f(x, u, w)`` from ``chi`` with fixed-step RK4."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_cells = grid_index(t_end, dt)
    chi = np.asarray(chi, dtype=float)
    if chi.shape != (model.state_dim,):
        raise ValueError(f"initial state must have shape ({model.state_dim},)")
    uc = _cells(u, model.input_dim, n_cells, dt)
    wc = _cells(w, model.disturbance_dim, n_cells, dt)
    states = np.empty((n_cells + 1, model.state_dim))
    states[0] = chi
    x = chi
    for k in range(n_cells):
        with np.errstate(over="ignore", invalid="ignore"):
            x = rk4_step(model, x, uc[k], wc[k], dt)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state during integration", (k + 1) * dt)
        states[k + 1] = x
    zero_v = np.zeros(model.noise_dim)
    outputs = np.stack([model.output(states[k], uc[min(k, n_cells - 1)] if n_cells else
                                     np.zeros(model.input_dim), zero_v)
                        for k in range(n_cells + 1)])
    lo, hi = model.X
    bad = np.where(np.any((states < lo) | (states > hi), axis=1))[0]
    states.setflags(write=False)
    outputs.setflags(write=False)
    return Trajectory(dt, states, outputs, model, uc, wc,
                      violations=tuple(float(k * dt) for k in bad))


def sample_outputs(traj: Trajectory, schedule: SamplingSchedule, i: int = 1,
                   v: Optional[Signal] = None) -> dict:
    """Outputs ``h(x(t), u(t), v(t))`` at every ``t`` in ``K_i`` within the trajectory horizon."""
    t_hi = min(traj.t_end, schedule.covered(i))
    instants = schedule_instants(schedule, i, (0.0, t_hi))
    m = traj.model
    vc = _cells(v, m.noise_dim, traj.n_cells, traj.dt)
    out = {}
    for t in instants:
        k = grid_index(t, traj.dt)
        vk = vc[min(k, traj.n_cells - 1)] if len(vc) else np.zeros(m.noise_dim)
        out[t] = np.asarray(m.output(traj.states[k], traj.input_at_node(k), vk))
    return dict(sorted(out.items()))


def with_samples(traj: Trajectory, samples: dict) -> Trajectory:
    return Trajectory(traj.dt, traj.states, traj.outputs, traj.model, traj.u_cells,
                      traj.w_cells, dict(samples), traj.violations)


def generate_noise(bounds, seed: int, dt: float, t_end: float) -> Signal:
    """i.i.d. uniform noise on ``[-bound_k, bound_k]`` per channel and grid cell."""
    bounds = np.asarray(bounds, dtype=float)
    if np.any(bounds < 0):
        raise ValueError("noise bounds must be nonnegative")
    n = grid_index(t_end, dt)
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1.0, 1.0, size=(n, bounds.size)) * bounds
    return Signal(dt, vals)


# ---------------------------------------------------------------------------
# csv export


def write_trajectory_csv(traj: Trajectory, path, v: Optional[Signal] = None) -> None:
    y = traj.noisy_outputs(v) if v is not None else traj.outputs
    n, p = traj.states.shape[1], y.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time"] + [f"x_{j + 1}" for j in range(n)] + [f"y_{j + 1}" for j in range(p)])
        for t, x, yy in zip(traj.times, traj.states, y):
            wr.writerow([repr(float(t))] + [repr(float(a)) for a in x] + [repr(float(a)) for a in yy])


def write_samples_csv(samples: dict, path, output_dim: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["instant"] + [f"y_{j + 1}" for j in range(output_dim)])
        for t, y in samples.items():
            wr.writerow([repr(float(t))] + [repr(float(a)) for a in y])
