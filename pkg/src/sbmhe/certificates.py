"""Falsification checks for incremental (sample-based) integral IOSS bounds.

All checkers are one-sided: a ``holds=False`` report carries a concrete
witness, ``holds=True`` only means no violation on the tested pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.signal import lfilter

from .core import (Array, DimensionError, LinearSystemModel, SamplingSchedule, Signal,
                   SystemModel, WeightedNorm, grid_index, schedule_instants)
from .linear import (DetectabilityCertificateLinear, build_Os, matrix_exp, os_certificate,
                     sliding_sigma_min)
from .sim import Trajectory, integrate


class InvalidGainError(ValueError):
    pass


@dataclass(frozen=True)
class ExponentialIiossParams:
    P1: WeightedNorm
    P2: WeightedNorm
    Qw: WeightedNorm
    Qv: Optional[WeightedNorm]
    R: WeightedNorm
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.P1.dim != self.P2.dim:
            raise DimensionError("P1 and P2 must act on the same state space")

    def to_dict(self) -> dict:
        return {"P1": self.P1.to_list(), "P2": self.P2.to_list(), "Qw": self.Qw.to_list(),
                "Qv": None if self.Qv is None else self.Qv.to_list(), "R": self.R.to_list(),
                "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> "ExponentialIiossParams":
        from .core import matrix_from_json
        wn = lambda m: None if m is None else WeightedNorm(matrix_from_json(m))
        return cls(wn(d["P1"]), wn(d["P2"]), wn(d["Qw"]), wn(d.get("Qv")), wn(d["R"]), float(d["eta"]))


@dataclass(frozen=True)
class TrajectoryPair:
    traj1: Trajectory
    traj2: Trajectory
    v1: Optional[Signal]
    v2: Optional[Signal]
    schedule: SamplingSchedule
    index: int = 1

    def __post_init__(self):
        if self.traj1.states.shape != self.traj2.states.shape or self.traj1.dt != self.traj2.dt:
            raise ValueError("trajectory pair must share grid and horizon")
        if not np.array_equal(self.traj1.u_cells, self.traj2.u_cells):
            raise ValueError("trajectory pair must share the input u")

    @property
    def dt(self) -> float:
        return self.traj1.dt

    @property
    def times(self) -> Array:
        return self.traj1.times

    def dx(self) -> Array:
        return self.traj1.states - self.traj2.states

    def dw_cells(self) -> Array:
        return self.traj1.w_cells - self.traj2.w_cells

    def dy(self) -> Array:
        return self.traj1.noisy_outputs(self.v1) - self.traj2.noisy_outputs(self.v2)

    def dv_nodes(self) -> Array:
        """Noise difference at each node (last node holds the last cell)."""
        n_nodes, pv = self.traj1.states.shape[0], self.traj1.model.noise_dim
        out = np.zeros((n_nodes, pv))
        for v, sgn in ((self.v1, 1.0), (self.v2, -1.0)):
            if v is not None and pv:
                vals = np.asarray(v.values[: n_nodes - 1])
                out[: len(vals)] += sgn * vals
                out[len(vals):] += sgn * vals[-1]
        return out

    def sample_mask(self) -> Array:
        t_hi = min(self.traj1.t_end, self.schedule.covered(self.index))
        mask = np.zeros(self.traj1.states.shape[0], dtype=bool)
        for t in schedule_instants(self.schedule, self.index, (0.0, t_hi)):
            mask[grid_index(t, self.dt)] = True
        return mask


def make_pair(model: SystemModel, chi1, chi2, t_end: float, dt: float, schedule: SamplingSchedule,
              u: Optional[Signal] = None, w1: Optional[Signal] = None, w2: Optional[Signal] = None,
              v1: Optional[Signal] = None, v2: Optional[Signal] = None, index: int = 1) -> TrajectoryPair:
    t1 = integrate(model, chi1, u, w1, t_end, dt)
    t2 = integrate(model, chi2, u, w2, t_end, dt)
    return TrajectoryPair(t1, t2, v1, v2, schedule, index)


@dataclass(frozen=True)
class CheckReport:
    holds: bool
    worst_margin: float
    worst_t: float
    lhs: float
    rhs: float
    params_echo: dict = field(default_factory=dict)
    margins: Optional[Array] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"holds": self.holds, "worst_margin": self.worst_margin, "worst_t": self.worst_t,
                "witness": {"t": self.worst_t, "lhs": self.lhs, "rhs": self.rhs},
                "params_echo": self.params_echo}


def check_tolerance(rhs):
    # absorbs left-Riemann quadrature and RK4 error
    return 1e-9 + 1e-6 * np.abs(rhs)


def discounted_integral(g: Array, eta: float, dt: float) -> Array:
    """``I_k = sum_{j<k} dt g_j exp(-eta (t_k - t_j))`` for nodes ``k = 0..len(g)``."""
    a = math.exp(-eta * dt)
    out = np.zeros(len(g) + 1)
    if len(g):
        out[1:] = lfilter([a * dt], [1.0, -a], g)
    return out


def discounted_sum(s: Array, eta: float, dt: float) -> Array:
    """``S_k = sum_{j<=k} s_j exp(-eta (t_k - t_j))``."""
    return lfilter([1.0], [1.0, -math.exp(-eta * dt)], s)


def _report(lhs, rhs, times, echo) -> CheckReport:
    margins = rhs - lhs
    ok = lhs <= rhs + check_tolerance(rhs)
    # the witness is the node with the largest tolerance-adjusted violation
    score = margins + check_tolerance(rhs)
    k = int(np.argmin(score)) if len(score) else 0
    if len(margins) == 0:
        return CheckReport(True, 0.0, 0.0, 0.0, 0.0, echo, margins)
    return CheckReport(bool(np.all(ok)), float(margins.min()), float(times[k]),
                       float(lhs[k]), float(rhs[k]), echo, margins)


def check_exp_iioss_sampled(pair: TrajectoryPair, params: ExponentialIiossParams) -> CheckReport:
    """Evaluate the exponential sample-based bound at every grid node."""
    dt, eta = pair.dt, params.eta
    dx = pair.dx()
    if dx.shape[1] != params.P1.dim:
        raise DimensionError("P1 does not match the state dimension")
    lhs = params.P1(dx)
    rhs = params.P2(dx[0]) * np.exp(-eta * pair.times)
    dw = pair.dw_cells()
    if dw.shape[1]:
        rhs = rhs + discounted_integral(params.Qw(dw), eta, dt)
    mask = pair.sample_mask()
    s = np.zeros(len(mask))
    if mask.any():
        dy = pair.dy()
        s[mask] = params.R(dy[mask])
        if params.Qv is not None and pair.traj1.model.noise_dim:
            s[mask] += params.Qv(pair.dv_nodes()[mask])
    rhs = rhs + discounted_sum(s, eta, dt)
    return _report(lhs, rhs, pair.times, params.to_dict())


def exp_iioss_terms_at(pair: TrajectoryPair, params: ExponentialIiossParams, t: float) -> tuple:
    """Direct (loop) evaluation of both sides at one node; independent of the recursions."""
    k = grid_index(t, pair.dt)
    dt, eta = pair.dt, params.eta
    dx = pair.dx()
    lhs = params.P1(dx[k])
    rhs = params.P2(dx[0]) * math.exp(-eta * t)
    dw = pair.dw_cells()
    for j in range(k):
        if dw.shape[1]:
            rhs += dt * params.Qw(dw[j]) * math.exp(-eta * (t - j * dt))
    dy, dv = pair.dy(), pair.dv_nodes()
    for tau in schedule_instants(pair.schedule, pair.index, (0.0, t)):
        j = grid_index(tau, dt)
        term = params.R(dy[j])
        if params.Qv is not None and dv.shape[1]:
            term += params.Qv(dv[j])
        rhs += term * math.exp(-eta * (t - tau))
    return lhs, rhs


# ---------------------------------------------------------------------------
# general class-K_inf gains


def validate_gain(fn: Callable, hi: float, name: str = "gain", n: int = 100) -> None:
    if abs(float(fn(0.0))) > 1e-12:
        raise InvalidGainError(f"{name} does not vanish at 0")
    if hi <= 0:
        return
    s = np.linspace(0.0, hi, n)
    vals = np.array([float(fn(x)) for x in s])
    if np.any(np.diff(vals) <= 0):
        raise InvalidGainError(f"{name} is not strictly increasing on [0, {hi:.3g}]")


def _apply(fn, r: Array) -> Array:
    return np.array([float(fn(x)) for x in r]) if fn is not None else np.zeros(len(r))


def linear_gain(c: float) -> Callable:
    return lambda r: c * r


def quadratic_gain(c: float) -> Callable:
    return lambda r: c * r * r


def _check_gains(gains: dict, norms: dict) -> None:
    for name, fn in gains.items():
        if fn is None:
            continue
        hi = max(float(norms.get(name, 0.0)), 1e-12)
        validate_gain(fn, hi, name)


def check_general_iioss(pair: TrajectoryPair, gains: dict, eta: float) -> CheckReport:
    """Dense-output bound with user-supplied gains ``alpha, alpha_x, gamma_1..3``."""
    dt = pair.dt
    nx = np.linalg.norm(pair.dx(), axis=1)
    nw = np.linalg.norm(pair.dw_cells(), axis=1) if pair.dw_cells().shape[1] else np.zeros(len(nx) - 1)
    ny = np.linalg.norm(pair.dy(), axis=1)
    nv = np.linalg.norm(pair.dv_nodes(), axis=1) if pair.dv_nodes().shape[1] else np.zeros(len(nx))
    _check_gains(gains, {"alpha": nx.max(), "alpha_x": nx[0], "gamma_1": nw.max(initial=0),
                         "gamma_2": ny.max(), "gamma_3": nv.max()})
    lhs = _apply(gains["alpha"], nx)
    rhs = float(gains["alpha_x"](nx[0])) * np.exp(-eta * pair.times)
    g = _apply(gains.get("gamma_1"), nw) + _apply(gains.get("gamma_2"), ny[:-1]) \
        + _apply(gains.get("gamma_3"), nv[:-1])
    rhs = rhs + discounted_integral(g, eta, dt)
    return _report(lhs, rhs, pair.times, {"eta": eta, "gains": sorted(k for k, v in gains.items() if v)})


def check_sufficient_condition(pair: TrajectoryPair, t_star: float, gains: dict) -> CheckReport:
    """Undiscounted output-integral vs. disturbance integral plus sampled outputs, for ``t >= t_star``.

    ``gains`` keys: ``gamma_2, gamma_3, alpha_w, alpha_y, alpha_v`` (``None`` means zero).
    """
    dt = pair.dt
    times = pair.times
    if t_star > times[-1] + 1e-12:
        raise ValueError("t_star beyond the trajectory horizon")
    ny = np.linalg.norm(pair.dy(), axis=1)
    nv = np.linalg.norm(pair.dv_nodes(), axis=1) if pair.dv_nodes().shape[1] else np.zeros(len(ny))
    dw = pair.dw_cells()
    nw = np.linalg.norm(dw, axis=1) if dw.shape[1] else np.zeros(len(ny) - 1)
    _check_gains(gains, {"gamma_2": ny.max(), "gamma_3": nv.max(), "alpha_w": nw.max(initial=0),
                         "alpha_y": ny.max(), "alpha_v": nv.max()})
    k_star = int(math.ceil(t_star / dt - 1e-9))
    cell = _apply(gains.get("gamma_2"), ny[:-1]) + _apply(gains.get("gamma_3"), nv[:-1])
    cell[:k_star] = 0.0
    lhs = np.concatenate([[0.0], np.cumsum(dt * cell)])
    rhs = np.concatenate([[0.0], np.cumsum(dt * _apply(gains.get("alpha_w"), nw))])
    mask = pair.sample_mask()
    s = np.zeros(len(ny))
    s[mask] = _apply(gains.get("alpha_y"), ny[mask]) + _apply(gains.get("alpha_v"), nv[mask])
    rhs = rhs + np.cumsum(s)
    sel = slice(k_star, None)
    echo = {"t_star": t_star, "gains": sorted(k for k, v in gains.items() if v)}
    return _report(lhs[sel], rhs[sel], times[sel], echo)


# ---------------------------------------------------------------------------
# Lipschitz probe


@dataclass(frozen=True)
class LipschitzEstimate:
    L: float
    rho_slope: float
    n_samples: int


def lipschitz_probe(model: SystemModel, sample_count: int, seed: int, region: Optional[dict] = None) -> LipschitzEstimate:
    """Monte-Carlo lower estimate of the Lipschitz constant with linear ``rho``.

    Half of the pairs are uniform over the boxes, half are close pairs
    (relative offset 1e-6) which resolve local slopes near the box edges.
    """
    region = region or {}
    rng = np.random.default_rng(seed)

    def box(attr, dim):
        if attr in region:
            lo, hi = (np.asarray(b, dtype=float) for b in region[attr])
        elif attr == "U":
            lo = hi = np.zeros(dim)
        else:
            lo, hi = getattr(model, attr)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError(f"box {attr} is unbounded; pass an explicit probe region")
        return lo, hi

    xlo, xhi = box("X", model.state_dim)
    wlo, whi = box("W", model.disturbance_dim)
    ulo, uhi = box("U", model.input_dim)
    best = 0.0
    for i in range(sample_count):
        x1 = rng.uniform(xlo, xhi)
        u = rng.uniform(ulo, uhi)
        w1 = rng.uniform(wlo, whi)
        if i % 2:
            sx = 1e-6 * np.maximum(xhi - xlo, 1e-12)
            sw = 1e-6 * np.maximum(whi - wlo, 1e-12)
            x2 = np.clip(x1 + rng.uniform(-sx, sx), xlo, xhi)
            w2 = np.clip(w1 + rng.uniform(-sw, sw), wlo, whi)
        else:
            x2 = rng.uniform(xlo, xhi)
            w2 = rng.uniform(wlo, whi)
        den = np.linalg.norm(x1 - x2) + np.linalg.norm(w1 - w2)
        if den <= 0:
            continue
        num = np.linalg.norm(model.dynamics(x1, u, w1) - model.dynamics(x2, u, w2))
        best = max(best, float(num / den))
    return LipschitzEstimate(best, 1.0, sample_count)


# ---------------------------------------------------------------------------
# constructive certificates for linear systems


def _max_exp_norm(A: Array, horizon: float, n_grid: int = 2000, left: Optional[Array] = None) -> float:
    """Rigorous upper bound of ``|left exp(A s)|`` over ``s in [0, horizon]``."""
    h = horizon / n_grid
    best = 0.0
    for k in range(n_grid + 1):
        E = matrix_exp(A, k * h)
        best = max(best, float(np.linalg.norm(E if left is None else left @ E, 2)))
    return best * math.exp(np.linalg.norm(A, 2) * h)


@dataclass(frozen=True)
class LinearSampledCertificate:
    """Exponential sample-based IOSS parameters for a linear system and a block schedule."""

    params: ExponentialIiossParams
    sigma: float
    growth: float
    block_size: int
    T: float

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "sigma": self.sigma, "growth": self.growth,
                "block_size": self.block_size, "T": self.T}


def certified_linear_params(sys: LinearSystemModel, windows: list, T: float, eta: float,
                            dt: Optional[float] = None) -> LinearSampledCertificate:
    """Parameters valid for every shift ``K_i`` of a schedule made of blocks of length ``T``.

    Every interval of length ``2T`` contains a complete block, whose samples
    reconstruct the state at the block start through the pseudo-inverse of
    the shifted sample-based observability matrix (norm ``1/sigma``). For
    ``t < 2T`` the state difference is bounded by plain growth from the
    initial condition. ``G = max |e^{As}|`` over ``[0, 2T]``. With ``P1 = I``:

    * ``P2 = 2 G^2 e^{2 eta T}``
    * ``R = Qv = 3 G^2 e^{2 eta T} / sigma^2``
    * ``Qw = e^{2 eta T} |G_w|^2 max(4 G^2 T, 3 beta^2)``,
      ``beta = G^2 |C| sqrt(k T) / sigma + G sqrt(2 T)``

    ``dt`` inflates ``Qw`` by ``e^{eta dt}`` to cover left-endpoint quadrature.
    """
    A, C, Gw = np.asarray(sys.A), np.asarray(sys.C), np.asarray(sys.G)
    n, p = A.shape[0], C.shape[0]
    sigma = math.inf
    k = 0
    for j, inst in enumerate(windows):
        if not inst:
            continue
        O = build_Os(sys, inst)
        rank, smin = os_certificate(O, j * T)
        sigma = min(sigma, smin if rank == n else 0.0)
        k = max(k, len(inst))
    if not sigma > 0 or not math.isfinite(sigma):
        raise ValueError("schedule blocks do not give full-rank sample-based observability matrices")
    G = _max_exp_norm(A, 2 * T)
    disc = math.exp(2 * eta * T)
    Cn = float(np.linalg.norm(C, 2))
    beta = G * G * Cn * math.sqrt(k * T) / sigma + G * math.sqrt(2 * T)
    qw = disc * float(np.linalg.norm(Gw, 2)) ** 2 * max(4 * G * G * T, 3 * beta * beta)
    if dt is not None:
        qw *= math.exp(eta * dt)
    r = 3 * G * G * disc / sigma ** 2
    params = ExponentialIiossParams(
        P1=WeightedNorm.identity(n),
        P2=WeightedNorm.identity(n, 2 * G * G * disc),
        Qw=WeightedNorm.identity(Gw.shape[1], qw),
        Qv=WeightedNorm.identity(p, r) if sys.noise_dim else None,
        R=WeightedNorm.identity(p, r),
        eta=eta,
    )
    return LinearSampledCertificate(params, float(sigma), float(G), k, T)


@dataclass(frozen=True)
class SufficientGains:
    """Linear gains for the undiscounted sufficient condition, built from a sliding-window certificate."""

    gamma_2: float
    alpha_w: float
    alpha_y: float
    t_star: float
    sigma_bar: float
    mu_bar: float
    kappa: int
    k_w: float

    def callables(self) -> dict:
        return {"gamma_2": linear_gain(self.gamma_2), "gamma_3": None,
                "alpha_w": linear_gain(self.alpha_w), "alpha_y": linear_gain(self.alpha_y),
                "alpha_v": None}

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def linear_sufficient_gains(sys: LinearSystemModel, instants, T_window: float, eps: float,
                            observer: DetectabilityCertificateLinear, t_end: float,
                            n_grid: int = 400) -> SufficientGains:
    """Gains ``gamma_2 = c2 r``, ``alpha_y = 2 T mu c2 r``, ``alpha_w = 2 T (mu kappa + 1) c2 k_w r``.

    ``c2`` is the observer certificate's output gain, ``mu = |C e^{AT}| / sigma_bar``
    with ``sigma_bar`` the smallest sliding-window singular value seen on
    ``[T, t_end]``, ``kappa = ceil(T / eps) + 1`` and ``k_w`` bounds
    ``|C e^{As}|`` on ``[0, T]``.
    """
    A, C = np.asarray(sys.A), np.asarray(sys.C)
    grid = np.linspace(T_window, t_end, n_grid)
    sig = sliding_sigma_min(sys, instants, T_window, grid)
    sigma_bar = float(sig.min())
    if not sigma_bar > 0:
        raise ValueError("sliding-window observability matrix loses rank; no finite gains")
    mu = float(np.linalg.norm(C @ matrix_exp(A, T_window), 2)) / sigma_bar
    kappa = int(math.ceil(T_window / eps)) + 1
    k_w = _max_exp_norm(A, T_window, left=C) * float(np.linalg.norm(np.asarray(sys.G), 2))
    c2 = observer.gains["gamma_2"]
    return SufficientGains(gamma_2=c2, alpha_w=2 * T_window * (mu * kappa + 1) * c2 * k_w,
                           alpha_y=2 * T_window * mu * c2, t_star=T_window, sigma_bar=sigma_bar,
                           mu_bar=mu, kappa=kappa, k_w=k_w)
