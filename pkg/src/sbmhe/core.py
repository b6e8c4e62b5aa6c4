"""Shared value types: sampling schedules, system models, signals, weighted norms."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

Array = np.ndarray

# relative tolerance used to decide whether a time lies on a grid node
GRID_TOL = 1e-6


class ScheduleError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t = {time:.6g})")
        self.time = time


def _frozen(a, ndim: Optional[int] = None) -> Array:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        if ndim == 2 and arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, 0)
        else:
            raise DimensionError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def grid_index(t: float, dt: float) -> int:
    """Index of the grid node at time ``t``; raises if ``t`` is off-grid."""
    k = int(round(t / dt))
    if abs(k * dt - t) > GRID_TOL * dt:
        raise ScheduleError(f"time {t!r} is not aligned with grid step {dt!r}")
    return k


# ---------------------------------------------------------------------------
# sampling schedules


@dataclass(frozen=True)
class SamplingSchedule:
    """Finite prefix of a gap sequence ``d_1, d_2, ...`` and the sets ``K_i`` it induces.

    ``K_i`` starts at ``d_i`` and accumulates the following gaps, so ``K_1`` is
    the cumulative sum of all gaps. Instants past ``horizon_end`` are dropped;
    the schedule claims to know every instant of ``K_1`` up to ``horizon_end``.
    """

    gaps: tuple
    d_max: float
    horizon_end: float

    def __post_init__(self):
        gaps = tuple(float(g) for g in self.gaps)
        object.__setattr__(self, "gaps", gaps)
        if not self.d_max > 0:
            raise ScheduleError("d_max must be positive")
        for g in gaps:
            if not (0.0 <= g <= self.d_max * (1 + 1e-12)):
                raise ScheduleError(f"gap {g} outside [0, d_max={self.d_max}]")
        if not self.horizon_end > 0:
            raise ScheduleError("horizon_end must be positive")

    @classmethod
    def from_gaps(cls, gaps: Sequence[float], d_max: Optional[float] = None,
                  horizon_end: Optional[float] = None) -> "SamplingSchedule":
        gaps = [float(g) for g in gaps]
        if d_max is None:
            d_max = max(gaps) if gaps and max(gaps) > 0 else 1.0
        if horizon_end is None:
            total = float(np.sum(gaps)) if gaps else 0.0
            horizon_end = total if total > 0 else 1.0
        return cls(tuple(gaps), float(d_max), float(horizon_end))

    @classmethod
    def from_instants(cls, instants: Sequence[float], d_max: Optional[float] = None,
                      horizon_end: Optional[float] = None) -> "SamplingSchedule":
        inst = np.asarray(sorted(float(t) for t in instants))
        if inst.size and inst[0] < 0:
            raise ScheduleError("instants must be nonnegative")
        gaps = np.diff(np.concatenate([[0.0], inst])) if inst.size else np.array([])
        if horizon_end is None:
            horizon_end = float(inst[-1]) if inst.size and inst[-1] > 0 else 1.0
        return cls.from_gaps(gaps.tolist(), d_max=d_max, horizon_end=horizon_end)

    @classmethod
    def random(cls, mean_gap: float, jitter: float, horizon_end: float, seed: int,
               grid_step: Optional[float] = None) -> "SamplingSchedule":
        """Gaps uniform on ``[(1-jitter) mean, (1+jitter) mean]``, optionally snapped to a grid."""
        rng = np.random.default_rng(seed)
        lo, hi = (1 - jitter) * mean_gap, (1 + jitter) * mean_gap
        gaps = []
        total = 0.0
        while total <= horizon_end:
            g = rng.uniform(lo, hi)
            if grid_step is not None:
                g = max(1, round(g / grid_step)) * grid_step
            gaps.append(g)
            total += g
        return cls.from_gaps(gaps, d_max=hi if grid_step is None else max(max(gaps), hi),
                             horizon_end=horizon_end)

    def offset(self, i: int) -> float:
        """Time removed when passing from ``K_1`` to ``K_i`` (sum of the first i-1 gaps)."""
        if i < 1 or i > len(self.gaps) + 1:
            raise ScheduleError(f"schedule index {i} out of range 1..{len(self.gaps) + 1}")
        return float(np.sum(self.gaps[: i - 1]))

    def covered(self, i: int = 1) -> float:
        return self.horizon_end - self.offset(i)

    def instants(self, i: int = 1) -> Array:
        """All instants of ``K_i`` within its covered horizon, sorted and de-duplicated."""
        off = self.offset(i)
        # shift K_1 rather than re-summing so K_i is an exact shift
        t1 = np.cumsum(np.asarray(self.gaps, dtype=float))[i - 1:] - off
        t1 = t1[t1 <= self.covered(i) * (1 + 1e-12)]
        return np.unique(t1)

    def window(self, i: int, a: float, b: float) -> list:
        return schedule_instants(self, i, (a, b))

    def to_dict(self) -> dict:
        return {"gaps": list(self.gaps), "d_max": self.d_max, "horizon_end": self.horizon_end}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingSchedule":
        return cls(tuple(d["gaps"]), float(d["d_max"]), float(d["horizon_end"]))


def schedule_instants(s: SamplingSchedule, i: int, window: tuple) -> list:
    """Return ``K_i`` intersected with the closed interval ``window``."""
    a, b = float(window[0]), float(window[1])
    cov = s.covered(i)
    if a < 0 or b < a or b > cov * (1 + 1e-12) + 1e-12:
        raise ScheduleError(f"window [{a}, {b}] outside covered horizon [0, {cov}] of K_{i}")
    inst = s.instants(i)
    sel = inst[(inst >= a - 1e-12) & (inst <= b + 1e-12)]
    return [float(t) for t in sel]


# ---------------------------------------------------------------------------
# weighted norms


@dataclass(frozen=True)
class WeightedNorm:
    """Quadratic form ``|x|_P^2 = x^T P x`` with ``P`` symmetric positive definite."""

    P: Array
    factor: Array = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        P = np.atleast_2d(np.array(self.P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise DimensionError(f"weight matrix must be square, got {P.shape}")
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-14 * max(1.0, np.abs(P).max(initial=0))):
            raise NotPositiveDefiniteError("weight matrix is not symmetric")
        P = 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("weight matrix is not positive definite") from exc
        object.__setattr__(self, "P", _frozen(P))
        # |x|_P^2 == |factor @ x|^2
        object.__setattr__(self, "factor", _frozen(L.T))

    @classmethod
    def diag(cls, values) -> "WeightedNorm":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "WeightedNorm":
        return cls(scale * np.eye(n))

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def __call__(self, x) -> float:
        return weighted_norm_sq(self, x)

    def scaled(self, alpha: float) -> "WeightedNorm":
        return WeightedNorm(alpha * self.P)

    def to_list(self) -> list:
        return self.P.tolist()

    def __eq__(self, other):
        if not isinstance(other, WeightedNorm):
            return NotImplemented
        return np.array_equal(self.P, other.P)

    __hash__ = object.__hash__


def weighted_norm_sq(P: WeightedNorm, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != P.dim:
        raise DimensionError(f"vector of dim {x.shape[-1]} vs weight of dim {P.dim}")
    return float(x @ P.P @ x) if x.ndim == 1 else np.einsum("...i,ij,...j->...", x, P.P, x)


def generalized_eig_max(P, Q) -> float:
    """Largest ``lambda`` with ``det(P - lambda Q) = 0`` for symmetric PD ``P``, ``Q``."""
    P = P.P if isinstance(P, WeightedNorm) else WeightedNorm(P).P
    Q = Q.P if isinstance(Q, WeightedNorm) else WeightedNorm(Q).P
    if P.shape != Q.shape:
        raise DimensionError("pencil matrices differ in shape")
    return float(scipy.linalg.eigh(P, Q, eigvals_only=True)[-1])


# ---------------------------------------------------------------------------
# signals


@dataclass(frozen=True)
class Signal:
    """Zero-order-hold signal: ``values[k]`` holds on ``[k dt, (k+1) dt)``."""

    dt: float
    values: Array

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("grid step must be positive")
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", _frozen(v, 2))

    @classmethod
    def zeros(cls, dim: int, dt: float, t_end: float) -> "Signal":
        n = grid_index(t_end, dt)
        return cls(dt, np.zeros((n, dim)))

    @classmethod
    def constant(cls, value, dt: float, t_end: float) -> "Signal":
        n = grid_index(t_end, dt)
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(dt, np.tile(value, (n, 1)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def t_end(self) -> float:
        return self.n_cells * self.dt

    def cell(self, t: float) -> int:
        if t < -GRID_TOL * self.dt or t > self.t_end + GRID_TOL * self.dt:
            raise ValueError(f"time {t} outside signal domain [0, {self.t_end}]")
        k = int(np.floor(t / self.dt + GRID_TOL))
        return min(max(k, 0), self.n_cells - 1)

    def __call__(self, t: float) -> Array:
        return self.values[self.cell(t)]

    def ess_sup(self, a: float, b: float) -> float:
        """Max Euclidean norm over the cells meeting ``[a, b]`` in positive measure."""
        if b < a:
            raise ValueError("empty interval")
        if b == a:
            return float(np.linalg.norm(self(a)))
        k0 = int(np.floor(a / self.dt + GRID_TOL))
        k1 = int(np.ceil(b / self.dt - GRID_TOL))
        k0, k1 = max(k0, 0), min(k1, self.n_cells)
        return float(np.linalg.norm(self.values[k0:k1], axis=1).max(initial=0.0))


# ---------------------------------------------------------------------------
# system models


def _box(bounds, dim: int):
    if bounds is None:
        return np.full(dim, -np.inf), np.full(dim, np.inf)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if lo.shape != (dim,) or hi.shape != (dim,):
        raise DimensionError(f"box bounds must have dimension {dim}")
    if np.any(lo > hi):
        raise ValueError("box lower bound exceeds upper bound")
    return lo, hi


@dataclass(frozen=True)
class SystemModel:
    """Continuous-time model ``x' = f(x, u, w)``, ``y = h(x, u, v)`` with box constraints.

    ``f`` and ``h`` must broadcast over a leading batch axis when
    ``vectorized`` is true; otherwise they are looped row by row.
    """

    f: Callable
    h: Callable
    state_dim: int
    input_dim: int
    output_dim: int
    disturbance_dim: int
    noise_dim: int
    X: tuple = None
    W: tuple = None
    V: tuple = None
    Y: tuple = None
    vectorized: bool = True
    name: str = "model"

    def __post_init__(self):
        for attr, dim in (("X", self.state_dim), ("W", self.disturbance_dim),
                          ("V", self.noise_dim), ("Y", self.output_dim)):
            lo, hi = _box(getattr(self, attr), dim)
            lo.setflags(write=False)
            hi.setflags(write=False)
            object.__setattr__(self, attr, (lo, hi))
        for attr in ("W", "V"):
            lo, hi = getattr(self, attr)
            if np.any(lo > 0) or np.any(hi < 0):
                raise ValueError(f"constraint box {attr} must contain 0")

    def dynamics(self, x, u, w) -> Array:
        if self.vectorized or np.ndim(x) == 1:
            return self.f(x, u, w)
        return np.stack([self.f(xi, u, wi) for xi, wi in zip(x, np.broadcast_to(w, (len(x), np.shape(w)[-1])))])

    def output(self, x, u, v) -> Array:
        if self.vectorized or np.ndim(x) == 1:
            return self.h(x, u, v)
        return np.stack([self.h(xi, u, vi) for xi, vi in zip(x, np.broadcast_to(v, (len(x), np.shape(v)[-1])))])

    def in_box(self, attr: str, z, tol: float = 0.0) -> bool:
        lo, hi = getattr(self, attr)
        z = np.asarray(z)
        return bool(np.all(z >= lo - tol) and np.all(z <= hi + tol))


class LinearSystemModel(SystemModel):
    """``x' = A x + B u + G w``, ``y = C x + D u + v`` (``G`` defaults to identity)."""

    def __init__(self, A, B=None, C=None, D=None, G=None, *, with_noise: bool = True,
                 X=None, W=None, V=None, Y=None, name: str = "linear"):
        A = _frozen(np.atleast_2d(A), 2)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A must be square")
        B = _frozen(np.zeros((n, 0)) if B is None else np.atleast_2d(B).reshape(n, -1), 2)
        C = _frozen(np.eye(n) if C is None else np.atleast_2d(C), 2)
        if C.shape[1] != n:
            raise DimensionError("C must have n columns")
        p, m = C.shape[0], B.shape[1]
        D = _frozen(np.zeros((p, m)) if D is None else np.atleast_2d(D).reshape(p, m), 2)
        G = _frozen(np.eye(n) if G is None else np.atleast_2d(G).reshape(n, -1), 2)
        q = G.shape[1]
        pv = p if with_noise else 0

        def f(x, u, w):
            return x @ A.T + (np.asarray(u) @ B.T if m else 0.0) + np.asarray(w) @ G.T

        def h(x, u, v):
            y = x @ C.T + (np.asarray(u) @ D.T if m else 0.0)
            return y + v if pv else y

        super().__init__(f=f, h=h, state_dim=n, input_dim=m, output_dim=p,
                         disturbance_dim=q, noise_dim=pv, X=X, W=W, V=V, Y=Y,
                         vectorized=True, name=name)
        for k, v in dict(A=A, B=B, C=C, D=D, G=G).items():
            object.__setattr__(self, k, v)

    def __repr__(self):
        return f"LinearSystemModel(n={self.state_dim}, m={self.input_dim}, p={self.output_dim})"

    def __eq__(self, other):
        if not isinstance(other, LinearSystemModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "ABCDG") \
            and self.noise_dim == other.noise_dim

    __hash__ = object.__hash__

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in "ABCDG"}
        d["with_noise"] = bool(self.noise_dim)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSystemModel":
        return cls(d["A"], d.get("B"), d.get("C"), d.get("D"), d.get("G"),
                   with_noise=d.get("with_noise", True))


# ---------------------------------------------------------------------------
# json helpers


def to_json(obj, **kw) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.bool_):
            return bool(o)
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, WeightedNorm):
            return o.to_list()
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return json.dumps(obj, default=default, **kw)


def matrix_from_json(m) -> Array:
    """Row-major nested list, or ``{"diag": [...]}`` / ``{"scale": s, "diag": [...]}``."""
    if isinstance(m, dict):
        return float(m.get("scale", 1.0)) * np.diag(np.asarray(m["diag"], dtype=float))
    return np.atleast_2d(np.asarray(m, dtype=float))
