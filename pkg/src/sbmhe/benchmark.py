"""Built-in benchmark systems.

``benchmark6d`` is a six-state surrogate for a pituitary-thyroid feedback loop:
a thyroid T4 store driven by TSH, peripheral T4, peripheral and central T3
produced from T4 with saturation, and peripheral/pituitary TSH with the
pituitary production inhibited by central T3. States are in raw concentration
units; the right-hand side is written in rescaled units ``z = x / scale``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LinearSystemModel, SystemModel, WeightedNorm

# true initial state and prior of the surrogate experiment (raw units)
X0_6D = np.array([4.4e-13, 2.1e-8, 9.6e-10, 2.1e-9, 4.5, 4.8])
PRIOR_6D = np.array([7.4e-13, 1.4e-8, 4.2e-10, 9e-10, 7.7, 8.2])
W_BOUNDS_6D = np.array([1e-13, 0.6])
V_BOUNDS_6D = np.array([5e-10, 3e-11, 0.05])


@dataclass(frozen=True)
class Benchmark6dParams:
    scale: tuple = (1e-12, 1e-8, 1e-9, 1e-9, 1.0, 1.0)
    g1: float = 0.22 * 6.5 / 4.5     # TSH-stimulated T4 synthesis
    d1: float = 2.0
    b1: float = 0.5
    c2: float = 0.1 * 2.1 / 0.44     # T4 secretion
    b2: float = 0.1
    c3: float = 0.7 * 0.96 * 4.1 / 2.1
    k3: float = 2.0
    b3: float = 0.7
    c4: float = 0.5 * 4.1
    k4: float = 2.0
    b4: float = 0.5
    c5: float = 0.1 * 4.5 / 4.8      # TSH release
    b5: float = 0.1
    a6: float = 0.05 * 4.8 * 2.05    # pituitary TSH synthesis
    k6: float = 0.5
    b6: float = 0.05

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Benchmark6dParams":
        d = dict(d)
        if "scale" in d:
            d["scale"] = tuple(d["scale"])
        return cls(**d)


def benchmark6d(params: Benchmark6dParams = Benchmark6dParams(), w_bounds=W_BOUNDS_6D,
                v_bounds=V_BOUNDS_6D, nonnegative: bool = True) -> SystemModel:
    """Six-state surrogate; disturbance on states 1 and 6, outputs ``(x2, x3, x5) + v``."""
    p = params
    s = np.asarray(p.scale, dtype=float)
    w_bounds = np.asarray(w_bounds, dtype=float)
    v_bounds = np.asarray(v_bounds, dtype=float)

    inv = 1.0 / s

    def f(x, u, w):
        z = x * inv
        z1, z2, z4, z5, z6 = z[..., 0], z[..., 1], z[..., 3], z[..., 4], z[..., 5]
        w = np.asarray(w)
        dx = np.empty(np.broadcast_shapes(z.shape, w.shape[:-1] + (6,)))
        dx[..., 0] = s[0] * (p.g1 * z5 / (p.d1 + z5) - p.b1 * z1) + w[..., 0]
        dx[..., 1] = s[1] * (p.c2 * z1 - p.b2 * z2)
        dx[..., 2] = s[2] * (p.c3 * z2 / (p.k3 + z2) - p.b3 * z[..., 2])
        dx[..., 3] = s[3] * (p.c4 * z2 / (p.k4 + z2) - p.b4 * z4)
        dx[..., 4] = s[4] * (p.c5 * z6 - p.b5 * z5)
        dx[..., 5] = s[5] * (p.a6 / (1.0 + p.k6 * np.maximum(z4, 0.0)) - p.b6 * z6) + w[..., 1]
        return dx

    def h(x, u, v):
        return x[..., [1, 2, 4]] + v

    X = (np.zeros(6), np.full(6, np.inf)) if nonnegative else None
    return SystemModel(f=f, h=h, state_dim=6, input_dim=0, output_dim=3, disturbance_dim=2,
                       noise_dim=3, X=X, W=(-w_bounds, w_bounds), V=(-v_bounds, v_bounds),
                       vectorized=True, name="benchmark6d")


@dataclass(frozen=True)
class Benchmark6dTuning:
    """Estimator weights of the surrogate experiment (raw units, time in days)."""

    eta: float = 0.35
    horizon: float = 5.0
    P2: WeightedNorm = field(default_factory=lambda: WeightedNorm.diag([1, 5, 1, 1, 1, 1]))
    Qw: WeightedNorm = field(default_factory=lambda: WeightedNorm.diag([1.39e-3, 1.39e-4]))
    Qv: WeightedNorm = field(default_factory=lambda: WeightedNorm.diag([100, 100, 10]))
    R: WeightedNorm = field(default_factory=lambda: WeightedNorm.diag([200, 150, 100]))


def harmonic_oscillator(with_noise: bool = True) -> LinearSystemModel:
    return LinearSystemModel([[0.0, 1.0], [-1.0, 0.0]], C=[[1.0, 0.0]], with_noise=with_noise,
                             name="oscillator")


def linear_benchmark_2d(with_noise: bool = True) -> LinearSystemModel:
    """Lightly unstable oscillation (eigenvalues ``0.1 +- 0.995i``) observed through its first state."""
    return LinearSystemModel([[0.0, 1.0], [-1.0, 0.2]], C=[[1.0, 0.0]], with_noise=with_noise,
                             name="linear2d")


BUILTIN_MODELS = {
    "benchmark6d": benchmark6d,
    "oscillator": harmonic_oscillator,
    "linear2d": linear_benchmark_2d,
}
