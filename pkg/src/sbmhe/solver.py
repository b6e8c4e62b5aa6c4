"""Box-constrained Levenberg-Marquardt for residual stacks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Array


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    cost_tolerance: float = 1e-8
    damping_init: float = 1e-3
    fd_step: float = 1e-6

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LMResult:
    x: Array
    residual: Array
    cost: float
    iterations: int
    gradient_norm: float
    converged: bool
    message: str
    nfev: int


def fd_jacobian(batch_fun: Callable, x: Array, r0: Array, typical: Array, rel_step: float) -> Array:
    """Forward differences with step ``rel_step * max(|x_j|, typical_j)``; columns evaluated as one batch."""
    h = rel_step * np.maximum(np.abs(x), typical)
    X = x[None, :] + np.diag(h)
    R = batch_fun(X)
    return ((R - r0[None, :]) / h[:, None]).T


def _projected_gradient(g, x, lo, hi):
    pg = g.copy()
    at_lo = (x <= lo) & (g > 0)
    at_hi = (x >= hi) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg, at_lo | at_hi


def _bounded_step(J, JtJ, d, r, x, lo, hi, free, mu):
    """Damped Gauss-Newton step; free variables whose step would cross a bound are
    pinned to that bound and the remaining ones re-solved."""
    free = free.copy()
    delta = np.zeros(x.size)
    pinned = np.zeros(x.size, dtype=bool)
    for _ in range(x.size + 1):
        rhs = -(J[:, free].T @ (r + J[:, pinned] @ delta[pinned]))
        A = JtJ[np.ix_(free, free)] + mu * np.diag(d[free])
        delta[free] = np.linalg.solve(A, rhs) if free.any() else delta[free]
        trial = x + delta
        cross = free & ((trial < lo) | (trial > hi))
        if not cross.any():
            break
        delta[cross] = np.clip(trial[cross], lo[cross], hi[cross]) - x[cross]
        pinned |= cross
        free &= ~cross
    return delta


def levenberg_marquardt(fun: Callable, jac: Callable, x0: Array, lo: Optional[Array] = None,
                        hi: Optional[Array] = None, typical: Optional[Array] = None,
                        options: SolverOptions = SolverOptions()) -> LMResult:
    """Minimise ``|fun(x)|^2`` over the box ``[lo, hi]``.

    Variables held at an active bound are frozen for the step and those whose
    step would leave the box are pinned to the bound it crosses. The gradient
    test uses the gradient scaled by ``typical``. Damping follows Nielsen's update with Marquardt
    (diagonal) scaling. ``jac(x, r)`` returns the Jacobian at ``x``.
    """
    n = x0.size
    lo = np.full(n, -np.inf) if lo is None else lo
    hi = np.full(n, np.inf) if hi is None else hi
    typical = np.ones(n) if typical is None else typical
    x = np.clip(x0.astype(float), lo, hi)
    r = fun(x)
    nfev = 1
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite residual at the initial point")
    cost = float(r @ r)
    mu, nu = options.damping_init, 2.0
    gnorm = np.inf
    message = "maximum iterations reached"
    converged = False
    it = 0
    J = None
    for it in range(options.max_iterations + 1):
        if J is None:
            J = jac(x, r)
            nfev += n
        g = 2.0 * (J.T @ r)
        pg, active = _projected_gradient(g, x, lo, hi)
        gnorm = float(np.linalg.norm(pg * typical))
        if gnorm <= options.gradient_tolerance * (1.0 + cost):
            converged, message = True, "gradient tolerance"
            break
        if it == options.max_iterations:
            break
        free = ~active
        JtJ = J.T @ J
        d = np.maximum(np.diag(JtJ), 1e-12 * max(np.diag(JtJ).max(initial=0.0), 1e-300))
        step_taken = False
        while not step_taken:
            try:
                delta = _bounded_step(J, JtJ, d, r, x, lo, hi, free, mu)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            x_new = np.clip(x + delta, lo, hi)
            step = x_new - x
            if np.all(np.abs(step) <= options.step_tolerance * (np.abs(x) + typical)):
                converged, message = True, "step tolerance"
                break
            r_new = fun(x_new)
            nfev += 1
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            lin = r + J @ step
            pred = cost - float(lin @ lin)
            rho = (cost - cost_new) / pred if pred > 0 else -1.0
            if cost_new < cost and rho > 1e-4:
                small = cost - cost_new <= options.cost_tolerance * cost
                x, r, cost = x_new, r_new, cost_new
                if small:
                    converged, message = True, "cost tolerance"
                    break
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                step_taken = True
                J = None
            else:
                mu *= nu
                nu *= 2.0
                if mu > 1e20:
                    message = "damping exhausted"
                    break
        if converged or message == "damping exhausted":
            break
    return LMResult(x=x, residual=r, cost=cost, iterations=it, gradient_norm=gnorm,
                    converged=converged, message=message, nfev=nfev)
