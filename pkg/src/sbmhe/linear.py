"""Linear sample-based observability: O_s matrices, spectral splitting, zero bounds,
sampling design and observer-based detectability certificates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

from .core import Array, DimensionError, LinearSystemModel, ScheduleError

EPS = np.finfo(float).eps
# eigenvalues with |Re| below this are treated as not asymptotically stable
STABILITY_TOL = 1e-9


class CertificateError(ValueError):
    """Raised when (A, C) is not detectable; carries the offending eigenvalue."""

    def __init__(self, eigenvalue: complex):
        super().__init__(f"pair (A, C) is not detectable: unobservable eigenvalue {eigenvalue:.6g}")
        self.eigenvalue = eigenvalue


def matrix_exp(A, t: float = 1.0) -> Array:
    """``exp(A t)`` by scaling and squaring with a Pade approximant."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)) or not math.isfinite(t):
        raise ValueError("matrix_exp needs finite input")
    At = A * t
    # exp overflows once the spectral abscissa of At exceeds ~709
    if np.linalg.norm(At, 1) > 700 and np.max(np.linalg.eigvals(At).real) > 700:
        raise OverflowError("matrix exponential overflows for this A*t")
    with np.errstate(over="raise", invalid="raise"):
        try:
            E = scipy.linalg.expm(At)
        except FloatingPointError as exc:
            raise OverflowError("matrix exponential overflows for this A*t") from exc
    if not np.all(np.isfinite(E)):
        raise OverflowError("matrix exponential overflows for this A*t")
    return E


def numerical_rank(M: Array) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > max(M.shape) * EPS * s[0])) if s[0] > 0 else 0


# ---------------------------------------------------------------------------
# sample-based observability matrix


@dataclass(frozen=True)
class SampleObservabilityMatrix:
    A: Array
    C: Array
    instants: Array
    blocks: tuple = field(repr=False)
    matrix: Array = field(repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def shifted(self, shift: float) -> Array:
        """``O_s exp(-A shift)``, built block-wise as ``C exp(A (tau_j - shift))``."""
        if len(self.instants) == 0:
            return np.zeros((0, self.n))
        return np.vstack([self.C @ matrix_exp(self.A, tau - shift) for tau in self.instants])


def build_Os(sys: LinearSystemModel, instants) -> SampleObservabilityMatrix:
    A, C = _pair(sys)
    tau = np.asarray(instants, dtype=float).ravel()
    if tau.size and tau[0] < 0:
        raise ScheduleError("sample instants must be nonnegative")
    if np.any(np.diff(tau) <= 0):
        raise ScheduleError("sample instants must be strictly increasing (duplicate instant?)")
    blocks = tuple(C @ matrix_exp(A, t) for t in tau)
    M = np.vstack(blocks) if blocks else np.zeros((0, A.shape[0]))
    return SampleObservabilityMatrix(A, C, tau, blocks, M)


def os_certificate(O: SampleObservabilityMatrix, shift: float = 0.0) -> tuple:
    """Numerical rank of ``O_s`` and ``sigma_min(O_s exp(-A shift))``."""
    if not math.isfinite(shift):
        raise ValueError("shift must be finite")
    M = O.shifted(shift)
    rank = numerical_rank(O.matrix) if O.matrix.size else 0
    if M.shape[0] < O.n:
        return rank, 0.0
    s = np.linalg.svd(M, compute_uv=False)
    return rank, float(s[-1])


def _pair(sys):
    if isinstance(sys, LinearSystemModel):
        return np.asarray(sys.A), np.asarray(sys.C)
    A, C = sys
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.zeros((0, A.shape[0])) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    return A, C


# ---------------------------------------------------------------------------
# stable / unstable split


@dataclass(frozen=True)
class SpectralSplit:
    """Ordered real Schur split ``A = Z S Z^T`` with the stable block first.

    ``T_J`` additionally decouples the blocks:
    ``T_J^{-1} A T_J = diag(A_s, A_us)`` and ``C T_J = [C_s, C_us]``.
    """

    Z: Array
    schur: Array
    n_stable: int
    A_s: Array
    A_us: Array
    coupling: Array
    T_J: Array
    C_s: Array
    C_us: Array
    eigenvalues: Array

    @property
    def n_unstable(self) -> int:
        return self.A_us.shape[0]

    def reconstruct(self) -> Array:
        return self.Z @ self.schur @ self.Z.T

    def reconstruct_decoupled(self) -> Array:
        AJ = scipy.linalg.block_diag(self.A_s, self.A_us)
        return self.T_J @ AJ @ np.linalg.inv(self.T_J)


def split_spectrum(sys) -> SpectralSplit:
    A, C = _pair(sys)
    n = A.shape[0]
    S, Z, sdim = scipy.linalg.schur(A, output="real", sort=lambda re, im: re < -STABILITY_TOL)
    ns = int(sdim)
    A_s, A_us, X = S[:ns, :ns], S[ns:, ns:], S[:ns, ns:]
    # A_s Y - Y A_us = -X removes the coupling block
    if 0 < ns < n:
        Y = scipy.linalg.solve_sylvester(A_s, -A_us, -X)
    else:
        Y = np.zeros((ns, n - ns))
    U = np.eye(n)
    U[:ns, ns:] = Y
    T_J = Z @ U
    CJ = C @ T_J
    return SpectralSplit(Z=Z, schur=S, n_stable=ns, A_s=A_s, A_us=A_us, coupling=X, T_J=T_J,
                         C_s=CJ[:, :ns], C_us=CJ[:, ns:], eigenvalues=np.linalg.eigvals(A))


# ---------------------------------------------------------------------------
# zero-count bound


def eigenvalue_indices(A) -> list:
    """Distinct eigenvalues with their index (size of the largest Jordan block).

    Eigenvalues closer than ``1e-6 max(1, |A|)`` are merged. The index is the
    smallest ``j`` at which ``(A - lam I)^j`` reaches rank ``n - m``, ``m``
    being the cluster's algebraic multiplicity.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if n == 0:
        return []
    scale = max(1.0, np.linalg.norm(A, 2))
    ev = np.linalg.eigvals(A)
    clusters: list = []
    for lam in sorted(ev, key=lambda z: (z.real, z.imag)):
        for c in clusters:
            if abs(lam - np.mean(c)) < 1e-6 * scale:
                c.append(lam)
                break
        else:
            clusters.append([lam])
    out = []
    for c in clusters:
        lam, m = complex(np.mean(c)), len(c)
        N = A.astype(complex) - lam * np.eye(n)
        Nj = np.eye(n, dtype=complex)
        index = m
        for j in range(1, m + 1):
            Nj = Nj @ N
            s = np.linalg.svd(Nj, compute_uv=False)
            thresh = 1e-5 * max(1.0, np.linalg.norm(N, 2)) ** j
            if s[n - m] <= thresh:
                index = j
                break
        out.append((lam, index, m))
    return out


def k_star(sys, T: float) -> float:
    """Upper bound ``r - 1 + T delta / (2 pi)`` on the zeros of ``t -> C e^{At} x``."""
    if not T > 0:
        raise ValueError("window length T must be positive")
    A, _ = _pair(sys)
    idx = eigenvalue_indices(A)
    if not idx:
        raise DimensionError("k* needs a nonempty state")
    r = sum(i for _, i, _ in idx)
    im = [lam.imag for lam, _, _ in idx]
    delta = max(im) - min(im)
    return r - 1 + T * delta / (2 * math.pi)


def samples_needed(kstar: float) -> int:
    """Smallest integer strictly greater than ``k*``."""
    return int(math.floor(kstar + 1e-9)) + 1


def design_schedule(sys_us, T: float, eps: float, n_windows: int = 1) -> list:
    """``k > k*`` equally spaced instants in each window ``[jT, (j+1)T)``.

    Spacing is ``T/k``, which is at least ``eps`` whenever the design is
    feasible (``k eps <= T``, so separation also holds across window borders).
    An empty unstable block needs no samples and yields empty windows.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    A, _ = _pair(sys_us)
    if A.size == 0:
        return [[] for _ in range(n_windows)]
    k = samples_needed(k_star((A, None), T))
    if k * eps > T * (1 + 1e-12):
        raise ScheduleError(f"eps={eps} too large: {k} samples with separation eps do not fit in T={T}")
    spacing = T / k
    return [[j * T + l * spacing for l in range(k)] for j in range(n_windows)]


def window_table(sys, windows: list, T: float) -> list:
    """Per-window rank and ``sigma_min(O_s exp(-A jT))`` for designed windows."""
    rows = []
    for j, inst in enumerate(windows):
        O = build_Os(sys, inst)
        rank, smin = os_certificate(O, j * T)
        rows.append({"window": j, "start": j * T, "instants": list(inst), "rank": rank, "sigma_min": smin})
    return rows


def sliding_sigma_min(sys, instants, T: float, t_grid) -> Array:
    """``sigma_min(O_s exp(-A (t - T)))`` over the samples in ``[t - T, t]`` for each ``t``."""
    inst = np.asarray(instants, dtype=float)
    out = []
    for t in t_grid:
        sel = inst[(inst >= t - T - 1e-12) & (inst <= t + 1e-12)]
        out.append(os_certificate(build_Os(sys, sel), t - T)[1])
    return np.asarray(out)


# ---------------------------------------------------------------------------
# observer-based certificate


@dataclass(frozen=True)
class DetectabilityCertificateLinear:
    """``|exp((A - L C) t)| <= c exp(-lam t)`` on ``[0, T_ver]`` plus the linear gains it implies."""

    L: Array
    A_L: Array
    c: float
    lam: float
    T_ver: float
    method: str
    eigenvalues: Array

    @property
    def gains(self) -> dict:
        # coefficients of alpha, alpha_x, gamma_1, gamma_2, gamma_3 (all linear) and eta
        Ln = float(np.linalg.norm(self.L, 2)) if self.L.size else 0.0
        return {"alpha": 1.0, "alpha_x": self.c, "gamma_1": self.c, "gamma_2": self.c * Ln,
                "gamma_3": self.c * Ln, "eta": self.lam}

    def envelope_margin(self, times) -> float:
        return float(min(self.c * math.exp(-self.lam * t) - np.linalg.norm(matrix_exp(self.A_L, t), 2)
                         for t in times))

    def to_dict(self) -> dict:
        return {"L": self.L.tolist(), "c": self.c, "lambda": self.lam, "T_ver": self.T_ver,
                "method": self.method,
                "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues]}


def unobservable_modes(A, C, only_unstable: bool = True) -> list:
    n = A.shape[0]
    bad = []
    for lam in np.linalg.eigvals(A):
        if only_unstable and lam.real < -STABILITY_TOL:
            continue
        M = np.vstack([A - lam * np.eye(n), C.astype(complex)])
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] <= 1e-9 * max(1.0, s[0]):
            bad.append(complex(lam))
    return bad


def _place(A, C, margin):
    n = A.shape[0]
    poles = -margin * (1.0 + 0.25 * np.arange(n))
    if n == 1:
        # scalar: L = (a + margin) / c solves a - L c = -margin directly
        if C.shape[0] != 1 or C[0, 0] == 0:
            raise ValueError("scalar output needed")
        return ((A[0, 0] + margin) / C[0, 0]) * np.ones((1, 1))
    res = scipy.signal.place_poles(A.T, C.T, poles)
    return res.gain_matrix.T


def _riccati(A, C, margin):
    n, p = A.shape[0], C.shape[0]
    alpha = margin
    for _ in range(40):
        try:
            P = scipy.linalg.solve_continuous_are((A + alpha * np.eye(n)).T, C.T, np.eye(n), np.eye(p))
            L = P @ C.T
            if np.max(np.linalg.eigvals(A - L @ C).real) < 0:
                return L
        except (np.linalg.LinAlgError, ValueError):
            pass
        alpha *= 0.5
    P = scipy.linalg.solve_continuous_are(A.T, C.T, np.eye(n), np.eye(p))
    return P @ C.T


def compute_observer_certificate(sys, target_margin: float = 1.0, T_ver: float = 20.0,
                                 n_grid: int = 4000, slack: float = 1e-3) -> DetectabilityCertificateLinear:
    """Observer gain making ``A - L C`` Hurwitz and a decay envelope for ``exp((A - L C) t)``.

    ``c`` is the grid maximum of ``|exp((A_L + lam I) t)|`` inflated by
    ``exp(|A_L + lam I| h)``, which bounds the function between grid points.
    """
    A, C = _pair(sys)
    n = A.shape[0]
    bad = unobservable_modes(A, C)
    if bad:
        raise CertificateError(bad[0])
    ev = np.linalg.eigvals(A)
    if np.max(ev.real) <= -target_margin:
        L, method = np.zeros((n, C.shape[0])), "zero"
    else:
        L, method = None, "place"
        if not unobservable_modes(A, C, only_unstable=False):
            try:
                L = _place(A, C, target_margin)
                if not np.all(np.isfinite(L)) or np.linalg.norm(L, 2) > 1e6:
                    L = None
            except (ValueError, np.linalg.LinAlgError):
                L = None
        if L is None:
            L, method = _riccati(A, C, target_margin), "riccati"
    A_L = A - L @ C
    abscissa = float(np.max(np.linalg.eigvals(A_L).real))
    if abscissa >= 0:
        raise CertificateError(complex(abscissa))
    lam = -abscissa * (1 - slack)
    h = T_ver / n_grid
    shifted = A_L + lam * np.eye(n)
    step = matrix_exp(shifted, h)
    E = np.eye(n)
    cmax = 1.0
    for k in range(1, n_grid + 1):
        E = E @ step
        if k % 64 == 0:
            # refresh against accumulated round-off
            E = matrix_exp(shifted, k * h)
        cmax = max(cmax, float(np.linalg.norm(E, 2)))
    c = cmax * math.exp(np.linalg.norm(shifted, 2) * h)
    return DetectabilityCertificateLinear(L=L, A_L=A_L, c=float(c), lam=float(lam), T_ver=T_ver,
                                          method=method, eigenvalues=np.linalg.eigvals(A_L))
