"""Experiment configuration: JSON schema, validation and object construction.

A config file holds one experiment::

    {
      "name": "linear2d",            # output subdirectory
      "seed": 0,
      "dt": 0.05, "t_end": 40.0,
      "model": {"kind": "linear", "A": [[0, 1], [-1, 0.2]], "C": [[1, 0]]},
      "schedule": {"kind": "random", "mean_gap": 1.25, "jitter": 0.6, "seed": 3},
      "noise": {"w_bounds": [0.05, 0.05], "v_bounds": [0.05]},
      "x0": [1, -1], "prior": [0, 0],
      "mhe": {"horizon": 4, "eta": 0.5, "P2": {"diag": [1, 1]}, "Qw": ..., "Qv": ..., "R": ...},
      "analysis": {"T": 6.283, "epsilon": 0.5, "n_windows": 6},
      "certificates": {"pairs": 100, "params": "certified"}
    }

Model kinds: ``linear`` (``A`` required; ``B, C, D, G`` optional, ``with_noise``,
boxes ``X, W, V, Y`` as ``[lo, hi]``), ``builtin`` (``name`` in
:data:`BUILTIN_MODELS`, optional ``params``) and ``external`` (``factory`` as
``"module:callable"`` returning a :class:`SystemModel`, optional ``kwargs``).
Schedule kinds: ``instants``, ``gaps``, ``random`` (gaps uniform on
``mean_gap * [1 - jitter, 1 + jitter]``) and ``designed`` (built from the
linear model's unstable part with ``T``/``epsilon``). Matrices are nested
lists or ``{"diag": [...], "scale": s}``.
"""
from __future__ import annotations

import hashlib
import importlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import benchmark
from .core import (GRID_TOL, LinearSystemModel, SamplingSchedule, ScheduleError, SystemModel,
                   WeightedNorm, matrix_from_json)
from .solver import SolverOptions


class ConfigError(ValueError):
    """Validation failure; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def _req(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return d[key]


def _num(v, path: str, positive: bool = False, nonneg: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(path, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(path, "must be nonnegative")
    return float(v)


def _vec(v, path: str, dim: Optional[int] = None) -> list:
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a list of numbers") from None
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(path, "expected a flat list of finite numbers")
    if dim is not None and arr.size != dim:
        raise ConfigError(path, f"expected length {dim}, got {arr.size}")
    return [float(a) for a in arr]


def _matrix(v, path: str) -> np.ndarray:
    try:
        return matrix_from_json(v)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, f"invalid matrix ({exc})") from None


def _norm(v, path: str, dim: int) -> WeightedNorm:
    M = _matrix(v, path)
    if M.shape != (dim, dim):
        raise ConfigError(path, f"expected a {dim}x{dim} matrix, got shape {M.shape}")
    try:
        return WeightedNorm(M)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _keys(d: Any, allowed: set, path: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(path or "<root>", "expected an object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}" if path else sorted(extra)[0], "unknown field")
    return d


# ---------------------------------------------------------------------------
# sections (raw JSON values are kept so that serialize(parse(x)) round-trips)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    data: dict

    KINDS = ("linear", "builtin", "external")

    @classmethod
    def parse(cls, d, path="model") -> "ModelSpec":
        d = _keys(d, {"kind", "A", "B", "C", "D", "G", "with_noise", "X", "W", "V", "Y", "name",
                      "params", "factory", "kwargs"}, path)
        kind = _req(d, "kind", path)
        if kind not in cls.KINDS:
            raise ConfigError(f"{path}.kind", f"must be one of {cls.KINDS}")
        data = {k: v for k, v in d.items() if k != "kind"}
        spec = cls(kind, data)
        spec.build(path)
        return spec

    def build(self, path="model") -> SystemModel:
        d = self.data
        if self.kind == "linear":
            A = _matrix(_req(d, "A", path), f"{path}.A")
            mats = {k: _matrix(d[k], f"{path}.{k}") for k in "BCDG" if d.get(k) is not None}
            boxes = {k: (np.asarray(d[k][0], float), np.asarray(d[k][1], float))
                     for k in "XWVY" if d.get(k) is not None}
            try:
                return LinearSystemModel(A, mats.get("B"), mats.get("C"), mats.get("D"), mats.get("G"),
                                         with_noise=bool(d.get("with_noise", True)), **boxes)
            except ValueError as exc:
                raise ConfigError(path, str(exc)) from None
        if self.kind == "builtin":
            name = _req(d, "name", path)
            if name not in benchmark.BUILTIN_MODELS:
                raise ConfigError(f"{path}.name", f"unknown builtin model {name!r}")
            if name == "benchmark6d":
                params = benchmark.Benchmark6dParams.from_dict(d.get("params", {}))
                return benchmark.benchmark6d(params)
            return benchmark.BUILTIN_MODELS[name](**d.get("params", {}))
        target = _req(d, "factory", path)
        mod_name, _, attr = str(target).partition(":")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError, ValueError) as exc:
            raise ConfigError(f"{path}.factory", f"cannot import {target!r} ({exc})") from None
        model = factory(**d.get("kwargs", {}))
        if not isinstance(model, SystemModel):
            raise ConfigError(f"{path}.factory", "factory did not return a SystemModel")
        return model

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.data}


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    data: dict

    KINDS = ("instants", "gaps", "random", "designed")

    @classmethod
    def parse(cls, d, path="schedule") -> "ScheduleSpec":
        d = _keys(d, {"kind", "instants", "gaps", "d_max", "mean_gap", "jitter", "seed", "T", "epsilon"},
                  path)
        kind = _req(d, "kind", path)
        if kind not in cls.KINDS:
            raise ConfigError(f"{path}.kind", f"must be one of {cls.KINDS}")
        if kind == "instants":
            _vec(_req(d, "instants", path), f"{path}.instants")
        elif kind == "gaps":
            _vec(_req(d, "gaps", path), f"{path}.gaps")
        elif kind == "random":
            _num(_req(d, "mean_gap", path), f"{path}.mean_gap", positive=True)
            j = _num(d.get("jitter", 0.5), f"{path}.jitter", nonneg=True)
            if j >= 1:
                raise ConfigError(f"{path}.jitter", "must be < 1")
        else:
            _num(_req(d, "T", path), f"{path}.T", positive=True)
            _num(_req(d, "epsilon", path), f"{path}.epsilon", positive=True)
        if "d_max" in d:
            _num(d["d_max"], f"{path}.d_max", positive=True)
        return cls(kind, {k: v for k, v in d.items() if k != "kind"})

    def build(self, model: SystemModel, dt: float, horizon_end: float, seed: int,
              path="schedule") -> SamplingSchedule:
        d = self.data
        try:
            if self.kind == "instants":
                return SamplingSchedule.from_instants(d["instants"], d.get("d_max"), horizon_end)
            if self.kind == "gaps":
                return SamplingSchedule.from_gaps(d["gaps"], d.get("d_max"), horizon_end)
            if self.kind == "random":
                return SamplingSchedule.random(d["mean_gap"], d.get("jitter", 0.5), horizon_end,
                                               int(d.get("seed", seed)), grid_step=dt)
            from .linear import design_schedule, split_spectrum
            if not isinstance(model, LinearSystemModel):
                raise ConfigError(f"{path}.kind", "designed schedules need a linear model")
            T = d["T"]
            n_windows = max(1, int(math.ceil(horizon_end / T)))
            split = split_spectrum(model)
            windows = design_schedule((split.A_us, split.C_us), T, d["epsilon"], n_windows)
            inst = sorted({round(t / dt) * dt for w in windows for t in w})
            if not inst:
                inst = [dt * round(k * T / dt) for k in range(n_windows + 1)]
            return SamplingSchedule.from_instants(inst, d.get("d_max"), horizon_end)
        except ScheduleError as exc:
            raise ConfigError(path, str(exc)) from None

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.data}


@dataclass(frozen=True)
class MheSpec:
    horizon: float
    eta: float
    P2: Any
    Qw: Any
    R: Any
    Qv: Any = None
    constraint_handling: str = "projection"
    penalty_weight: float = 1e6
    solver: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, d, path="mhe") -> "MheSpec":
        d = _keys(d, {f.name for f in fields(cls)}, path)
        _num(_req(d, "horizon", path), f"{path}.horizon", positive=True)
        _num(_req(d, "eta", path), f"{path}.eta", positive=True)
        for k in ("P2", "Qw", "R"):
            _req(d, k, path)
        if d.get("constraint_handling", "projection") not in ("projection", "penalty"):
            raise ConfigError(f"{path}.constraint_handling", "must be 'projection' or 'penalty'")
        solver = _keys(d.get("solver", {}), {f.name for f in fields(SolverOptions)}, f"{path}.solver")
        return cls(**{**d, "solver": dict(solver)})

    def build(self, model: SystemModel, dt: float, path="mhe"):
        from .mhe import MheConfig
        qv = _norm(self.Qv, f"{path}.Qv", model.noise_dim) if model.noise_dim else None
        if model.noise_dim and self.Qv is None:
            raise ConfigError(f"{path}.Qv", "required when the model has measurement noise")
        try:
            return MheConfig(horizon=self.horizon, eta=self.eta,
                             P2=_norm(self.P2, f"{path}.P2", model.state_dim),
                             Qw=_norm(self.Qw, f"{path}.Qw", model.disturbance_dim),
                             Qv=qv, R=_norm(self.R, f"{path}.R", model.output_dim), dt=dt,
                             solver=SolverOptions(**self.solver),
                             constraint_handling=self.constraint_handling,
                             penalty_weight=self.penalty_weight)
        except ScheduleError as exc:
            raise ConfigError(f"{path}.horizon", f"not a multiple of dt ({exc})") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AnalysisSpec:
    T: float
    epsilon: float
    n_windows: int = 4
    target_margin: float = 1.0
    T_ver: float = 20.0
    P1: Any = None

    @classmethod
    def parse(cls, d, path="analysis") -> "AnalysisSpec":
        d = _keys(d, {f.name for f in fields(cls)}, path)
        _num(_req(d, "T", path), f"{path}.T", positive=True)
        _num(_req(d, "epsilon", path), f"{path}.epsilon", positive=True)
        _num(d.get("target_margin", 1.0), f"{path}.target_margin", positive=True)
        if int(d.get("n_windows", 4)) < 1:
            raise ConfigError(f"{path}.n_windows", "must be at least 1")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CertificateSpec:
    pairs: int = 100
    params: Any = "certified"
    check: str = "exp"
    T: Optional[float] = None
    epsilon: Optional[float] = None
    t_end: Optional[float] = None
    eta: float = 0.1
    state_scale: float = 1.0
    adversarial: bool = False

    @classmethod
    def parse(cls, d, path="certificates") -> "CertificateSpec":
        d = _keys(d, {f.name for f in fields(cls)}, path)
        pairs = d.get("pairs", 100)
        if isinstance(pairs, bool) or not isinstance(pairs, int) or pairs < 0:
            raise ConfigError(f"{path}.pairs", "must be a nonnegative integer")
        if d.get("check", "exp") not in ("exp", "sufficient", "both"):
            raise ConfigError(f"{path}.check", "must be 'exp', 'sufficient' or 'both'")
        p = d.get("params", "certified")
        if p != "certified":
            _keys(p, {"P1", "P2", "Qw", "Qv", "R", "eta"}, f"{path}.params")
            for k in ("P1", "P2", "Qw", "R", "eta"):
                _req(p, k, f"{path}.params")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelSpec
    dt: float
    t_end: float
    seed: int = 0
    schedule: Optional[ScheduleSpec] = None
    noise: dict = field(default_factory=dict)
    x0: Optional[list] = None
    prior: Optional[list] = None
    mhe: Optional[MheSpec] = None
    analysis: Optional[AnalysisSpec] = None
    certificates: Optional[CertificateSpec] = None
    out: Optional[str] = None

    SECTIONS = {"schedule": ScheduleSpec, "mhe": MheSpec, "analysis": AnalysisSpec,
                "certificates": CertificateSpec}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _keys(d, {f.name for f in fields(cls)}, "")
        name = _req(d, "name", "")
        if not isinstance(name, str) or not name or "/" in name or name in (".", ".."):
            raise ConfigError("name", "must be a non-empty string usable as a directory name")
        model_spec = ModelSpec.parse(_req(d, "model", ""))
        model = model_spec.build()
        dt = _num(_req(d, "dt", ""), "dt", positive=True)
        t_end = _num(_req(d, "t_end", ""), "t_end", positive=True)
        if abs(t_end / dt - round(t_end / dt)) > GRID_TOL:
            raise ConfigError("t_end", "must be a multiple of dt")
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed", "must be a nonnegative integer")
        kw = {"name": name, "model": model_spec, "dt": dt, "t_end": t_end, "seed": seed}
        for key, spec in cls.SECTIONS.items():
            if d.get(key) is not None:
                kw[key] = spec.parse(d[key], key)
        noise = _keys(d.get("noise", {}), {"w_bounds", "v_bounds", "seed"}, "noise")
        if "w_bounds" in noise:
            _vec(noise["w_bounds"], "noise.w_bounds", model.disturbance_dim)
        if "v_bounds" in noise:
            _vec(noise["v_bounds"], "noise.v_bounds", model.noise_dim)
        kw["noise"] = dict(noise)
        for key in ("x0", "prior"):
            if d.get(key) is not None:
                kw[key] = _vec(d[key], key, model.state_dim)
        if d.get("out") is not None:
            kw["out"] = str(d["out"])
        cfg = cls(**kw)
        cfg.validate(model)
        return cfg

    def validate(self, model: SystemModel) -> None:
        sched = self.build_schedule(model)
        if self.mhe is not None:
            mhe = self.mhe.build(model, self.dt)
            try:
                mhe.validate(model, sched)
            except ValueError as exc:
                raise ConfigError("mhe", str(exc)) from None
        if sched is not None:
            for t in sched.instants():
                if t > self.t_end + self.dt:
                    break
                if abs(t / self.dt - round(t / self.dt)) > GRID_TOL:
                    raise ConfigError("schedule", f"instant {t} is not on the dt grid")

    def build_model(self) -> SystemModel:
        return self.model.build()

    def build_schedule(self, model: Optional[SystemModel] = None) -> Optional[SamplingSchedule]:
        if self.schedule is None:
            return None
        model = model or self.build_model()
        return self.schedule.build(model, self.dt, self.t_end + self.mhe_horizon(), self.seed)

    def mhe_horizon(self) -> float:
        return self.mhe.horizon if self.mhe is not None else 0.0

    def noise_seed(self) -> int:
        return int(self.noise.get("seed", self.seed))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), "seed": seed})

    def to_dict(self) -> dict:
        d = {"name": self.name, "seed": self.seed, "dt": self.dt, "t_end": self.t_end,
             "model": self.model.to_dict()}
        for key in self.SECTIONS:
            sec = getattr(self, key)
            if sec is not None:
                d[key] = sec.to_dict()
        if self.noise:
            d["noise"] = self.noise
        for key in ("x0", "prior", "out"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)
