"""Experiment runners behind the command-line verbs; each writes into its own directory."""
from __future__ import annotations

import json
import math
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from .certificates import (ExponentialIiossParams, certified_linear_params, check_exp_iioss_sampled,
                           check_sufficient_condition, linear_sufficient_gains, make_pair)
from .config import ConfigError, ExperimentConfig
from .core import LinearSystemModel, SamplingSchedule, Signal, WeightedNorm, matrix_from_json
from .linear import (CertificateError, build_Os, compute_observer_certificate, design_schedule, k_star,
                     samples_needed, split_spectrum, window_table)
from .mhe import horizon_condition, run_estimator, verify_rges_bound
from .sim import generate_noise, integrate, sample_outputs, with_samples, write_samples_csv, \
    write_trajectory_csv


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_sidecar(csv_path: Path, cfg: ExperimentConfig, command: str) -> None:
    """Metadata next to every CSV. No wall-clock time, so reruns are byte-identical."""
    header = csv_path.read_text().split("\n", 1)[0].split(",")
    _write_json(csv_path.with_suffix(".meta.json"), {
        "file": csv_path.name, "command": command, "config_name": cfg.name,
        "config_sha256": cfg.hash(), "seed": cfg.seed, "version": package_version(), "columns": header,
    })


def _require(cfg: ExperimentConfig, field: str):
    val = getattr(cfg, field)
    if val is None:
        raise ConfigError(field, "required for this command")
    return val


def _noise(cfg: ExperimentConfig, model, key: str, dim: int, offset: int) -> Optional[Signal]:
    bounds = cfg.noise.get(key)
    if bounds is None or dim == 0 or not np.any(np.asarray(bounds) > 0):
        return None
    return generate_noise(bounds, cfg.noise_seed() * 2 + offset, cfg.dt, cfg.t_end)


def simulate_truth(cfg: ExperimentConfig, model=None):
    model = model or cfg.build_model()
    schedule = cfg.build_schedule(model)
    if schedule is None:
        raise ConfigError("schedule", "required for this command")
    x0 = _require(cfg, "x0")
    w = _noise(cfg, model, "w_bounds", model.disturbance_dim, 0)
    v = _noise(cfg, model, "v_bounds", model.noise_dim, 1)
    traj = integrate(model, x0, None, w, cfg.t_end, cfg.dt)
    traj = with_samples(traj, sample_outputs(traj, schedule, v=v))
    return model, schedule, traj, w, v


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model, schedule, traj, w, v = simulate_truth(cfg)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_trajectory_csv(traj, out / "noisy_outputs.csv", v=v if v is not None else None)
    write_samples_csv(traj.sampled_outputs, out / "samples.csv", model.output_dim)
    for name in ("trajectory.csv", "noisy_outputs.csv", "samples.csv"):
        write_sidecar(out / name, cfg, "simulate")
    return {"command": "simulate", "n_samples": len(traj.sampled_outputs),
            "state_violations": len(traj.violations)}


def cmd_estimate(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model, schedule, traj, w, v = simulate_truth(cfg)
    mhe_cfg = _require(cfg, "mhe").build(model, cfg.dt)
    prior = _require(cfg, "prior")
    run = run_estimator(model, schedule, None, traj, mhe_cfg, prior, w=w, v=v)
    run.write_estimates_csv(out / "estimates.csv")
    run.write_diagnostics_csv(out / "diagnostics.csv")
    for name in ("estimates.csv", "diagnostics.csv"):
        write_sidecar(out / name, cfg, "estimate")
    bound = rges_report(cfg, model, schedule, run, mhe_cfg, noisy=w is not None or v is not None)
    _write_json(out / "bound.json", bound)
    err = run.error_norms()
    return {"command": "estimate", "initial_error": float(err[0]), "final_error": float(err[-1]),
            "error_ratio": float(err[-1] / err[0]) if err[0] > 0 else 0.0,
            "converged_instants": sum(r.converged for r in run.records), "instants": len(run.records),
            "all_converged": run.all_converged, "bound_holds": bound["holds"]}


def rges_report(cfg, model, schedule, run, mhe_cfg, noisy: bool) -> dict:
    """Bound check with the estimator weights; the decay rate is fitted on the noise-free run."""
    P1 = WeightedNorm(matrix_from_json(cfg.analysis.P1)) if cfg.analysis and cfg.analysis.P1 else mhe_cfg.P2
    params = ExponentialIiossParams(P1=P1, P2=mhe_cfg.P2, Qw=mhe_cfg.Qw, Qv=mhe_cfg.Qv, R=mhe_cfg.R,
                                    eta=mhe_cfg.eta)
    clean_run = run
    if noisy:
        clean = integrate(model, cfg.x0, None, None, cfg.t_end, cfg.dt)
        clean = with_samples(clean, sample_outputs(clean, schedule))
        clean_run = run_estimator(model, schedule, None, clean, mhe_cfg, cfg.prior)
    eta_tilde = verify_rges_bound(clean_run, params, 0.0).fitted_decay_rate
    if not math.isfinite(eta_tilde):
        eta_tilde = mhe_cfg.eta
    eta_tilde = max(eta_tilde, 0.0)
    rep = verify_rges_bound(run, params, eta_tilde)
    d = rep.to_dict()
    d["eta_tilde_source"] = "noise-free companion run" if noisy else "this run"
    d["fitted_decay_rate_this_run"] = d.pop("fitted_decay_rate")
    return d


def cmd_analyze_linear(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.build_model()
    if not isinstance(model, LinearSystemModel):
        raise ConfigError("model.kind", "analyze-linear needs a linear model")
    an = _require(cfg, "analysis")
    split = split_spectrum(model)
    report = {"eigenvalues": [complex(l) for l in split.eigenvalues], "unstable_dim": split.n_unstable}
    if split.n_unstable == 0:
        report.update({"k_star": None, "schedule_requirement": "any", "windows": []})
    else:
        ks = k_star((split.A_us, split.C_us), an.T)
        windows = design_schedule((split.A_us, split.C_us), an.T, an.epsilon, an.n_windows)
        report.update({"k_star": ks, "samples_per_window": samples_needed(ks),
                       "schedule_requirement": f"more than {ks:g} samples, {an.epsilon:g}-separated, "
                                               f"in every window of length {an.T:g}",
                       "windows": window_table((split.A_us, split.C_us), windows, an.T)})
    try:
        obs = compute_observer_certificate(model, an.target_margin, an.T_ver)
        report["observer"] = obs.to_dict()
        report["detectable"] = True
    except CertificateError as exc:
        report["detectable"] = False
        report["offending_eigenvalue"] = complex(exc.eigenvalue)
        report["error"] = str(exc)
    if cfg.mhe is not None:
        mhe_cfg = cfg.mhe.build(model, cfg.dt)
        P1 = WeightedNorm(matrix_from_json(an.P1)) if an.P1 is not None else mhe_cfg.P2
        val = horizon_condition(P1, mhe_cfg.P2, mhe_cfg.eta, mhe_cfg.horizon)
        report["horizon_condition"] = {"value": val, "holds": val < 1.0}
        if val >= 1.0:
            report["warnings"] = [f"horizon condition violated: 4 lambda_max(P2,P1)^2 exp(-eta M) = {val:.4g} >= 1"]
    _write_json(out / "analysis.json", report)
    return {"command": "analyze-linear", **{k: report.get(k) for k in ("k_star", "detectable")},
            "warnings": report.get("warnings", [])}


def _windows_from_instants(instants, T: float, n_windows: int) -> list:
    out = [[] for _ in range(n_windows)]
    for t in instants:
        j = int(math.floor(t / T + 1e-9))
        if j < n_windows:
            out[j].append(float(t))
    return out


def _candidate_params(cfg, model, spec, schedule, T) -> tuple:
    if spec.params == "certified":
        if not isinstance(model, LinearSystemModel):
            raise ConfigError("certificates.params", "certified parameters need a linear model")
        n_win = int(math.floor(cfg.t_end / T + 1e-9))
        windows = _windows_from_instants(schedule.instants(), T, n_win)
        try:
            cert = certified_linear_params(model, windows, T, spec.eta, cfg.dt)
        except ValueError as exc:
            raise ConfigError("certificates.params", str(exc)) from None
        return cert.params, cert.to_dict()
    p = spec.params
    qv = p.get("Qv")
    params = ExponentialIiossParams(P1=WeightedNorm(matrix_from_json(p["P1"])),
                                    P2=WeightedNorm(matrix_from_json(p["P2"])),
                                    Qw=WeightedNorm(matrix_from_json(p["Qw"])),
                                    Qv=WeightedNorm(matrix_from_json(qv)) if qv is not None else None,
                                    R=WeightedNorm(matrix_from_json(p["R"])), eta=float(p["eta"]))
    return params, params.to_dict()


def _null_direction(model: LinearSystemModel, instants) -> np.ndarray:
    """State direction least visible in the samples (right singular vector of O_s)."""
    O = build_Os(model, list(instants)).matrix
    return np.linalg.svd(O)[2][-1]


def cmd_check_certificates(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    spec = _require(cfg, "certificates")
    model = cfg.build_model()
    schedule = cfg.build_schedule(model)
    if schedule is None:
        raise ConfigError("schedule", "required for this command")
    T = spec.T or (cfg.analysis.T if cfg.analysis else None)
    eps = spec.epsilon or (cfg.analysis.epsilon if cfg.analysis else None)
    t_end = spec.t_end or cfg.t_end
    inst = [t for t in schedule.instants() if t <= t_end + 1e-12]
    report = {"pairs": spec.pairs, "check": spec.check, "violations": {}, "worst": {}, "holds": True}
    checks = ["exp", "sufficient"] if spec.check == "both" else [spec.check]
    params = gains = None
    if "exp" in checks:
        if T is None and spec.params == "certified":
            raise ConfigError("certificates.T", "window length needed for certified parameters")
        params, report["params"] = _candidate_params(cfg, model, spec, schedule, T)
    if "sufficient" in checks:
        if not isinstance(model, LinearSystemModel) or T is None or eps is None:
            raise ConfigError("certificates", "sufficient-condition gains need a linear model, T and epsilon")
        obs = compute_observer_certificate(model)
        split = split_spectrum(model)
        n_win = int(math.ceil(t_end / T)) + 1
        ref = [t for w in design_schedule((split.A_us, split.C_us), T, eps, n_win) for t in w]
        gains = linear_sufficient_gains(model, ref, T, eps, obs, t_end)
        report["gains"] = gains.to_dict()
    null = _null_direction(model, inst) if spec.adversarial and isinstance(model, LinearSystemModel) else None
    n = model.state_dim
    margins = {c: [] for c in checks}
    for k in range(spec.pairs):
        rng = np.random.default_rng([cfg.seed, k])
        chi1 = rng.uniform(-spec.state_scale, spec.state_scale, n)
        if null is not None:
            chi2 = chi1 + spec.state_scale * null
        else:
            chi2 = rng.uniform(-spec.state_scale, spec.state_scale, n)
        sigs = []
        for j, key, dim in ((0, "w_bounds", model.disturbance_dim), (1, "w_bounds", model.disturbance_dim),
                            (2, "v_bounds", model.noise_dim), (3, "v_bounds", model.noise_dim)):
            b = cfg.noise.get(key)
            if b is None or dim == 0 or null is not None:
                sigs.append(None)
            else:
                sigs.append(generate_noise(b, int(rng.integers(2 ** 31)), cfg.dt, t_end))
        pair = make_pair(model, chi1, chi2, t_end, cfg.dt, schedule, None, *sigs)
        if "exp" in checks:
            margins["exp"].append(check_exp_iioss_sampled(pair, params))
        if "sufficient" in checks:
            margins["sufficient"].append(check_sufficient_condition(pair, 2 * T, gains.callables()))
    for c, reps in margins.items():
        bad = [i for i, r in enumerate(reps) if not r.holds]
        report["violations"][c] = len(bad)
        if reps:
            i = int(np.argmin([r.worst_margin for r in reps]))
            report["worst"][c] = {"pair": i, **reps[i].to_dict()}
        report["holds"] = report["holds"] and not bad
    _write_json(out / "certificates.json", report)
    return {"command": "check-certificates", "holds": report["holds"], "violations": report["violations"]}


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "analyze-linear": cmd_analyze_linear,
            "check-certificates": cmd_check_certificates}
