"""Sample-based moving horizon estimation for continuous-time systems with irregular sampling."""
from .certificates import (ExponentialIiossParams, certified_linear_params, check_exp_iioss_sampled,
                           check_general_iioss, check_sufficient_condition, lipschitz_probe, make_pair)
from .config import ConfigError, ExperimentConfig, load_config
from .core import (DivergenceError, LinearSystemModel, SamplingSchedule, ScheduleError, Signal, SystemModel,
                   WeightedNorm, schedule_instants)
from .linear import (build_Os, compute_observer_certificate, design_schedule, k_star, matrix_exp,
                     split_spectrum)
from .mhe import MheConfig, make_horizon_problem, run_estimator, solve_horizon, verify_rges_bound
from .sim import generate_noise, integrate, sample_outputs

__version__ = "0.1.0"
