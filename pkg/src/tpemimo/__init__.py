"""Multi-cell massive-MIMO precoding with truncated polynomial expansion."""

from .scenario import ScenarioConfig, load_config, build_geometry, build_covariances, drop_rng
from .channel import sample_channels, compute_estimation_model, mmse_estimate
from .precoders import (PrecodingMatrix, TpeCoefficients, mrt_precoder, rzf_precoder, tpe_precoder,
                        taylor_initial_coeffs, normalize_tpe_power)
from .detequiv import (solve_theorem1, solve_theorem2, derivative_tables, build_sinr_model,
                       assemble_sinr_model, tpe_sinr_detequiv, rzf_sinr_detequiv)
from .optimizer import MaxMinProblem, bisection_solve, upper_bound_xi, rzf_mimic_weights
from .simkit import run_experiment, theory_vs_empirical, empirical_sinr, SweepSpec

__version__ = "0.1.0"
