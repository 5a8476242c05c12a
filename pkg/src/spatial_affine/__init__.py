"""Spatial causal inference with the affine estimator.

Joint CAR models for an unmeasured spatial confounder and the exposure,
REML and Gibbs-sampler estimation, ring-graph identifiability checks, and a
simulation harness.
"""
from .graph import (AdjacencyGraph, CarParams, DegeneratePrecisionError, InvalidGraphError,
                    car_precision, from_edge_list, grid, is_positive_definite, ring)
from .joint_gmrf import (JointPrecision, NonPositiveDefiniteError, build_joint_precision,
                         conditional_u_given_z, condition_number_log_prior, marginal_z_law,
                         rho_bound, surrogate_condition_number)
from .linear_estimators import (Dataset, FitResult, SplineSpec, VarianceParams,
                                affine_fit_reml, affine_standard_errors, gls_fit, ols_fit,
                                restricted_log_likelihood, semiparametric_fit, spline_design)
from .gibbs import (ChainConfig, ModelConfig, PosteriorSamples, PriorConfig, paerc_summary,
                    run_chain)
from .identifiability import RingParams, identification_report
from .simgen import GenerativeConfig, generate_dataset, gm_catalog, run_study

__version__ = "0.1.0"
