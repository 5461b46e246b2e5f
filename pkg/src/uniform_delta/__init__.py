"""Numerical diagnostics for the uniform validity of delta-method approximations."""
from .errors import (DegenerateError, DimensionError, DomainError, EmptyError, NotPSDError, OptimFail,
                     RankError, SingularHessian, UniformDeltaError, UnknownBuiltin)
from .funcspace import BUILTINS, PhiMap, Region, StepRule, builtin, eval_phi, jacobian, normalizer
from .remainder import GridSpec, check_divergence, delta, delta_analytic, divergence_preset, envelope, scan

__all__ = [
    "BUILTINS", "DegenerateError", "DimensionError", "DomainError", "EmptyError", "GridSpec", "NotPSDError",
    "OptimFail", "PhiMap", "RankError", "Region", "SingularHessian", "StepRule", "UniformDeltaError",
    "UnknownBuiltin", "builtin", "check_divergence", "delta", "delta_analytic", "divergence_preset",
    "envelope", "eval_phi", "jacobian", "normalizer", "scan",
]
__version__ = "0.1.0"
