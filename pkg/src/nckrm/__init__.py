"""Kernel-based identification of non-causal FIR models (stable inverses of LTI plants)."""

from .estimator import EstimationResult, RegressionProblem, build_regression, identify, rls
from .kernels import FAMILIES, KernelSpec, evaluate, gram
from .lti import DiscreteRational, NoncausalFir, noncausal_inverse_ir

__all__ = [
    "DiscreteRational", "NoncausalFir", "noncausal_inverse_ir",
    "FAMILIES", "KernelSpec", "evaluate", "gram",
    "EstimationResult", "RegressionProblem", "build_regression", "identify", "rls",
]

__version__ = "0.1.0"
