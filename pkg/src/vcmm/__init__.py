"""Distributed estimation for varying coefficient mixed models.

The package computes per-partition sufficient statistics, aggregates them
losslessly, and fits spline-based varying coefficients plus Gaussian random
effects with blockwise, spectrally stabilized and one-step estimators.
"""

from .core import (
    DimensionMismatchError,
    IndexDomainError,
    ModelDims,
    ModelParams,
    NumericalError,
    Partition,
    PenaltySpec,
    RandomEffectCov,
    SingularSystemError,
    VCMMError,
    realize_penalty,
    validate_partition,
)
from .spline import TensorSplineBasis, UnivariateBasis, eval_tensor, eval_univariate, expand_design
from .suffstats import ScoreVector, SuffStats, aggregate, compute_local, gradient, joint_objective
from .linalg import SpectralFactors, spectral_decompose, stabilized_solve
from .estimator import (
    FitConfig,
    FitResult,
    PosteriorBlocks,
    block_fit,
    fisher_info,
    gibbs_sample,
    onestep_fit,
    posterior_blocks,
    svd_fit,
    update_variance,
)
from .distrib import CommLedger, WireMessage, budget_check, deserialize, run_protocol, serialize

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatchError",
    "IndexDomainError",
    "ModelDims",
    "ModelParams",
    "NumericalError",
    "Partition",
    "PenaltySpec",
    "RandomEffectCov",
    "SingularSystemError",
    "VCMMError",
    "realize_penalty",
    "validate_partition",
    "TensorSplineBasis",
    "UnivariateBasis",
    "eval_tensor",
    "eval_univariate",
    "expand_design",
    "ScoreVector",
    "SuffStats",
    "aggregate",
    "compute_local",
    "gradient",
    "joint_objective",
    "SpectralFactors",
    "spectral_decompose",
    "stabilized_solve",
    "FitConfig",
    "FitResult",
    "PosteriorBlocks",
    "block_fit",
    "fisher_info",
    "gibbs_sample",
    "onestep_fit",
    "posterior_blocks",
    "svd_fit",
    "update_variance",
    "CommLedger",
    "WireMessage",
    "budget_check",
    "deserialize",
    "run_protocol",
    "serialize",
]
