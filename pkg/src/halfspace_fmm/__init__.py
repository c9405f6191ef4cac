"""Fast multipole evaluation of point forces and dislocations in a traction-free elastic half-space."""

from .core import (
    ConfigurationError,
    DomainError,
    ElasticModuli,
    FieldBatch,
    FieldSample,
    HalfspaceFmmError,
    InvalidModuliError,
    PreconditionError,
    SeparationError,
    SingularEvaluationError,
    SourceBatch,
    TargetBatch,
    UnsupportedPrecisionError,
    ValidationError,
    moduli_from_lame,
    tilde_moduli,
)
from .fmm import EvaluationReport, FmmConfig, fmm_evaluate, run_a_image_fmm, run_bc_image_fmm, run_kelvin_fmm
from .kernels import KernelSelector, direct_sum, mindlin_full

__all__ = [
    "ConfigurationError", "DomainError", "ElasticModuli", "EvaluationReport", "FieldBatch", "FieldSample",
    "FmmConfig", "HalfspaceFmmError", "InvalidModuliError", "KernelSelector", "PreconditionError",
    "SeparationError", "SingularEvaluationError", "SourceBatch", "TargetBatch", "UnsupportedPrecisionError",
    "ValidationError", "direct_sum", "fmm_evaluate", "mindlin_full", "moduli_from_lame", "run_a_image_fmm",
    "run_bc_image_fmm", "run_kelvin_fmm", "tilde_moduli",
]
__version__ = "0.1.0"
