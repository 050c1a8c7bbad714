"""Numerical substrate: tensors with reverse-mode gradients, special
functions, Cholesky sampling and seeded random streams."""

from .linalg import CholeskyError, cholesky, sample_mvn
from .rng import Rng, derive_seed
from .special import DomainError, digamma, log_gamma, trigamma
from . import tensor as ops
from .tensor import GraphError, NumericalError, Tensor

__all__ = [
    "CholeskyError",
    "DomainError",
    "GraphError",
    "NumericalError",
    "Rng",
    "Tensor",
    "cholesky",
    "derive_seed",
    "digamma",
    "log_gamma",
    "ops",
    "sample_mvn",
    "trigamma",
]
