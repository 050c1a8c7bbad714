"""Evidential training objectives.

Each loss accepts a :class:`~vaue.numcore.Tensor` (or anything array-like,
including :class:`~vaue.evidence.DirichletParams`) with classes on the last
axis and reduces only that axis, so a ``B×C`` batch yields ``B`` losses and a
single ``C``-vector yields a 0-d tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evidence import DirichletParams
from .numcore import Tensor, log_gamma, ops

DEFAULT_LAMBDA_KL = 0.01


@dataclass(frozen=True)
class LossConfig:
    lambda_kl: float = DEFAULT_LAMBDA_KL
    num_classes: int | None = None

    def __post_init__(self):
        if not self.lambda_kl >= 0.0:
            raise ValueError(f"lambda_kl must be non-negative, got {self.lambda_kl!r}")


def _alpha_tensor(alpha) -> Tensor:
    if isinstance(alpha, Tensor):
        return alpha
    if isinstance(alpha, DirichletParams):
        return Tensor(alpha.alpha)
    return Tensor(alpha)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_one_hot(y, num_classes):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != num_classes:
        raise ValueError(f"label has {y.shape[-1]} classes, alpha has {num_classes}")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise ValueError("label must be one-hot")
    return y


def adjusted_alpha(alpha, y):
    """Replace the true-class parameter by 1, keeping the others."""
    a = _alpha_tensor(alpha)
    y = _check_one_hot(y, a.shape[-1])
    out = a * (1.0 - y) + y
    if isinstance(alpha, DirichletParams):
        return DirichletParams(out.data)
    return out


def kl_dirichlet_uniform(alpha_tilde) -> Tensor:
    """KL[Dir(alpha_tilde) || Dir(1)] in closed form."""
    a = _alpha_tensor(alpha_tilde)
    if np.any(a.data < 1.0 - 1e-12):
        raise ValueError("kl_dirichlet_uniform needs every parameter >= 1")
    num_classes = a.shape[-1]
    strength = a.sum(axis=-1, keepdims=True)
    value = (
        ops.lgamma(strength).sum(axis=-1)
        - ops.lgamma(a).sum(axis=-1)
        - log_gamma(float(num_classes))
        + ((a - 1.0) * (ops.digamma(a) - ops.digamma(strength))).sum(axis=-1)
    )
    return value


def ece_loss(alpha, y, cfg: LossConfig | None = None) -> Tensor:
    """Expected cross-entropy under Dir(alpha) plus the KL regulariser."""
    cfg = cfg or LossConfig()
    a = _alpha_tensor(alpha)
    y = _check_one_hot(y, a.shape[-1])
    strength = a.sum(axis=-1, keepdims=True)
    risk = (y * (ops.digamma(strength) - ops.digamma(a))).sum(axis=-1)
    if cfg.lambda_kl == 0.0:
        return risk
    return risk + cfg.lambda_kl * kl_dirichlet_uniform(adjusted_alpha(a, y))


def decorrelation_loss(features) -> Tensor:
    """Entrywise L1 norm of the off-diagonal unbiased feature covariance."""
    z = features if isinstance(features, Tensor) else Tensor(features)
    if z.ndim != 2:
        raise ValueError(f"features must be B×d, got shape {z.shape}")
    batch, dim = z.shape
    if batch < 2:
        raise ValueError("decorrelation_loss needs a batch of at least 2")
    centred = z - z.mean(axis=0, keepdims=True)
    cov = (centred.T @ centred) / (batch - 1.0)
    off = 1.0 - np.eye(dim)
    return ops.absolute(cov * off).sum()


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row ``-log softmax(logits)[label]``; the non-evidential baseline."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = one_hot(labels, z.shape[-1])
    return ops.logsumexp(z, axis=-1) - (z * y).sum(axis=-1)
