"""Visual alignment through channel-wise style statistics.

Feature maps carry style in their per-channel mean and standard deviation.
A batch pooled from every source domain is summarised by two Gaussians
(one over channel means, one over channel deviations); during training
each sample's statistics are replaced by a fresh draw from them.

Draw order for :func:`apply_module` in ``"batch"`` gate mode: one uniform
for the gate, then for each sample in batch order ``K`` normals for the
means followed by ``K`` normals for the deviations. In ``"sample"`` gate
mode the single uniform becomes ``B`` uniforms, and only gated samples
draw targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import NumericalError, Rng, Tensor, cholesky, ops, sample_mvn

GATE_MODES = ("batch", "sample")


@dataclass(frozen=True)
class StyleAlignConfig:
    tau: float = 1.0
    eps_cov: float = 1e-5
    sigma_floor: float = 1e-5
    eps_div: float = 1e-6
    diagonal_only: bool = False
    gate: str = "batch"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau!r}")
        for name in ("eps_cov", "sigma_floor", "eps_div"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}, got {self.gate!r}")


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu {mu.shape} and sigma {sigma.shape} differ in shape")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class EmpiricalStyleDistribution:
    m_mu: np.ndarray
    m_sigma: np.ndarray
    cov_mu: np.ndarray
    cov_sigma: np.ndarray
    chol_mu: np.ndarray = field(default=None)
    chol_sigma: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("cov_mu", "cov_sigma"):
            cov = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
                raise ValueError(f"{name} is not symmetric")
        if self.chol_mu is None:
            object.__setattr__(self, "chol_mu", cholesky(self.cov_mu))
        if self.chol_sigma is None:
            object.__setattr__(self, "chol_sigma", cholesky(self.cov_sigma))

    @property
    def num_channels(self) -> int:
        return len(self.m_mu)


def _values(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def channel_stats(z) -> ChannelStats:
    """Population mean and deviation over the two trailing (spatial) axes."""
    arr = _values(z)
    if arr.ndim < 3:
        raise ValueError(f"expected (..., K, H, W), got shape {arr.shape}")
    if arr.shape[-1] * arr.shape[-2] < 1:
        raise ValueError("empty spatial extent")
    with np.errstate(over="ignore", invalid="ignore"):
        return ChannelStats(arr.mean(axis=(-2, -1)), arr.std(axis=(-2, -1)))


def _stack_stats(batch_stats):
    if isinstance(batch_stats, ChannelStats):
        return np.atleast_2d(batch_stats.mu), np.atleast_2d(batch_stats.sigma)
    stats = list(batch_stats)
    return np.stack([s.mu for s in stats]), np.stack([s.sigma for s in stats])


def _covariance(rows: np.ndarray) -> tuple:
    with np.errstate(over="raise", invalid="raise"):
        try:
            mean = rows.mean(axis=0)
            centred = rows - mean
            return mean, centred.T @ centred / (rows.shape[0] - 1)
        except FloatingPointError as exc:
            raise NumericalError(f"channel statistics overflow: {exc}") from exc


def fit_empirical(batch_stats, cfg: StyleAlignConfig | None = None) -> EmpiricalStyleDistribution:
    """Gaussian fit to a batch of channel statistics (unbiased covariance plus ridge)."""
    cfg = cfg or StyleAlignConfig()
    mus, sigmas = _stack_stats(batch_stats)
    if mus.shape[0] < 2:
        raise ValueError("fit_empirical needs at least 2 samples")
    if not (np.isfinite(mus).all() and np.isfinite(sigmas).all()):
        raise NumericalError("non-finite channel statistics")
    m_mu, cov_mu = _covariance(mus)
    m_sigma, cov_sigma = _covariance(sigmas)
    if cfg.diagonal_only:
        cov_mu = np.diag(np.diag(cov_mu))
        cov_sigma = np.diag(np.diag(cov_sigma))
    ridge = cfg.eps_cov * np.eye(mus.shape[1])
    return EmpiricalStyleDistribution(m_mu, m_sigma, cov_mu + ridge, cov_sigma + ridge)


def _gaussian_log_prob(x, mean, chol):
    diff = np.asarray(x, dtype=np.float64) - mean
    if diff.shape != mean.shape:
        raise ValueError(f"dimension mismatch: {diff.shape} vs {mean.shape}")
    white = np.linalg.solve(chol, diff)
    half_log_det = np.sum(np.log(np.diag(chol)))
    return -0.5 * white @ white - half_log_det - 0.5 * mean.size * math.log(2.0 * math.pi)


def style_log_prob(dist: EmpiricalStyleDistribution, stats: ChannelStats) -> float:
    """Log density of ``stats`` under the fitted style distribution (diagnostic)."""
    return float(
        _gaussian_log_prob(stats.mu, dist.m_mu, dist.chol_mu)
        + _gaussian_log_prob(stats.sigma, dist.m_sigma, dist.chol_sigma)
    )


def sample_style(dist: EmpiricalStyleDistribution, cfg: StyleAlignConfig, rng: Rng) -> ChannelStats:
    mu = sample_mvn(dist.m_mu, dist.chol_mu, rng)
    sigma = np.maximum(sample_mvn(dist.m_sigma, dist.chol_sigma, rng), cfg.sigma_floor)
    return ChannelStats(mu, sigma)


def sample_styles(dist: EmpiricalStyleDistribution, cfg: StyleAlignConfig, rng: Rng, n: int):
    """``n`` consecutive :func:`sample_style` draws as ``(mu, sigma)`` arrays of shape ``n×K``.

    Consumes the stream exactly as ``n`` sequential calls would.
    """
    k = dist.num_channels
    g = rng.normal((n, 2, k))
    mu = dist.m_mu + g[:, 0] @ np.asarray(dist.chol_mu).T
    sigma = np.maximum(dist.m_sigma + g[:, 1] @ np.asarray(dist.chol_sigma).T, cfg.sigma_floor)
    return mu, sigma


def renormalize(z, target: ChannelStats, cfg: StyleAlignConfig | None = None) -> Tensor:
    """Swap the channel statistics of ``z`` for ``target``.

    ``z`` is ``(..., K, H, W)`` and ``target.mu``/``target.sigma`` are
    ``(..., K)``. Gradients flow through the statistics of ``z``; the target
    is a constant.
    """
    cfg = cfg or StyleAlignConfig()
    z = z if isinstance(z, Tensor) else Tensor(z)
    mu = z.mean(axis=(-2, -1), keepdims=True)
    centred = z - mu
    sigma = ops.sqrt((centred * centred).mean(axis=(-2, -1), keepdims=True))
    t_mu = np.asarray(target.mu)[..., None, None]
    t_sigma = np.asarray(target.sigma)[..., None, None]
    return centred / (sigma + cfg.eps_div) * t_sigma + t_mu


def apply_module(batch, cfg: StyleAlignConfig, rng: Rng, train_mode: bool) -> Tensor:
    """Stochastically re-style a ``B×K×H×W`` (or ``B×d``) batch.

    A ``B×d`` input is treated as one channel spread over ``d`` positions.
    Returns ``batch`` itself when the module is inactive.
    """
    if not train_mode:
        return batch
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    size = x.shape[0]
    if cfg.gate == "batch":
        if not rng.uniform() < cfg.tau:
            return batch
        gated = np.ones(size, dtype=bool)
    else:
        gated = rng.uniform(size=size) < cfg.tau
        if not gated.any():
            return batch
    if size < 2:
        raise ValueError("style alignment needs a batch of at least 2")
    flat = x.ndim == 2
    maps = x.reshape(size, 1, 1, x.shape[1]) if flat else x
    if maps.ndim != 4:
        raise ValueError(f"expected B×K×H×W or B×d input, got shape {x.shape}")
    own = channel_stats(maps)
    dist = fit_empirical(ChannelStats(own.mu, own.sigma), cfg)
    t_mu = own.mu.copy()
    t_sigma = own.sigma.copy()
    chosen = np.flatnonzero(gated)
    t_mu[chosen], t_sigma[chosen] = sample_styles(dist, cfg, rng, len(chosen))
    out = renormalize(maps, ChannelStats(t_mu, t_sigma), cfg)
    if not gated.all():
        mask = gated.astype(np.float64).reshape(size, 1, 1, 1)
        out = out * mask + maps * (1.0 - mask)
    return out.reshape(x.shape) if flat else out
