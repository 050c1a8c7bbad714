"""Digamma, trigamma and log-gamma for positive real arguments.

All three use the same scheme: shift the argument upward with the
functional recurrence until it reaches ``ASYMPTOTIC_THRESHOLD`` and then
evaluate the Stirling-type asymptotic series. Inputs may be scalars or
arrays; scalars come back as Python floats.
"""

import math

import numpy as np

ASYMPTOTIC_THRESHOLD = 8.0
_SHIFTS = 8  # x > 0 reaches the threshold after at most this many steps

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# coefficients of x^-(2n) in psi(x) - ln x + 1/(2x), n = 1..7
_DIGAMMA_COEFFS = (
    -1.0 / 12.0,
    1.0 / 120.0,
    -1.0 / 252.0,
    1.0 / 240.0,
    -1.0 / 132.0,
    691.0 / 32760.0,
    -1.0 / 12.0,
)

# coefficients of x^-(2n-1) in the Stirling correction to ln Gamma
_LGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)

# coefficients of x^-(2n+1) in trigamma beyond 1/x + 1/(2x^2)
_TRIGAMMA_COEFFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


def _prepare(x, name):
    arr = np.array(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise DomainError(f"{name}: non-finite argument")
    if np.any(arr <= 0.0):
        bad = arr[arr <= 0.0].flat[0]
        raise DomainError(f"{name}: argument must be positive, got {bad!r}")
    return arr


def _finish(x, out):
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def _horner(coeffs, w):
    acc = np.zeros_like(w)
    for c in reversed(coeffs):
        acc = acc * w + c
    return acc


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    z = _prepare(x, "digamma")
    acc = np.zeros_like(z)
    for _ in range(_SHIFTS):
        low = z < ASYMPTOTIC_THRESHOLD
        if not low.any():
            break
        acc -= np.where(low, 1.0 / z, 0.0)
        z = np.where(low, z + 1.0, z)
    w = 1.0 / (z * z)
    out = acc + np.log(z) - 0.5 / z + w * _horner(_DIGAMMA_COEFFS, w)
    return _finish(x, out)


def trigamma(x):
    """psi'(x) for x > 0; the derivative of :func:`digamma`."""
    z = _prepare(x, "trigamma")
    acc = np.zeros_like(z)
    for _ in range(_SHIFTS):
        low = z < ASYMPTOTIC_THRESHOLD
        if not low.any():
            break
        acc += np.where(low, 1.0 / (z * z), 0.0)
        z = np.where(low, z + 1.0, z)
    inv = 1.0 / z
    w = inv * inv
    out = acc + inv + 0.5 * w + inv * w * _horner(_TRIGAMMA_COEFFS, w)
    return _finish(x, out)


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    z = _prepare(x, "log_gamma")
    acc = np.zeros_like(z)
    for _ in range(_SHIFTS):
        low = z < ASYMPTOTIC_THRESHOLD
        if not low.any():
            break
        acc -= np.where(low, np.log(z), 0.0)
        z = np.where(low, z + 1.0, z)
    inv = 1.0 / z
    out = acc + (z - 0.5) * np.log(z) - z + HALF_LOG_2PI + inv * _horner(_LGAMMA_COEFFS, inv * inv)
    return _finish(x, out)
