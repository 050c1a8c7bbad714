"""Subjective-logic opinions and the reduced Dempster combination rule.

The value types (:class:`EvidenceVector`, :class:`MassSet`,
:class:`DirichletParams`) are immutable and validated on construction.
The ``*_arrays`` helpers hold the actual formulas; they only use
arithmetic and ``.sum(axis=-1, keepdims=True)``, so they work unchanged on
numpy arrays and on :class:`~vaue.numcore.Tensor` batches (classes on the
last axis, uncertainty with a trailing singleton axis).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .numcore import Tensor, log_gamma

EPS_CONFLICT = 1e-12
SUM_TOL = 1e-9


class EvidenceError(ValueError):
    """Invalid evidence, mass set or Dirichlet parameters."""


class ConflictError(ArithmeticError):
    """Two opinions are (numerically) in total conflict."""

    def __init__(self, conflict):
        self.conflict = conflict
        super().__init__(f"total conflict between mass sets: F = {float(np.max(conflict)):.12g}")


class SaturationError(ArithmeticError):
    """Zero uncertainty mass: the opinion carries infinite evidence."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EvidenceVector:
    e: np.ndarray

    def __post_init__(self):
        e = _frozen(self.e)
        if e.ndim != 1 or e.size < 2:
            raise EvidenceError(f"evidence needs at least 2 classes, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise EvidenceError("evidence must be finite")
        if np.any(e < 0):
            raise EvidenceError(f"negative evidence component: {e.min()!r}")
        object.__setattr__(self, "e", e)

    @property
    def num_classes(self) -> int:
        return self.e.size


@dataclass(frozen=True, eq=False)
class MassSet:
    b: np.ndarray
    u: float
    tol: float = SUM_TOL

    def __post_init__(self):
        b = _frozen(self.b)
        u = float(self.u)
        if b.ndim != 1 or b.size < 2:
            raise EvidenceError(f"belief vector needs at least 2 classes, got shape {b.shape}")
        if not (np.all(np.isfinite(b)) and np.isfinite(u)):
            raise EvidenceError("masses must be finite")
        if np.any(b < 0) or np.any(b > 1):
            raise EvidenceError("belief masses must lie in [0, 1]")
        if not 0.0 < u <= 1.0:
            raise EvidenceError(f"uncertainty mass must lie in (0, 1], got {u!r}")
        total = u + float(b.sum())
        if abs(total - 1.0) > self.tol:
            raise EvidenceError(f"u + sum(b) = {total!r}, expected 1")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "u", u)

    @property
    def num_classes(self) -> int:
        return self.b.size

    @classmethod
    def vacuous(cls, num_classes: int) -> MassSet:
        return cls(np.zeros(num_classes), 1.0)

    def allclose(self, other: MassSet, atol=1e-9) -> bool:
        return (
            self.b.shape == other.b.shape
            and np.allclose(self.b, other.b, rtol=0.0, atol=atol)
            and abs(self.u - other.u) <= atol
        )


@dataclass(frozen=True, eq=False)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = _frozen(self.alpha)
        if alpha.ndim != 1 or alpha.size < 2:
            raise EvidenceError(f"alpha needs at least 2 classes, got shape {alpha.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha < 1.0 - 1e-12):
            raise EvidenceError("Dirichlet parameters must be finite and >= 1")
        object.__setattr__(self, "alpha", alpha)

    @property
    def strength(self) -> float:
        return float(self.alpha.sum())


# -- formulas shared by the value API and batched training ---------------


def masses_from_evidence_arrays(e):
    """``(b, u)`` with ``S = sum(e + 1)``, ``b = e / S`` and ``u = C / S``."""
    num_classes = e.shape[-1]
    strength = (e + 1.0).sum(axis=-1, keepdims=True)
    return e / strength, num_classes / strength


def conflict_arrays(b1, b2):
    """``F = sum_{i != j} b1_i b2_j``."""
    return (
        b1.sum(axis=-1, keepdims=True) * b2.sum(axis=-1, keepdims=True)
        - (b1 * b2).sum(axis=-1, keepdims=True)
    )


def combine_arrays(b1, u1, b2, u2, eps=EPS_CONFLICT):
    """One application of the reduced Dempster rule.

    Returns ``(b, u, F, ok)``; ``ok`` is a boolean numpy array flagging rows
    whose normaliser ``1 - F`` exceeds ``eps``. Rows that fail keep a
    normaliser of one so the arithmetic stays finite; callers decide what
    to do with them.
    """
    conflict = conflict_arrays(b1, b2)
    keep = 1.0 - conflict
    raw = keep.data if isinstance(keep, Tensor) else np.asarray(keep)
    ok = raw > eps
    if not np.all(ok):
        mask = ok.astype(np.float64)
        keep = keep * mask + (1.0 - mask)
    b = (b1 * b2 + b1 * u2 + b2 * u1) / keep
    u = (u1 * u2) / keep
    return b, u, conflict, ok


def dirichlet_from_masses_arrays(b, u):
    num_classes = b.shape[-1]
    strength = num_classes / u
    return b * strength + 1.0


# -- value API ----------------------------------------------------------


def _evidence(e) -> EvidenceVector:
    return e if isinstance(e, EvidenceVector) else EvidenceVector(e)


def masses_from_evidence(e) -> MassSet:
    ev = _evidence(e)
    b, u = masses_from_evidence_arrays(ev.e)
    return MassSet(b, float(u[0]))


def dirichlet_from_evidence(e) -> DirichletParams:
    return DirichletParams(_evidence(e).e + 1.0)


def dirichlet_from_masses(m: MassSet) -> DirichletParams:
    if m.u <= 0.0:
        raise SaturationError("uncertainty mass is zero")
    return DirichletParams(dirichlet_from_masses_arrays(m.b, m.u))


def evidence_from_dirichlet(alpha: DirichletParams) -> EvidenceVector:
    return EvidenceVector(np.maximum(alpha.alpha - 1.0, 0.0))


def combine_pair(m1: MassSet, m2: MassSet, eps=EPS_CONFLICT) -> MassSet:
    """``m1 ⊕ m2``; raises :class:`ConflictError` when ``1 - F <= eps``."""
    if m1.num_classes != m2.num_classes:
        raise EvidenceError(f"class count mismatch: {m1.num_classes} vs {m2.num_classes}")
    b, u, conflict, ok = combine_arrays(m1.b, m1.u, m2.b, m2.u, eps)
    if not np.all(ok):
        raise ConflictError(float(conflict[0]))
    # guard against rounding pushing a component a hair outside [0, 1]
    return MassSet(np.clip(b, 0.0, 1.0), min(float(np.ravel(u)[0]), 1.0))


def combine_all(masses, eps=EPS_CONFLICT) -> MassSet:
    masses = list(masses)
    if not masses:
        raise EvidenceError("combine_all needs at least one mass set")
    return reduce(lambda acc, m: combine_pair(acc, m, eps), masses)


def pairwise_conflicts(masses, eps=EPS_CONFLICT) -> list:
    """Conflict ``F`` observed at each step of the left fold."""
    masses = list(masses)
    out = []
    acc = masses[0]
    for m in masses[1:]:
        out.append(float(conflict_arrays(acc.b, m.b)[0]))
        acc = combine_pair(acc, m, eps)
    return out


def average_masses(masses) -> MassSet:
    """Arithmetic mean of mass sets (used when Dempster fusion is ablated)."""
    masses = list(masses)
    if not masses:
        raise EvidenceError("average_masses needs at least one mass set")
    b = np.mean([m.b for m in masses], axis=0)
    u = float(np.mean([m.u for m in masses]))
    return MassSet(b, u)


def dirichlet_log_density(alpha, p) -> float:
    a = alpha.alpha if isinstance(alpha, DirichletParams) else DirichletParams(alpha).alpha
    p = np.asarray(p, dtype=np.float64)
    if p.shape != a.shape:
        raise EvidenceError(f"p has shape {p.shape}, alpha has {a.shape}")
    if np.any(p <= 0.0) or abs(p.sum() - 1.0) > 1e-9:
        raise EvidenceError("p must lie in the interior of the probability simplex")
    log_beta = float(np.sum(log_gamma(a))) - log_gamma(float(a.sum()))
    return float(np.sum((a - 1.0) * np.log(p))) - log_beta


def predict(m: MassSet):
    """``(argmax b, u)``; ties go to the lowest class index."""
    return int(np.argmax(m.b)), m.u


# -- plain-text exchange format ---------------------------------------------

MASS_FORMAT_HEADER = "# vaue-masses 1"
EXCHANGE_TOL = 1e-6


class MassFileError(EvidenceError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


def parse_mass_sets(text: str) -> list:
    """One mass set per line: ``b_1 ... b_C u``.

    Blank lines and ``#`` comments are skipped. A ``# vaue-masses N``
    header, if present, must name version 1. Each line must sum to one
    within 1e-6 and is rescaled to sum exactly before validation.
    """
    out = []
    width = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# vaue-masses"):
            if line != MASS_FORMAT_HEADER:
                raise MassFileError(line_no, f"unsupported format header {line!r}")
            continue
        if not line or line.startswith("#"):
            continue
        try:
            values = np.array([float(tok) for tok in line.split()])
        except ValueError:
            raise MassFileError(line_no, "non-numeric entry") from None
        if values.size < 3:
            raise MassFileError(line_no, "need at least two beliefs and one uncertainty")
        if width is not None and values.size != width:
            raise MassFileError(line_no, f"expected {width} columns, got {values.size}")
        width = values.size
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise MassFileError(line_no, "masses must be finite and non-negative")
        total = float(values.sum())
        if abs(total - 1.0) > EXCHANGE_TOL:
            raise MassFileError(line_no, f"masses sum to {total!r}, expected 1 within {EXCHANGE_TOL}")
        values = values / total
        try:
            out.append(MassSet(np.minimum(values[:-1], 1.0), values[-1]))
        except EvidenceError as exc:
            raise MassFileError(line_no, str(exc)) from None
    return out


def format_mass_set(m: MassSet) -> str:
    return " ".join(f"{v:.17g}" for v in list(m.b) + [m.u])
