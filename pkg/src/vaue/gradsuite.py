"""Finite-difference sweep over every differentiable operation.

Each case is a scalar function of a few random arrays. Points are drawn
away from the kinks of ``abs``/``relu``/``clamp`` so central differences
are valid there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import evidence as ev
from .data import Batch
from .evloss import decorrelation_loss, ece_loss, kl_dirichlet_uniform, one_hot, softmax_cross_entropy
from .model import ExtractorSpec, LayerSpec, Model
from .numcore import Rng, Tensor, ops
from .numcore.gradcheck import analytic_gradient, numerical_gradient, relative_error
from .style_align import ChannelStats, renormalize
from .train import TrainConfig, objective

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _away_from_zero(a, margin=0.2):
    return np.where(a >= 0, a + margin, a - margin)


def _weights(shape, rng):
    w = rng.normal(shape)
    return Tensor(w / np.abs(w).sum())


def _cases(rng: Rng) -> list:
    """``(name, fn, arrays)``; ``fn`` maps tensors to a scalar tensor."""
    g = rng.normal
    pos = lambda shape: 0.5 + rng.uniform(0.0, 2.0, size=shape)  # noqa: E731
    w34 = _weights((3, 4), rng)
    cases = [
        ("add", lambda a, b: ((a + b) * w34).sum(), [g((3, 4)), g((4,))]),
        ("sub", lambda a, b: ((a - b) * w34).sum(), [g((3, 4)), g((3, 1))]),
        ("mul", lambda a, b: ((a * b) * w34).sum(), [g((3, 4)), g((3, 4))]),
        ("div", lambda a, b: ((a / b) * w34).sum(), [g((3, 4)), pos((3, 4))]),
        ("power", lambda a: (ops.power(a, 2.5) * w34).sum(), [pos((3, 4))]),
        ("exp", lambda a: (ops.exp(a) * w34).sum(), [g((3, 4))]),
        ("log", lambda a: (ops.log(a) * w34).sum(), [pos((3, 4))]),
        ("sqrt", lambda a: (ops.sqrt(a) * w34).sum(), [pos((3, 4))]),
        ("absolute", lambda a: (ops.absolute(a) * w34).sum(), [_away_from_zero(g((3, 4)))]),
        ("relu", lambda a: (ops.relu(a) * w34).sum(), [_away_from_zero(g((3, 4)))]),
        ("clamp", lambda a: (ops.clamp(a, -1.0, 1.0) * w34).sum(), [np.linspace(-2.05, 2.05, 12).reshape(3, 4)]),
        ("maximum", lambda a: (ops.maximum(a, 0.1) * w34).sum(), [_away_from_zero(g((3, 4)))]),
        ("digamma", lambda a: (ops.digamma(a) * w34).sum(), [pos((3, 4))]),
        ("lgamma", lambda a: (ops.lgamma(a) * w34).sum(), [pos((3, 4))]),
        ("mean", lambda a: (a.mean(axis=(0, 2)) ** 2).sum(), [g((2, 3, 4))]),
        ("reshape_transpose", lambda a: (ops.transpose(a.reshape(4, 3)) * w34).sum(), [g((12,))]),
        ("take", lambda a: (ops.take(a, np.array([2, 0, 2])) ** 2).sum(), [g((4, 3))]),
        ("stack_concat", lambda a, b: (ops.concat([ops.stack([a, b]), ops.stack([b, a])]) ** 2).sum(), [g((3,)), g((3,))]),
        ("matmul", lambda a, b: ((a @ b) * w34).sum(), [g((3, 5)), g((5, 4))]),
        ("logsumexp", lambda a: (ops.logsumexp(a, axis=-1) ** 2).sum(), [g((3, 4))]),
        ("conv2d", lambda x, w, b: (ops.conv2d(x, w, b, padding=1) ** 2).mean(), [g((2, 2, 4, 4)), g((3, 2, 3, 3)), g((3,))]),
    ]
    y = one_hot(np.array([0, 2, 1]), 3)
    cases += [
        ("ece_loss", lambda a: ece_loss(a, y).sum(), [pos((3, 3)) + 0.5]),
        ("kl_dirichlet_uniform", lambda a: kl_dirichlet_uniform(a).sum(), [1.0 + rng.uniform(0.1, 3.0, size=(3, 3))]),
        ("decorrelation_loss", decorrelation_loss, [g((6, 4))]),
        ("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, np.array([0, 2, 1])).sum(), [g((3, 3))]),
    ]
    target = ChannelStats(g((2, 3)), rng.uniform(0.5, 2.0, size=(2, 3)))
    w_maps = _weights((2, 3, 4, 4), rng)
    cases.append(("renormalize", lambda z: (renormalize(z, target) * w_maps).sum(), [g((2, 3, 4, 4))]))
    cases.append(("dempster_fusion", _fusion_case(), [g((4, 3)), g((4, 3))]))
    cases.append(("micro_pipeline", _pipeline_case(rng), [g((6, 2, 4, 4))]))
    return cases


def _fusion_case():
    y = one_hot(np.array([0, 1, 2, 1]), 3)

    def fn(l1, l2):
        masses = [ev.masses_from_evidence_arrays(ops.exp(logit)) for logit in (l1, l2)]
        b, u, _, _ = ev.combine_arrays(masses[0][0], masses[0][1], masses[1][0], masses[1][1])
        return ece_loss(ev.dirichlet_from_masses_arrays(b, u), y).sum()

    return fn


def _pipeline_case(rng: Rng):
    """Extractor, three evidential heads with cross-domain fusion, decorrelation."""
    spec = ExtractorSpec(
        (2, 4, 4),
        (LayerSpec("conv", 3), LayerSpec("pool"), LayerSpec("flatten"), LayerSpec("linear", 3, act="none")),
    )
    model = Model.init(spec, 3, 3, rng.fork("pipeline"))
    batch_y = np.array([0, 1, 2, 1, 0, 2])
    domains = np.array([0, 0, 1, 1, 2, 2])
    cfg = TrainConfig(use_va=False, batch_per_domain=2)

    def fn(x):
        total, _ = objective(Batch(x, batch_y, domains), model, cfg)
        return total

    return fn


def run_suite(seed: int = 0, corrupt: str | None = None, h: float = 1e-5) -> list:
    """Max relative error per case; ``corrupt`` names a case whose analytic gradient is skewed (test hook)."""
    rng = Rng(seed)
    out = []
    names = set()
    for name, fn, arrays in _cases(rng):
        names.add(name)
        analytic = analytic_gradient(fn, arrays)
        if name == corrupt:
            analytic = [a * 1.01 + 1e-3 for a in analytic]
        numeric = numerical_gradient(fn, arrays, h=h)
        out.append(GradResult(name, max(relative_error(a, n) for a, n in zip(analytic, numeric))))
    if corrupt is not None and corrupt not in names:
        raise KeyError(f"no gradient case named {corrupt!r}")
    return out
