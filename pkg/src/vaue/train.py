"""Training loop: single- and cross-domain evidential losses, feature
decorrelation, AdamW with decoupled weight decay, and parameter EMA."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evidence as ev
from .data import Batch, DomainDataset, sample_balanced_batch
from .evloss import LossConfig, decorrelation_loss, ece_loss, one_hot, softmax_cross_entropy
from .model import Model, evidence_tensor, forward_features, head_logits
from .numcore import NumericalError, Rng, Tensor

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_per_domain: int = 64
    iterations: int = 400
    eval_interval: int = 100
    lambda_kl: float = 0.01
    ema_momentum: float = 0.999
    ema_warmup: bool = True
    seed: int = 0
    use_va: bool = True
    use_dempster: bool = True
    use_cross_domain: bool = True
    use_evidential: bool = True
    use_decor: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in [0, 1)")
        if self.batch_per_domain < 2:
            raise ValueError("batch_per_domain must be at least 2")
        if self.iterations < 0 or self.eval_interval < 1:
            raise ValueError("iterations must be >= 0 and eval_interval >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.lambda_kl < 0:
            raise ValueError("learning_rate must be positive; weight_decay, lambda_kl non-negative")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_kl)


# -- fusion ---------------------------------------------------------------


def leave_one_out_alpha(evidences, excluded: int) -> ev.DirichletParams:
    """Dirichlet of the opinion fused from every head except ``excluded``."""
    evidences = list(evidences)
    if len(evidences) < 2:
        raise ValueError("leave-one-out combination needs at least 2 heads")
    if not 0 <= excluded < len(evidences):
        raise IndexError(f"excluded head {excluded} out of range")
    masses = [ev.masses_from_evidence(e) for j, e in enumerate(evidences) if j != excluded]
    return ev.dirichlet_from_masses(ev.combine_all(masses))


def fuse_evidence(evidences, use_dempster=True, eps=ev.EPS_CONFLICT):
    """Fuse a list of ``B×C`` evidence arrays/tensors row by row.

    Returns ``(b, u, ok)`` where ``ok`` flags rows with no total conflict.
    """
    masses = [ev.masses_from_evidence_arrays(e) for e in evidences]
    if not use_dempster:
        n = float(len(masses))
        b = masses[0][0]
        u = masses[0][1]
        for bj, uj in masses[1:]:
            b = b + bj
            u = u + uj
        return b / n, u / n, np.ones(u.shape, dtype=bool)
    b, u = masses[0]
    ok = np.ones(u.shape, dtype=bool)
    for bj, uj in masses[1:]:
        b, u, _, step_ok = ev.combine_arrays(b, u, bj, uj, eps)
        ok &= step_ok
    return b, u, ok


# -- objectives -------------------------------------------------------------


@dataclass
class LossReport:
    total: float
    domain: float
    decor: float
    skipped: int = 0


def domain_loss(batch: Batch, model: Model, cfg: TrainConfig, rng: Rng | None = None, features=None):
    """Averaged single- plus cross-domain evidential loss.

    ``batch.domain`` indexes heads. Returns ``(loss, skipped)`` where
    ``skipped`` counts cross-domain terms dropped for total conflict.
    """
    if features is None:
        features = forward_features(batch.x, model, True, rng)
    n_heads = len(model.heads)
    domains = np.unique(batch.domain)
    if len(domains) == 0:
        raise ValueError("empty batch")
    if not cfg.use_evidential:
        logits = head_logits(features, model.heads[0])
        for h in model.heads[1:]:
            logits = logits + head_logits(features, h)
        per_sample = softmax_cross_entropy(logits / float(n_heads), batch.y)
        terms = [per_sample[np.flatnonzero(batch.domain == i)].mean() for i in domains]
        return _average(terms), 0
    evidences = [evidence_tensor(features, h) for h in model.heads]
    cross = cfg.use_cross_domain and n_heads >= 2
    terms = []
    skipped = 0
    for i in domains:
        idx = np.flatnonzero(batch.domain == i)
        y = one_hot(batch.y[idx], model.num_classes)
        own = evidences[i][idx] + 1.0
        term = ece_loss(own, y, cfg.loss).mean()
        if cross:
            others = [evidences[j][idx] for j in range(n_heads) if j != i]
            b, u, ok = fuse_evidence(others, cfg.use_dempster)
            ok = ok[:, 0]
            alpha = ev.dirichlet_from_masses_arrays(b, u)
            if not ok.all():
                skipped += int((~ok).sum())
                logger.warning("skipping %d cross-domain terms with total conflict", int((~ok).sum()))
            if ok.any():
                keep = np.flatnonzero(ok)
                term = term + ece_loss(alpha[keep], y[keep], cfg.loss).mean()
        terms.append(term)
    return _average(terms), skipped


def _average(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def total_loss(batch: Batch, model: Model, cfg: TrainConfig, rng: Rng | None = None):
    """Domain loss plus decorrelation of the pooled head-input features."""
    loss, _ = objective(batch, model, cfg, rng)
    return loss


def objective(batch: Batch, model: Model, cfg: TrainConfig, rng: Rng | None = None):
    features = forward_features(batch.x, model, True, rng)
    loss, skipped = domain_loss(batch, model, cfg, features=features)
    domain_value = loss.item()
    decor_value = 0.0
    if cfg.use_decor and features.shape[1] > 1:
        decor = decorrelation_loss(features)
        decor_value = decor.item()
        loss = loss + decor
    return loss, LossReport(loss.item(), domain_value, decor_value, skipped)


# -- optimiser and EMA ---------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def optimizer_step(params, grads, state: AdamState, cfg: TrainConfig):
    """AdamW update in place: ``p -= lr*wd*p`` first, then the adaptive step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state differ in length")
    state.step += 1
    lr = cfg.learning_rate
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data = p.data - lr * cfg.weight_decay * p.data
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


@dataclass
class EmaState:
    shadow: list
    momentum: float = 0.999
    warmup: bool = False
    updates: int = 0

    @classmethod
    def from_params(cls, params, momentum=0.999, warmup=False):
        return cls([np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params], momentum, warmup)

    @property
    def effective_momentum(self) -> float:
        if self.warmup:
            return min(self.momentum, (1.0 + self.updates) / (10.0 + self.updates))
        return self.momentum


def ema_update(ema: EmaState, params) -> EmaState:
    """``shadow = m * shadow + (1 - m) * params`` componentwise, in place."""
    if len(params) != len(ema.shadow):
        raise ValueError("EMA shadow and parameters differ in length")
    m = ema.effective_momentum
    for s, p in zip(ema.shadow, params):
        value = p.data if isinstance(p, Tensor) else np.asarray(p)
        if value.shape != s.shape:
            raise ValueError(f"EMA shape {s.shape} does not match parameter {value.shape}")
        s *= m
        s += (1.0 - m) * value
    ema.updates += 1
    return ema


# -- evaluation -----------------------------------------------------------------


def predict_batch(model: Model, x, cfg: TrainConfig):
    """Eval-mode predictions ``(classes, uncertainty, ok)`` for inputs ``x``.

    Without evidential heads the uncertainty column is ``1 - max softmax``.
    """
    features = forward_features(x, model, False)
    if not cfg.use_evidential:
        logits = np.mean([head_logits(features, h).data for h in model.heads], axis=0)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return p.argmax(axis=1), 1.0 - p.max(axis=1), np.ones(len(p), dtype=bool)
    evidences = [evidence_tensor(features, h).data for h in model.heads]
    b, u, ok = fuse_evidence(evidences, cfg.use_dempster)
    return b.argmax(axis=1), u[:, 0], ok[:, 0]


def evaluate(dataset: DomainDataset, model: Model, cfg: TrainConfig) -> dict:
    """Top-1 accuracy and mean fused uncertainty; conflicted samples count as wrong."""
    if len(dataset) == 0:
        return {"accuracy": float("nan"), "mean_u": float("nan"), "conflicts": 0, "n": 0}
    pred, u, ok = predict_batch(model, dataset.x, cfg)
    correct = (pred == dataset.y) & ok
    return {
        "accuracy": float(correct.mean()),
        "mean_u": float(u[ok].mean()) if ok.any() else float("nan"),
        "conflicts": int((~ok).sum()),
        "n": int(len(dataset)),
    }


# -- loop ---------------------------------------------------------------------


@dataclass
class FitResult:
    rows: list
    best_state: list
    best_iteration: int
    best_val_acc: float
    final_state: list
    ema_state: list
    losses: list = field(default_factory=list)


def fit(model: Model, train_sets, val_sets, test_set, cfg: TrainConfig, rng: Rng, on_eval=None) -> FitResult:
    """Train ``model`` in place; select the EMA snapshot with the best pooled validation accuracy.

    ``train_sets[i]`` feeds head ``i``. ``rng`` is forked into ``"batches"``
    and ``"style"`` streams.
    """
    if len(train_sets) != len(model.heads):
        raise ValueError(f"{len(train_sets)} source domains but {len(model.heads)} heads")
    batch_rng = rng.fork("batches")
    style_rng = rng.fork("style")
    params = model.parameters()
    opt = AdamState.zeros_like(params)
    ema = EmaState.from_params(params, cfg.ema_momentum, cfg.ema_warmup)
    if not val_sets or any(len(ds) == 0 for ds in val_sets):
        raise ValueError("every source domain needs a non-empty validation split")
    rows, losses = [], []
    best_state, best_iter, best_val = [s.copy() for s in ema.shadow], 0, -1.0
    running = []
    for it in range(1, cfg.iterations + 1):
        batch = sample_balanced_batch(train_sets, cfg.batch_per_domain, batch_rng)
        try:
            loss, report = objective(batch, model, cfg, style_rng)
            for p in params:
                p.zero_grad()
            loss.backward()
        except NumericalError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}") from exc
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
        for (name, _), g in zip(model.named_parameters(), grads):
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(f"iteration {it}: non-finite gradient in {name}")
        optimizer_step(params, grads, opt, cfg)
        ema_update(ema, params)
        losses.append(report.total)
        running.append(report.total)
        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            snapshot = model.with_params(ema.shadow)
            per_val = [evaluate(ds, snapshot, cfg) for ds in val_sets]
            # pooled accuracy as the size-weighted mean of per-domain accuracies
            val_acc = sum(m["accuracy"] * m["n"] for m in per_val) / sum(m["n"] for m in per_val)
            row = {"iteration": it, "train_loss": float(np.mean(running)), "val_acc": val_acc}
            running = []
            for ds, m in zip(val_sets, per_val):
                row[f"acc_domain{ds.domain_id}"] = m["accuracy"]
            if test_set is not None:
                test = evaluate(test_set, snapshot, cfg)
                row["test_acc"] = test["accuracy"]
                row["mean_u_test"] = test["mean_u"]
                row[f"acc_domain{test_set.domain_id}"] = test["accuracy"]
            rows.append(row)
            if val_acc > best_val:
                best_val, best_iter = val_acc, it
                best_state = [s.copy() for s in ema.shadow]
            if on_eval is not None:
                on_eval(row)
    return FitResult(rows, best_state, best_iter, best_val, model.state(), [s.copy() for s in ema.shadow], losses)
