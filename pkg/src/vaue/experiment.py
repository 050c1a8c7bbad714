"""Leave-one-domain-out runs, method variants and result tables.

One run is fully determined by ``(config, held_out, seed, variant)``. The
master ``Rng(seed)`` is forked into ``"data"``, ``"split"`` (per domain),
``"init"``, ``"noise"`` and the training streams, so every component owns
an independent stream.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig
from .data import gen_synthetic_domains, split_train_val, uniform_noise_like
from .model import Model, parameter_checksum
from .numcore import Rng
from .train import TrainConfig, evaluate, fit, predict_batch

logger = logging.getLogger(__name__)

# Switch settings applied on top of the configured TrainConfig.
VARIANTS = {
    "VAUE": {},
    "VAUE w/o VA": {"use_va": False},
    "VAUE w/o EC": {"use_dempster": False},
    "VAUE w/o CD": {"use_cross_domain": False},
    "VAUE w/o UE": {"use_evidential": False},
    "ERM": {"use_va": False, "use_evidential": False, "use_decor": False},
}
ABLATION_ROWS = ("VAUE", "VAUE w/o VA", "VAUE w/o EC", "VAUE w/o CD", "VAUE w/o UE")


def variant_train_config(train: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return replace(train, **VARIANTS[variant])


@dataclass
class RunResult:
    held_out: int
    seed: int
    variant: str
    test_acc: float
    mean_u_test: float
    mean_u_noise: float
    conflicts: int
    best_iteration: int
    best_val_acc: float
    per_domain: dict
    rows: list
    checksum: str
    model: Model = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "held_out": self.held_out,
            "seed": self.seed,
            "variant": self.variant,
            "test_acc": self.test_acc,
            "mean_u_test": self.mean_u_test,
            "mean_u_noise": self.mean_u_noise,
            "conflicts": self.conflicts,
            "best_iteration": self.best_iteration,
            "best_val_acc": self.best_val_acc,
            "per_domain": self.per_domain,
            "checksum": self.checksum,
        }


def prepare_data(cfg: ExperimentConfig, held_out: int, master: Rng):
    domains = gen_synthetic_domains(cfg.dataset, master.fork("data"))
    test = domains[held_out]
    sources = [d for d in domains if d.domain_id != held_out]
    splits = [split_train_val(d, 0.8, master.fork("split", d.domain_id)) for d in sources]
    return [s[0] for s in splits], [s[1] for s in splits], test


def run_single(cfg: ExperimentConfig, held_out: int, seed: int, variant: str = "VAUE", on_eval=None) -> RunResult:
    train_cfg = replace(variant_train_config(cfg.train, variant), seed=seed)
    master = Rng(seed)
    train_sets, val_sets, test = prepare_data(cfg, held_out, master)
    spec = cfg.model.extractor(cfg.dataset.input_shape, with_alignment=train_cfg.use_va)
    model = Model.init(spec, cfg.dataset.num_classes, len(train_sets), master.fork("init"), cfg.style, cfg.model.clip_bound)
    result = fit(model, train_sets, val_sets, test, train_cfg, master, on_eval)
    best = model.with_params(result.best_state)
    metrics = evaluate(test, best, train_cfg)
    per_domain = {str(ds.domain_id): evaluate(ds, best, train_cfg)["accuracy"] for ds in val_sets}
    per_domain[str(test.domain_id)] = metrics["accuracy"]
    n_noise = cfg.noise_samples or len(test)
    noise = uniform_noise_like(test, n_noise, master.fork("noise"))
    _, u_noise, ok_noise = predict_batch(best, noise, train_cfg)
    return RunResult(
        held_out=held_out,
        seed=seed,
        variant=variant,
        test_acc=metrics["accuracy"],
        mean_u_test=metrics["mean_u"],
        mean_u_noise=float(u_noise[ok_noise].mean()) if ok_noise.any() else float("nan"),
        conflicts=metrics["conflicts"],
        best_iteration=result.best_iteration,
        best_val_acc=result.best_val_acc,
        per_domain=dict(sorted(per_domain.items(), key=lambda kv: int(kv[0]))),
        rows=result.rows,
        checksum=parameter_checksum(result.best_state),
        model=best,
    )


def _run_job(args):
    cfg, held_out, seed, variant = args
    result = run_single(cfg, held_out, seed, variant)
    result.model = None  # keep inter-process traffic small
    return result


def run_grid(cfg: ExperimentConfig, variants, held_outs=None, seeds=None, workers=None) -> list:
    """Every ``variant × held-out × seed`` run, in that nesting order."""
    held_outs = range(cfg.dataset.num_domains) if held_outs is None else held_outs
    seeds = cfg.seeds if seeds is None else seeds
    jobs = [(cfg, h, s, v) for v in variants for h in held_outs for s in seeds]
    workers = cfg.workers if workers is None else workers
    if workers <= 1:
        out = []
        for job in jobs:
            out.append(_run_job(job))
            r = out[-1]
            logger.info("%s held-out %d seed %d: acc %.4f", r.variant, r.held_out, r.seed, r.test_acc)
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def aggregate(results, variants, held_outs) -> dict:
    """``{variant: {held_out: [test_acc over seeds]}}``."""
    table = {v: {h: [] for h in held_outs} for v in variants}
    for r in results:
        table[r.variant][r.held_out].append(r.test_acc)
    return table


def format_cell(values) -> str:
    values = np.asarray(values, dtype=np.float64) * 100.0
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return f"{values.mean():.2f} ± {std:.2f}"


def method_average(per_domain: dict) -> list:
    """Per-seed average over held-out domains."""
    columns = [np.asarray(v, dtype=np.float64) for v in per_domain.values()]
    return list(np.mean(np.stack(columns), axis=0))


def table_csv(results, variants, held_outs) -> str:
    """Methods as rows, one column per held-out domain plus ``Avg``; cells are ``mean ± std`` in percent."""
    table = aggregate(results, variants, held_outs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method"] + [f"domain{h}" for h in held_outs] + ["Avg"])
    for v in variants:
        cells = [format_cell(table[v][h]) for h in held_outs]
        writer.writerow([v] + cells + [format_cell(method_average(table[v]))])
    return buf.getvalue()
