"""Command-line entry point: ``vaue {train,ablate,eval,fuse,gradcheck,data}``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical abort,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evidence as ev
from .config import ConfigError, from_mapping, load_config
from .data import gen_synthetic_domains, load_dataset_cache, save_dataset_cache
from .evidence import ConflictError, EvidenceError
from .experiment import ABLATION_ROWS, VARIANTS, run_grid, run_single, table_csv, variant_train_config
from .gradsuite import run_suite
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .numcore import NumericalError, Rng
from .train import TrainingAborted, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
FORMAT_VERSION = 1

logger = logging.getLogger("vaue")


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_line(config: dict, seed) -> str:
    """Comment line carried at the top of every CSV artifact."""
    return "# " + json.dumps({"format_version": FORMAT_VERSION, "seed": seed, "config": config}, sort_keys=True)


class _MetricsWriter:
    def __init__(self, path: Path, config: dict, seed: int):
        self.path = path
        self.header = None
        path.write_text(_echo_line(config, seed) + "\n")

    def __call__(self, row: dict):
        if self.header is None:
            fixed = ["iteration", "train_loss", "val_acc", "test_acc", "mean_u_test"]
            self.header = fixed + sorted((k for k in row if k not in fixed), key=lambda k: (len(k), k))
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.header)
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(k, "")) for k in self.header])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    root = Path(cfg.output_dir) / "train" / f"heldout{cfg.held_out}"
    echo = cfg.to_dict()
    for seed in seeds:
        out = root / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        writer = _MetricsWriter(out / "metrics.csv", echo, seed)
        result = run_single(cfg, cfg.held_out, seed, args.variant, on_eval=writer)
        meta = {"config": echo, "seed": seed, "variant": args.variant, "held_out": cfg.held_out}
        save_checkpoint(out / "checkpoint.vckpt", result.model, meta)
        summary = {
            "format_version": FORMAT_VERSION,
            "config": echo,
            "seed": seed,
            "timestamp": _timestamp(),
            **result.summary(),
        }
        summary["final_test_acc"] = result.rows[-1].get("test_acc") if result.rows else None
        _write_json(out / "summary.json", summary)
        print(f"held-out {cfg.held_out} seed {seed}: test_acc {result.test_acc:.4f} mean_u {result.mean_u_test:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    variants = args.variants or list(ABLATION_ROWS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"variants: unknown variant {v!r}; expected one of {sorted(VARIANTS)}")
    held_outs = list(range(cfg.dataset.num_domains))
    results = run_grid(cfg, variants, held_outs, workers=args.workers)
    out = Path(cfg.output_dir) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    table = table_csv(results, variants, held_outs)
    (out / "ablation.csv").write_text(_echo_line(cfg.to_dict(), list(cfg.seeds)) + "\n" + table)
    _write_json(
        out / "runs.json",
        {
            "format_version": FORMAT_VERSION,
            "config": cfg.to_dict(),
            "seeds": list(cfg.seeds),
            "timestamp": _timestamp(),
            "runs": [r.summary() for r in results],
        },
    )
    print(table, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    seed = meta.get("seed", 0)
    if "config" not in meta:
        raise ConfigError("checkpoint: meta carries no config echo")
    cfg = from_mapping(meta["config"])
    train_cfg = variant_train_config(cfg.train, meta.get("variant", "VAUE"))
    if args.dataset:
        datasets, _ = load_dataset_cache(args.dataset)
        targets = datasets if args.domain is None else [d for d in datasets if d.domain_id == args.domain]
    else:
        held = meta.get("held_out", cfg.held_out)
        domains = gen_synthetic_domains(cfg.dataset, Rng(seed).fork("data"))
        targets = [domains[held if args.domain is None else args.domain]]
    if not targets:
        raise ConfigError(f"domain: {args.domain} not present in the dataset")
    report = {
        "format_version": FORMAT_VERSION,
        "checkpoint": str(args.checkpoint),
        "seed": seed,
        "domains": {str(d.domain_id): evaluate(d, model, train_cfg) for d in targets},
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_fuse(args) -> int:
    text = Path(args.masses).read_text()
    masses = ev.parse_mass_sets(text)
    if not masses:
        raise EvidenceError("no mass sets in input")
    conflicts = ev.pairwise_conflicts(masses) if len(masses) > 1 else []
    combined = ev.combine_all(masses)
    cls, u = ev.predict(combined)
    print("b = " + " ".join(f"{v:.12g}" for v in combined.b))
    print(f"u = {u:.12g}")
    print(f"predicted class = {cls}")
    print("conflicts = " + (" ".join(f"{f:.12g}" for f in conflicts) if conflicts else "none"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} within tolerance")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def cmd_data(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    domains = gen_synthetic_domains(cfg.dataset, Rng(seed).fork("data"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset_cache(out, domains, cfg.dataset, seed)
    print(f"wrote {len(domains)} domains ({sum(len(d) for d in domains)} samples) to {out}")
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("-c", "--config", type=Path, help="TOML config (default: the shipped default.toml)")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a key, e.g. train.iterations=50")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaue", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="leave-one-domain-out training for the configured held-out domain")
    _add_config_args(p)
    p.add_argument("--seed", type=int, help="run only this seed instead of experiment.seeds")
    p.add_argument("--variant", default="VAUE", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="method variants over every held-out domain and seed")
    _add_config_args(p)
    p.add_argument("--variants", nargs="+", help=f"rows to run (default: {', '.join(ABLATION_ROWS)})")
    p.add_argument("--workers", type=int, help="parallel processes (default: experiment.workers)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--dataset", type=Path, help="dataset cache (default: regenerate from the checkpoint's config)")
    p.add_argument("--domain", type=int, help="domain id (default: the checkpoint's held-out domain, or all in a cache)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="combine mass sets from a file with the reduced Dempster rule")
    p.add_argument("masses", type=Path, help="one mass set per line: b_1 ... b_C u")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("data", help="write a synthetic dataset cache")
    _add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EvidenceError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConflictError, NumericalError, TrainingAborted) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
