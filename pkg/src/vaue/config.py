"""Experiment configuration: a TOML file, dotted-path overrides, defaults.

A config file has one table per component::

    [dataset]     SyntheticSpec fields
    [model]       layers, insertion_points, clip_bound
    [style]       StyleAlignConfig fields          (optional)
    [train]       TrainConfig fields
    [experiment]  held_out, seeds, output_dir, workers, noise_samples

``dataset``, ``model`` and ``train`` must be present; every key inside a
table may be omitted and takes its library default.
"""

from __future__ import annotations

import copy
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticSpec
from .model import DEFAULT_CLIP, ExtractorSpec, LayerSpec
from .style_align import StyleAlignConfig
from .train import TrainConfig

OUTPUT_ENV = "VAUE_OUTPUT_DIR"
REQUIRED_SECTIONS = ("dataset", "model", "train")
OPTIONAL_SECTIONS = ("style", "experiment")
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the field."""


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple = ()
    insertion_points: tuple = ()
    clip_bound: float = DEFAULT_CLIP

    def extractor(self, input_shape, with_alignment: bool = True) -> ExtractorSpec:
        points = self.insertion_points if with_alignment else ()
        return ExtractorSpec(input_shape, self.layers, points)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSpec
    model: ModelConfig
    train: TrainConfig
    style: StyleAlignConfig = field(default_factory=StyleAlignConfig)
    held_out: int = 0
    seeds: tuple = (0,)
    output_dir: str = "runs"
    workers: int = 1
    noise_samples: int = 0

    def __post_init__(self):
        if not 0 <= self.held_out < self.dataset.num_domains:
            raise ConfigError(
                f"experiment.held_out: {self.held_out} is not a domain index (0..{self.dataset.num_domains - 1})"
            )
        if self.dataset.num_domains < 2:
            raise ConfigError("dataset.num_domains: leave-one-out needs at least 2 domains")
        if not self.seeds:
            raise ConfigError("experiment.seeds: must be non-empty")
        if self.workers < 1:
            raise ConfigError("experiment.workers: must be at least 1")
        if self.noise_samples < 0:
            raise ConfigError("experiment.noise_samples: must be non-negative")

    def to_dict(self) -> dict:
        """Plain-data echo; :func:`from_mapping` of it rebuilds an equal config."""
        return {
            "version": CONFIG_VERSION,
            "dataset": self.dataset.to_dict(),
            "model": {
                "layers": [asdict(layer) for layer in self.model.layers],
                "insertion_points": list(self.model.insertion_points),
                "clip_bound": self.model.clip_bound,
            },
            "style": asdict(self.style),
            "train": asdict(self.train),
            "experiment": {
                "held_out": self.held_out,
                "seeds": list(self.seeds),
                "output_dir": self.output_dir,
                "workers": self.workers,
                "noise_samples": self.noise_samples,
            },
        }


def _build(cls, section: str, table) -> object:
    if not isinstance(table, dict):
        raise ConfigError(f"{section}: expected a table")
    known = {f.name for f in fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
    try:
        return cls(**table)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _model_config(table) -> ModelConfig:
    if not isinstance(table, dict):
        raise ConfigError("model: expected a table")
    for key in table:
        if key not in ("layers", "insertion_points", "clip_bound"):
            raise ConfigError(f"model.{key}: unknown field")
    if not table.get("layers"):
        raise ConfigError("model.layers: at least one layer is required")
    layers = []
    for i, entry in enumerate(table["layers"]):
        try:
            layers.append(LayerSpec(**entry))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.layers[{i}]: {exc}") from exc
    clip = float(table.get("clip_bound", DEFAULT_CLIP))
    if not clip > 0:
        raise ConfigError("model.clip_bound: must be positive")
    return ModelConfig(tuple(layers), tuple(int(p) for p in table.get("insertion_points", ())), clip)


def from_mapping(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    raw.pop("version", None)
    for name in REQUIRED_SECTIONS:
        if name not in raw:
            raise ConfigError(f"{name}: required section is missing")
    for name in raw:
        if name not in REQUIRED_SECTIONS + OPTIONAL_SECTIONS:
            raise ConfigError(f"{name}: unknown section")
    dataset = _build(SyntheticSpec, "dataset", raw["dataset"])
    model = _model_config(raw["model"])
    train = _build(TrainConfig, "train", raw["train"])
    style = _build(StyleAlignConfig, "style", raw.get("style", {}))
    exp = dict(raw.get("experiment", {}))
    allowed = {"held_out", "seeds", "output_dir", "workers", "noise_samples"}
    for key in exp:
        if key not in allowed:
            raise ConfigError(f"experiment.{key}: unknown field")
    seeds = exp.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    cfg = ExperimentConfig(
        dataset,
        model,
        train,
        style,
        held_out=int(exp.get("held_out", 0)),
        seeds=tuple(int(s) for s in seeds),
        output_dir=str(exp.get("output_dir", "runs")),
        workers=int(exp.get("workers", 1)),
        noise_samples=int(exp.get("noise_samples", 0)),
    )
    try:
        cfg.model.extractor(dataset.input_shape)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def parse_override(text: str):
    """Split ``section.key=value``; the value is read as a TOML literal, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected dotted.path=value")
    path, value = text.split("=", 1)
    keys = [k.strip() for k in path.split(".")]
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override {text!r}: path needs a section and a key")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return keys, parsed


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = out
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: {k} is not a table")
            node = child
        node[keys[-1]] = value
    return out


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Read ``path`` (or the shipped default), apply overrides, then the output-dir env var."""
    raw = read_toml(path) if path is not None else default_raw()
    raw = apply_overrides(raw, overrides)
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        raw.setdefault("experiment", {})["output_dir"] = env[OUTPUT_ENV]
    return from_mapping(raw)


def shipped_config_path(name: str = "default") -> Path:
    return Path(str(resources.files("vaue") / "configs" / f"{name}.toml"))


def default_raw(name: str = "default") -> dict:
    return read_toml(shipped_config_path(name))
