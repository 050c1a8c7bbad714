"""Synthetic multi-domain datasets, splits and balanced batching.

Two generators ship:

``blobs-and-styles``
    Image-like samples (K×H×W). Each class has a fixed random template
    shared by all domains; a domain differs only through a channel-wise
    affine "style" transform, i.e. pure covariate shift.

``rotated-wedges``
    Points in the plane labelled by angular wedge. Each domain rotates the
    wedge boundaries (conditional shift) and applies a per-feature affine
    transform (covariate shift).

Semantic content of domain ``i`` comes from ``rng.fork("domain", i)``;
class templates come from ``rng.fork("templates")``, so every domain
shares them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Rng

GENERATORS = ("blobs-and-styles", "rotated-wedges")
CACHE_MAGIC = b"VAUEDATA"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "blobs-and-styles"
    num_classes: int = 4
    num_domains: int = 4
    samples_per_domain: int = 400
    channels: int = 3
    height: int = 8
    width: int = 8
    vector_dim: int = 2
    semantic_noise: float = 0.6
    style_scale: tuple = ()
    style_shift: tuple = ()
    style_noise: float = 0.1
    rotation: tuple = ()

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_domains < 1:
            raise ValueError("num_domains must be at least 1")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be positive")
        if self.generator == "rotated-wedges" and self.vector_dim < 2:
            raise ValueError("rotated-wedges needs vector_dim >= 2")
        width = self.style_width
        scale = _per_domain(self.style_scale, self.num_domains, width, 1.0, "style_scale")
        shift = _per_domain(self.style_shift, self.num_domains, width, 0.0, "style_shift")
        if np.any(scale == 0.0):
            raise ValueError("style_scale entries must be non-zero (invertible transform)")
        rotation = tuple(float(r) for r in self.rotation) or (0.0,) * self.num_domains
        if len(rotation) != self.num_domains:
            raise ValueError(f"rotation needs {self.num_domains} entries, got {len(rotation)}")
        object.__setattr__(self, "style_scale", tuple(map(tuple, scale.tolist())))
        object.__setattr__(self, "style_shift", tuple(map(tuple, shift.tolist())))
        object.__setattr__(self, "rotation", rotation)

    @property
    def is_image(self) -> bool:
        return self.generator == "blobs-and-styles"

    @property
    def style_width(self) -> int:
        return self.channels if self.is_image else self.vector_dim

    @property
    def input_shape(self) -> tuple:
        return (self.channels, self.height, self.width) if self.is_image else (self.vector_dim,)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("style_scale", "style_shift", "rotation"):
            d[key] = json.loads(json.dumps(d[key]))
        return d


def _per_domain(values, num_domains, width, default, name) -> np.ndarray:
    if not values:
        return np.full((num_domains, width), default)
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.repeat(arr[:, None], width, axis=1)
    if arr.shape != (num_domains, width):
        raise ValueError(f"{name} must have shape ({num_domains}, {width}), got {arr.shape}")
    return arr


@dataclass(eq=False)
class DomainDataset:
    x: np.ndarray
    y: np.ndarray
    domain_id: int
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if not self.num_classes:
            self.num_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.y)

    def subset(self, index) -> DomainDataset:
        return DomainDataset(self.x[index], self.y[index], self.domain_id, self.num_classes)


@dataclass(eq=False)
class Batch:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray  # position of the source dataset in the list, not domain_id

    def __len__(self):
        return len(self.y)


# -- generators -------------------------------------------------------------


def class_templates(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    """``C × K × H × W`` zero-mean, unit-variance smooth random patterns."""
    c, k, h, w = spec.num_classes, spec.channels, spec.height, spec.width
    coarse = rng.normal((c, k, (h + 1) // 2, (w + 1) // 2))
    fine = np.repeat(np.repeat(coarse, 2, axis=2), 2, axis=3)[:, :, :h, :w]
    fine = fine - fine.mean(axis=(2, 3), keepdims=True)
    return fine / (fine.std(axis=(2, 3), keepdims=True) + 1e-12)


def wedge_label(points: np.ndarray, rotation: float, num_classes: int) -> np.ndarray:
    """Index of the angular wedge containing each point after rotating the boundaries."""
    theta = np.arctan2(points[:, 1], points[:, 0])
    width = 2.0 * np.pi / num_classes
    return (np.floor(np.mod(theta - rotation, 2.0 * np.pi) / width).astype(np.int64)) % num_classes


def _semantic_images(spec, templates, rng, n):
    labels = rng.integers(0, spec.num_classes, size=n)
    amplitude = 1.0 + 0.2 * rng.normal(n)
    noise = rng.normal((n,) + spec.input_shape)
    x = amplitude[:, None, None, None] * templates[labels] + spec.semantic_noise * noise
    return x, labels


def _semantic_points(spec, rng, n, rotation):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    radius = rng.uniform(0.5, 1.5, size=n)
    points = np.zeros((n, spec.vector_dim))
    points[:, 0] = radius * np.cos(theta)
    points[:, 1] = radius * np.sin(theta)
    points[:, 2:] = spec.semantic_noise * rng.normal((n, spec.vector_dim - 2))
    return points, wedge_label(points, rotation, spec.num_classes)


def apply_style(x, scale, shift, style_noise, rng):
    """Per-sample jittered channel-wise affine map ``x * a + c``.

    Draws ``n × width`` normals for the scale jitter, then the same for the
    shift jitter.
    """
    n, width = len(x), len(scale)
    a = np.asarray(scale) * (1.0 + style_noise * rng.normal((n, width)))
    c = np.asarray(shift) + style_noise * rng.normal((n, width))
    tail = (1,) * (x.ndim - 2)
    return x * a.reshape((n, width) + tail) + c.reshape((n, width) + tail)


def gen_synthetic_domains(spec: SyntheticSpec, rng: Rng) -> list:
    templates = class_templates(spec, rng.fork("templates")) if spec.is_image else None
    out = []
    for i in range(spec.num_domains):
        r = rng.fork("domain", i)
        n = spec.samples_per_domain
        if spec.is_image:
            x, y = _semantic_images(spec, templates, r, n)
        else:
            x, y = _semantic_points(spec, r, n, spec.rotation[i])
        x = apply_style(x, spec.style_scale[i], spec.style_shift[i], spec.style_noise, r)
        out.append(DomainDataset(x, y, i, spec.num_classes))
    return out


# -- splits and batches -----------------------------------------------------


def split_train_val(ds: DomainDataset, ratio: float = 0.8, rng: Rng | None = None):
    """Random ``floor(ratio * n)`` / remainder split."""
    n = len(ds)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    n_train = int(np.floor(ratio * n + 1e-9))
    return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))


def sample_balanced_batch(datasets, batch_per_domain: int, rng: Rng) -> Batch:
    """``batch_per_domain`` samples with replacement from every dataset, in list order."""
    xs, ys, ds_index = [], [], []
    for i, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ValueError(f"dataset {i} (domain {ds.domain_id}) is empty")
        idx = rng.integers(0, len(ds), size=batch_per_domain)
        xs.append(ds.x[idx])
        ys.append(ds.y[idx])
        ds_index.append(np.full(batch_per_domain, i, dtype=np.int64))
    return Batch(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds_index))


def uniform_noise_like(ds: DomainDataset, n: int, rng: Rng) -> np.ndarray:
    """Structureless uniform noise with the channel-wise mean and std of ``ds``.

    Images are matched per channel (pooled over space), vectors per feature.
    """
    axes = (0, 2, 3) if ds.x.ndim == 4 else (0,)
    mean = ds.x.mean(axis=axes, keepdims=True)[0]
    std = ds.x.std(axis=axes, keepdims=True)[0]
    half_width = np.sqrt(3.0) * std
    return mean - half_width + 2.0 * half_width * rng.uniform(size=(n,) + ds.x.shape[1:])


# -- cache files ------------------------------------------------------------


def _payload(datasets) -> bytes:
    parts = []
    for ds in datasets:
        parts.append(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
    return b"".join(parts)


def save_dataset_cache(path, datasets, spec: SyntheticSpec, seed: int):
    payload = _payload(datasets)
    header = {
        "version": CACHE_VERSION,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "domains": [
            {"domain_id": ds.domain_id, "x_shape": list(ds.x.shape), "num_classes": ds.num_classes}
            for ds in datasets
        ],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)


def load_dataset_cache(path):
    """Return ``(datasets, header)``; verifies magic, version and checksum."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CACHE_MAGIC):
        raise IOError(f"{path}: not a dataset cache")
    offset = len(CACHE_MAGIC)
    (size,) = struct.unpack("<Q", raw[offset : offset + 8])
    header = json.loads(raw[offset + 8 : offset + 8 + size])
    if header.get("version") != CACHE_VERSION:
        raise IOError(f"{path}: unsupported cache version {header.get('version')}")
    payload = raw[offset + 8 + size :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise IOError(f"{path}: checksum mismatch")
    datasets, pos = [], 0
    for entry in header["domains"]:
        shape = entry["x_shape"]
        count = int(np.prod(shape))
        x = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        y = np.frombuffer(payload, dtype="<i8", count=shape[0], offset=pos)
        pos += 8 * shape[0]
        datasets.append(DomainDataset(x.astype(np.float64), y.astype(np.int64), entry["domain_id"], entry["num_classes"]))
    return datasets, header


def spec_from_dict(d: dict) -> SyntheticSpec:
    return SyntheticSpec(**d)
