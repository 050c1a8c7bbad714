"""Shared feature extractor with embedded style alignment, and per-domain
evidence heads."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import style_align
from .evidence import EvidenceVector
from .numcore import Rng, Tensor, ops

LAYER_KINDS = ("conv", "linear", "pool", "flatten")
ACTIVATIONS = ("relu", "none")
DEFAULT_CLIP = 10.0

CHECKPOINT_MAGIC = b"VAUECKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    act: str = "relu"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.kind in ("conv", "linear") and self.out < 1:
            raise ValueError(f"{self.kind} layer needs a positive output size")
        if self.kind == "conv" and self.kernel % 2 != 1:
            raise ValueError("conv kernel must be odd (same padding)")


@dataclass(frozen=True)
class ExtractorSpec:
    input_shape: tuple
    layers: tuple = ()
    insertion_points: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        points = tuple(sorted(set(int(i) for i in self.insertion_points)))
        object.__setattr__(self, "insertion_points", points)
        for i in points:
            if not 0 <= i < len(layers):
                raise ValueError(f"insertion point {i} does not reference a layer")
        shapes = self.layer_shapes()
        if len(shapes[-1]) != 1:
            raise ValueError(f"extractor output must be a vector, got shape {shapes[-1]}")

    def layer_shapes(self) -> list:
        """Per-sample shape after each layer, starting with the input."""
        shape = self.input_shape
        shapes = [shape]
        for layer in self.layers:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"conv layer needs a K×H×W input, got {shape}")
                shape = (layer.out, shape[1], shape[2])
            elif layer.kind == "pool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"2×2 pooling needs even spatial dims, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                if len(shape) != 1:
                    raise ValueError(f"linear layer needs a vector input, got {shape}")
                shape = (layer.out,)
            shapes.append(shape)
        return shapes

    @property
    def feature_dim(self) -> int:
        return self.layer_shapes()[-1][0]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
            "insertion_points": list(self.insertion_points),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExtractorSpec:
        return cls(d["input_shape"], tuple(LayerSpec(**l) for l in d["layers"]), d.get("insertion_points", ()))


@dataclass
class DomainHead:
    weight: Tensor
    bias: Tensor
    clip_bound: float = DEFAULT_CLIP


@dataclass
class Model:
    spec: ExtractorSpec
    num_classes: int
    layer_params: list
    heads: list
    style: style_align.StyleAlignConfig = field(default_factory=style_align.StyleAlignConfig)

    @classmethod
    def init(cls, spec, num_classes, num_heads, rng: Rng, style=None, clip_bound=DEFAULT_CLIP):
        """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases.

        Draw order: layers in declaration order (weight, then nothing for
        the bias), then heads in order.
        """
        shapes = spec.layer_shapes()
        layer_params = []
        for layer, shape in zip(spec.layers, shapes[:-1]):
            if layer.kind == "conv":
                fan_in = shape[0] * layer.kernel**2
                w = rng.normal((layer.out, shape[0], layer.kernel, layer.kernel)) / np.sqrt(fan_in)
                layer_params.append((Tensor(w, True), Tensor(np.zeros(layer.out), True)))
            elif layer.kind == "linear":
                w = rng.normal((shape[0], layer.out)) / np.sqrt(shape[0])
                layer_params.append((Tensor(w, True), Tensor(np.zeros(layer.out), True)))
            else:
                layer_params.append(None)
        dim = spec.feature_dim
        heads = [
            DomainHead(
                Tensor(rng.normal((dim, num_classes)) / np.sqrt(dim), True),
                Tensor(np.zeros(num_classes), True),
                clip_bound,
            )
            for _ in range(num_heads)
        ]
        return cls(spec, num_classes, layer_params, heads, style or style_align.StyleAlignConfig())

    def named_parameters(self) -> list:
        out = []
        for i, p in enumerate(self.layer_params):
            if p is not None:
                out += [(f"layer{i}.weight", p[0]), (f"layer{i}.bias", p[1])]
        for j, h in enumerate(self.heads):
            out += [(f"head{j}.weight", h.weight), (f"head{j}.bias", h.bias)]
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def state(self) -> list:
        return [t.data.copy() for t in self.parameters()]

    def with_params(self, arrays) -> Model:
        """A model sharing this spec whose parameters are copies of ``arrays``."""
        arrays = list(arrays)
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        it = iter(Tensor(a, True) for a in arrays)
        for a, p in zip(arrays, params):
            if np.shape(a) != p.shape:
                raise ValueError(f"shape mismatch {np.shape(a)} vs {p.shape}")
        layer_params = [None if p is None else (next(it), next(it)) for p in self.layer_params]
        heads = [DomainHead(next(it), next(it), h.clip_bound) for h in self.heads]
        return Model(self.spec, self.num_classes, layer_params, heads, self.style)


def _avg_pool2(x: Tensor) -> Tensor:
    b, k, h, w = x.shape
    return x.reshape(b, k, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def forward_features(x, model: Model, train_mode: bool, rng: Rng | None = None) -> Tensor:
    """Run the extractor on a batch ``B × input_shape``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    spec = model.spec
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    if train_mode and spec.insertion_points and rng is None:
        raise ValueError("training-mode forward with style alignment needs an Rng")
    h = x
    for i, (layer, params) in enumerate(zip(spec.layers, model.layer_params)):
        if layer.kind == "conv":
            h = ops.conv2d(h, params[0], params[1], padding=layer.kernel // 2)
        elif layer.kind == "linear":
            h = h @ params[0] + params[1]
        elif layer.kind == "pool":
            h = _avg_pool2(h)
        else:
            h = h.reshape(h.shape[0], -1)
        if layer.kind in ("conv", "linear") and layer.act == "relu":
            h = ops.relu(h)
        if i in spec.insertion_points:
            h = style_align.apply_module(h, model.style, rng, train_mode)
    return h


def head_logits(f: Tensor, head: DomainHead) -> Tensor:
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.ndim == 1:
        return (f.reshape(1, -1) @ head.weight + head.bias)[0]
    return f @ head.weight + head.bias


def evidence_tensor(f: Tensor, head: DomainHead) -> Tensor:
    """Batched evidence ``exp(clamp(logits, ±clip_bound))``."""
    return ops.exp(ops.clamp(head_logits(f, head), -head.clip_bound, head.clip_bound))


def head_evidence(f, head: DomainHead) -> EvidenceVector:
    f = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.size != head.weight.shape[0]:
        raise ValueError(f"feature of shape {f.shape} does not match head input {head.weight.shape[0]}")
    return EvidenceVector(evidence_tensor(Tensor(f), head).data)


def forward_all_heads(f, heads) -> list:
    return [head_evidence(f, h) for h in heads]


# -- checkpoints ----------------------------------------------------------


class CheckpointError(IOError):
    """Unreadable, corrupted or incompatible checkpoint."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, model: Model, meta: dict | None = None, params=None):
    """Write ``model`` (or ``params`` in its declaration order) to ``path``.

    Layout: magic, little-endian u64 header length, canonical JSON header,
    then every parameter as little-endian float64 in declaration order. The
    header carries the SHA-256 of the payload.
    """
    arrays = model.state() if params is None else [np.asarray(a, dtype=np.float64) for a in params]
    names = [n for n, _ in model.named_parameters()]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "num_classes": model.num_classes,
        "num_heads": len(model.heads),
        "clip_bound": model.heads[0].clip_bound if model.heads else DEFAULT_CLIP,
        "style": asdict(model.style),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    blob = _canonical_json(header)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + payload)


def load_checkpoint(path):
    """Return ``(model, meta)`` from a file written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", raw[offset : offset + 8])
    offset += 8
    try:
        header = json.loads(raw[offset : offset + size])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[offset + size :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays = []
    pos = 0
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        chunk = np.frombuffer(payload, dtype="<f8", count=count, offset=pos)
        arrays.append(chunk.astype(np.float64).reshape(entry["shape"]))
        pos += 8 * count
    style_cfg = dict(header["style"])
    style = style_align.StyleAlignConfig(**style_cfg)
    spec = ExtractorSpec.from_dict(header["spec"])
    skeleton = Model.init(spec, header["num_classes"], header["num_heads"], Rng(0), style, header["clip_bound"])
    return skeleton.with_params(arrays), header["meta"]


def parameter_checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
