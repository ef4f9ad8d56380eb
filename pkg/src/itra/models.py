"""Feature extractor + linear classifier networks.

Three kinds are available: ``mlp`` (fully connected), ``cnn2`` (two 5x5
convolutions with max pooling, then a 100-unit layer) and ``cnn5`` (five 3x3
convolutions with batch norm, ending in an 8x8 stride-1 max pool). The
feature ``h`` is the last hidden activation and the logits are ``h @ W + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"ITRA1"
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# (out_channels, kernel, stride, padding, batchnorm-after) / ("pool", k, stride)
_TRUNKS = {
    "mlp": [],
    "cnn2": [
        ("conv", 20, 5, 1, 0, True), ("pool", 2, 2),
        ("conv", 50, 5, 1, 0, True), ("pool", 2, 2),
    ],
    # padding on the first conv brings a 28x28 input to exactly 8x8 before the
    # final 8x8 pool: 28 -> 28 -> 26 -> 24 -> 12 -> 10 -> 8 -> 1
    "cnn5": [
        ("conv", 32, 3, 1, 1, True), ("conv", 64, 3, 1, 0, True),
        ("conv", 128, 3, 1, 0, False), ("pool", 2, 2),
        ("conv", 256, 3, 1, 0, True), ("conv", 512, 3, 1, 0, False),
        ("pool", 8, 1),
    ],
}
_DEFAULT_HIDDEN = {"mlp": (64, 32), "cnn2": (100,), "cnn5": ()}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    input_shape: tuple[int, ...] = (2,)
    num_classes: int = 2
    hidden: tuple[int, ...] | None = None
    batchnorm: bool | None = None  # None: on for cnn5, off otherwise

    def __post_init__(self):
        if self.kind not in _TRUNKS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.batchnorm is None:
            object.__setattr__(self, "batchnorm", self.kind == "cnn5")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        hidden = _DEFAULT_HIDDEN[self.kind] if self.hidden is None else self.hidden
        object.__setattr__(self, "hidden", tuple(int(w) for w in hidden))
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.kind == "mlp" and not self.hidden:
            raise ConfigError("an mlp needs at least one hidden layer")
        if self.kind != "mlp" and len(self.input_shape) != 3:
            raise ConfigError(f"{self.kind} expects a [C, H, W] input shape, got {self.input_shape}")
        self.layers()  # validates spatial sizes

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self._trunk_out()[1]

    def _trunk_out(self) -> tuple[list[dict], int]:
        layers = []
        if self.kind == "mlp":
            return layers, int(np.prod(self.input_shape))
        c, hgt, wid = self.input_shape
        for i, item in enumerate(_TRUNKS[self.kind]):
            if item[0] == "conv":
                _, f, k, s, p, bn = item
                hgt, wid = (hgt + 2 * p - k) // s + 1, (wid + 2 * p - k) // s + 1
                layers.append(dict(type="conv", name=f"extractor.{i}", cin=c, cout=f,
                                   k=k, stride=s, pad=p, bn=bn and self.batchnorm))
                c = f
            else:
                _, k, s = item
                hgt, wid = (hgt - k) // s + 1, (wid - k) // s + 1
                layers.append(dict(type="pool", k=k, stride=s))
            if hgt < 1 or wid < 1:
                raise ConfigError(f"input {self.input_shape} too small for {self.kind}")
        return layers, c * hgt * wid

    def layers(self) -> list[dict]:
        layers, width = self._trunk_out()
        base = len(layers)
        for j, w in enumerate(self.hidden):
            layers.append(dict(type="dense", name=f"extractor.{base + j}", fan_in=width,
                               out=w, bn=self.batchnorm))
            width = w
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("input_shape", "hidden"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model spec: {exc}") from None


@dataclass
class ParamSet:
    """Trainable tensors, batch-norm running statistics and momentum buffers."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def extractor(self) -> list[str]:
        return [k for k in self.params if k.startswith("extractor.")]

    @property
    def classifier(self) -> list[str]:
        return [k for k in self.params if k.startswith("classifier.")]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.buffers.items()},
                        {k: v.copy() for k, v in self.velocity.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Fan-in uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for layer in spec.layers():
        if layer["type"] == "pool":
            continue
        name = layer["name"]
        if layer["type"] == "conv":
            fan_in = layer["cin"] * layer["k"] ** 2
            params[f"{name}.weight"] = uniform((layer["cout"], layer["cin"], layer["k"], layer["k"]), fan_in)
            width = layer["cout"]
        else:
            params[f"{name}.weight"] = uniform((layer["fan_in"], layer["out"]), layer["fan_in"])
            width = layer["out"]
        params[f"{name}.bias"] = np.zeros(width)
        if layer["bn"]:
            params[f"{name}.gamma"] = np.ones(width)
            params[f"{name}.beta"] = np.zeros(width)
            buffers[f"{name}.running_mean"] = np.zeros(width)
            buffers[f"{name}.running_var"] = np.ones(width)
    d = spec.feature_dim
    params["classifier.weight"] = uniform((d, spec.num_classes), d)
    params["classifier.bias"] = np.zeros(spec.num_classes)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ParamSet(params, buffers, velocity)


def _batchnorm(x: Tensor, name: str, p, buffers, mode, stats_out) -> Tensor:
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    gamma = ag.reshape(p[f"{name}.gamma"], shape)
    beta = ag.reshape(p[f"{name}.beta"], shape)
    if mode == "train":
        mu = ag.mean(x, axis=axes, keepdims=True)
        centred = x - mu
        var = ag.mean(ag.square(centred), axis=axes, keepdims=True)
        if stats_out is not None:
            count = x.data.size // x.shape[1]
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            rm, rv = buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"]
            stats_out[f"{name}.running_mean"] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu.data.reshape(-1)
            stats_out[f"{name}.running_var"] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased
        normed = centred / ag.sqrt(var + BN_EPS)
    else:
        rm = buffers[f"{name}.running_mean"].reshape(shape)
        rv = buffers[f"{name}.running_var"].reshape(shape)
        normed = (x - rm) * (1.0 / np.sqrt(rv + BN_EPS))
    return normed * gamma + beta


def forward(params: ParamSet, spec: ModelSpec, x, mode: str = "eval",
            leaves: dict[str, Tensor] | None = None,
            stats_out: dict[str, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
    """Run the network and return ``(features, logits)``.

    ``leaves`` substitutes graph leaves for the stored parameters so gradients
    can be taken. In train mode batch norm uses batch statistics; the updated
    running statistics are written to ``stats_out`` when it is given.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = ag.tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match model input {spec.input_shape}")
    if leaves is None:
        leaves = {k: Tensor._result(v, (), None) for k, v in params.params.items()}
    p = leaves
    m = x.shape[0]
    h = x if spec.kind != "mlp" else ag.reshape(x, (m, -1))
    for layer in spec.layers():
        kind = layer["type"]
        if kind == "pool":
            h = ag.maxpool2d(h, layer["k"], layer["stride"])
            continue
        name = layer["name"]
        if kind == "conv":
            h = ag.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], layer["stride"], layer["pad"])
        else:
            if h.ndim != 2:
                h = ag.reshape(h, (m, -1))
            h = h @ p[f"{name}.weight"] + p[f"{name}.bias"]
        if layer["bn"]:
            h = _batchnorm(h, name, p, params.buffers, mode, stats_out)
        h = ag.relu(h)
    if h.ndim != 2:
        h = ag.reshape(h, (m, -1))
    o = h @ p["classifier.weight"] + p["classifier.bias"]
    return h, o


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ParamSet, spec: ModelSpec, meta: dict | None = None) -> None:
    """Write named float64 tensors behind a JSON header.

    Layout: ``b"ITRA1"``, a little-endian uint64 header length, the UTF-8
    JSON header, then the tensors as contiguous little-endian float64 data.
    Offsets in the header are bytes from the start of the data section.
    """
    entries, chunks, offset = [], [], 0
    for group, tensors in (("param", params.params), ("buffer", params.buffers),
                           ("velocity", params.velocity)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps({"version": 1, "spec": spec.to_dict(), "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ParamSet, ModelSpec, dict]:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:5]!r} at byte 0, expected {MAGIC!r}")
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header length at byte 5")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    try:
        header = json.loads(blob[13:13 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable header at byte 13: {exc}") from None
    data = memoryview(blob)[13 + hlen:]
    groups = {"param": {}, "buffer": {}, "velocity": {}}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: tensor {entry['name']} truncated at byte {13 + hlen + len(data)}")
        arr = np.frombuffer(data[entry["offset"]:end], dtype="<f8").astype(np.float64)
        group, name = entry["name"].split("/", 1)
        groups[group][name] = arr.reshape(entry["shape"])
    spec = ModelSpec.from_dict(header["spec"])
    return ParamSet(groups["param"], groups["buffer"], groups["velocity"]), spec, header.get("meta", {})
