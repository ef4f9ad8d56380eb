"""SGD-with-momentum training for every method, evaluation and the
same-class pair distance used to track feature compactness."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import backward
from .data import (Dataset, MixtureSpec, gen_gaussian_mixture, load_csv, load_idx,
                   normalize, sample_batch, sample_pair)
from .errors import ConfigError, ContractError, NumericalError
from .kernels import KernelSpec
from .losses import METHODS, CenterState, Forward, total_objective
from .models import ModelSpec, ParamSet, forward, init_params

log = logging.getLogger(__name__)

PAIR_METHODS = ("itra", "itra_c")
METRIC_SEED_OFFSET = 7919


@dataclass
class RunConfig:
    method: str = "baseline"
    lam: float = 0.6
    model: dict = field(default_factory=lambda: {"kind": "mlp", "input_shape": [2],
                                                 "num_classes": 2, "hidden": [64, 32]})
    train_data: dict = field(default_factory=dict)
    test_data: dict = field(default_factory=dict)
    epochs: int = 50
    batch_size: int = 150
    batch_size2: int | None = None
    lr: float = 0.01
    momentum: float = 0.5
    lr_milestones: list = field(default_factory=lambda: [20, 40])
    lr_gamma: float = 0.2
    weight_decay: float = 0.0
    seed: int = 0
    stratified: bool | None = None
    kernel: dict = field(default_factory=lambda: KernelSpec().to_dict())
    smoothing: float = 0.1
    center_rate: float = 0.5
    normalize: bool = True
    train_subset: int | None = None
    subset_seed: int = 0
    distance_pairs: int = 200
    audit: bool = False
    log_wall_clock: bool = False
    output: str | None = None

    # JSON uses "lambda"; the attribute cannot.
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lam == 0 and self.method in PAIR_METHODS:
            warnings.warn(f"lambda=0 with method {self.method!r} reduces to plain cross-entropy",
                          stacklevel=2)

    @property
    def m2(self) -> int:
        return self.batch_size2 if self.batch_size2 is not None else self.batch_size

    @property
    def use_stratified(self) -> bool:
        return self.method == "itra_c" if self.stratified is None else bool(self.stratified)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model)

    @property
    def kernel_spec(self) -> KernelSpec:
        try:
            return KernelSpec.from_dict(self.kernel)
        except (TypeError, ContractError) as exc:
            raise ConfigError(f"bad kernel spec: {exc}") from None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        names = {f.name for f in dataclasses.fields(cls)}
        return (names - set(cls._ALIASES.values())) | set(cls._ALIASES)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {cls._ALIASES.get(k, k): v for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class MetricsRecord:
    epoch: int
    train_ce: float
    test_ce: float
    test_acc: float
    match_loss: float
    same_class_distance: float
    seconds: float | None = None


def load_data_ref(ref: dict, base: Path | None = None) -> Dataset:
    """Build a dataset from a config entry (``csv``, ``idx`` or ``mixture``)."""
    fmt = ref.get("format")

    def resolve(p):
        path = Path(p)
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        return path

    if fmt == "csv":
        return load_csv(resolve(ref["path"]), ref.get("header", True), ref.get("num_classes"))
    if fmt == "idx":
        return load_idx(resolve(ref["images"]), resolve(ref["labels"]), ref.get("num_classes"))
    if fmt == "mixture":
        try:
            return gen_gaussian_mixture(MixtureSpec.from_dict(ref["spec"]))
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown data format {fmt!r}")


def load_datasets(config: RunConfig, base: Path | None = None) -> tuple[Dataset, Dataset]:
    if not config.train_data or not config.test_data:
        raise ConfigError("train_data and test_data are required")
    train_ds = load_data_ref(config.train_data, base)
    test_ds = load_data_ref(config.test_data, base)
    if config.train_subset is not None and config.train_subset < len(train_ds):
        pick = np.random.default_rng(config.subset_seed).choice(
            len(train_ds), size=config.train_subset, replace=False)
        train_ds = train_ds.subset(np.sort(pick))
    if config.normalize:
        train_ds, test_ds = normalize(train_ds, test_ds)
    spec = config.model_spec
    for name, ds in (("train", train_ds), ("test", test_ds)):
        if ds.input_shape != spec.input_shape:
            raise ConfigError(f"{name} inputs have shape {ds.input_shape}, model expects {spec.input_shape}")
        if ds.labels.max() >= spec.num_classes:
            raise ConfigError(f"{name} labels exceed the model's {spec.num_classes} classes")
    if max(config.batch_size, config.m2) > len(train_ds):
        raise ConfigError(f"batch size exceeds the {len(train_ds)} training samples")
    return train_ds, test_ds


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> ParamSet:
    """``v <- momentum * v + g + wd * theta``; ``theta <- theta - lr * v``."""
    new_params, new_vel = {}, {}
    for name, theta in params.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * theta
        v = momentum * params.velocity[name] + g if momentum else g
        new_vel[name] = v
        new_params[name] = theta - lr * v
    return ParamSet(new_params, dict(params.buffers), new_vel)


# im2col buffers grow with the chunk; cnn5's third conv needs ~3 MB per image
EVAL_CHUNK = {"mlp": 1000, "cnn2": 500, "cnn5": 50}


def _logits_eval(params: ParamSet, spec: ModelSpec, x: np.ndarray, chunk: int | None = None):
    chunk = chunk or EVAL_CHUNK[spec.kind]
    hs, os_ = [], []
    for start in range(0, len(x), chunk):
        h, o = forward(params, spec, x[start:start + chunk], "eval")
        hs.append(h.data)
        os_.append(o.data)
    return np.vstack(hs), np.vstack(os_)


def evaluate(params: ParamSet, spec: ModelSpec, ds: Dataset) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode over the whole set."""
    _, logits = _logits_eval(params, spec, ds.inputs)
    return accuracy_and_ce(logits, ds.labels)


def accuracy_and_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    nll = lse - logits[np.arange(len(labels)), labels]
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, float(nll.mean())


def normalized_pair_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Mean ``||A[i] - B[i]||`` divided by the mean norm of all rows of A and B."""
    dist = np.linalg.norm(A - B, axis=1).mean()
    scale_ = np.linalg.norm(np.vstack([A, B]), axis=1).mean()
    return float(dist / scale_) if scale_ > 0 else 0.0


def same_class_pair_distance(params: ParamSet, spec: ModelSpec, ds: Dataset,
                             rng: np.random.Generator, pairs: int = 200,
                             batch_size: int = 150) -> float:
    """Normalised feature distance between same-class samples of two batches.

    Two batches are drawn independently; each pair takes one sample of a
    class from either batch. Classes with fewer than two samples in ``ds``
    are skipped.
    """
    if pairs < 1:
        raise ContractError(f"pairs must be >= 1, got {pairs}")
    m = min(batch_size, len(ds))
    a = rng.choice(len(ds), size=m, replace=False)
    b = rng.choice(len(ds), size=m, replace=False)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    usable = [k for k in range(ds.num_classes) if counts[k] >= 2
              and np.any(ds.labels[a] == k) and np.any(ds.labels[b] == k)]
    if not usable:
        return 0.0
    ia, ib = [], []
    for _ in range(pairs):
        k = usable[rng.integers(len(usable))]
        ca = a[ds.labels[a] == k]
        cb = b[ds.labels[b] == k]
        i = ca[rng.integers(len(ca))]
        options = cb[cb != i]
        if options.size == 0:
            continue
        ia.append(i)
        ib.append(options[rng.integers(len(options))])
    if not ia:
        return 0.0
    feats, _ = _logits_eval(params, spec, ds.inputs[np.concatenate([ia, ib])])
    return normalized_pair_distance(feats[:len(ia)], feats[len(ia):])


def train(config: RunConfig, base: Path | None = None,
          on_epoch: Callable[[MetricsRecord], None] | None = None,
          datasets: tuple[Dataset, Dataset] | None = None) -> tuple[ParamSet, list[MetricsRecord]]:
    """Run the configured method and return final parameters and per-epoch metrics."""
    train_ds, test_ds = datasets if datasets is not None else load_datasets(config, base)
    spec = config.model_spec
    kernel = config.kernel_spec
    K = spec.num_classes
    params = init_params(spec, config.seed)
    rng = np.random.default_rng(config.seed)
    pair_mode = config.method in PAIR_METHODS or config.audit
    stratified = config.use_stratified
    centers = CenterState.zeros(K, spec.feature_dim, config.center_rate) \
        if config.method == "center" else None
    iters = math.ceil(len(train_ds) / config.batch_size)
    lr = config.lr
    records: list[MetricsRecord] = []

    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        ce_sum = reg_sum = 0.0
        for it in range(iters):
            if pair_mode:
                pair = sample_pair(train_ds, config.batch_size, config.m2, rng, stratified)
                b1, b2 = pair.batch1, pair.batch2
            else:
                b1 = sample_batch(train_ds, config.batch_size, rng, stratified)
                b2 = None
            leaves = params.leaves()
            stats: dict[str, np.ndarray] = {}
            h1, o1 = forward(params, spec, b1.inputs, "train", leaves, stats_out=stats)
            second = None
            if config.method in PAIR_METHODS:
                h2, o2 = forward(params, spec, b2.inputs, "train", leaves)
                second = Forward(h2, o2, b2.labels)
            obj = total_objective(config.method, Forward(h1, o1, b1.labels), second, config.lam,
                                  num_classes=K, kernel=kernel, smoothing=config.smoothing,
                                  centers=centers)
            if not np.isfinite(obj.total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {it}: "
                                     f"ce={obj.ce}, reg={obj.reg}")
            backward(obj.total)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in leaves.items()}
            try:
                params = sgd_step(params, grads, lr, config.momentum, config.weight_decay)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, iteration {it}: {exc}") from None
            params.buffers.update(stats)
            centers = obj.centers
            ce_sum += obj.ce
            reg_sum += obj.reg
        if epoch in config.lr_milestones:
            lr *= config.lr_gamma

        test_acc, test_ce = evaluate(params, spec, test_ds)
        dist = same_class_pair_distance(
            params, spec, test_ds, np.random.default_rng(config.seed + METRIC_SEED_OFFSET),
            config.distance_pairs, config.batch_size)
        elapsed = time.perf_counter() - tic
        rec = MetricsRecord(epoch, ce_sum / iters, test_ce, test_acc,
                            reg_sum / iters if config.method in PAIR_METHODS else 0.0, dist,
                            elapsed if config.log_wall_clock else None)
        if not np.isfinite(rec.train_ce):
            raise NumericalError(f"train CE is not finite at epoch {epoch}")
        log.info("epoch %d  train_ce=%.4f test_ce=%.4f acc=%.4f dist=%.4f",
                 epoch, rec.train_ce, rec.test_ce, rec.test_acc, rec.same_class_distance)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, records
