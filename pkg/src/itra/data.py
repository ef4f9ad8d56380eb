"""Dataset loading, synthetic mixtures and paired mini-batch sampling."""
from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    modes: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        if len(self.inputs) < 1:
            raise ContractError("a dataset needs at least one sample")
        if len(self.inputs) != len(self.labels):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        modes = None if self.modes is None else self.modes[idx]
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       self.mean, self.std, modes)


def normalize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Standardise with per-channel statistics of ``train``.

    Channels are axis 1 for image tensors and individual features for flat
    inputs. The statistics are stored on every returned dataset.
    """
    x = train.inputs
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    out = []
    for ds in (train, *others):
        xs = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
        out.append(Dataset(xs, ds.labels, ds.num_classes, mean, std, ds.modes))
    return out


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0 (need {need})")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(">" + "I" * ndim, raw[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    img = _read_bytes(images_path)
    n, rows, cols = _idx_header(img, images_path, IDX_IMAGES, 3)
    lab = _read_bytes(labels_path)
    (nl,) = _idx_header(lab, labels_path, IDX_LABELS, 1)
    if n != nl:
        raise FormatError(f"image count {n} != label count {nl} ({images_path}, {labels_path})")
    body = n * rows * cols
    if len(img) - 16 < body:
        raise FormatError(f"{images_path}: truncated pixel data at offset {len(img)}, expected {16 + body} bytes")
    if len(lab) - 8 < n:
        raise FormatError(f"{labels_path}: truncated label data at offset {len(lab)}, expected {8 + n} bytes")
    pixels = np.frombuffer(img, dtype=np.uint8, count=body, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.intp)
    x = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    K = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(x, labels, K)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write uint8 IDX files; inputs are expected in [0, 1] with shape [n, 1, H, W]."""
    n, _, rows, cols = ds.inputs.shape
    pixels = np.clip(np.rint(ds.inputs * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- CSV

def load_csv(path, has_header: bool = True, num_classes: int | None = None) -> Dataset:
    """Rows are ``label, x_1, ..., x_d``; the class count is ``max label + 1``."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and has_header:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise FormatError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                label = float(row[0])
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if label != int(label) or label < 0:
                raise FormatError(f"{path}:{lineno}: label {row[0]!r} is not a class index")
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.intp)
    K = num_classes if num_classes is not None else max(int(y.max()) + 1, 2)
    return Dataset(np.array(rows, dtype=np.float64), y, K)


def write_csv(ds: Dataset, path, header: bool = True) -> None:
    x = ds.inputs.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["label"] + [f"x{j}" for j in range(x.shape[1])])
        for label, row in zip(ds.labels, x):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- mixtures

@dataclass
class Mode:
    mean: list[float]
    std: float
    count: int


@dataclass
class MixtureSpec:
    """Per class, a list of isotropic Gaussian modes."""

    classes: list[list[Mode]]
    dim: int
    seed: int = 0

    def __post_init__(self):
        self.classes = [[m if isinstance(m, Mode) else Mode(**m) for m in modes]
                        for modes in self.classes]
        if len(self.classes) < 2:
            raise ContractError("a mixture needs at least 2 classes")
        for k, modes in enumerate(self.classes):
            if not modes:
                raise ContractError(f"class {k} has no modes")
            for mode in modes:
                if not mode.std > 0:
                    raise ContractError(f"class {k}: mode std must be positive, got {mode.std}")
                if len(mode.mean) != self.dim:
                    raise ContractError(f"class {k}: mean has {len(mode.mean)} entries, dim is {self.dim}")
                if mode.count < 0:
                    raise ContractError(f"class {k}: negative sample count")

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        try:
            return cls(classes=d["classes"], dim=int(d["dim"]), seed=int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"bad mixture spec: {exc}") from None

    def to_dict(self) -> dict:
        return {"dim": self.dim, "seed": self.seed,
                "classes": [[{"mean": list(m.mean), "std": m.std, "count": m.count}
                             for m in modes] for modes in self.classes]}

    @classmethod
    def two_mode(cls, separation: float, std: float = 1.0, count: int = 250,
                 dim: int = 2, seed: int = 0) -> "MixtureSpec":
        """Two classes, each made of two well-separated modes.

        Class 0 sits on the x axis, class 1 on the y axis, so the two modes
        of one class are ``separation`` apart.
        """
        a = separation / 2.0

        def at(*coords):
            v = [0.0] * dim
            for j, c in enumerate(coords):
                v[j] = c
            return v

        classes = [
            [Mode(at(-a, 0.0), std, count), Mode(at(a, 0.0), std, count)],
            [Mode(at(0.0, -a), std, count), Mode(at(0.0, a), std, count)],
        ]
        return cls(classes, dim, seed)


def gen_gaussian_mixture(spec: MixtureSpec) -> Dataset:
    """Draw every mode in order from a generator seeded with ``spec.seed``.

    ``Dataset.modes`` holds the mode index of each sample within its class.
    """
    rng = np.random.default_rng(spec.seed)
    xs, ys, ms = [], [], []
    for k, modes in enumerate(spec.classes):
        for j, mode in enumerate(modes):
            xs.append(rng.normal(np.asarray(mode.mean, dtype=np.float64), mode.std,
                                 size=(mode.count, spec.dim)))
            ys.append(np.full(mode.count, k))
            ms.append(np.full(mode.count, j))
    return Dataset(np.vstack(xs), np.concatenate(ys), len(spec.classes),
                   modes=np.concatenate(ms).astype(np.intp))


def write_mode_sidecar(ds: Dataset, path, spec: MixtureSpec | None = None) -> None:
    counts: dict[str, int] = {}
    for y, m in zip(ds.labels, ds.modes):
        key = f"{int(y)}/{int(m)}"
        counts[key] = counts.get(key, 0) + 1
    doc = {"modes": [int(m) for m in ds.modes], "counts": counts}
    if spec is not None:
        doc["spec"] = spec.to_dict()
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


# ---------------------------------------------------------------- sampling

@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    index: np.ndarray = field(repr=False)


@dataclass
class MiniBatchPair:
    batch1: LabeledBatch
    batch2: LabeledBatch


def _stratified(ds: Dataset, m: int, rng: np.random.Generator) -> np.ndarray:
    K = ds.num_classes
    if m < K:
        raise ContractError(f"stratified batch of {m} cannot cover {K} classes")
    per = np.full(K, m // K)
    per[rng.choice(K, size=m % K, replace=False)] += 1
    picks = []
    for k in range(K):
        pool = np.flatnonzero(ds.labels == k)
        if per[k] > pool.size:
            raise ContractError(f"class {k} has {pool.size} samples, stratified batch needs {per[k]}")
        picks.append(rng.choice(pool, size=per[k], replace=False))
    return rng.permutation(np.concatenate(picks))


def sample_batch(ds: Dataset, m: int, rng: np.random.Generator,
                 stratified: bool = False) -> LabeledBatch:
    if not 1 <= m <= len(ds):
        raise ContractError(f"batch size {m} outside [1, {len(ds)}]")
    idx = _stratified(ds, m, rng) if stratified else rng.choice(len(ds), size=m, replace=False)
    return LabeledBatch(ds.inputs[idx], ds.labels[idx], idx)


def sample_pair(ds: Dataset, m1: int, m2: int, rng: np.random.Generator,
                stratified: bool = False) -> MiniBatchPair:
    """Two independent draws, each without replacement; overlap is allowed."""
    first = sample_batch(ds, m1, rng, stratified)
    second = sample_batch(ds, m2, rng, stratified)
    return MiniBatchPair(first, second)
