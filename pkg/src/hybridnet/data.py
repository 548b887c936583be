"""Dataset sources: synthetic generators, IDX (MNIST-style) files and CSV.

A source is described by a short string, ``kind:key=value,...``:

    blobs:classes=3,dim=4,n=600,spread=0.6
    spiral:classes=3,n=600,noise=0.2,turns=1.0
    idx:images=train-images-idx3-ubyte,labels=train-labels-idx1-ubyte
    csv:data.csv            (header ``label,f0,f1,...``)

Every kind also accepts ``test=FRACTION`` (default 0.2) and ``embed=N``,
which maps the features isometrically into ``N`` dimensions (a fixed random
orthonormal lift), e.g. to feed a 2-D spiral to a 784-input network. Rows are
shuffled once with the run seed before the train/test split.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray  # one-hot
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.y_train.shape[1]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]

    def __len__(self) -> int:
        return len(self.x_train)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def blobs(n: int, classes: int, dim: int, seed: int, spread: float = 0.6):
    """Gaussian clusters around unit-scale random centres."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-2, 2, size=(classes, dim))
    labels = np.arange(n) % classes
    x = centres[labels] + rng.normal(0.0, spread, size=(n, dim))
    return x, labels


def spiral(n: int, classes: int, seed: int, noise: float = 0.2, turns: float = 1.0):
    """Interleaved 2-D spiral arms, one per class."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    t = rng.uniform(0.05, 1.0, size=n)
    angle = labels * (2 * math.pi / classes) + t * turns * 2 * math.pi + rng.normal(0, noise, n)
    x = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1) * 2.0
    return x, labels


_IDX_TYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2),
              0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native dtype.

    Raises:
        DataError: bad magic, unsupported element type, or a payload whose
            byte count disagrees with the header.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    zero, code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise DataError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype, width = _IDX_TYPES[code]
    expected = math.prod(dims) * width
    actual = len(raw) - header
    if actual != expected:
        raise DataError(f"{path}: payload at byte offset {header} should be {expected} bytes "
                        f"for dims {dims}, found {actual}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label,f0,f1,...`` rows into ``(features, integer labels)``."""
    path = Path(path)
    data = path.read_bytes()
    lines = data.splitlines(keepends=True)
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].decode().strip().split(",")
    if header[0] != "label" or len(header) < 2:
        raise DataError(f"{path}: header must start with 'label' and name at least one feature")
    width = len(header)
    xs, ys = [], []
    offset = len(lines[0])
    for lineno, line in enumerate(lines[1:], start=2):
        text = line.decode().strip()
        if text:
            cells = text.split(",")
            if len(cells) != width:
                raise DataError(f"{path}: line {lineno} (byte offset {offset}) has "
                                f"{len(cells)} fields, expected {width}")
            try:
                ys.append(int(cells[0]))
                xs.append([float(c) for c in cells[1:]])
            except ValueError as e:
                raise DataError(f"{path}: line {lineno} (byte offset {offset}): {e}") from None
        offset += len(line)
    if not xs:
        raise DataError(f"{path}: no data rows")
    labels = np.array(ys)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return np.array(xs, dtype=np.float64), labels


def embed(x: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Distance-preserving lift of ``(n, d)`` rows into ``dim >= d`` dimensions."""
    if dim < x.shape[1]:
        raise DataError(f"embed={dim} is smaller than the feature count {x.shape[1]}")
    q, _ = np.linalg.qr(np.random.default_rng([seed, 1]).normal(size=(dim, x.shape[1])))
    return x @ q.T


def fit_to_model(ds: Dataset, input_shape: tuple[int, ...],
                 num_classes: Optional[int] = None) -> Dataset:
    """Reshape feature rows to a model's per-sample input shape."""
    if num_classes is not None and ds.num_classes != num_classes:
        raise DataError(f"data has {ds.num_classes} classes, model outputs {num_classes}")
    want = math.prod(input_shape)
    have = math.prod(ds.feature_shape)
    if want != have:
        raise DataError(f"data has {have} features per row, model input {tuple(input_shape)} "
                        f"needs {want}")
    shape = tuple(input_shape)
    return Dataset(ds.x_train.reshape((-1, *shape)), ds.y_train,
                   ds.x_test.reshape((-1, *shape)), ds.y_test)


def parse_source(source: str) -> tuple[str, dict[str, str]]:
    kind, _, rest = source.partition(":")
    opts: dict[str, str] = {}
    for i, item in enumerate(x for x in rest.split(",") if x):
        key, eq, value = item.partition("=")
        if not eq:
            if i == 0:
                opts["path"] = key
                continue
            raise DataError(f"data source option {item!r} is not key=value")
        opts[key.strip()] = value.strip()
    return kind.strip(), opts


def load_dataset(source: str, seed: int = 0) -> Dataset:
    """Load and split a dataset described by ``source`` (see module docstring)."""
    kind, opts = parse_source(source)
    test = float(opts.pop("test", 0.2))
    if not 0.0 <= test < 1.0:
        raise DataError(f"test fraction must be in [0, 1), got {test}")
    try:
        if kind == "blobs":
            x, labels = blobs(int(opts.get("n", 600)), int(opts.get("classes", 2)),
                              int(opts.get("dim", 4)), seed, float(opts.get("spread", 0.6)))
        elif kind == "spiral":
            x, labels = spiral(int(opts.get("n", 600)), int(opts.get("classes", 3)), seed,
                               float(opts.get("noise", 0.2)), float(opts.get("turns", 1.0)))
        elif kind == "idx":
            if "images" not in opts or "labels" not in opts:
                raise DataError("idx source needs images=PATH,labels=PATH")
            images = read_idx(opts["images"]).astype(np.float64)
            labels = read_idx(opts["labels"]).astype(np.int64)
            if len(images) != len(labels):
                raise DataError(f"idx: {len(images)} images but {len(labels)} labels")
            x = images / 255.0 if images.max(initial=0) > 1 else images
        elif kind == "csv":
            if "path" not in opts:
                raise DataError("csv source needs a path")
            x, labels = read_csv(opts["path"])
        else:
            raise DataError(f"unknown data source kind {kind!r}")
    except (KeyError, TypeError) as e:
        raise DataError(f"bad data source {source!r}: {e}") from None
    if "embed" in opts:
        x = embed(x.reshape(len(x), -1), int(opts["embed"]), seed)
    classes = int(opts.get("classes", labels.max() + 1))
    perm = np.random.default_rng(seed).permutation(len(x))
    x, y = x[perm], one_hot(labels[perm], classes)
    n_test = int(round(len(x) * test))
    n_train = len(x) - n_test
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])
