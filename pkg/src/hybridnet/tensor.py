"""Dense float64 tensor kernels.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Every reduction here accumulates strictly left to right, so a row of a
matrix product is bitwise identical no matter how many other rows share the
call. This is what lets micro-batched and sharded runs line up with the
single-process reference to within a few ulps.
"""

from __future__ import annotations

import hashlib
from typing import Optional, Sequence

import numpy as np

MAX_RANK = 4

# matmul strategy thresholds (elements). Both paths give identical bits.
_LOOP_MIN_OUTPUT = 2048
_CHUNK_ELEMS = 1 << 20


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Build a validated float64 tensor from ``data``.

    If ``shape`` is given, ``data`` is treated as a flat row-major buffer and
    reshaped; its length must equal the product of ``shape``.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    validate(arr)
    return arr


def validate(t: np.ndarray) -> np.ndarray:
    if not isinstance(t, np.ndarray) or t.dtype != np.float64:
        raise TypeError(f"expected a float64 ndarray, got {type(t).__name__}")
    if t.ndim == 0 or t.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be in 1..{MAX_RANK}, got shape {t.shape}")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"every dimension must be >= 1, got shape {t.shape}")
    return t


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with per-element left-to-right accumulation.

    Each output element is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, the
    products rounded before each addition (no fused multiply-add).

    Raises:
        ShapeError: if either operand is not rank 2 or inner dimensions differ.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    if m * n >= _LOOP_MIN_OUTPUT:
        out = a[:, 0, None] * b[0]
        for j in range(1, k):
            out += a[:, j, None] * b[j]
        return out

    # Small outputs: materialise the products and scan along k. accumulate is
    # sequential by definition; add.reduce would switch to pairwise summation
    # whenever n == 1.
    out = np.empty((m, n), dtype=np.float64)
    rows = max(1, _CHUNK_ELEMS // max(1, k * n))
    for lo in range(0, m, rows):
        prod = a[lo:lo + rows, :, None] * b[None, :, :]
        np.add.accumulate(prod, axis=1, out=prod)
        out[lo:lo + rows] = prod[:, -1, :]
    return out


def sum_rows(x: np.ndarray) -> np.ndarray:
    """Sum over axis 0, accumulating rows in order."""
    if x.shape[0] == 1:
        return x[0].copy()
    return np.add.accumulate(x, axis=0)[-1]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return a * b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * float(c)


def relu(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a, 0.0)


def relu_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient of relu at forward input ``x``, applied to upstream ``dy``."""
    _same_shape(dy, x, "relu_grad")
    return dy * (x > 0)


_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Dispatch by name: add, sub, hadamard, scale, relu, relu_grad.

    For ``scale`` pass the scalar as ``b``; for ``relu_grad`` pass the
    forward input as ``b`` and the upstream gradient as ``a``.
    """
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op == "relu":
        return relu(a)
    if op == "relu_grad":
        return relu_grad(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.add.accumulate(e, axis=1)[:, -1:]


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient w.r.t. logits.

    Returns:
        ``(loss, grad)`` where ``grad = (softmax(logits) - labels) / m``.

    Raises:
        ShapeError: if shapes differ or are not rank 2.
        ValueError: on non-finite logits or label rows that do not sum to 1.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent needs rank-2 logits, got {logits.shape}")
    _same_shape(logits, labels, "softmax_xent")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_xent: non-finite logits")
    if not np.allclose(labels.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("softmax_xent: every label row must sum to 1")
    m = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = np.add.accumulate(e, axis=1)[:, -1:]
    log_probs = z - np.log(s)
    row_loss = -np.add.accumulate(log_probs * labels, axis=1)[:, -1]
    loss = float(np.add.accumulate(row_loss)[-1]) / m
    grad = (e / s - labels) / m
    return loss, grad


def checksum(*arrays: np.ndarray) -> str:
    """Hex digest of the exact bytes of ``arrays`` (order-sensitive)."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()
