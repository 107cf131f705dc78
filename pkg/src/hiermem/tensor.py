"""Dense float64 tensor primitives the matching kernels are built on.

Tensors are plain numpy arrays. Every op coerces its inputs to C-contiguous
float64 (or int64 for indices), validates shapes eagerly and returns a fresh
array, so callers can treat results as immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "PreconditionError",
    "IndexRangeError",
    "OpCounter",
    "as_tensor",
    "as_index",
    "matmul",
    "softmax_axis",
    "l1_normalize_axis",
    "topk_axis",
    "gather_axis",
    "linear_project",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class PreconditionError(ValueError):
    """An input violates a documented precondition."""


class IndexRangeError(IndexError):
    """A gather index addresses a position outside its axis."""


@dataclass
class OpCounter:
    """Exact work counters for the counting execution mode.

    ``mul_adds`` counts scalar multiply-accumulates, ``gathers`` counts scalars
    fetched through an index.
    """

    mul_adds: int = 0
    gathers: int = 0

    def add(self, mul_adds: int = 0, gathers: int = 0) -> None:
        self.mul_adds += int(mul_adds)
        self.gathers += int(gathers)


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"tensor dimensions must all be >= 1, got shape {t.shape}")
    return t


def as_index(x) -> np.ndarray:
    idx = np.asarray(x)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"index tensor must be integer-typed, got {idx.dtype}")
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.size and idx.min() < 0:
        raise IndexRangeError("index tensor contains negative entries")
    return idx


def _check_axis(t: np.ndarray, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise PreconditionError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    return axis % t.ndim


def matmul(a, b, counter: OpCounter | None = None) -> np.ndarray:
    """``c[i, j] = sum_l a[i, l] * b[l, j]`` for 2-D operands."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if counter is not None:
        counter.add(mul_adds=a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def softmax_axis(t, axis: int = -1) -> np.ndarray:
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    e = np.exp(t - t.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def l1_normalize_axis(t, axis: int = -1) -> np.ndarray:
    """Scale each slice along ``axis`` to unit sum.

    Inputs must be non-negative. A slice that is entirely zero becomes the
    uniform distribution, which keeps attention maps column-stochastic when a
    kernel wipes out every candidate.
    """
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    if (t < 0).any():
        raise PreconditionError("l1_normalize_axis requires non-negative entries")
    s = t.sum(axis=axis, keepdims=True)
    zero = s == 0
    out = t / np.where(zero, 1.0, s)
    if zero.any():
        out = np.where(zero, 1.0 / t.shape[axis], out)
    return out


def topk_axis(t, axis: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` entries along ``axis`` in descending order.

    Ties go to the smaller index, so results are deterministic.
    """
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    n = t.shape[axis]
    if not 1 <= k <= n:
        raise PreconditionError(f"k={k} outside [1, {n}]")
    # stable sort of the negated values keeps equal entries in index order
    order = np.argsort(-t, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return np.take_along_axis(t, idx, axis=axis), idx


def gather_axis(t, axis: int, idx) -> np.ndarray:
    """``out[..., j, ...] = t[..., idx[j], ...]`` along ``axis``.

    ``idx`` may have any shape; its dimensions replace ``axis`` in the output.
    """
    t = as_tensor(t)
    axis = _check_axis(t, axis)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    n = t.shape[axis]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        pos = tuple(int(p) for p in np.argwhere(bad)[0])
        raise IndexRangeError(
            f"index {int(idx[pos])} at position {pos} out of range for axis {axis} of size {n}"
        )
    return np.take(t, idx, axis=axis)


def linear_project(t, w, b=None) -> np.ndarray:
    """Per-pixel affine map over the trailing channel axis (a 1x1 convolution)."""
    t = as_tensor(t)
    w = as_tensor(w)
    if w.ndim != 2 or t.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot project channels of shape {t.shape} with weights {w.shape}")
    out = t.reshape(-1, w.shape[0]) @ w
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match output channels {w.shape[1]}")
        out = out + b
    return out.reshape(*t.shape[:-1], w.shape[1])
