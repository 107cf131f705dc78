"""Dense memory read at the coarsest scale.

Affinities are laid out memory-major: row ``(t, y, x)`` of the memory, column
``(y', x')`` of the query, both flattened row-major. Attention is normalised
over rows, so every column is a distribution over memory pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    OpCounter,
    ShapeError,
    as_tensor,
    l1_normalize_axis,
    matmul,
    softmax_axis,
)

__all__ = [
    "CoarseReadInput",
    "CoarseReadOutput",
    "dense_affinity",
    "vanilla_read",
    "kernel_guided_read",
    "dense_retrieve",
]


@dataclass(frozen=True)
class CoarseReadInput:
    memory_keys: np.ndarray  # T x H x W x c_k
    memory_values: np.ndarray  # T x H x W x c_v
    query_key: np.ndarray  # H x W x c_k
    query_value: np.ndarray  # H x W x c_v

    def __post_init__(self):
        mk, mv = as_tensor(self.memory_keys), as_tensor(self.memory_values)
        qk, qv = as_tensor(self.query_key), as_tensor(self.query_value)
        if mk.ndim != 4 or mv.ndim != 4 or qk.ndim != 3 or qv.ndim != 3:
            raise ShapeError(
                "expected 4-D memory and 3-D query maps, got "
                f"{mk.shape}, {mv.shape}, {qk.shape}, {qv.shape}"
            )
        if mk.shape[:3] != mv.shape[:3]:
            raise ShapeError(f"memory keys {mk.shape} and values {mv.shape} disagree")
        if mk.shape[1:3] != qk.shape[:2] or qk.shape[:2] != qv.shape[:2]:
            raise ShapeError(f"spatial dims of memory {mk.shape} and query {qk.shape} disagree")
        if mk.shape[3] != qk.shape[2]:
            raise ShapeError(f"key channels differ: memory {mk.shape[3]}, query {qk.shape[2]}")
        object.__setattr__(self, "memory_keys", mk)
        object.__setattr__(self, "memory_values", mv)
        object.__setattr__(self, "query_key", qk)
        object.__setattr__(self, "query_value", qv)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.memory_keys.shape[:3]


@dataclass(frozen=True)
class CoarseReadOutput:
    fused: np.ndarray  # H x W x (c_vq + c_v): query value then retrieved value
    guidance: np.ndarray  # (T*H*W) x (H*W)

    def retrieved(self, value_channels: int) -> np.ndarray:
        return self.fused[..., -value_channels:]


def dense_affinity(memory_keys, query_key, counter: OpCounter | None = None) -> np.ndarray:
    mk = as_tensor(memory_keys)
    qk = as_tensor(query_key)
    if mk.shape[-1] != qk.shape[-1]:
        raise ShapeError(f"key channels differ: memory {mk.shape}, query {qk.shape}")
    c = mk.shape[-1]
    return matmul(mk.reshape(-1, c), qk.reshape(-1, c).T, counter)


def _retrieve_and_fuse(inp: CoarseReadInput, guidance: np.ndarray, counter) -> CoarseReadOutput:
    h, w = inp.query_key.shape[:2]
    cv = inp.memory_values.shape[-1]
    vm = inp.memory_values.reshape(-1, cv)
    retrieved = matmul(guidance.T, vm, counter).reshape(h, w, cv)
    fused = np.concatenate([inp.query_value, retrieved], axis=-1)
    return CoarseReadOutput(fused=fused, guidance=guidance)


def vanilla_read(inp: CoarseReadInput, counter: OpCounter | None = None) -> CoarseReadOutput:
    """Non-local read: softmax over memory pixels of the raw key affinity."""
    aff = dense_affinity(inp.memory_keys, inp.query_key, counter)
    return _retrieve_and_fuse(inp, softmax_axis(aff, axis=0), counter)


def kernel_guided_read(
    inp: CoarseReadInput, kernel_map, counter: OpCounter | None = None
) -> CoarseReadOutput:
    """Read with the softmax attention reweighted by ``kernel_map`` and renormalised.

    ``kernel_map`` has the affinity's shape with entries in [0, 1]. A map of
    all ones reproduces :func:`vanilla_read`.
    """
    aff = dense_affinity(inp.memory_keys, inp.query_key, counter)
    kmap = as_tensor(kernel_map)
    if kmap.shape != aff.shape:
        raise ShapeError(f"kernel map shape {kmap.shape} does not match affinity {aff.shape}")
    if kmap.min() < 0 or kmap.max() > 1:
        raise ShapeError("kernel map entries must lie in [0, 1]")
    guidance = l1_normalize_axis(kmap * softmax_axis(aff, axis=0), axis=0)
    return _retrieve_and_fuse(inp, guidance, counter)


def dense_retrieve(
    memory_keys,
    memory_values,
    query_key,
    counter: OpCounter | None = None,
    block_elems: int = 1 << 17,
) -> np.ndarray:
    """Dense read returning only the retrieved value map.

    Processes query pixels in column blocks of about ``block_elems`` affinity
    entries, so the full affinity is never materialised; used as the
    fine-scale dense baseline.
    """
    mk = as_tensor(memory_keys)
    mv = as_tensor(memory_values)
    qk = as_tensor(query_key)
    if mk.shape[-1] != qk.shape[-1] or mk.shape[:-1] != mv.shape[:-1]:
        raise ShapeError(f"incompatible shapes {mk.shape}, {mv.shape}, {qk.shape}")
    ck, cv = mk.shape[-1], mv.shape[-1]
    km = mk.reshape(-1, ck)
    vm = mv.reshape(-1, cv)
    kq = qk.reshape(-1, ck)
    out = np.empty((kq.shape[0], cv))
    chunk = max(1, block_elems // km.shape[0])
    for s in range(0, kq.shape[0], chunk):
        block = kq[s : s + chunk]
        p = softmax_axis(matmul(km, block.T, counter), axis=0)
        out[s : s + chunk] = matmul(p.T, vm, counter)
    return out.reshape(*qk.shape[:-1], cv)
