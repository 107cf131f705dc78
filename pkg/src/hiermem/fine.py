"""Top-k guided sparse memory read at the fine scales.

The coarse attention map picks, for every coarse query pixel, its best coarse
memory pixels. Each pick expands to the block of fine pixels it covers (2x2 at
res3, 4x4 at res2) and fine query pixels only attend to those candidates.
With ``k`` picks at res3 and ``k // 4`` at res2 both scales see ``4k``
candidates per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    OpCounter,
    PreconditionError,
    ShapeError,
    as_tensor,
    gather_axis,
    linear_project,
    softmax_axis,
    topk_axis,
)

__all__ = [
    "SCALE_FACTORS",
    "TopKIndexSet",
    "FineReadInput",
    "scale_budget",
    "restrict_guidance",
    "select_topk_candidates",
    "expand_to_fine",
    "sparse_read",
    "residual_fuse",
    "topk_guided_read",
]

SCALE_FACTORS = {"res3": 2, "res2": 4}


def scale_budget(k: int, scale: str) -> int:
    """Number of coarse picks used at ``scale``: k at res3, k/4 at res2."""
    if scale == "res3":
        return k
    if scale == "res2":
        if k % 4:
            raise PreconditionError(f"k={k} must be divisible by 4 for the res2 budget")
        return k // 4
    raise PreconditionError(f"unknown scale {scale!r}")


@dataclass(frozen=True)
class TopKIndexSet:
    """Per coarse query pixel, ranked coarse memory picks.

    ``coords[q, j]`` is the (t, y, x) of the j-th pick for coarse query pixel
    ``q`` (row-major), with ``t`` indexing the fine-memory frame list.
    """

    scale: str
    coords: np.ndarray  # Nq x k x 3
    memory_shape: tuple[int, int, int]  # coarse (T, h, w) of the fine-memory frames
    query_shape: tuple[int, int]

    @property
    def factor(self) -> int:
        return SCALE_FACTORS[self.scale]

    @property
    def k(self) -> int:
        return self.coords.shape[1]


def restrict_guidance(guidance, frame_ids, keep_ids) -> np.ndarray:
    """Rows of a coarse attention map that belong to frames in ``keep_ids``.

    ``frame_ids`` lists the frames behind the guidance rows in order; the result
    keeps the order of ``frame_ids``.
    """
    g = as_tensor(guidance)
    frame_ids = list(frame_ids)
    if g.shape[0] % len(frame_ids):
        raise ShapeError(f"{g.shape[0]} guidance rows do not split into {len(frame_ids)} frames")
    missing = set(keep_ids) - set(frame_ids)
    if missing:
        raise PreconditionError(f"frames {sorted(missing)} are not in the coarse memory")
    per = g.shape[0] // len(frame_ids)
    rows = g.reshape(len(frame_ids), per, -1)
    sel = [i for i, f in enumerate(frame_ids) if f in set(keep_ids)]
    return rows[sel].reshape(len(sel) * per, -1)


def select_topk_candidates(
    guidance_restricted, k_scale: int, memory_shape, scale: str = "res3"
) -> TopKIndexSet:
    """Top ``k_scale`` memory pixels of every guidance column."""
    g = as_tensor(guidance_restricted)
    t, h, w = (int(d) for d in memory_shape)
    if g.ndim != 2 or g.shape[0] != t * h * w:
        raise ShapeError(f"guidance {g.shape} does not match coarse memory shape {(t, h, w)}")
    if g.shape[1] != h * w:
        raise ShapeError(f"guidance has {g.shape[1]} query columns, expected {h * w}")
    if scale not in SCALE_FACTORS:
        raise PreconditionError(f"unknown scale {scale!r}")
    if not 1 <= k_scale <= g.shape[0]:
        raise PreconditionError(
            f"k={k_scale} exceeds the {g.shape[0]} memory pixels available at {scale}"
        )
    _, idx = topk_axis(g, axis=0, k=k_scale)
    tt, yy, xx = np.unravel_index(idx.T, (t, h, w))
    return TopKIndexSet(
        scale=scale,
        coords=np.stack([tt, yy, xx], axis=-1).astype(np.int64),
        memory_shape=(t, h, w),
        query_shape=(h, w),
    )


def expand_to_fine(idx: TopKIndexSet, fine_shape=None) -> np.ndarray:
    """Flat fine-memory candidates for every fine query pixel.

    Each coarse pick (t, y, x) becomes the f x f block ``(t, f*y + dy, f*x + dx)``
    in row-major order; fine query pixels inherit the picks of their coarse
    parent. Returns an (Hf*Wf) x (f*f*k) array of indices into the fine memory
    flattened as (t, y, x).
    """
    f = idx.factor
    t, h, w = idx.memory_shape
    hq, wq = idx.query_shape
    expect = (t, h * f, w * f)
    if fine_shape is not None and tuple(fine_shape) != expect:
        raise ShapeError(f"fine memory shape {tuple(fine_shape)} is not {f}x coarse {idx.memory_shape}")
    hf, wf = h * f, w * f
    dy, dx = np.divmod(np.arange(f * f), f)
    c = idx.coords.reshape(hq, wq, idx.k, 1, 3)
    flat = c[..., 0] * (hf * wf) + (f * c[..., 1] + dy) * wf + (f * c[..., 2] + dx)
    flat = flat.reshape(hq, wq, idx.k * f * f)
    # every fine pixel of a coarse block shares the block's candidates
    flat = np.repeat(np.repeat(flat, f, axis=0), f, axis=1)
    return np.ascontiguousarray(flat.reshape(hq * f * wq * f, idx.k * f * f))


@dataclass(frozen=True)
class FineReadInput:
    memory_keys: np.ndarray  # T x Hf x Wf x c_k
    memory_values: np.ndarray  # T x Hf x Wf x c_v
    query_key: np.ndarray  # Hf x Wf x c_k
    query_value: np.ndarray  # Hf x Wf x c_vq
    guidance: np.ndarray | None = None  # coarse attention restricted to these frames
    fusion: tuple | None = None  # (weight c_v x c_vq, bias c_vq); None is identity
    dropout_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        mk, mv = as_tensor(self.memory_keys), as_tensor(self.memory_values)
        qk, qv = as_tensor(self.query_key), as_tensor(self.query_value)
        if mk.ndim != 4 or mk.shape[:3] != mv.shape[:3]:
            raise ShapeError(f"fine memory keys {mk.shape} and values {mv.shape} disagree")
        if qk.shape[:2] != mk.shape[1:3] or qv.shape[:2] != qk.shape[:2]:
            raise ShapeError(f"fine query {qk.shape} does not match memory {mk.shape}")
        if qk.shape[-1] != mk.shape[-1]:
            raise ShapeError(f"key channels differ: memory {mk.shape[-1]}, query {qk.shape[-1]}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise PreconditionError(f"dropout_rate must be in [0, 1], got {self.dropout_rate}")
        object.__setattr__(self, "memory_keys", mk)
        object.__setattr__(self, "memory_values", mv)
        object.__setattr__(self, "query_key", qk)
        object.__setattr__(self, "query_value", qv)


def sparse_read(
    inp: FineReadInput,
    candidates,
    counter: OpCounter | None = None,
    return_weights: bool = False,
    chunk_elems: int = 1 << 21,
):
    """Attend each fine query pixel over its own candidate memory pixels.

    ``candidates`` is (Hf*Wf) x n flat fine-memory indices. Returns the
    retrieved Hf x Wf x c_v map, and the (Hf*Wf) x n softmax weights when
    ``return_weights`` is set.
    """
    ck = inp.memory_keys.shape[-1]
    cv = inp.memory_values.shape[-1]
    hf, wf = inp.query_key.shape[:2]
    km = inp.memory_keys.reshape(-1, ck)
    vm = inp.memory_values.reshape(-1, cv)
    kq = inp.query_key.reshape(-1, ck)
    cand = np.asarray(candidates)
    if cand.ndim != 2 or cand.shape[0] != kq.shape[0]:
        raise ShapeError(f"candidates {cand.shape} must have one row per fine query pixel ({kq.shape[0]})")
    nq, n = cand.shape
    out = np.empty((nq, cv))
    weights = np.empty((nq, n)) if return_weights else None
    step = max(1, chunk_elems // (n * (ck + cv)))
    for s in range(0, nq, step):
        c = cand[s : s + step]
        keys = gather_axis(km, 0, c)  # m x n x ck
        vals = gather_axis(vm, 0, c)  # m x n x cv
        p = softmax_axis(np.einsum("mnc,mc->mn", keys, kq[s : s + step]), axis=1)
        out[s : s + step] = np.einsum("mn,mnc->mc", p, vals)
        if weights is not None:
            weights[s : s + step] = p
    if counter is not None:
        counter.add(mul_adds=nq * n * (ck + cv), gathers=nq * n * (ck + cv))
    out = out.reshape(hf, wf, cv)
    return (out, weights) if return_weights else out


def residual_fuse(
    query_value, retrieved, fusion_weights=None, dropout_rate: float = 0.0, rng_seed: int = 0
) -> np.ndarray:
    """``query_value + drop(project(retrieved))``.

    The drop is all or nothing: with probability ``dropout_rate`` the whole
    projected map is zeroed, otherwise it passes through unscaled. The decision
    is a single draw from a generator seeded with ``rng_seed``.
    """
    qv = as_tensor(query_value)
    r = as_tensor(retrieved)
    if not 0.0 <= dropout_rate <= 1.0:
        raise PreconditionError(f"dropout_rate must be in [0, 1], got {dropout_rate}")
    if fusion_weights is not None:
        w, b = fusion_weights
        r = linear_project(r, w, b)
    if r.shape != qv.shape:
        raise ShapeError(f"projected retrieval {r.shape} does not match query value {qv.shape}")
    if dropout_rate > 0 and np.random.default_rng(rng_seed).random() < dropout_rate:
        return qv.copy()
    return qv + r


def topk_guided_read(
    inp: FineReadInput,
    k_scale: int,
    scale: str,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Select, expand, sparse-read and fuse; returns the fused fine map."""
    if inp.guidance is None:
        raise PreconditionError("top-k guided read needs the restricted coarse guidance")
    f = SCALE_FACTORS[scale]
    t, hf, wf = inp.memory_keys.shape[:3]
    if hf % f or wf % f:
        raise ShapeError(f"fine dims {(hf, wf)} are not multiples of {f}")
    coarse = (t, hf // f, wf // f)
    idx = select_topk_candidates(inp.guidance, k_scale, coarse, scale)
    cand = expand_to_fine(idx, (t, hf, wf))
    retrieved = sparse_read(inp, cand, counter)
    return residual_fuse(inp.query_value, retrieved, inp.fusion, inp.dropout_rate, inp.rng_seed)
