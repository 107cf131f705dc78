"""Multi-scale read for one query frame, plus the memory bank that feeds it.

Scales are named after the encoder blocks: ``res4`` (coarsest, dense
kernel-guided read), ``res3`` and ``res2`` (top-k guided sparse reads at 2x
and 4x the coarse resolution).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .coarse import CoarseReadInput, kernel_guided_read, vanilla_read
from .fine import (
    SCALE_FACTORS,
    FineReadInput,
    expand_to_fine,
    residual_fuse,
    restrict_guidance,
    scale_budget,
    select_topk_candidates,
    sparse_read,
)
from .kernel import KernelParams, TrackTable, build_kernel_guidance
from .tensor import OpCounter, PreconditionError, ShapeError, as_tensor, linear_project

__all__ = [
    "SCALES",
    "KeyValue",
    "RetentionPolicy",
    "MemoryBank",
    "bank_insert",
    "HierarchicalReadOutput",
    "hierarchical_read",
    "soft_aggregate",
    "embed_key_value",
]

SCALES = ("res4", "res3", "res2")
FINE_SCALES = ("res3", "res2")
FINE_POLICIES = ("first_prev", "every_n")
SOFT_AGG_EPS = 1e-5


@dataclass(frozen=True)
class KeyValue:
    key: np.ndarray  # H x W x c_k
    value: np.ndarray  # H x W x c_v

    def __post_init__(self):
        k, v = as_tensor(self.key), as_tensor(self.value)
        if k.ndim != 3 or v.ndim != 3 or k.shape[:2] != v.shape[:2]:
            raise ShapeError(f"key {k.shape} and value {v.shape} must be H x W x C maps")
        object.__setattr__(self, "key", k)
        object.__setattr__(self, "value", v)


def embed_key_value(features, key_proj, value_proj) -> KeyValue:
    """Per-pixel linear key/value embedding of a raw feature map.

    ``key_proj`` and ``value_proj`` are ``(weight, bias)`` pairs.
    """
    return KeyValue(linear_project(features, *key_proj), linear_project(features, *value_proj))


@dataclass(frozen=True)
class RetentionPolicy:
    """Which past frames stay in memory.

    Coarse memory keeps the first frame, the previous frame, and every
    ``every_n``-th frame counted from the first (the first frame is number 1).
    Fine memory keeps the first and previous frames, plus the every-n frames
    under ``fine_policy="every_n"``.
    """

    every_n: int = 5
    fine_policy: str = "first_prev"

    def __post_init__(self):
        if self.every_n < 1:
            raise PreconditionError(f"every_n must be >= 1, got {self.every_n}")
        if self.fine_policy not in FINE_POLICIES:
            raise PreconditionError(f"fine_policy must be one of {FINE_POLICIES}")

    def on_grid(self, time: int, first: int) -> bool:
        return (time - first + 1) % self.every_n == 0


class MemoryBank:
    """Time-indexed per-scale key/value store.

    Single writer: frames arrive in increasing time order via :meth:`insert`.
    Readers should work on :meth:`snapshot` copies when running concurrently.
    """

    def __init__(self, policy: RetentionPolicy | None = None):
        self.policy = policy or RetentionPolicy()
        self.first: int | None = None
        self.latest: int | None = None
        self._coarse: dict[int, KeyValue] = {}
        self._fine: dict[int, dict[str, KeyValue]] = {}

    def __len__(self) -> int:
        return len(self._coarse)

    @property
    def coarse_ids(self) -> tuple[int, ...]:
        return tuple(self._coarse)

    @property
    def fine_ids(self) -> tuple[int, ...]:
        return tuple(self._fine)

    def coarse(self, time: int) -> KeyValue:
        return self._coarse[time]

    def fine(self, time: int, scale: str) -> KeyValue:
        return self._fine[time][scale]

    def insert(self, time: int, features: Mapping[str, KeyValue]) -> None:
        time = int(time)
        if self.latest is not None and time <= self.latest:
            raise PreconditionError(f"frame {time} does not follow the latest frame {self.latest}")
        missing = set(SCALES) - set(features)
        if missing:
            raise PreconditionError(f"features missing scales {sorted(missing)}")
        prev = self.latest
        if self.first is None:
            self.first = time
        self._coarse[time] = features["res4"]
        self._fine[time] = {s: features[s] for s in FINE_SCALES}
        self.latest = time
        if prev is None or prev == self.first:
            return
        on_grid = self.policy.on_grid(prev, self.first)
        if not on_grid:
            del self._coarse[prev]
        if not (on_grid and self.policy.fine_policy == "every_n"):
            del self._fine[prev]

    def snapshot(self) -> "MemoryBank":
        other = MemoryBank(self.policy)
        other.first, other.latest = self.first, self.latest
        other._coarse = dict(self._coarse)
        other._fine = {t: dict(v) for t, v in self._fine.items()}
        return other


def bank_insert(bank: MemoryBank, time: int, features: Mapping[str, KeyValue]) -> MemoryBank:
    """Functional form of :meth:`MemoryBank.insert`; ``bank`` is left untouched."""
    out = bank.snapshot()
    out.insert(time, features)
    return out


@dataclass
class HierarchicalReadOutput:
    z4: np.ndarray  # query value ++ retrieved value at res4
    z3: np.ndarray
    z2: np.ndarray
    tracks: TrackTable | None
    guidance: np.ndarray  # coarse attention over all coarse memory frames
    retrieved: dict[str, np.ndarray] = field(default_factory=dict)


def hierarchical_read(
    bank: MemoryBank,
    query: Mapping[str, KeyValue],
    params: KernelParams | None = None,
    k: int = 32,
    cache: TrackTable | None = None,
    *,
    query_time: int | None = None,
    use_kernel: bool = True,
    track_mode: str = "retained",
    dropout_rate: float = 0.0,
    seed: int = 0,
    fusion: Mapping[str, tuple] | None = None,
    counter: OpCounter | None = None,
) -> HierarchicalReadOutput:
    """Coarse-to-fine memory read of one query frame.

    ``use_kernel=False`` replaces the kernel map by ones, which is the plain
    non-local read. The returned track table is the cache for the next query.
    Dropout draws use ``seed`` at res3 and ``seed + 1`` at res2.
    """
    if not len(bank):
        raise PreconditionError("memory bank is empty")
    params = params or KernelParams()
    fusion = fusion or {}
    query_time = bank.latest + 1 if query_time is None else int(query_time)
    ids = bank.coarse_ids
    mk = np.stack([bank.coarse(t).key for t in ids])
    mv = np.stack([bank.coarse(t).value for t in ids])
    q4 = query["res4"]
    inp = CoarseReadInput(mk, mv, q4.key, q4.value)

    tracks = cache
    if use_kernel:
        kmap, tracks = build_kernel_guidance(
            list(mk), q4.key, params, cache, ids, query_time, track_mode
        )
        coarse_out = kernel_guided_read(inp, kmap, counter)
    else:
        coarse_out = vanilla_read(inp, counter)
    g4 = coarse_out.guidance
    h, w = q4.key.shape[:2]

    fine_ids = bank.fine_ids
    g_fine = restrict_guidance(g4, ids, fine_ids)
    zs, retrieved = {}, {"res4": coarse_out.retrieved(mv.shape[-1])}
    for i, scale in enumerate(FINE_SCALES):
        f = SCALE_FACTORS[scale]
        q = query[scale]
        if q.key.shape[:2] != (h * f, w * f):
            raise ShapeError(f"{scale} query {q.key.shape[:2]} is not {f}x coarse {(h, w)}")
        fk = np.stack([bank.fine(t, scale).key for t in fine_ids])
        fv = np.stack([bank.fine(t, scale).value for t in fine_ids])
        fin = FineReadInput(fk, fv, q.key, q.value, g_fine, fusion.get(scale), dropout_rate, seed + i)
        idx = select_topk_candidates(g_fine, scale_budget(k, scale), (len(fine_ids), h, w), scale)
        cand = expand_to_fine(idx, fk.shape[:3])
        retrieved[scale] = sparse_read(fin, cand, counter)
        zs[scale] = residual_fuse(q.value, retrieved[scale], fin.fusion, dropout_rate, seed + i)
    return HierarchicalReadOutput(
        z4=coarse_out.fused,
        z3=zs["res3"],
        z2=zs["res2"],
        tracks=tracks,
        guidance=g4,
        retrieved=retrieved,
    )


def soft_aggregate(probs, eps: float = SOFT_AGG_EPS) -> np.ndarray:
    """Merge per-object foreground maps into a per-pixel distribution.

    ``probs`` is M x H x W. Probabilities are clamped to [eps, 1 - eps], the
    background is ``prod_m (1 - p_m)``, and each of the M + 1 labels gets a
    share proportional to its odds ``p / (1 - p)``. Returns (M + 1) x H x W
    with the background first.
    """
    raw = np.asarray(probs)
    if raw.ndim < 1 or raw.shape[0] < 1:
        raise PreconditionError("soft aggregation needs at least one object")
    p = as_tensor(raw)
    p = np.clip(p, eps, 1.0 - eps)
    bg = np.prod(1.0 - p, axis=0, keepdims=True)
    allp = np.concatenate([bg, p], axis=0)
    odds = allp / (1.0 - allp)
    return odds / odds.sum(axis=0, keepdims=True)
