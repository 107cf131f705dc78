"""Kernel map construction from chained local-window tracking.

Every memory pixel is tracked frame to frame by a windowed argmax over key
similarity. The chained track lands on a query position, and a 2-D Gaussian
centred there (wider for older frames) becomes that pixel's row of the kernel
map.

Tracks are cached in a :class:`TrackTable` so a new query frame costs a single
new hop whenever the memory frame list only grew.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import PreconditionError, ShapeError, as_tensor

__all__ = [
    "KernelParams",
    "TrackTable",
    "CacheMismatchError",
    "local_track_hop",
    "compose_hops",
    "chain_tracks",
    "gaussian_kernel_map",
    "build_kernel_guidance",
]

TRACK_MODES = ("retained", "dense")


class CacheMismatchError(ValueError):
    """A cached track table does not describe the given memory frames."""


@dataclass(frozen=True)
class KernelParams:
    window_size: int = 7
    sigma_init: float = 3.0
    sigma_factor: float = 0.5

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise PreconditionError(f"window_size must be odd and >= 1, got {self.window_size}")
        if not self.sigma_init > 0:
            raise PreconditionError(f"sigma_init must be > 0, got {self.sigma_init}")
        if not self.sigma_factor >= 0:
            raise PreconditionError(f"sigma_factor must be >= 0, got {self.sigma_factor}")

    def sigma(self, hops) -> np.ndarray:
        """Standard deviation for a frame ``hops`` tracking steps from the query.

        The immediately previous frame (one hop) gets ``sigma_init``.
        """
        return self.sigma_init + (np.asarray(hops, dtype=np.float64) - 1) * self.sigma_factor


@dataclass(frozen=True)
class TrackTable:
    """Chained memory-to-query correspondences.

    ``path`` lists the frame ids the chain runs through, ending at the frame the
    endpoints land in (the head); ``hops[i]`` is the H x W x 2 (y, x) grid
    mapping ``path[i]`` to ``path[i + 1]``. ``frames`` are the memory frames
    that own a row of ``endpoints`` (a subset of ``path[:-1]``).
    """

    path: tuple[int, ...] = ()
    hops: tuple[np.ndarray, ...] = ()
    frames: tuple[int, ...] = ()
    endpoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 1, 1, 2), np.int64))

    @property
    def head(self) -> int | None:
        return self.path[-1] if self.path else None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.endpoints.shape[1:3])

    def hop_counts(self) -> np.ndarray:
        pos = {f: i for i, f in enumerate(self.path)}
        return np.array([len(self.path) - 1 - pos[f] for f in self.frames], dtype=np.int64)

    def drop_frames(self, keep: Sequence[int]) -> "TrackTable":
        """Drop rows of frames not in ``keep``; the chain itself is untouched."""
        keep = set(keep)
        rows = [i for i, f in enumerate(self.frames) if f in keep]
        frames = tuple(self.frames[i] for i in rows)
        if not frames:
            return TrackTable(path=self.path[-1:], endpoints=self.endpoints[:0])
        start = self.path.index(frames[0])
        return TrackTable(
            path=self.path[start:],
            hops=self.hops[start:],
            frames=frames,
            endpoints=self.endpoints[rows],
        )


def local_track_hop(key_src, key_dst, window_size: int) -> np.ndarray:
    """Track every source pixel to its best match inside a local window.

    For source pixel (y, x) the candidate destinations are the ``s x s`` window
    centred at (y, x), clipped at the frame border. Similarity is the key dot
    product. Ties resolve to the row-major smallest destination.
    """
    src = as_tensor(key_src)
    dst = as_tensor(key_dst)
    if src.ndim != 3 or src.shape != dst.shape:
        raise ShapeError(f"source {src.shape} and destination {dst.shape} keys must match")
    if window_size < 1 or window_size % 2 == 0:
        raise PreconditionError(f"window size must be odd and >= 1, got {window_size}")
    h, w, _ = src.shape
    r = window_size // 2
    best = np.full((h, w), -np.inf)
    out = np.empty((h, w, 2), dtype=np.int64)
    # row-major scan over offsets + strict '>' keeps the first maximum
    for dy in range(-r, r + 1):
        y0, y1 = max(0, -dy), min(h, h - dy)
        if y0 >= y1:
            continue
        for dx in range(-r, r + 1):
            x0, x1 = max(0, -dx), min(w, w - dx)
            if x0 >= x1:
                continue
            sim = np.einsum(
                "ijc,ijc->ij", src[y0:y1, x0:x1], dst[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            )
            region = best[y0:y1, x0:x1]
            better = sim > region
            region[better] = sim[better]
            ys, xs = np.nonzero(better)
            out[ys + y0, xs + x0, 0] = ys + y0 + dy
            out[ys + y0, xs + x0, 1] = xs + x0 + dx
    return out


def _advance(points: np.ndarray, hop: np.ndarray) -> np.ndarray:
    return hop[points[..., 0], points[..., 1]]


def compose_hops(hops: Sequence[np.ndarray]) -> np.ndarray:
    """Endpoint of every pixel of the first frame after following all hops."""
    if not hops:
        raise PreconditionError("need at least one hop")
    end = np.asarray(hops[0], dtype=np.int64)
    for hop in hops[1:]:
        end = _advance(end, np.asarray(hop, dtype=np.int64))
    return end


def _endpoints_from_hops(path, hops, frames) -> np.ndarray:
    h, w = hops[0].shape[:2]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # to_head maps pixels of path[i] to the head; walk back from the identity
    to_head = np.stack([yy, xx], axis=-1).astype(np.int64)
    suffix = {}
    for i in range(len(hops) - 1, -1, -1):
        to_head = _advance(hops[i], to_head)
        suffix[path[i]] = to_head
    if not frames:
        return np.zeros((0, h, w, 2), np.int64)
    return np.stack([suffix[f] for f in frames])


def _validate_hop(hop, shape=None) -> np.ndarray:
    hop = np.ascontiguousarray(hop, dtype=np.int64)
    if hop.ndim != 3 or hop.shape[-1] != 2:
        raise ShapeError(f"hop grid must be H x W x 2, got {hop.shape}")
    if shape is not None and hop.shape[:2] != tuple(shape):
        raise ShapeError(f"hop grid {hop.shape[:2]} does not match track grid {tuple(shape)}")
    h, w = hop.shape[:2]
    if hop.min() < 0 or (hop[..., 0] >= h).any() or (hop[..., 1] >= w).any():
        raise PreconditionError("hop grid points outside the frame")
    return hop


def chain_tracks(
    table: TrackTable, new_hop, target: int | None = None, source: int = 0
) -> TrackTable:
    """Extend ``table`` by one hop from its head frame to a new frame.

    Existing endpoints are pushed through ``new_hop`` and the old head becomes
    a tracked frame whose endpoints are ``new_hop`` itself. ``source`` names the
    first frame when ``table`` is empty; ``target`` defaults to head + 1.
    """
    shape = table.grid_shape if table.frames else None
    hop = _validate_hop(new_hop, shape)
    head = table.head if table.path else source
    target = head + 1 if target is None else target
    if target <= head:
        raise PreconditionError(f"new frame {target} does not follow head frame {head}")
    path = (table.path or (head,)) + (target,)
    old = _advance(table.endpoints, hop) if table.frames else np.zeros((0, *hop.shape), np.int64)
    return TrackTable(
        path=path,
        hops=table.hops + (hop,),
        frames=table.frames + (head,),
        endpoints=np.concatenate([old, hop[None]], axis=0),
    )


def gaussian_kernel_map(table: TrackTable, params: KernelParams, query_shape) -> np.ndarray:
    """Unnormalised Gaussian around each memory pixel's tracked endpoint.

    Returns a (T*H*W) x (Hq*Wq) map with peak value 1 at each row's endpoint.
    """
    hq, wq = query_shape
    end = table.endpoints
    if end.size and (end.min() < 0 or (end[..., 0] >= hq).any() or (end[..., 1] >= wq).any()):
        raise PreconditionError("track endpoints fall outside the query frame")
    t, h, w, _ = end.shape
    sigma = np.repeat(params.sigma(table.hop_counts()), h * w)
    ey = end[..., 0].reshape(-1).astype(np.float64)
    ex = end[..., 1].reshape(-1).astype(np.float64)
    dy2 = (np.arange(hq)[None, :] - ey[:, None]) ** 2
    dx2 = (np.arange(wq)[None, :] - ex[:, None]) ** 2
    d2 = dy2[:, :, None] + dx2[:, None, :]
    return np.exp(-d2 / (2.0 * sigma[:, None, None] ** 2)).reshape(t * h * w, hq * wq)


def _cold_table(keys, frame_ids, query_key, query_id, window) -> TrackTable:
    path = tuple(frame_ids) + (query_id,)
    seq = list(keys) + [query_key]
    hops = tuple(local_track_hop(seq[i], seq[i + 1], window) for i in range(len(frame_ids)))
    return TrackTable(
        path=path,
        hops=hops,
        frames=tuple(frame_ids),
        endpoints=_endpoints_from_hops(path, hops, tuple(frame_ids)),
    )


def build_kernel_guidance(
    bank_keys: Sequence,
    query_key,
    params: KernelParams,
    cache: TrackTable | None = None,
    frame_ids: Sequence[int] | None = None,
    query_id: int | None = None,
    mode: str = "retained",
) -> tuple[np.ndarray, TrackTable]:
    """Kernel map for a query against time-ordered memory frames.

    In ``"retained"`` mode the hops link consecutive memory frames and the last
    memory frame to the query. A cache from the previous query is extended by a
    single hop when the frame list only grew; when frames were evicted the
    cached hops between still-adjacent frames are reused and only the new links
    are tracked. In ``"dense"`` mode the chain runs through every video frame,
    which requires the cache from the previous query.
    """
    if mode not in TRACK_MODES:
        raise PreconditionError(f"unknown track mode {mode!r}")
    keys = [as_tensor(k) for k in bank_keys]
    if not keys:
        raise PreconditionError("memory bank is empty")
    qk = as_tensor(query_key)
    if frame_ids is None:
        if cache is not None and len(cache.path) == len(keys):
            frame_ids = cache.path
        elif cache is not None:
            raise CacheMismatchError(
                f"cache covers {len(cache.path)} frames but the bank holds {len(keys)}"
            )
        else:
            frame_ids = range(len(keys))
    frame_ids = tuple(int(f) for f in frame_ids)
    if len(frame_ids) != len(keys):
        raise PreconditionError(f"{len(frame_ids)} frame ids for {len(keys)} key maps")
    if any(b <= a for a, b in zip(frame_ids, frame_ids[1:])):
        raise PreconditionError(f"memory frames must be strictly increasing: {frame_ids}")
    query_id = frame_ids[-1] + 1 if query_id is None else int(query_id)
    if query_id <= frame_ids[-1]:
        raise PreconditionError(f"query frame {query_id} does not follow memory {frame_ids}")
    s = params.window_size

    if cache is None or not cache.path:
        if mode == "dense" and len(keys) > 1:
            raise CacheMismatchError("dense tracking needs the cache from the previous query")
        table = _cold_table(keys, frame_ids, qk, query_id, s)
    else:
        if cache.head != frame_ids[-1] or not set(frame_ids) <= set(cache.path):
            raise CacheMismatchError(
                f"cache path {cache.path} is inconsistent with memory frames {frame_ids}"
            )
        if mode == "dense" or cache.path == frame_ids:
            hop = local_track_hop(keys[-1], qk, s)
            table = chain_tracks(cache, hop, target=query_id).drop_frames(frame_ids)
            if table.frames != frame_ids:
                raise CacheMismatchError(
                    f"cache tracks frames {table.frames} but memory holds {frame_ids}"
                )
        else:
            known = {(a, b): hop for a, b, hop in zip(cache.path, cache.path[1:], cache.hops)}
            path = frame_ids + (query_id,)
            seq = keys + [qk]
            hops = tuple(
                known[(path[i], path[i + 1])]
                if (path[i], path[i + 1]) in known
                else local_track_hop(seq[i], seq[i + 1], s)
                for i in range(len(frame_ids))
            )
            table = TrackTable(
                path=path,
                hops=hops,
                frames=frame_ids,
                endpoints=_endpoints_from_hops(path, hops, frame_ids),
            )
    return gaussian_kernel_map(table, params, qk.shape[:2]), table
