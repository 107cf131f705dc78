"""Brute-force scalar reference implementations.

Review checklist for this module: it must not import anything from
``hiermem`` outside this file, and every routine works on nested Python
lists with explicit loops (numpy only converts at the boundary). That keeps
each oracle independent of the fast path it checks.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "OracleSizeError",
    "MAX_DENSE_PAIRS",
    "oracle_matmul",
    "oracle_softmax",
    "oracle_topk",
    "oracle_dense_read",
    "oracle_dense_read_fsum",
    "oracle_sparse_read",
    "oracle_track_hop",
    "oracle_compose",
    "oracle_gaussian_kernel",
    "oracle_expand",
    "oracle_retention",
    "oracle_soft_aggregate",
]

MAX_DENSE_PAIRS = 1 << 24


class OracleSizeError(ValueError):
    """Problem too large for a scalar loop."""


def _lists(x):
    return np.asarray(x, dtype=np.float64).tolist()


def oracle_matmul(a, b) -> np.ndarray:
    a, b = _lists(a), _lists(b)
    n, p, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(p):
                s += a[i][l] * b[l][j]
            out[i][j] = s
    return np.array(out)


def oracle_softmax(vec) -> np.ndarray:
    v = _lists(vec)
    mx = max(v)
    e = [math.exp(x - mx) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def oracle_topk(vec, k: int) -> list[int]:
    v = _lists(vec)
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    return order[:k]


def _pixels(maps, rank):
    """Flatten a T x H x W x C (rank 4) or H x W x C (rank 3) list to pixel rows."""
    if rank == 3:
        return [px for row in maps for px in row]
    return [px for frame in maps for row in frame for px in row]


def _dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def oracle_dense_read(memory_keys, memory_values, query_key) -> np.ndarray:
    """Explicit sum over every memory pixel for every query pixel."""
    mk = _pixels(_lists(memory_keys), 4)
    mv = _pixels(_lists(memory_values), 4)
    qk_map = _lists(query_key)
    h, w = len(qk_map), len(qk_map[0])
    if len(mk) * h * w > MAX_DENSE_PAIRS:
        raise OracleSizeError(f"{len(mk)} x {h * w} pairs exceed the oracle size guard")
    cv = len(mv[0])
    out = []
    for y in range(h):
        row = []
        for x in range(w):
            q = qk_map[y][x]
            scores = [_dot(m, q) for m in mk]
            mx = max(scores)
            weights = [math.exp(s - mx) for s in scores]
            z = sum(weights)
            acc = [0.0] * cv
            for wgt, val in zip(weights, mv):
                for c in range(cv):
                    acc[c] += wgt * val[c]
            row.append([a / z for a in acc])
        out.append(row)
    return np.array(out)


def oracle_dense_read_fsum(memory_keys, memory_values, query_key) -> np.ndarray:
    """Second scalar read: log-sum-exp weights and exactly rounded sums."""
    mk = _pixels(_lists(memory_keys), 4)
    mv = _pixels(_lists(memory_values), 4)
    qk_map = _lists(query_key)
    h, w = len(qk_map), len(qk_map[0])
    if len(mk) * h * w > MAX_DENSE_PAIRS:
        raise OracleSizeError(f"{len(mk)} x {h * w} pairs exceed the oracle size guard")
    cv = len(mv[0])
    out = np.zeros((h, w, cv))
    for y in range(h):
        for x in range(w):
            scores = [math.fsum(a * b for a, b in zip(m, qk_map[y][x])) for m in mk]
            mx = max(scores)
            lse = mx + math.log(math.fsum(math.exp(s - mx) for s in scores))
            p = [math.exp(s - lse) for s in scores]
            for c in range(cv):
                out[y, x, c] = math.fsum(pi * val[c] for pi, val in zip(p, mv))
    return out


def oracle_sparse_read(memory_keys, memory_values, query_key, candidates) -> np.ndarray:
    """Per fine query pixel softmax over its listed candidates only."""
    mk = _pixels(_lists(memory_keys), 4)
    mv = _pixels(_lists(memory_values), 4)
    qk_map = _lists(query_key)
    cand = np.asarray(candidates).tolist()
    h, w = len(qk_map), len(qk_map[0])
    cv = len(mv[0])
    out = np.zeros((h, w, cv))
    for y in range(h):
        for x in range(w):
            q = qk_map[y][x]
            ids = cand[y * w + x]
            scores = [_dot(mk[i], q) for i in ids]
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            z = sum(e)
            for c in range(cv):
                out[y, x, c] = sum(ei * mv[i][c] for ei, i in zip(e, ids)) / z
    return out


def oracle_track_hop(key_src, key_dst, window_size: int) -> np.ndarray:
    """Exhaustive windowed argmax, scanning destinations in row-major order."""
    src, dst = _lists(key_src), _lists(key_dst)
    h, w = len(src), len(src[0])
    r = window_size // 2
    out = np.zeros((h, w, 2), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best, arg = -math.inf, None
            for yy in range(max(0, y - r), min(h, y + r + 1)):
                for xx in range(max(0, x - r), min(w, x + r + 1)):
                    s = _dot(src[y][x], dst[yy][xx])
                    if s > best:
                        best, arg = s, (yy, xx)
            out[y, x] = arg
    return out


def oracle_compose(hops) -> np.ndarray:
    """Follow each pixel of the first frame through every hop."""
    hops = [np.asarray(hp).tolist() for hp in hops]
    h, w = len(hops[0]), len(hops[0][0])
    out = np.zeros((h, w, 2), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            cy, cx = y, x
            for hop in hops:
                cy, cx = hop[cy][cx]
            out[y, x] = (cy, cx)
    return out


def oracle_gaussian_kernel(endpoints, hop_counts, sigma_init, sigma_factor, query_shape):
    """Kernel rows from the closed-form Gaussian, one memory pixel at a time."""
    end = np.asarray(endpoints).tolist()
    hq, wq = query_shape
    rows = []
    for t, frame in enumerate(end):
        sigma = sigma_init + (hop_counts[t] - 1) * sigma_factor
        for row in frame:
            for ey, ex in row:
                rows.append(
                    [
                        math.exp(-((yq - ey) ** 2 + (xq - ex) ** 2) / (2 * sigma * sigma))
                        for yq in range(hq)
                        for xq in range(wq)
                    ]
                )
    return np.array(rows)


def oracle_expand(coords, factor: int, fine_shape) -> np.ndarray:
    """Per fine query pixel candidate list, built coordinate by coordinate."""
    coords = np.asarray(coords).tolist()  # Nq_coarse x k x 3
    _, hf, wf = fine_shape
    wc = wf // factor
    rows = []
    for yf in range(hf):
        for xf in range(wf):
            parent = coords[(yf // factor) * wc + (xf // factor)]
            ids = []
            for t, y, x in parent:
                for dy in range(factor):
                    for dx in range(factor):
                        ids.append(t * hf * wf + (factor * y + dy) * wf + (factor * x + dx))
            rows.append(ids)
    return np.array(rows, dtype=np.int64)


def oracle_retention(times, every_n: int, fine_policy: str = "first_prev"):
    """Retained (coarse, fine) frame sets after inserting ``times`` in order."""
    times = list(times)
    if not times:
        return set(), set()
    first, last = times[0], times[-1]
    grid = {t for t in times if (t - first + 1) % every_n == 0}
    coarse = {first, last} | grid
    fine = {first, last} | (grid if fine_policy == "every_n" else set())
    return coarse, fine


def oracle_soft_aggregate(ps, eps: float = 1e-5) -> list[float]:
    """Soft aggregation for a single pixel; ``ps`` lists object probabilities."""
    ps = [min(max(p, eps), 1 - eps) for p in ps]
    bg = 1.0
    for p in ps:
        bg *= 1 - p
    odds = [bg / (1 - bg)] + [p / (1 - p) for p in ps]
    z = sum(odds)
    return [o / z for o in odds]
