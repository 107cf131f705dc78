"""Oracle-equivalence and invariant checks behind ``hiermem verify``.

Every invariant of the tensor, coarse, kernel, fine and pipeline modules has
one check here. Checks draw random instances from a seeded generator and
compare fast paths against :mod:`hiermem.harness.oracles`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import coarse, fine, kernel, pipeline, tensor
from ..coarse import CoarseReadInput
from ..fine import FineReadInput
from ..kernel import KernelParams, TrackTable
from ..pipeline import KeyValue, MemoryBank, RetentionPolicy
from . import oracles
from .scene import ObjectSpec, SceneSpec, generate_scene

__all__ = ["CheckResult", "CHECKS", "run_verify"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _coarse_instance(rng, t_max=3, hw_max=8, c_max=16):
    t = int(rng.integers(1, t_max + 1))
    h, w = (int(v) for v in rng.integers(1, hw_max + 1, size=2))
    ck, cv = (int(v) for v in rng.integers(1, c_max + 1, size=2))
    return CoarseReadInput(
        rng.standard_normal((t, h, w, ck)),
        rng.standard_normal((t, h, w, cv)),
        rng.standard_normal((h, w, ck)),
        rng.standard_normal((h, w, cv)),
    )


def _random_kernel(rng, shape, zero_cols=True):
    kmap = rng.uniform(0, 1, size=shape) * (rng.uniform(size=shape) < 0.7)
    if zero_cols and shape[1] > 1:
        kmap[:, rng.integers(0, shape[1])] = 0.0
    return kmap


# tensor core ---------------------------------------------------------------


def check_softmax_sums(rng):
    worst = 0.0
    for _ in range(50):
        t = rng.uniform(-1e4, 1e4, size=(int(rng.integers(1, 6)), int(rng.integers(1, 40))))
        for axis in range(t.ndim):
            s = tensor.softmax_axis(t, axis).sum(axis=axis)
            worst = max(worst, _max_err(s, 1.0))
    return worst <= 1e-9, f"max |sum-1| = {worst:.2e}"


def check_l1_idempotent(rng):
    worst = 0.0
    for _ in range(50):
        t = rng.uniform(0, 5, size=(4, 7)) * (rng.uniform(size=(4, 7)) < 0.6)
        once = tensor.l1_normalize_axis(t, 0)
        worst = max(worst, _max_err(tensor.l1_normalize_axis(once, 0), once))
    return worst <= 1e-12, f"max diff = {worst:.2e}"


def check_topk_full_sort(rng):
    for _ in range(50):
        v = rng.integers(0, 5, size=int(rng.integers(1, 30))).astype(float)
        _, idx = tensor.topk_axis(v, 0, v.size)
        if idx.tolist() != oracles.oracle_topk(v, v.size):
            return False, f"mismatch on {v.tolist()}"
    return True, "50 vectors with ties"


def check_gather_identity(rng):
    for _ in range(20):
        t = rng.standard_normal((3, 5, 4))
        for axis in range(3):
            if not np.array_equal(tensor.gather_axis(t, axis, np.arange(t.shape[axis])), t):
                return False, f"axis {axis}"
    return True, ""


def check_matmul_assoc(rng):
    worst = 0.0
    for _ in range(50):
        a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
        worst = max(
            worst,
            _max_err(tensor.matmul(tensor.matmul(a, b), c), tensor.matmul(a, tensor.matmul(b, c))),
        )
    return worst <= 1e-9, f"max diff = {worst:.2e}"


def check_matmul_oracle(rng):
    a, b = rng.standard_normal((8, 16)), rng.standard_normal((16, 8))
    err = _max_err(tensor.matmul(a, b), oracles.oracle_matmul(a, b))
    return err <= 1e-12, f"max diff = {err:.2e}"


# coarse ---------------------------------------------------------------------


def check_guidance_stochastic(rng):
    worst = 0.0
    for _ in range(30):
        inp = _coarse_instance(rng)
        aff = coarse.dense_affinity(inp.memory_keys, inp.query_key)
        g = coarse.kernel_guided_read(inp, _random_kernel(rng, aff.shape)).guidance
        if g.min() < 0 or g.max() > 1:
            return False, "guidance outside [0, 1]"
        worst = max(worst, _max_err(g.sum(axis=0), 1.0))
    return worst <= 1e-6, f"max |colsum-1| = {worst:.2e}"


def check_kernel_ones_is_vanilla(rng):
    worst = 0.0
    for _ in range(30):
        inp = _coarse_instance(rng)
        t, h, w = inp.shape
        ones = np.ones((t * h * w, h * w))
        worst = max(
            worst,
            _max_err(coarse.kernel_guided_read(inp, ones).fused, coarse.vanilla_read(inp).fused),
        )
    return worst <= 1e-12, f"max diff = {worst:.2e}"


def check_vanilla_oracle(rng):
    worst = 0.0
    for _ in range(10):
        inp = _coarse_instance(rng)
        cv = inp.memory_values.shape[-1]
        got = coarse.vanilla_read(inp).retrieved(cv)
        ref = oracles.oracle_dense_read(inp.memory_keys, inp.memory_values, inp.query_key)
        worst = max(worst, _max_err(got, ref))
    return worst <= 1e-9, f"max diff = {worst:.2e}"


def check_frame_permutation(rng):
    worst = 0.0
    for _ in range(20):
        inp = _coarse_instance(rng)
        t, h, w = inp.shape
        kmap = _random_kernel(rng, (t * h * w, h * w), zero_cols=False)
        perm = rng.permutation(t)
        rows = (perm[:, None] * h * w + np.arange(h * w)).reshape(-1)
        pinp = CoarseReadInput(
            inp.memory_keys[perm], inp.memory_values[perm], inp.query_key, inp.query_value
        )
        a = coarse.kernel_guided_read(inp, kmap).fused
        b = coarse.kernel_guided_read(pinp, kmap[rows]).fused
        worst = max(worst, _max_err(a, b))
    return worst <= 1e-12, f"max diff = {worst:.2e}"


# kernel guidance -------------------------------------------------------------


def _random_table(rng, n, h=6, w=5):
    hops = [
        np.stack([rng.integers(0, h, size=(h, w)), rng.integers(0, w, size=(h, w))], axis=-1)
        for _ in range(n)
    ]
    table = TrackTable()
    for i, hop in enumerate(hops):
        table = kernel.chain_tracks(table, hop, target=i + 1)
    return table, hops


def check_kernel_peak(rng):
    for _ in range(10):
        table, _ = _random_table(rng, int(rng.integers(1, 5)))
        params = KernelParams(7, float(rng.uniform(0.5, 4)), float(rng.uniform(0, 1)))
        kmap = kernel.gaussian_kernel_map(table, params, (6, 5))
        if kmap.min() <= 0 or kmap.max() > 1:
            return False, "entries outside (0, 1]"
        flat_end = (table.endpoints[..., 0] * 5 + table.endpoints[..., 1]).reshape(-1)
        if not np.array_equal(kmap[np.arange(kmap.shape[0]), flat_end], np.ones(kmap.shape[0])):
            return False, "peak is not 1 at the endpoint"
        if not np.all(kmap.max(axis=1) == 1.0):
            return False, "row maximum is not 1"
    return True, ""


def check_incremental_tracks(rng):
    for _ in range(20):
        n = int(rng.integers(1, 11))
        table, hops = _random_table(rng, n)
        for i, f in enumerate(table.frames):
            if not np.array_equal(table.endpoints[i], oracles.oracle_compose(hops[i:])):
                return False, f"row {f} of a {n}-hop chain"
    return True, "20 random chains of length <= 10"


def check_translation(rng):
    for _ in range(5):
        dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
        frames = 4
        spec = SceneSpec(
            height=25,
            width=25,
            frames=frames,
            objects=(ObjectSpec(start=(11, 11), motion=(dy, dx)),),
            seed=int(rng.integers(1 << 31)),
        )
        scene = generate_scene(spec)
        keys = [scene.features(t)["res4"].key for t in range(1, frames)]
        _, table = kernel.build_kernel_guidance(
            keys, scene.features(frames)["res4"].key, KernelParams(5), frame_ids=range(1, frames),
            query_id=frames,
        )
        for i, t in enumerate(table.frames):
            gt, on = scene.endpoint_grid(t, frames)
            if not np.array_equal(table.endpoints[i][on], gt[on]):
                return False, f"motion {(dy, dx)} frame {t}"
    return True, ""


def check_sigma_monotone(rng):
    for _ in range(20):
        p = KernelParams(7, float(rng.uniform(0.1, 5)), float(rng.uniform(0, 2)))
        s = p.sigma(np.arange(1, 20))
        if np.any(np.diff(s) < 0):
            return False, str(p)
    return True, ""


# fine ------------------------------------------------------------------------


def _fine_instance(rng, t=2, h=4, w=4, c=6):
    mk = rng.standard_normal((t, h, w, c))
    mv = rng.standard_normal((t, h, w, c))
    qk = rng.standard_normal((h, w, c))
    qv = rng.standard_normal((h, w, c))
    return FineReadInput(mk, mv, qk, qv)


def _random_candidates(rng, n_mem, n_q, n):
    return np.stack([rng.choice(n_mem, size=n, replace=False) for _ in range(n_q)])


def check_sparse_weights(rng):
    worst = 0.0
    for _ in range(20):
        inp = _fine_instance(rng)
        cand = _random_candidates(rng, 32, 16, int(rng.integers(1, 32)))
        _, wts = fine.sparse_read(inp, cand, return_weights=True)
        worst = max(worst, _max_err(wts.sum(axis=1), 1.0))
    return worst <= 1e-9, f"max |sum-1| = {worst:.2e}"


def check_candidate_permutation(rng):
    worst = 0.0
    for _ in range(20):
        inp = _fine_instance(rng)
        cand = _random_candidates(rng, 32, 16, 8)
        perm = np.stack([rng.permutation(row) for row in cand])
        worst = max(worst, _max_err(fine.sparse_read(inp, cand), fine.sparse_read(inp, perm)))
    return worst <= 1e-12, f"max diff = {worst:.2e}"


def check_full_candidates(rng):
    worst = 0.0
    for _ in range(5):
        t = int(rng.integers(1, 3))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        inp = _fine_instance(rng, t, h, w, 5)
        full = np.tile(np.arange(t * h * w), (h * w, 1))
        ref = oracles.oracle_dense_read(inp.memory_keys, inp.memory_values, inp.query_key)
        worst = max(worst, _max_err(fine.sparse_read(inp, full), ref))
    return worst <= 1e-9, f"max diff = {worst:.2e}"


def check_candidate_growth(rng):
    for _ in range(20):
        inp = _fine_instance(rng)
        small = _random_candidates(rng, 32, 16, 4)
        _, ws = fine.sparse_read(inp, small, return_weights=True)
        extra = np.stack([rng.choice(np.setdiff1d(np.arange(32), r), 6, replace=False) for r in small])
        big = np.concatenate([small, extra], axis=1)
        _, wb = fine.sparse_read(inp, big, return_weights=True)
        arg = ws.argmax(axis=1)
        if not np.all(wb[np.arange(16), arg] > 0):
            return False, "argmax candidate lost its weight"
    return True, ""


def check_work_per_pixel(rng):
    k, c = 8, 4
    per_pixel = set()
    for hw in (4, 8, 16):
        mk = rng.standard_normal((2, hw, hw, c))
        inp = FineReadInput(mk, mk, mk[0], mk[0])
        g = tensor.softmax_axis(rng.standard_normal((2 * (hw // 2) ** 2, (hw // 2) ** 2)), 0)
        cand = fine.expand_to_fine(fine.select_topk_candidates(g, k, (2, hw // 2, hw // 2)))
        cnt = tensor.OpCounter()
        fine.sparse_read(inp, cand, cnt)
        per_pixel.add((cnt.mul_adds / (hw * hw), cnt.gathers / (hw * hw)))
    expect = {(4 * k * 2 * c, 4 * k * 2 * c)}
    return per_pixel == expect, f"per-pixel (mul_adds, gathers) = {sorted(per_pixel)}"


# pipeline --------------------------------------------------------------------


def _dummy_features():
    kv = KeyValue(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    return {s: kv for s in pipeline.SCALES}


def check_retention(rng):
    for _ in range(50):
        n = int(rng.integers(1, 8))
        policy = RetentionPolicy(n, str(rng.choice(["first_prev", "every_n"])))
        times = np.cumsum(rng.integers(1, 4, size=int(rng.integers(1, 30)))).tolist()
        bank = MemoryBank(policy)
        for t in times:
            bank.insert(t, _dummy_features())
        ref = oracles.oracle_retention(times, n, policy.fine_policy)
        if (set(bank.coarse_ids), set(bank.fine_ids)) != ref:
            return False, f"trace {times} with n={n}"
    return True, "50 random traces"


def _run_video(scene, n_frames, cached, **kw):
    bank = MemoryBank()
    bank.insert(1, scene.features(1))
    cache, outs = None, []
    for t in range(2, n_frames + 1):
        out = pipeline.hierarchical_read(
            bank, scene.query_features(t), k=8, cache=cache if cached else None, query_time=t, **kw
        )
        cache = out.tracks
        outs.append(out)
        bank.insert(t, scene.features(t))
    return outs


def _small_scene(seed, frames=8):
    return generate_scene(
        SceneSpec(
            height=14,
            width=10,
            frames=frames,
            objects=(ObjectSpec((1, 1), (1, 0), 2), ObjectSpec((1, 6), (0, 0), 2)),
            seed=seed,
        )
    )


def check_cached_read(rng):
    scene = _small_scene(int(rng.integers(1 << 31)), frames=10)
    worst = 0.0
    for a, b in zip(_run_video(scene, 10, True), _run_video(scene, 10, False)):
        for name in ("z4", "z3", "z2"):
            worst = max(worst, _max_err(getattr(a, name), getattr(b, name)))
    return worst <= 1e-12, f"max diff = {worst:.2e}"


def check_soft_aggregate(rng):
    worst = 0.0
    for _ in range(20):
        p = rng.uniform(1e-5, 1 - 1e-5, size=(int(rng.integers(1, 5)), 4, 4))
        out = pipeline.soft_aggregate(p)
        if out.min() < 0:
            return False, "negative probability"
        worst = max(worst, _max_err(out.sum(axis=0), 1.0))
    return worst <= 1e-9, f"max |sum-1| = {worst:.2e}"


def check_determinism(rng):
    seed = int(rng.integers(1 << 31))
    a = _run_video(_small_scene(seed), 6, True, dropout_rate=0.5, seed=seed)
    b = _run_video(_small_scene(seed), 6, True, dropout_rate=0.5, seed=seed)
    same = all(
        np.array_equal(getattr(x, n), getattr(y, n)) for x, y in zip(a, b) for n in ("z4", "z3", "z2")
    )
    return same, "bit-identical" if same else "outputs differ"


CHECKS: dict[str, Callable] = {
    "tensor.softmax_sums_to_one": check_softmax_sums,
    "tensor.l1_idempotent": check_l1_idempotent,
    "tensor.topk_full_sort_stable": check_topk_full_sort,
    "tensor.gather_identity": check_gather_identity,
    "tensor.matmul_associative": check_matmul_assoc,
    "tensor.matmul_vs_oracle": check_matmul_oracle,
    "coarse.guidance_column_stochastic": check_guidance_stochastic,
    "coarse.kernel_ones_is_vanilla": check_kernel_ones_is_vanilla,
    "coarse.vanilla_vs_oracle": check_vanilla_oracle,
    "coarse.frame_permutation_invariant": check_frame_permutation,
    "kernel.peak_one_at_endpoint": check_kernel_peak,
    "kernel.incremental_equals_recompute": check_incremental_tracks,
    "kernel.translation_consistent": check_translation,
    "kernel.sigma_monotone": check_sigma_monotone,
    "fine.sparse_weights_sum_to_one": check_sparse_weights,
    "fine.candidate_permutation_invariant": check_candidate_permutation,
    "fine.full_candidates_match_dense": check_full_candidates,
    "fine.candidate_growth_keeps_argmax": check_candidate_growth,
    "fine.work_per_pixel_constant": check_work_per_pixel,
    "pipeline.retention_matches_simulation": check_retention,
    "pipeline.cached_read_equals_cold": check_cached_read,
    "pipeline.soft_aggregate_distribution": check_soft_aggregate,
    "pipeline.deterministic": check_determinism,
}


def run_verify(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if only and not any(name.startswith(o) for o in only):
            continue
        rng = np.random.default_rng([seed, len(results)])
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crash is a failed check, not a crashed run
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
