"""Dense vs top-k fine-scale read benchmark.

Each configuration times the fine-scale read only: ``dense`` attends every
query pixel to all ``t*h*w`` memory pixels, ``topk`` attends it to the ``4k``
candidates expanded from a res3-style selection (selection itself is set up
outside the timed region). Operation counts come from exact counters, so
everything except ``median_ms`` is reproducible byte for byte.
"""

from __future__ import annotations

import io
import itertools
import statistics
import time
from dataclasses import astuple, dataclass, field

import numpy as np

from ..coarse import dense_affinity, dense_retrieve
from ..fine import FineReadInput, expand_to_fine, select_topk_candidates, sparse_read
from ..tensor import OpCounter, softmax_axis

__all__ = ["BenchRow", "BenchReport", "run_benchmark", "CSV_HEADER", "MODES"]

CSV_HEADER = "h,w,t,k,mode,median_ms,mul_adds,gathers"
MODES = ("dense", "topk")
TIMING_COLUMNS = ("median_ms",)


@dataclass(frozen=True)
class BenchRow:
    h: int
    w: int
    t: int
    k: int
    mode: str
    median_ms: float
    mul_adds: int
    gathers: int
    working_set_bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    channels: int = 32

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(
                f"{r.h},{r.w},{r.t},{r.k},{r.mode},{r.median_ms:.3f},{r.mul_adds},{r.gathers}\n"
            )
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("h", "w", "t", "k", "mode", "median_ms", "mul_adds", "gathers", "work_set_MB")
        body = [
            (
                *map(str, astuple(r)[:5]),
                f"{r.median_ms:.3f}",
                str(r.mul_adds),
                str(r.gathers),
                f"{r.working_set_bytes / 2**20:.1f}",
            )
            for r in self.rows
        ]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in [head, *body]]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines)

    def per_pixel_mul_adds(self, row: BenchRow) -> float:
        return row.mul_adds / (row.h * row.w)

    def scaling_violations(self) -> list[str]:
        """Rows whose per-query-pixel work departs from the closed form.

        Dense work per pixel is ``t*h*w*(ck+cv)``; top-k work per pixel is
        ``4k*(ck+cv)`` whatever the map size.
        """
        c2 = 2 * self.channels
        bad = []
        for r in self.rows:
            expect = r.t * r.h * r.w * c2 if r.mode == "dense" else 4 * r.k * c2
            if r.mul_adds != expect * r.h * r.w:
                bad.append(f"{r}: expected {expect} mul-adds per pixel")
        return bad


def _inputs(h, w, t, c, seed):
    rng = np.random.default_rng(seed)
    mk = rng.standard_normal((t, h, w, c))
    mv = rng.standard_normal((t, h, w, c))
    qk = rng.standard_normal((h, w, c))
    qv = rng.standard_normal((h, w, c))
    return mk, mv, qk, qv


def _time(fn, repeats, timer):
    times = []
    for _ in range(repeats):
        t0 = timer()
        fn()
        times.append(timer() - t0)
    return statistics.median(times) * 1e3


def bench_config(h, w, t, k, mode, channels=32, repeats=5, seed=0, timer=time.perf_counter):
    mk, mv, qk, qv = _inputs(h, w, t, channels, seed)
    counter = OpCounter()
    if mode == "dense":
        dense_retrieve(mk, mv, qk, counter)
        ms = _time(lambda: dense_retrieve(mk, mv, qk), repeats, timer)
        chunk = max(1, (1 << 17) // (t * h * w))
        work = 8 * (t * h * w * 2 * channels + h * w * channels + 2 * t * h * w * chunk)
    elif mode == "topk":
        if h % 2 or w % 2:
            raise ValueError(f"top-k mode needs even dims, got {h}x{w}")
        hc, wc = h // 2, w // 2
        if k > t * hc * wc:
            raise ValueError(f"k={k} exceeds the {t * hc * wc} coarse memory pixels at {h}x{w}, t={t}")
        # coarse guidance from 2x-subsampled keys stands in for the res4 read
        g = softmax_axis(dense_affinity(mk[:, ::2, ::2], qk[::2, ::2]), axis=0)
        cand = expand_to_fine(select_topk_candidates(g, k, (t, hc, wc), "res3"), (t, h, w))
        inp = FineReadInput(mk, mv, qk, qv)
        sparse_read(inp, cand, counter)
        ms = _time(lambda: sparse_read(inp, cand), repeats, timer)
        n = cand.shape[1]
        step = max(1, (1 << 21) // (n * 2 * channels))
        work = 8 * (t * h * w * 2 * channels + h * w * (channels + n) + step * n * (2 * channels + 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BenchRow(h, w, t, k, mode, ms, counter.mul_adds, counter.gathers, work)


def run_benchmark(
    hs,
    ws=None,
    ts=(2,),
    ks=(32,),
    modes=MODES,
    channels: int = 32,
    repeats: int = 5,
    seed: int = 0,
    timer=time.perf_counter,
) -> BenchReport:
    """Benchmark every configuration, sequentially.

    Without ``ws`` the maps are square (``w = h``); otherwise heights and
    widths are crossed. Raises ``RuntimeError`` if a counter departs from the
    expected closed form.
    """
    sizes = [(h, h) for h in hs] if ws is None else list(itertools.product(hs, ws))
    report = BenchReport(channels=channels)
    for (h, w), t, k, mode in itertools.product(sizes, ts, ks, modes):
        report.rows.append(bench_config(h, w, t, k, mode, channels, repeats, seed, timer))
    bad = report.scaling_violations()
    if bad:
        raise RuntimeError("operation counts off the closed form:\n" + "\n".join(bad))
    return report
