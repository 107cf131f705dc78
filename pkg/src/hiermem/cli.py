"""Command-line entry points: ``read``, ``bench``, ``verify`` and ``gen``.

Exit codes: 0 success, 1 verification failure, 2 bad flags or config.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .harness.scene import (
    SceneError,
    generate_scene,
    load_scene,
    save_scene,
    scene_from_config,
)
from .io import save_index, save_tensor
from .pipeline import SCALES, MemoryBank, hierarchical_read, soft_aggregate

METRIC_COLUMNS = ("frame", "memory", "fine_memory", "acc_res4", "acc_res3", "acc_res2")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML pipeline configuration")
    p.add_argument("--seed", type=int, help="override the configured seed (u64)")
    p.add_argument("--out", type=Path, help="output directory")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiermem", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("read", help="run the hierarchical read over a scene")
    _common(p)
    p.add_argument("--scene", type=Path, help="scene directory written by 'gen'")
    p.add_argument("--kernel", choices=("gaussian", "none"), help="override kernel guidance")

    p = sub.add_parser("bench", help="dense vs top-k fine-read benchmark")
    _common(p)
    p.add_argument(
        "--axes",
        nargs="*",
        default=[],
        metavar="KEY=V1,V2",
        help="sweep axes: h, w, t, k, c (channels), modes",
    )
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("verify", help="run the oracle-equivalence suite")
    _common(p)
    p.add_argument("--only", nargs="*", help="run checks whose names start with these prefixes")

    p = sub.add_parser("gen", help="write a synthetic scene to disk")
    _common(p)
    return ap


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must be a u64, got {args.seed}")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _parse_axes(tokens) -> dict:
    axes = {}
    for tok in tokens:
        key, sep, vals = tok.partition("=")
        if not sep or not vals:
            raise UsageError(f"bad axis {tok!r}; expected KEY=V1,V2")
        items = vals.split(",")
        if key == "modes":
            if any(m not in ("dense", "topk") for m in items):
                raise UsageError(f"unknown mode in {tok!r}")
            axes[key] = tuple(items)
        elif key in ("h", "w", "t", "k", "c"):
            try:
                axes[key] = tuple(int(v) for v in items)
            except ValueError:
                raise UsageError(f"non-integer value in {tok!r}") from None
            if any(v < 1 for v in axes[key]):
                raise UsageError(f"axis values must be >= 1 in {tok!r}")
        else:
            raise UsageError(f"unknown axis {key!r}")
    if "c" in axes and len(axes["c"]) != 1:
        raise UsageError("c takes a single value")
    return axes


def _cmd_bench(args, cfg) -> int:
    from .harness.bench import run_benchmark

    axes = _parse_axes(args.axes)
    report = run_benchmark(
        hs=axes.get("h", (16, 32)),
        ws=axes.get("w"),
        ts=axes.get("t", (2,)),
        ks=axes.get("k", (cfg.k,)),
        modes=axes.get("modes", ("dense", "topk")),
        channels=axes.get("c", (32,))[0],
        repeats=args.repeats,
        seed=cfg.seed,
    )
    print(report.to_table())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench.csv").write_text(report.to_csv())
    else:
        print()
        print(report.to_csv(), end="")
    return 0


def _cmd_verify(args, cfg) -> int:
    from .harness.verify import run_verify

    results = run_verify(cfg.seed, args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}".rstrip())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_gen(args, cfg) -> int:
    if not args.out:
        raise UsageError("gen needs --out")
    scene = generate_scene(scene_from_config(cfg))
    files = save_scene(scene, args.out)
    print(f"wrote {len(files)} files for {scene.spec.frames} frames to {args.out}")
    return 0


def _accuracy(retrieved, gt_masks, n_obj) -> float:
    probs = np.clip(retrieved[..., 1 : n_obj + 1].transpose(2, 0, 1), 0.0, 1.0)
    pred = soft_aggregate(probs).argmax(axis=0)
    label = np.zeros(gt_masks.shape[1:], dtype=np.int64)
    for j, m in enumerate(gt_masks):
        label[m] = j + 1
    return float((pred == label).mean())


def _format_table(rows) -> str:
    cells = [METRIC_COLUMNS] + [tuple(str(v) for v in r) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(METRIC_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cmd_read(args, cfg) -> int:
    if args.kernel:
        cfg = replace(cfg, kernel=args.kernel)
    scene = load_scene(args.scene) if args.scene else generate_scene(scene_from_config(cfg))
    n_obj = len(scene.spec.objects)
    bank = MemoryBank(cfg.retention)
    bank.insert(1, scene.features(1))
    cache, rows = None, []
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    for t in range(2, scene.spec.frames + 1):
        out = hierarchical_read(
            bank,
            scene.query_features(t),
            cfg.kernel_params,
            cfg.k,
            cache,
            query_time=t,
            use_kernel=cfg.kernel == "gaussian",
            track_mode=cfg.track_mode,
            dropout_rate=cfg.dropout_rate,
            seed=cfg.seed + 2 * t,
        )
        cache = out.tracks
        accs = [_accuracy(out.retrieved[s], scene.masks(t, s), n_obj) for s in SCALES]
        rows.append(
            (
                t,
                " ".join(map(str, bank.coarse_ids)),
                " ".join(map(str, bank.fine_ids)),
                *(f"{a:.6f}" for a in accs),
            )
        )
        if args.out:
            for name in ("z4", "z3", "z2"):
                save_tensor(args.out / f"f{t:03d}_{name}.hmt", getattr(out, name))
            save_tensor(args.out / f"f{t:03d}_retrieved_res4.hmt", out.retrieved["res4"])
            if out.tracks is not None:
                save_index(args.out / f"f{t:03d}_tracks.hmi", out.tracks.endpoints)
        bank.insert(t, scene.features(t))
    table = _format_table(rows)
    print(table)
    if args.out:
        csv = ",".join(METRIC_COLUMNS) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows)
        (args.out / "metrics.csv").write_text(csv)
    return 0


COMMANDS = {"read": _cmd_read, "bench": _cmd_bench, "verify": _cmd_verify, "gen": _cmd_gen}


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SceneError, UsageError, ValueError) as e:
        ap.print_usage(sys.stderr)
        print(f"hiermem {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
