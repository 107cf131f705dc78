"""Synthetic multi-scale sequences with known correspondences.

Objects are square patches translating by a fixed integer step per frame.
Each patch pixel carries a one-hot key (scaled by ``key_scale``) plus seeded
noise, so windowed argmax tracking has a unique answer. Background pixels
share one extra key channel, so background queries match background memory.
Objects sharing a ``signature`` id are twins: their key maps are bitwise identical, which is the
duplicated-distractor case that confuses a purely non-local read.

Value maps hold a background indicator channel followed by one indicator
channel per object, then optional random appearance channels. Indicators are
consistent across scales under block averaging (res3 -> res4 by 2x2 blocks,
res2 -> res3 by 2x2 blocks).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..io import load_tensor, save_index, save_tensor
from ..pipeline import SCALES, KeyValue

__all__ = [
    "ObjectSpec",
    "SceneSpec",
    "Scene",
    "SceneError",
    "generate_scene",
    "scene_from_config",
    "save_scene",
    "load_scene",
    "SCALE_FACTOR",
]

SCALE_FACTOR = {"res4": 1, "res3": 2, "res2": 4}


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    start: tuple[int, int]  # coarse top-left corner at frame 1
    motion: tuple[int, int] = (0, 0)  # coarse pixels per frame
    size: int = 3
    signature: int | None = None  # objects sharing an id get identical keys


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int
    objects: tuple[ObjectSpec, ...]
    seed: int = 0
    key_scale: float = 5.0
    noise: float = 1e-3
    key_dims: dict = field(default_factory=dict)  # scale -> channels, None = minimum
    value_dims: dict = field(default_factory=dict)

    @property
    def is_distractor(self) -> bool:
        ids = [o.signature for o in self.objects if o.signature is not None]
        return len(ids) != len(set(ids))


@dataclass
class Scene:
    spec: SceneSpec
    frames: list[dict[str, KeyValue]]  # frames[i] is frame number i + 1
    positions: np.ndarray  # F x M x 2 coarse top-left corners

    def features(self, frame: int) -> dict[str, KeyValue]:
        return self.frames[frame - 1]

    def query_features(self, frame: int) -> dict[str, KeyValue]:
        """Frame features with the mask indicators removed from the values."""
        m = len(self.spec.objects) + 1
        out = {}
        for s, kv in self.frames[frame - 1].items():
            v = kv.value.copy()
            v[..., :m] = 0.0
            out[s] = KeyValue(kv.key, v)
        return out

    def masks(self, frame: int, scale: str = "res4") -> np.ndarray:
        """M x H x W boolean object masks."""
        m = len(self.spec.objects)
        return self.frames[frame - 1][scale].value[..., 1 : m + 1].transpose(2, 0, 1) > 0.5

    def endpoint_grid(self, src: int, dst: int, scale: str = "res4") -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth positions in ``dst`` of every pixel of ``src``.

        Object pixels move with their object; background pixels map to
        themselves. Returns the H x W x 2 grid and the H x W object-pixel mask.
        """
        f = SCALE_FACTOR[scale]
        h, w = self.spec.height * f, self.spec.width * f
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        grid = np.stack([yy, xx], axis=-1).astype(np.int64)
        on_object = np.zeros((h, w), dtype=bool)
        for j, obj in enumerate(self.spec.objects):
            y0, x0 = self.positions[src - 1, j] * f
            shift = (self.positions[dst - 1, j] - self.positions[src - 1, j]) * f
            sl = (slice(y0, y0 + obj.size * f), slice(x0, x0 + obj.size * f))
            grid[sl] += shift
            on_object[sl] = True
        return grid, on_object


def _signature_groups(objects) -> list[int]:
    """Key-block index for each object; twins share a block."""
    groups, blocks = [], {}
    for j, o in enumerate(objects):
        if o.signature is None:
            groups.append(len(blocks))
            blocks[("solo", j)] = len(blocks)
        else:
            key = ("sig", o.signature)
            if key not in blocks:
                blocks[key] = len(blocks)
            groups.append(blocks[key])
    return groups


def _validate(spec: SceneSpec) -> np.ndarray:
    if spec.height < 1 or spec.width < 1 or spec.frames < 1:
        raise SceneError("scene dims and frame count must be >= 1")
    if not spec.objects:
        raise SceneError("scene needs at least one object")
    sigs = [o.signature for o in spec.objects if o.signature is not None]
    for s in set(sigs):
        members = [o for o in spec.objects if o.signature == s]
        if len(members) < 2:
            raise SceneError(f"signature {s} has a single object; twins need at least two")
        if len({o.size for o in members}) > 1:
            raise SceneError(f"objects with signature {s} must have equal sizes")
    pos = np.zeros((spec.frames, len(spec.objects), 2), dtype=np.int64)
    for j, o in enumerate(spec.objects):
        if o.size < 1:
            raise SceneError("object size must be >= 1")
        for i in range(spec.frames):
            y = o.start[0] + i * o.motion[0]
            x = o.start[1] + i * o.motion[1]
            if y < 0 or x < 0 or y + o.size > spec.height or x + o.size > spec.width:
                raise SceneError(f"object {j} leaves the frame at frame {i + 1}")
            pos[i, j] = (y, x)
    for i in range(spec.frames):
        occ = np.zeros((spec.height, spec.width), dtype=int)
        for j, o in enumerate(spec.objects):
            y, x = pos[i, j]
            occ[y : y + o.size, x : x + o.size] += 1
        if occ.max() > 1:
            raise SceneError(f"objects overlap at frame {i + 1}")
    return pos


def generate_scene(spec: SceneSpec) -> Scene:
    pos = _validate(spec)
    rng = np.random.default_rng(spec.seed)
    groups = _signature_groups(spec.objects)
    n_groups = max(groups) + 1
    m = len(spec.objects)
    frames: list[dict[str, KeyValue]] = [{} for _ in range(spec.frames)]
    for scale in SCALES:
        f = SCALE_FACTOR[scale]
        h, w = spec.height * f, spec.width * f
        sizes = [0] * n_groups
        for j, o in enumerate(spec.objects):
            sizes[groups[j]] = o.size * f
        offsets = np.concatenate([[0], np.cumsum([s * s for s in sizes])])
        bg_chan = int(offsets[-1])
        ck_min = bg_chan + 1
        ck = spec.key_dims.get(scale) or ck_min
        cv = spec.value_dims.get(scale) or m + 1
        if ck < ck_min:
            raise SceneError(f"{scale} needs at least {ck_min} key channels, got {ck}")
        if cv < m + 1:
            raise SceneError(f"{scale} needs at least {m + 1} value channels, got {cv}")
        for i in range(spec.frames):
            key = rng.uniform(-spec.noise, spec.noise, size=(h, w, ck))
            key[..., bg_chan] += spec.key_scale
            # one noise draw per signature group keeps twins bitwise identical
            group_keys = []
            for g in range(n_groups):
                p = sizes[g]
                patch = rng.uniform(-spec.noise, spec.noise, size=(p, p, ck))
                chan = offsets[g] + np.arange(p * p).reshape(p, p)
                yy, xx = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
                patch[yy, xx, chan] += spec.key_scale
                group_keys.append(patch)
            value = np.zeros((h, w, cv))
            value[..., 0] = 1.0
            if cv > m + 1:
                value[..., m + 1 :] = rng.standard_normal((h, w, cv - m - 1))
            for j, o in enumerate(spec.objects):
                y, x = pos[i, j] * f
                p = o.size * f
                key[y : y + p, x : x + p] = group_keys[groups[j]]
                value[y : y + p, x : x + p, 0] = 0.0
                value[y : y + p, x : x + p, 1 + j] = 1.0
            frames[i][scale] = KeyValue(key, value)
    return Scene(spec=spec, frames=frames, positions=pos)


def scene_from_config(cfg, seed: int | None = None) -> SceneSpec:
    """Build a :class:`SceneSpec` from a :class:`hiermem.config.PipelineConfig`."""
    sc = cfg.scene
    objects = sc.objects or (
        {"start": [1, 1], "motion": [1, 0]},
        {"start": [1, sc.width - 1 - sc.patch], "motion": [0, 0]},
    )
    specs = []
    for o in objects:
        try:
            specs.append(
                ObjectSpec(
                    start=tuple(int(v) for v in o["start"]),
                    motion=tuple(int(v) for v in o.get("motion", (0, 0))),
                    size=int(o.get("size", sc.patch)),
                    signature=o.get("signature"),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SceneError(f"bad scene object {o!r}: {e}") from e
    return SceneSpec(
        height=sc.height,
        width=sc.width,
        frames=sc.frames,
        objects=tuple(specs),
        seed=cfg.seed if seed is None else seed,
        key_scale=sc.key_scale,
        noise=sc.noise,
        key_dims={k: v for k, v in cfg.key_dims().items() if v},
        value_dims={k: v for k, v in cfg.value_dims().items() if v},
    )


def save_scene(scene: Scene, out_dir) -> list[Path]:
    """Write a scene as HMT1 feature maps plus a JSON manifest.

    Layout: ``scene.json``, ``frames/f{t:03d}_{scale}_{key|value}.hmt`` and
    ground-truth tracks to the last frame at the coarse scale,
    ``gt/f{t:03d}_endpoints.hmi`` (H x W x 2) with ``gt/f{t:03d}_on_object.hmi``.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    spec = scene.spec
    manifest = {
        "format": "hiermem-scene/1",
        "height": spec.height,
        "width": spec.width,
        "frames": spec.frames,
        "seed": spec.seed,
        "key_scale": spec.key_scale,
        "noise": spec.noise,
        "objects": [asdict(o) for o in spec.objects],
        "positions": scene.positions.tolist(),
    }
    written = [out / "scene.json"]
    written[0].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    last = spec.frames
    for t in range(1, spec.frames + 1):
        for s, kv in scene.features(t).items():
            for part in ("key", "value"):
                p = out / "frames" / f"f{t:03d}_{s}_{part}.hmt"
                save_tensor(p, getattr(kv, part))
                written.append(p)
        grid, on = scene.endpoint_grid(t, last)
        for name, arr in (("endpoints", grid), ("on_object", on.astype(np.int64))):
            p = out / "gt" / f"f{t:03d}_{name}.hmi"
            save_index(p, arr)
            written.append(p)
    return written


def load_scene(path) -> Scene:
    root = Path(path)
    try:
        m = json.loads((root / "scene.json").read_text())
    except (OSError, ValueError) as e:
        raise SceneError(f"cannot read scene manifest in {root}: {e}") from e
    objects = tuple(
        ObjectSpec(tuple(o["start"]), tuple(o["motion"]), o["size"], o["signature"])
        for o in m["objects"]
    )
    spec = SceneSpec(
        height=m["height"],
        width=m["width"],
        frames=m["frames"],
        objects=objects,
        seed=m["seed"],
        key_scale=m["key_scale"],
        noise=m["noise"],
    )
    frames = []
    for t in range(1, spec.frames + 1):
        feats = {}
        for s in SCALES:
            try:
                key = load_tensor(root / "frames" / f"f{t:03d}_{s}_key.hmt")
                value = load_tensor(root / "frames" / f"f{t:03d}_{s}_value.hmt")
            except OSError as e:
                raise SceneError(f"missing feature file: {e}") from e
            feats[s] = KeyValue(key, value)
        frames.append(feats)
    return Scene(spec=spec, frames=frames, positions=np.asarray(m["positions"], dtype=np.int64))
