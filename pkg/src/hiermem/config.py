"""Pipeline configuration files.

A TOML file with flat top-level pipeline keys and an optional ``[scene]``
table for the synthetic sequence generator::

    k = 32
    window_size = 7
    sigma_init = 3.0
    sigma_factor = 0.5
    retention_n = 5
    fine_policy = "first_prev"   # or "every_n"
    dropout_rate = 0.0
    seed = 0
    kernel = "gaussian"          # or "none" (plain non-local read)
    track_mode = "retained"      # or "dense"
    key_dim_res4 = 24            # channel dims; omit for the scene minimum
    value_dim_res4 = 3

    [scene]
    height = 12                  # coarse grid
    width = 12
    frames = 6
    patch = 3
    key_scale = 5.0
    noise = 1e-3
    objects = [
      { start = [2, 2], motion = [1, 0] },
      { start = [2, 8], motion = [0, 0] },
    ]

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .kernel import KernelParams
from .pipeline import RetentionPolicy

__all__ = ["ConfigError", "SceneConfig", "PipelineConfig", "load_config", "parse_config"]

_SCALES = ("res4", "res3", "res2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 12
    width: int = 12
    frames: int = 6
    patch: int = 3
    key_scale: float = 5.0
    noise: float = 1e-3
    objects: tuple = ()


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 32
    window_size: int = 7
    sigma_init: float = 3.0
    sigma_factor: float = 0.5
    retention_n: int = 5
    fine_policy: str = "first_prev"
    dropout_rate: float = 0.0
    seed: int = 0
    kernel: str = "gaussian"
    track_mode: str = "retained"
    key_dim_res4: int | None = None
    value_dim_res4: int | None = None
    key_dim_res3: int | None = None
    value_dim_res3: int | None = None
    key_dim_res2: int | None = None
    value_dim_res2: int | None = None
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.kernel not in ("gaussian", "none"):
            raise ConfigError(f"kernel must be 'gaussian' or 'none', got {self.kernel!r}")
        if self.track_mode not in ("retained", "dense"):
            raise ConfigError(f"track_mode must be 'retained' or 'dense', got {self.track_mode!r}")
        if self.k < 4 or self.k % 4:
            raise ConfigError(f"k must be a positive multiple of 4, got {self.k}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1], got {self.dropout_rate}")
        try:
            self.kernel_params
            self.retention
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def kernel_params(self) -> KernelParams:
        return KernelParams(self.window_size, self.sigma_init, self.sigma_factor)

    @property
    def retention(self) -> RetentionPolicy:
        return RetentionPolicy(self.retention_n, self.fine_policy)

    def key_dims(self) -> dict:
        return {s: getattr(self, f"key_dim_{s}") for s in _SCALES}

    def value_dims(self) -> dict:
        return {s: getattr(self, f"value_dim_{s}") for s in _SCALES}

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=int(seed))


_TYPES = {int: (int,), float: (int, float), str: (str,)}


def _check_types(cls, data: dict, where: str) -> dict:
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    defaults = cls()
    out = {}
    for name, value in data.items():
        ref = getattr(defaults, name)
        if name.startswith(("key_dim", "value_dim")):
            ok = isinstance(value, int) and not isinstance(value, bool) and value >= 1
        elif isinstance(ref, bool) or isinstance(value, bool):
            ok = False
        elif isinstance(ref, (int, float, str)):
            ok = isinstance(value, _TYPES[type(ref)])
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{where} key {name!r} has invalid value {value!r}")
        out[name] = value
    return out


def parse_config(data: dict) -> PipelineConfig:
    data = dict(data)
    scene = data.pop("scene", None)
    top = _check_types(PipelineConfig, data, "config")
    if scene is not None:
        if not isinstance(scene, dict):
            raise ConfigError("[scene] must be a table")
        scene = _check_types(SceneConfig, scene, "scene")
        objs = scene.get("objects", ())
        for o in objs:
            if not isinstance(o, dict) or set(o) - {"start", "motion", "signature", "size"}:
                raise ConfigError(f"bad scene object {o!r}")
        scene["objects"] = tuple(dict(o) for o in objs)
        top["scene"] = SceneConfig(**scene)
    return PipelineConfig(**top)


def load_config(path) -> PipelineConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(data)
