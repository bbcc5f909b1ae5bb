"""Structured-text experiment configuration (key = value sections).

Unknown sections or keys are rejected so typos fail loudly instead of
silently falling back to defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import replace
from typing import Optional

from .scenesim import SceneParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_SCENE_KEYS = {
    "extent": lambda s: tuple(float(x) for x in s.split(",")),
    "n_boxes": int,
    "box_xy": lambda s: tuple(float(x) for x in s.split(",")),
    "box_h": lambda s: tuple(float(x) for x in s.split(",")),
    "beams": int,
    "azimuths": int,
    "sensor_height": float,
    "speed_per_sweep": float,
    "yaw_per_sweep": float,
    "range_sigma": float,
}

_TRAIN_KEYS = {
    "sweeps": int,
    "prune_kind": str,
    "targets": lambda s: tuple(float(x) for x in s.split(",")),
    "reg_weight": float,
    "lr": float,
    "classifier_lr_scale": float,
    "momentum": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "sampling": str,
    "n_scenes": int,
    "val_fraction": float,
    "widths": lambda s: tuple(int(x) for x in s.split(",")),
    "voxelizer": str,
    "max_points_per_voxel": int,
    "voxel_size": float,
    "grid_dims": lambda s: tuple(int(x) for x in s.split(",")),
}

_BENCH_KEYS = {
    "kind": str,
    "t_values": lambda s: tuple(float(x) for x in s.split(",")),
    "sweep_values": lambda s: tuple(int(x) for x in s.split(",")),
    "seeds": lambda s: tuple(int(x) for x in s.split(",")),
}


def _parse_section(section, schema, label):
    out = {}
    for key in section:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{label}]")
        try:
            out[key] = schema[key](section[key])
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad value for {label}.{key}: {exc}") from exc
    return out


def load_config(path) -> tuple[TrainConfig, dict]:
    """Returns (TrainConfig, bench options dict)."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    known = {"scene", "train", "bench"}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
    scene_kwargs = _parse_section(cp["scene"], _SCENE_KEYS, "scene") if cp.has_section("scene") else {}
    train_kwargs = _parse_section(cp["train"], _TRAIN_KEYS, "train") if cp.has_section("train") else {}
    bench_opts = _parse_section(cp["bench"], _BENCH_KEYS, "bench") if cp.has_section("bench") else {}
    try:
        scene = SceneParams(**scene_kwargs)
        cfg = TrainConfig(scene=scene, **train_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, bench_opts


def write_config(path, cfg: TrainConfig, bench_opts: Optional[dict] = None) -> None:
    cp = configparser.ConfigParser()
    cp["train"] = {
        "sweeps": str(cfg.sweeps),
        "prune_kind": cfg.prune_kind,
        "targets": ",".join(str(t) for t in cfg.targets),
        "reg_weight": str(cfg.reg_weight),
        "lr": str(cfg.lr),
        "classifier_lr_scale": str(cfg.classifier_lr_scale),
        "momentum": str(cfg.momentum),
        "epochs": str(cfg.epochs),
        "seed": str(cfg.seed),
        "sampling": cfg.sampling,
        "n_scenes": str(cfg.n_scenes),
        "widths": ",".join(str(w) for w in cfg.widths),
        "voxelizer": cfg.voxelizer,
        "voxel_size": str(cfg.voxel_size),
        "grid_dims": ",".join(str(d) for d in cfg.grid_dims),
    }
    cp["scene"] = {
        "extent": ",".join(str(v) for v in cfg.scene.extent),
        "n_boxes": str(cfg.scene.n_boxes),
        "beams": str(cfg.scene.beams),
        "azimuths": str(cfg.scene.azimuths),
        "range_sigma": str(cfg.scene.range_sigma),
    }
    if bench_opts:
        cp["bench"] = {k: (",".join(str(x) for x in v) if isinstance(v, tuple) else str(v))
                       for k, v in bench_opts.items()}
    with open(path, "w") as f:
        cp.write(f)
