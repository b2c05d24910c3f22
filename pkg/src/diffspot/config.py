"""Hierarchical run configuration: defaults, YAML loading, and overrides.

Every key has a default; unknown keys are rejected with the offending dotted
path.  Override precedence is CLI flag > config file > default.  ``--set``
values are parsed as YAML scalars/lists, so ``--set losses.w_edg=0`` and
``--set model.decoder.scales=[1.0]`` both work.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError, ConflictingOverrideError

DEFAULTS: dict = {
    "seed": 7,
    "out_dir": "runs/latest",
    "model": {
        "semantic": {"depth": 24, "width": 1024, "patch_size": 14, "input_size": 224, "heads": 16, "mlp_ratio": 4.0},
        "text": {"depth": 12, "width": 768, "heads": 12, "mlp_ratio": 4.0},
        "spatial": {"depth": 12, "width": 768, "patch_size": 32, "input_size": 512, "heads": 12, "mlp_ratio": 4.0},
        "prompt_length": 10,
        "fusion_plan": [[6, 3], [12, 6], [18, 9], [24, 12]],
        "vsa_layers": "all",
        "attention_heads": 8,
        "decoder": {"scales": [0.5, 2.0, 4.0], "channels": 64},
    },
    "losses": {
        "w_ce": 1.0,
        "w_bce": 1.0,
        "w_edg": 1.0,
        "temperature": 0.07,
        "edge_radius": 3,
        "edge_gain": 4.0,
    },
    "training": {
        "batch_size": 64,
        "learning_rate": 1.0e-4,
        "epochs": 20,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1.0e-8,
        "checkpoint_every": 1,
        "device": "cpu",
    },
    "data": {
        "train_manifest": "",
        "eval_manifest": "",
        "augment": {
            "blur_prob": 0.1,
            "jpeg_prob": 0.1,
            "scale_range": [0.8, 1.2],
            "hflip_prob": 0.5,
            "vflip_prob": 0.5,
            "crop_size": 512,
            "clip_input_size": 224,
            "blur_kernels": [3, 5, 7],
            "jpeg_quality": [60, 100],
        },
    },
    "evaluation": {"split": "test", "threshold": 0.5, "micro_average": False},
    "robustness": {
        "blur_levels": [3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23],
        "jpeg_levels": [100, 90, 80, 70, 60],
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def load_config(path: str | Path | None = None) -> dict:
    """Defaults, deep-updated by the YAML file at ``path`` if given."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            update = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(update, dict):
            raise ConfigError(f"config {path} must contain a mapping at top level")
        _merge(cfg, update)
    return cfg


def set_by_path(cfg: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted key path, rejecting unknown paths."""
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {'.'.join(parts[: i + 1])!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {dotted!r} is a section, not a value")
    node[leaf] = value


def parse_set_argument(arg: str) -> tuple[str, object]:
    """Parse one ``--set key=value`` argument; values are YAML scalars."""
    if "=" not in arg:
        raise ConfigError(f"--set expects key=value, got {arg!r}")
    key, raw = arg.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set expects key=value, got {arg!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from exc
    return key, value


def apply_overrides(cfg: dict, assignments: list[tuple[str, object]]) -> None:
    """Apply CLI assignments, rejecting two different values for one key."""
    seen: dict[str, object] = {}
    for key, value in assignments:
        if key in seen and seen[key] != value:
            raise ConflictingOverrideError(
                f"conflicting overrides for {key!r}: {seen[key]!r} vs {value!r}"
            )
        seen[key] = value
        set_by_path(cfg, key, value)


def validate_config(cfg: dict) -> dict:
    """Cross-field checks that individual dataclasses cannot perform."""
    model = cfg["model"]
    aug = cfg["data"]["augment"]
    if aug["crop_size"] % model["spatial"]["patch_size"] != 0:
        raise ConfigError(
            f"data.augment.crop_size {aug['crop_size']} not divisible by "
            f"model.spatial.patch_size {model['spatial']['patch_size']}"
        )
    if aug["clip_input_size"] % model["semantic"]["patch_size"] != 0:
        raise ConfigError(
            f"data.augment.clip_input_size {aug['clip_input_size']} not divisible by "
            f"model.semantic.patch_size {model['semantic']['patch_size']}"
        )
    if aug["crop_size"] != model["spatial"]["input_size"]:
        raise ConfigError(
            f"data.augment.crop_size {aug['crop_size']} must equal "
            f"model.spatial.input_size {model['spatial']['input_size']}"
        )
    if aug["clip_input_size"] != model["semantic"]["input_size"]:
        raise ConfigError(
            f"data.augment.clip_input_size {aug['clip_input_size']} must equal "
            f"model.semantic.input_size {model['semantic']['input_size']}"
        )
    if cfg["training"]["batch_size"] < 1:
        raise ConfigError("training.batch_size must be >= 1")
    if cfg["training"]["learning_rate"] <= 0:
        raise ConfigError("training.learning_rate must be > 0")
    return cfg


def toy_config(fixture_manifest: str = "", out_dir: str = "runs/toy") -> dict:
    """Desk-scale configuration: 64x64 images, depth-2 encoders, width 64."""
    cfg = default_config()
    cfg["seed"] = 7
    cfg["out_dir"] = out_dir
    cfg["model"]["semantic"] = {
        "depth": 2, "width": 64, "patch_size": 16, "input_size": 64, "heads": 4, "mlp_ratio": 2.0,
    }
    cfg["model"]["text"] = {"depth": 2, "width": 64, "heads": 4, "mlp_ratio": 2.0}
    cfg["model"]["spatial"] = {
        "depth": 2, "width": 64, "patch_size": 4, "input_size": 64, "heads": 4, "mlp_ratio": 2.0,
    }
    cfg["model"]["fusion_plan"] = [[1, 1], [2, 2]]
    cfg["model"]["attention_heads"] = 4
    cfg["model"]["decoder"] = {"scales": [0.5, 2.0, 4.0], "channels": 16}
    cfg["training"].update(batch_size=16, learning_rate=1.0e-3, epochs=300, checkpoint_every=100)
    cfg["data"]["train_manifest"] = fixture_manifest
    cfg["data"]["eval_manifest"] = fixture_manifest
    cfg["data"]["augment"].update(
        blur_prob=0.0, jpeg_prob=0.0, scale_range=[1.0, 1.0], hflip_prob=0.0, vflip_prob=0.0,
        crop_size=64, clip_input_size=64,
    )
    cfg["evaluation"]["split"] = "train"
    return cfg
