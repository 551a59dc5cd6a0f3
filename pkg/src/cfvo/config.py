"""Strict JSON run configuration with a stable content hash.

Every field is optional and falls back to a documented default; unknown
keys are rejected with the offending path.  The hash is the sha256 of
the canonical (sorted-key, compact) JSON of the fully merged document,
so it does not depend on key order in the user's file.  All artifacts
embed this hash plus the seed, which is what makes re-runs comparable
byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import pathlib


class ConfigError(ValueError):
    """Invalid run configuration (unknown key or wrong type)."""


DEFAULTS = {
    "seed": 0,
    "synth": {
        "width": 192,
        "height": 64,
        "fx": 96.0,
        "fy": 96.0,
        "cx": 95.5,
        "cy": 31.5,
        "frames": 20,
        "base_depth": 6.0,
        "surface_waves": 3,
        "surface_amplitude": 0.24,
        "surface_min_period": 4.0,
        "texture_waves": 6,
        "texture_amplitude": 0.36,
        "texture_min_period": 2.8,
        "step_translation": [0.05, 0.012, 0.08],
        "translation_jitter": 0.3,
        "rotation_jitter": 0.004,
        "image_noise": 0.0,
        "lidar_dropout": 0.92,
        "pretrained_scale": 1.0,
        "pretrained_noise": 0.0,
    },
    "train": {
        "window_length": 5,
        "stage1_lr": 1e-4,
        "stage2_lr": 1e-5,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "stage1_epochs": 40,
        "min_stage1_epochs": 10,
        "total_epochs": 60,
        "sequences_per_epoch": 50,
        "switch_window": 5,
        "switch_tol": 0.01,
        "divergence_factor": 10.0,
        "divergence_patience": 5,
        "depth_stride": 8,
        "disp_min": 0.01,
        "disp_max": 10.0,
        "loss_weights": {
            "l1_weight": 0.15,
            "ssim_weight": 0.85,
            "photo_weight": 1.0,
            "gc_weight": 0.5,
            "refine_weight": 1.0,
            "smooth_weight": 0.1,
            "min_valid_fraction": 0.25,
            "smoothness_form": "gradient",
        },
    },
    "calibrate": {
        "estimator": "median",
        "min_valid": 50,
    },
    "eval": {
        "align": "none",
        "depth_cap": 80.0,
        "segment_step": 1,
    },
}


def _merge(defaults, user, path=""):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'} must be an object")
        out = {}
        for key in user:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in defaults.items():
            if key in user:
                out[key] = _merge(dval, user[key], f"{path}{key}.")
            else:
                out[key] = copy.deepcopy(dval)
        return out
    # scalar or list leaf: check type compatibility
    if isinstance(defaults, bool) != isinstance(user, bool):
        raise ConfigError(f"{path[:-1]!r} has the wrong type")
    if isinstance(defaults, (int, float)) and isinstance(user, (int, float)) \
            and not isinstance(user, bool):
        return user
    if isinstance(defaults, str) and isinstance(user, str):
        return user
    if isinstance(defaults, list) and isinstance(user, list):
        return list(user)
    raise ConfigError(
        f"{path[:-1]!r} expects {type(defaults).__name__}, "
        f"got {type(user).__name__}")


def merge_config(user: dict | None) -> dict:
    """Defaults overlaid with a user document; strict about unknown keys."""
    return _merge(DEFAULTS, user or {})


def load_config(path) -> dict:
    try:
        doc = json.loads(pathlib.Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(doc)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()
