"""Run configuration: flat stage-prefixed keys, strict validation, hashing.

Config files are either JSON (flat dotted keys or nested sections) or
``key=value`` lines with JSON-parsed values. Every key must be known,
values must match the declared type, and the resolved configuration is
hashed so outputs can be traced back to the exact settings that
produced them.
"""

import hashlib
import json
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "DEFAULTS"]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


DEFAULTS = {
    "paths.data_dir": "data/toy",
    "paths.out_dir": "runs/toy",
    "fixture.n_images": 80,
    "fixture.seed": 0,
    "fixture.image_size": 32,
    "backbone.image_size": 32,
    "backbone.base_channels": 32,
    "backbone.embed_dim": 32,
    "backbone.vocab_size": 64,
    "backbone.n_tokens": 8,
    "backbone.heads": 4,
    "backbone.seed": 0,
    "schedule.t_train": 1000,
    "schedule.inference_steps": 50,
    "schedule.beta_min": 1e-4,
    "schedule.beta_max": 0.02,
    "prompt.token_ids": [1, 2, 3, 4, 5, 6, 7, 8],
    "finetune.steps": 500,
    "finetune.batch_size": 8,
    "finetune.lr": 1e-3,
    "finetune.seed": 0,
    "finetune.loss_threshold": None,
    "textopt.lr": 0.01,
    "textopt.max_steps": 200,
    "textopt.opt_timestep": 30,
    "textopt.seed": 0,
    "guidance.beta_object": 1.0,
    "guidance.beta_background": 1.0,
    "guidance.stop_step": 15,
    "guidance.target_layers": [0, 1, 2],
    "guidance.control_scale": 1.0,
    "guidance.sigma_scale": 0.5,
    "translate.seed": 0,
    "translate.max_images": None,
    "evaluate.feature_dim": 64,
    "evaluate.pool": 8,
    "evaluate.feature_seed": 0,
    "workers": 1,
}

# Keys whose default is None still need a declared type.
_OPTIONAL_TYPES = {
    "finetune.loss_threshold": float,
    "translate.max_images": int,
}


def _flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _parse_file(path):
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})")
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        try:
            value = json.loads(raw.strip())
        except json.JSONDecodeError:
            value = raw.strip()
        values[key.strip()] = value
    return values


def _check_type(key, value):
    default = DEFAULTS[key]
    if value is None:
        if key in _OPTIONAL_TYPES or default is None:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    expected = _OPTIONAL_TYPES.get(key, type(default))
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if expected is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


class RunConfig:
    """Validated, hashable view over the flat configuration namespace."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    @property
    def hash(self):
        canonical = json.dumps(self.values, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path=None, overrides=None):
        """Resolve defaults, then the config file, then CLI overrides."""
        values = dict(DEFAULTS)
        layers = []
        if path is not None:
            layers.append((str(path), _parse_file(path)))
        if overrides:
            layers.append(("override", dict(overrides)))
        for origin, layer in layers:
            unknown = sorted(set(layer) - set(DEFAULTS))
            if unknown:
                raise ConfigError(f"{origin}: unknown keys {unknown}")
            for key, value in layer.items():
                values[key] = _check_type(key, value)
        return cls(values)

    def out_dir(self):
        return Path(self["paths.out_dir"])

    def data_dir(self):
        return Path(self["paths.data_dir"])
