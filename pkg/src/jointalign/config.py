"""Run configuration: defaults, presets, file/env/flag overrides, hashing.

Precedence (lowest to highest): defaults, preset, config file, environment
variables, command-line --set flags. Every leaf records where its value
came from; unknown keys are rejected before any command runs.

Environment override format: JOINTALIGN_<SECTION>__<KEY>=value, e.g.
JOINTALIGN_TRAIN__LR=0.0005. Values are parsed as JSON when possible.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os

from .align_net import NetConfig
from .metrics import EvalConfig
from .refine import RefineConfig
from .sparse_input import InputConfig
from .synthscene import DetectConfig, NoiseConfig, SceneConfig
from .training import Thresholds, TrainConfig

ENV_PREFIX = "JOINTALIGN_"

_SECTION_TYPES = {
    "scene": SceneConfig,
    "noise": NoiseConfig,
    "detect": DetectConfig,
    "input": InputConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "refine": RefineConfig,
    "eval": EvalConfig,
}

PRESETS = {
    "paper": {},  # full-scale run: every section keeps its defaults
    "desk": {
        "scene": {"image_width": 128, "image_height": 96, "count_range": [1, 3]},
        "noise": {"depth_sigma": 0.01, "normal_jitter_deg": 3.0},
        "detect": {"bbox_jitter_frac": 0.03},
        "input": {"n_bbox": 200, "n_cad": 100, "n_mul": 3},
        "net": {"n_mul": 3, "n_latent": 32, "c_latent": 64},
        # desk-step-count training: mean-normalized loss keeps the BCE term
        # from being drowned by the meter-scale point sum; adam avoids the
        # trust-ratio step shrinkage (see Lamb docstring)
        "train": {"n_loss": 256, "optimizer": "adam", "loss_normalize": True},
    },
}


class ConfigError(ValueError):
    """Invalid key or value in a configuration source."""


def _defaults_dict() -> dict:
    out = {name: dataclasses.asdict(cls()) for name, cls in _SECTION_TYPES.items()}
    out["seed"] = 0
    out["workers"] = 1
    return out


def _merge(base: dict, override: dict, source: str, provenance: dict,
           path: str = ""):
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key '{here}'")
        if isinstance(base[key], dict) and not _is_leaf_dict(here):
            if not isinstance(value, dict):
                raise ConfigError(f"'{here}' expects a section, got {value!r}")
            _merge(base[key], value, source, provenance, here)
        else:
            base[key] = value
            provenance[here] = source


# dict-valued leaves (not sections) that overrides replace wholesale
_LEAF_DICTS = {"scene.scale_ranges"}


def _is_leaf_dict(path: str) -> bool:
    return path in _LEAF_DICTS


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _env_overrides(environ) -> dict:
    out = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        if "__" in rest:
            section, leaf = rest.split("__", 1)
            out.setdefault(section, {})[leaf] = _parse_env_value(raw)
        else:
            out[rest] = _parse_env_value(raw)
    return out


def parse_set_flags(pairs) -> dict:
    """--set section.key=value flags into an override dict."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_env_value(raw)
    return out


def _coerce_section(name: str, data: dict):
    cls = _SECTION_TYPES[name]
    kwargs = dict(data)
    for fld in dataclasses.fields(cls):
        if fld.name not in kwargs:
            continue
        value = kwargs[fld.name]
        if isinstance(value, list):
            kwargs[fld.name] = tuple(value)
    if name == "eval" and isinstance(kwargs.get("thresholds"), dict):
        kwargs["thresholds"] = Thresholds(**kwargs["thresholds"])
    if name == "scene" and isinstance(kwargs.get("scale_ranges"), dict):
        kwargs["scale_ranges"] = {k: tuple(v)
                                  for k, v in kwargs["scale_ranges"].items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


@dataclasses.dataclass
class RunConfig:
    """Validated configuration tree with per-leaf provenance."""

    scene: SceneConfig
    noise: NoiseConfig
    detect: DetectConfig
    input: InputConfig
    net: NetConfig
    train: TrainConfig
    refine: RefineConfig
    eval: EvalConfig
    seed: int
    workers: int
    provenance: dict = dataclasses.field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, preset: str | None = None, config_path=None,
              set_flags=None, seed: int | None = None,
              workers: int | None = None, environ=None) -> "RunConfig":
        merged = _defaults_dict()
        provenance = {}
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset '{preset}'")
            _merge(merged, copy.deepcopy(PRESETS[preset]), f"preset:{preset}",
                   provenance)
        if config_path:
            with open(config_path) as fh:
                _merge(merged, json.load(fh), "file", provenance)
        env = _env_overrides(os.environ if environ is None else environ)
        if env:
            _merge(merged, env, "env", provenance)
        if set_flags:
            _merge(merged, parse_set_flags(set_flags), "flag", provenance)
        if seed is not None:
            merged["seed"] = seed
            provenance["seed"] = "flag"
        if workers is not None:
            merged["workers"] = workers
            provenance["workers"] = "flag"

        sections = {name: _coerce_section(name, merged[name])
                    for name in _SECTION_TYPES}
        if sections["input"].n_mul != sections["net"].n_mul:
            raise ConfigError(
                f"input.n_mul={sections['input'].n_mul} must equal "
                f"net.n_mul={sections['net'].n_mul}")
        return cls(**sections, seed=int(merged["seed"]),
                   workers=int(merged["workers"]), provenance=provenance)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name))
               for name in _SECTION_TYPES}
        out["seed"] = self.seed
        out["workers"] = self.workers
        return out

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()
