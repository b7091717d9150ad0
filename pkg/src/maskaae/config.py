"""Experiment configuration: presets, config files and dotted-key overrides.

A resolved config is a plain nested dict with four sections::

    data:  GeneratorSpec fields plus ``count``, ``stream_seed`` and an optional ``path``
    model: BundleConfig fields except ``data_dim``/``latent_dim``/``variant``
    train: TrainConfig fields (``weights`` and ``eval`` nested)
    sweep: ``variants``, ``m_values``, ``repeats``, ``jobs``

plus the top-level keys ``preset``, ``name``, ``variant`` and ``latent_dim``.
Resolution order is defaults, then preset, then config file, then flags.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path

import yaml

from maskaae.errors import InvalidArgumentError
from maskaae.losses import LossWeights
from maskaae.metrics import EvalConfig
from maskaae.networks import VARIANTS, BundleConfig
from maskaae.synthetic_data import GeneratorSpec
from maskaae.trainer import TrainConfig

RUNS_ENV = "MAAE_RUNS_DIR"
SECTIONS = ("data", "model", "train", "sweep")
_MODEL_KEYS = ("hidden_widths", "hidden_activation", "decoder_output", "mask_init_a", "round_mask_at_inference")
_DATA_EXTRA = ("count", "stream_seed", "path")


def _defaults() -> dict:
    train = dataclasses.asdict(TrainConfig())
    bundle = dataclasses.asdict(BundleConfig(data_dim=1, latent_dim=1))
    spec = GeneratorSpec(n=8).to_dict()
    return {
        "preset": None,
        "name": None,
        "variant": "maskaae",
        "latent_dim": 16,
        "data": {**spec, "count": 20000, "stream_seed": 0, "path": None},
        "model": {k: bundle[k] for k in _MODEL_KEYS},
        "train": train,
        "sweep": {"variants": ["wae_baseline"], "m_values": [2, 4, 8, 16, 32], "repeats": 3, "jobs": 1},
    }


PRESETS = {
    # the desk preset as specified: 3x256 nets, 20k steps
    "synthetic8-desk": {
        "data": {"n": 8, "k": 128, "d": 128, "seed": 1, "count": 20000},
        "model": {"hidden_widths": [256, 256, 256]},
        "train": {"training_steps": 20000, "reg_schedule_interval": 2000, "eval_every": 1000},
    },
    # five hidden layers of 1000 units
    "synthetic8-paper": {
        "data": {"n": 8, "k": 128, "d": 128, "seed": 1, "count": 20000},
        "model": {"hidden_widths": [1000] * 5},
        "train": {"training_steps": 20000, "reg_schedule_interval": 2000, "eval_every": 1000},
    },
    # single-core budget used by the acceptance suite
    "synthetic8-quick": {
        "data": {"n": 8, "k": 128, "d": 128, "seed": 1, "count": 20000},
        "model": {"hidden_widths": [128, 128, 128]},
        "train": {"training_steps": 6000, "reg_schedule_interval": 400, "eval_every": 1000,
                  "lr_ae": 1e-3, "lr_disc": 3e-4, "lr_gen": 3e-4, "lr_mask": 1e-2,
                  "eval": {"eval_count": 4000, "nac_batch": 4000}},
    },
}


def deep_update(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        obj = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise InvalidArgumentError(f"cannot parse config {path}: {exc}") from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise InvalidArgumentError(f"config {path} must be a mapping")
    return obj


def parse_override(item: str) -> dict:
    """``train.lr_ae=1e-3`` -> {"train": {"lr_ae": 0.001}}; values are parsed as YAML scalars."""
    if "=" not in item:
        raise InvalidArgumentError(f"override {item!r} must look like key.sub=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise InvalidArgumentError(f"bad override value {raw!r}") from exc
    if isinstance(value, str):
        # yaml reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def resolve(preset: str | None = None, file_cfg: dict | None = None, overrides=()) -> dict:
    cfg = _defaults()
    file_cfg = copy.deepcopy(file_cfg or {})
    preset = preset or file_cfg.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidArgumentError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        deep_update(cfg, PRESETS[preset])
        cfg["preset"] = preset
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise InvalidArgumentError(f"unknown config keys {sorted(unknown)}")
    deep_update(cfg, file_cfg)
    for item in overrides:
        deep_update(cfg, item if isinstance(item, dict) else parse_override(item))
    if preset is not None:
        cfg["preset"] = preset
    validate(cfg)
    return cfg


def _check_keys(section: str, got: dict, allowed) -> None:
    extra = set(got) - set(allowed)
    if extra:
        raise InvalidArgumentError(f"unknown {section} keys {sorted(extra)}")


def validate(cfg: dict) -> None:
    """Build every typed object once so a bad value fails before any computation."""
    _check_keys("data", cfg["data"], set(GeneratorSpec(n=1).to_dict()) | set(_DATA_EXTRA))
    _check_keys("model", cfg["model"], _MODEL_KEYS)
    _check_keys("train", cfg["train"], {f.name for f in dataclasses.fields(TrainConfig)})
    _check_keys("train.weights", cfg["train"].get("weights", {}), {f.name for f in dataclasses.fields(LossWeights)})
    _check_keys("train.eval", cfg["train"].get("eval", {}), {f.name for f in dataclasses.fields(EvalConfig)})
    _check_keys("sweep", cfg["sweep"], ("variants", "m_values", "repeats", "jobs"))
    try:
        generator_spec(cfg)
        train_config(cfg)
        bc = bundle_config(cfg, data_dim=cfg["data"]["d"])
        bc.encoder_config(), bc.decoder_config(), bc.discriminator_config()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise InvalidArgumentError(str(exc)) from exc
    sw = cfg["sweep"]
    if not sw["m_values"] or any(int(m) < 1 for m in sw["m_values"]):
        raise InvalidArgumentError("sweep.m_values must be nonempty with entries >= 1")
    if int(sw["repeats"]) < 1 or int(sw["jobs"]) < 1:
        raise InvalidArgumentError("sweep.repeats and sweep.jobs must be >= 1")
    if any(v not in VARIANTS for v in sw["variants"]) or not sw["variants"]:
        raise InvalidArgumentError(f"sweep.variants must be a nonempty subset of {VARIANTS}")
    if int(cfg["data"]["count"]) < 1:
        raise InvalidArgumentError("data.count must be >= 1")


def generator_spec(cfg: dict) -> GeneratorSpec:
    d = {k: v for k, v in cfg["data"].items() if k not in _DATA_EXTRA}
    return GeneratorSpec(**d)


def train_config(cfg: dict, variant: str | None = None, seed: int | None = None) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    t["variant"] = variant or cfg.get("variant") or t.get("variant")
    if seed is not None:
        t["seed"] = seed
    return TrainConfig(**t)


def bundle_config(cfg: dict, data_dim: int, latent_dim: int | None = None,
                  variant: str | None = None) -> BundleConfig:
    m = dict(cfg["model"])
    m["hidden_widths"] = tuple(int(w) for w in m["hidden_widths"])
    return BundleConfig(data_dim=data_dim, latent_dim=int(latent_dim or cfg["latent_dim"]),
                        variant=variant or cfg["variant"], **m)


def runs_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(RUNS_ENV, "runs"))


def code_version() -> str:
    from importlib import metadata

    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"
