"""Configuration for LAFF runs.

Every key has a default in ``_DEFAULTS``.  Values are layered:
defaults -> JSON config file -> ``LAFF_<SECTION>__<KEY>`` environment
variables -> ``--set section.key=value`` flags.  Each layer is coerced to
the type of the default it overrides.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from collections.abc import Iterable, Mapping
from typing import TYPE_CHECKING, Any, NamedTuple

from .errors import ConfigError, FormatError
from .model import ModelConfig, validate_config
from .optim import TrainConfig, validate_train_config
from .synth import SynthSpec, validate_spec

if TYPE_CHECKING:
    from .blocks import BlockInput
    from .dataio import DatasetManifest, FeatureRef

_log = logging.getLogger("laff.config")
_log.addHandler(logging.NullHandler())

_SYNTH_DEFAULTS = SynthSpec()

_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "log_level": "INFO",
    "paths": {
        "dataset": "",
        "model": "",
        "output_dir": "",
        "queries": "",
    },
    "model": {
        "block": "laff",
        "spaces": 8,
        "total_dim": 2048,
        "mhsa_heads": 4,
        "dropout_rate": 0.2,
        # Feature names to use; empty means every feature the dataset declares.
        "video_features": [],
        "text_features": [],
    },
    "train": {k: v for k, v in TrainConfig()._asdict().items() if k != "seed"},
    "synth": {
        "latent_dim": _SYNTH_DEFAULTS.latent_dim,
        "videos": _SYNTH_DEFAULTS.videos,
        "captions_per_video": _SYNTH_DEFAULTS.captions_per_video,
        "split_fractions": list(_SYNTH_DEFAULTS.split_fractions),
        "frame_jitter": _SYNTH_DEFAULTS.frame_jitter,
        "text_format": _SYNTH_DEFAULTS.text_format,
        "video_features": [f._asdict() for f in _SYNTH_DEFAULTS.video_features],
        "text_features": [f._asdict() for f in _SYNTH_DEFAULTS.text_features],
    },
    "eval": {
        "split": "test",
        "jaccard_k": 5,
        "save_ranking": False,
        "top": 0,
    },
    "weights": {
        "split": "test",
        "csv": True,
    },
    "select": {
        "top_video": 2,
        "top_text": 1,
    },
    "ablate": {
        "kind": "blocks",
        "values": [],
    },
}

ENV_PREFIX = "LAFF_"
SECTION_SEP = "__"


class RunConfig(NamedTuple):
    paths: dict[str, str]
    # None until a dataset manifest supplies the feature declarations.
    model: ModelConfig | None
    train: TrainConfig
    synth: SynthSpec
    options: dict[str, dict[str, Any]]
    seed: int
    threads: int


def defaults() -> dict[str, Any]:
    return copy.deepcopy(_DEFAULTS)


def _coerce_value(default_val: Any, raw: Any) -> Any:
    """Coerce an override to the type of its default.

    Returns ``None`` when the value cannot be coerced sensibly.
    """
    # bool must be checked before int (bool is a subclass of int).
    if isinstance(default_val, bool):
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            return None
        if isinstance(raw, int):
            return bool(raw)
        return None
    if isinstance(default_val, int):
        if isinstance(raw, bool):
            return None
        if isinstance(raw, int):
            return raw
        if isinstance(raw, float) and raw.is_integer():
            return int(raw)
        if isinstance(raw, str):
            try:
                return int(raw.strip())
            except ValueError:
                return None
        return None
    if isinstance(default_val, float):
        if isinstance(raw, bool):
            return None
        if isinstance(raw, (int, float)):
            return float(raw)
        if isinstance(raw, str):
            try:
                return float(raw.strip())
            except ValueError:
                return None
        return None
    if isinstance(default_val, list):
        if isinstance(raw, str):
            stripped = raw.strip()
            if stripped.startswith("["):
                try:
                    raw = json.loads(stripped)
                except json.JSONDecodeError:
                    return None
            else:
                raw = [s.strip() for s in stripped.split(",") if s.strip()]
        if not isinstance(raw, list):
            return None
        # Lists of records (synthetic feature specs) pass through as parsed.
        if any(isinstance(x, dict) for x in raw):
            return raw if all(isinstance(x, dict) for x in raw) else None
        if default_val and isinstance(default_val[0], float):
            try:
                return [float(x) for x in raw]
            except (TypeError, ValueError):
                return None
        return [str(x) for x in raw]
    if isinstance(raw, str):
        return raw
    if isinstance(raw, (int, float, bool)):
        return str(raw)
    return None


def _apply_overrides(
    config: dict[str, Any],
    overrides: Mapping[str, Any],
    source: str,
    *,
    strict: bool = False,
    defaults_node: Mapping[str, Any] = _DEFAULTS,
    prefix: str = "",
) -> None:
    """Merge ``overrides`` into ``config`` section by section.

    Unknown keys and uncoercible values are skipped with a warning, or raise
    ConfigError when ``strict``.
    """
    for key, raw in overrides.items():
        path = f"{prefix}{key}"
        if key not in defaults_node:
            _reject(f"{source}: unknown config key {path!r}", strict)
            continue
        default_val = defaults_node[key]
        if isinstance(default_val, dict):
            if not isinstance(raw, Mapping):
                _reject(f"{source}: {path!r} must be an object", strict)
                continue
            _apply_overrides(
                config[key],
                raw,
                source,
                strict=strict,
                defaults_node=default_val,
                prefix=f"{path}.",
            )
            continue
        coerced = _coerce_value(default_val, raw)
        if coerced is None:
            _reject(f"{source}: cannot use {raw!r} for {path!r}", strict)
            continue
        config[key] = coerced


def _reject(message: str, strict: bool) -> None:
    if strict:
        raise ConfigError(message)
    _log.warning("Ignoring %s", message)


def _nest(path: str, value: Any) -> dict[str, Any]:
    node: Any = value
    for part in reversed(path.split(".")):
        node = {part: node}
    return node


def _flat_keys(node: Mapping[str, Any], prefix: tuple[str, ...] = ()) -> Iterable[tuple[str, ...]]:
    for key, value in node.items():
        if isinstance(value, dict):
            yield from _flat_keys(value, (*prefix, key))
        else:
            yield (*prefix, key)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Collect ``LAFF_SEED`` / ``LAFF_TRAIN__MAX_EPOCHS`` style variables."""
    environ = os.environ if environ is None else environ
    found: dict[str, Any] = {}
    for parts in _flat_keys(_DEFAULTS):
        env_key = ENV_PREFIX + SECTION_SEP.join(parts).upper()
        if env_key in environ:
            node = found
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = environ[env_key]
    return found


def parse_set(items: Iterable[str]) -> list[tuple[str, str]]:
    pairs = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs.append((key.strip(), value))
    return pairs


def read_config_file(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(path, f"line {e.lineno}", e.msg) from e
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(path, "root", "config file must hold a JSON object")
    return data


def load_config(
    config_path: str | None = None,
    sets: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Resolve the nested config dict from every layer."""
    config = defaults()
    if config_path:
        _apply_overrides(config, read_config_file(config_path), f"file:{config_path}")
    _apply_overrides(config, env_overrides(environ), "env")
    for key, value in parse_set(sets):
        _apply_overrides(config, _nest(key, value), f"--set {key}", strict=True)
    return config


def get(config: Mapping[str, Any], key: str) -> Any:
    """Dotted lookup, e.g. ``get(cfg, "train.margin")``."""
    node: Any = config
    for part in key.split("."):
        if not isinstance(node, Mapping) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    return node


def _pick_features(
    refs: tuple[FeatureRef, ...], wanted: list[str], side: str
) -> tuple[BlockInput, ...]:
    if not wanted:
        return tuple(r.decl() for r in refs)
    by_name = {r.name: r for r in refs}
    unknown = [n for n in wanted if n not in by_name]
    if unknown:
        raise ConfigError(f"unknown {side} features {unknown}; dataset has {sorted(by_name)}")
    # Declaration order of the dataset, regardless of the order listed.
    return tuple(r.decl() for r in refs if r.name in set(wanted))


def resolve_model_config(section: Mapping[str, Any], manifest: DatasetManifest) -> ModelConfig:
    config = ModelConfig(
        video_features=_pick_features(manifest.video_features, section["video_features"], "video"),
        text_features=_pick_features(manifest.text_features, section["text_features"], "text"),
        spaces=section["spaces"],
        total_dim=section["total_dim"],
        block=section["block"],
        mhsa_heads=section["mhsa_heads"],
        dropout_rate=section["dropout_rate"],
    )
    validate_config(config)
    return config


def synth_spec(config: Mapping[str, Any]) -> SynthSpec:
    spec = SynthSpec.from_dict({**config["synth"], "seed": config["seed"]})
    validate_spec(spec)
    return spec


def load_run_config(
    config: Mapping[str, Any], manifest: DatasetManifest | None = None
) -> RunConfig:
    """Typed view of a resolved config dict.

    ``model`` is resolved only when ``manifest`` is given.
    """
    if config["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {config['threads']}")
    train = TrainConfig.from_dict({**config["train"], "seed": config["seed"]})
    validate_train_config(train)
    try:
        synth = synth_spec(config)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid synth section: {e}") from e
    sections = ("eval", "weights", "select", "ablate")
    return RunConfig(
        paths=dict(config["paths"]),
        model=resolve_model_config(config["model"], manifest) if manifest is not None else None,
        train=train,
        synth=synth,
        options={s: dict(config[s]) for s in sections},
        seed=config["seed"],
        threads=config["threads"],
    )


def reduced_config(config: Mapping[str, Any], model: ModelConfig) -> dict[str, Any]:
    """Copy of ``config`` whose model section names exactly ``model``'s features."""
    reduced = copy.deepcopy(dict(config))
    reduced["model"]["video_features"] = [f.name for f in model.video_features]
    reduced["model"]["text_features"] = [f.name for f in model.text_features]
    return reduced
