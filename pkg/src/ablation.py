"""Train-and-evaluate sweeps over fusion blocks, spaces, losses and features."""

from __future__ import annotations

import logging
import os
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any, NamedTuple

from .errors import ConfigError
from .evalkit import evaluate
from .model import FusionModel, ModelConfig, param_count, validate_config
from .objective import COMBINED, SINGLE
from .optim import TrainConfig, fit

if TYPE_CHECKING:
    from .dataio import DatasetManifest, FeatureStore

_log = logging.getLogger("laff.ablation")
_log.addHandler(logging.NullHandler())

ABLATION_KINDS = ("blocks", "spaces", "loss", "features")
DEFAULT_SPACES = (1, 2, 4, 8, 16)


class Variant(NamedTuple):
    label: str
    model: ModelConfig
    train: TrainConfig


def _block_variants(model: ModelConfig, train: TrainConfig) -> list[Variant]:
    def make(label: str, block: str, loss: str, spaces: int | None = None) -> Variant:
        config = model._replace(block=block, spaces=spaces or model.spaces)
        return Variant(label, config, train._replace(loss=loss))

    return [
        make("concat", "concat", COMBINED, spaces=1),
        make("mhsa", "mhsa", SINGLE),
        make("mhsa_multi_loss", "mhsa", COMBINED),
        make("attention_free", "attention_free", COMBINED),
        make("laff", "laff", COMBINED),
    ]


def _space_variants(model: ModelConfig, train: TrainConfig, values: Sequence[str]) -> list[Variant]:
    try:
        counts = [int(v) for v in values] if values else list(DEFAULT_SPACES)
    except ValueError as e:
        raise ConfigError(f"space counts must be integers: {list(values)}") from e
    return [Variant(f"h={h}", model._replace(spaces=h), train) for h in counts]


def _feature_variants(
    model: ModelConfig, train: TrainConfig, values: Sequence[str]
) -> list[Variant]:
    side = values[0] if values else "video"
    if side not in ("video", "text") or len(values) > 1:
        raise ConfigError(
            f"feature sweep takes one modality, 'video' or 'text'; got {list(values)}"
        )
    key = f"{side}_features"
    feats = getattr(model, key)
    return [
        Variant(
            "+".join(f.name for f in feats[:n]),
            model._replace(**{key: feats[:n]}),
            train,
        )
        for n in range(1, len(feats) + 1)
    ]


def ablation_variants(
    kind: str, model: ModelConfig, train: TrainConfig, values: Sequence[str] = ()
) -> list[Variant]:
    """Expand one sweep into concrete variants; the first is the reference row."""
    if kind == "blocks":
        variants = _block_variants(model, train)
        if values:
            unknown = set(values) - {v.label for v in variants}
            if unknown:
                raise ConfigError(f"unknown block variants {sorted(unknown)}")
            variants = [v for v in variants if v.label in values]
    elif kind == "spaces":
        variants = _space_variants(model, train, values)
    elif kind == "loss":
        variants = [
            Variant(COMBINED, model, train._replace(loss=COMBINED)),
            Variant(SINGLE, model, train._replace(loss=SINGLE)),
        ]
    elif kind == "features":
        variants = _feature_variants(model, train, values)
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}; choose from {ABLATION_KINDS}")
    for variant in variants:
        validate_config(variant.model)
    return variants


def run_ablation(
    variants: Sequence[Variant],
    manifest: DatasetManifest,
    store: FeatureStore,
    *,
    split: str = "test",
    seed: int = 0,
    threads: int = 1,
    log_dir: str | None = None,
) -> list[dict[str, Any]]:
    """Train every variant from the same seed and report its metrics.

    ``relative_map`` is the mAP change relative to the first row.
    """
    rows: list[dict[str, Any]] = []
    for i, variant in enumerate(variants):
        _log.info("Ablation %d/%d: %s", i + 1, len(variants), variant.label)
        log_path = os.path.join(log_dir, f"ablation_{i:02d}.jsonl") if log_dir else None
        if log_path and os.path.exists(log_path):
            os.remove(log_path)
        model = FusionModel(variant.model, seed=seed)
        fit(model, manifest, store, variant.train, log_path, threads=threads)
        report = evaluate(model, manifest, store, split, threads=threads)
        rows.append(
            {
                "label": variant.label,
                "block": variant.model.block,
                "spaces": variant.model.spaces,
                "loss": variant.train.loss,
                "video_features": [f.name for f in variant.model.video_features],
                "text_features": [f.name for f in variant.model.text_features],
                "params": param_count(variant.model),
                "report": report.to_dict(),
            }
        )
    reference = rows[0]["report"]["map"] if rows else 0.0
    for row in rows:
        current = row["report"]["map"]
        row["relative_map"] = (current - reference) / reference if reference > 0 else 0.0
    return rows
