"""Paired multi-space fusion model.

``h`` independent (video block, text block) pairs each define one common
space of dimension ``d = d0 / h``.  Block outputs are L2-normalized per
space, so the per-space cosine is a plain dot product; the overall
similarity is the mean of the ``h`` per-space cosines.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from .blocks import FRAME_LEVEL, VIDEO_LEVEL, BlockInput, FusionBlock, block_class
from .blocks.laff import LaffBlock
from .diffmath import l2_normalize_backward, l2_normalize_rows
from .errors import ConfigError, FormatError, UnsupportedOperationError

if TYPE_CHECKING:
    from .blocks import FrameBatch
    from .diffmath import Matrix, Parameter

_log = logging.getLogger("laff.model")
_log.addHandler(logging.NullHandler())

MODEL_MAGIC = b"LAFF"
MODEL_VERSION = 1
MULTI_LEVEL_BLOCK = "laff_ml"
CONCAT_BLOCK = "concat"


class ModelConfig(NamedTuple):
    """Architecture of a paired multi-space encoder."""

    video_features: tuple[BlockInput, ...] = ()
    text_features: tuple[BlockInput, ...] = ()
    spaces: int = 8
    total_dim: int = 2048
    block: str = "laff"
    mhsa_heads: int = 4
    dropout_rate: float = 0.2

    @property
    def space_dim(self) -> int:
        return self.total_dim // self.spaces

    @property
    def uses_frames(self) -> bool:
        """True when frame-level features reach the model unpooled."""
        return self.block == MULTI_LEVEL_BLOCK

    def to_dict(self) -> dict[str, Any]:
        data = self._asdict()
        data["video_features"] = [f._asdict() for f in self.video_features]
        data["text_features"] = [f._asdict() for f in self.text_features]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        known = {k: v for k, v in data.items() if k in cls._fields}
        for side in ("video_features", "text_features"):
            known[side] = tuple(
                BlockInput(str(f["name"]), int(f["dim"]), str(f.get("level", VIDEO_LEVEL)))
                for f in known.get(side, ())
            )
        return cls(**known)


def validate_config(config: ModelConfig) -> None:
    """Raise ConfigError on any violated ModelConfig invariant."""
    if config.spaces < 1:
        raise ConfigError(f"spaces must be >= 1, got {config.spaces}")
    if config.total_dim < 1 or config.total_dim % config.spaces:
        raise ConfigError(
            f"total_dim {config.total_dim} is not a positive multiple of spaces {config.spaces}"
        )
    if not 0.0 <= config.dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must be in [0, 1), got {config.dropout_rate}")
    block_class(config.block)
    if config.block == CONCAT_BLOCK and config.spaces != 1:
        raise ConfigError(
            f"the concat block maps to one {config.total_dim}-dim space; got spaces={config.spaces}"
        )
    if config.block == "mhsa" and (
        config.mhsa_heads < 1 or config.space_dim % config.mhsa_heads
    ):
        raise ConfigError(
            f"mhsa_heads {config.mhsa_heads} does not divide space dim {config.space_dim}"
        )
    for side, feats in (("video", config.video_features), ("text", config.text_features)):
        if not feats:
            raise ConfigError(f"no {side} features declared")
        names = [f.name for f in feats]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate {side} feature names: {names}")
        for feat in feats:
            if feat.dim < 1:
                raise ConfigError(f"{side} feature {feat.name!r} has dim {feat.dim}")
            if feat.level not in (VIDEO_LEVEL, FRAME_LEVEL):
                raise ConfigError(f"{side} feature {feat.name!r} has unknown level {feat.level!r}")
            if side == "text" and feat.level != VIDEO_LEVEL:
                raise ConfigError(f"text feature {feat.name!r} must be sentence-level")


def _block_classes(config: ModelConfig) -> tuple[type[FusionBlock], type[FusionBlock]]:
    video_cls = block_class(config.block)
    text_cls = LaffBlock if config.block == MULTI_LEVEL_BLOCK else video_cls
    return video_cls, text_cls


def _video_inputs(config: ModelConfig) -> list[BlockInput]:
    if config.uses_frames:
        return list(config.video_features)
    # Frame-level features are mean-pooled before they reach any other block.
    return [BlockInput(f.name, f.dim) for f in config.video_features]


def param_count(config: ModelConfig) -> int:
    """Closed-form number of trainable parameters."""
    validate_config(config)
    video_cls, text_cls = _block_classes(config)
    d = config.space_dim
    heads = config.mhsa_heads
    per_space = video_cls.count_params(_video_inputs(config), d, heads) + text_cls.count_params(
        list(config.text_features), d, heads
    )
    return config.spaces * per_space


class SideEncoding(NamedTuple):
    """Per-space unit embeddings of one modality plus what backward needs."""

    embeddings: list[Matrix]
    weights: list[Matrix | None]
    caches: list[Any]


class FusionModel:
    """All trainable parameters of a paired multi-space encoder."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        validate_config(config)
        self.config = config
        video_cls, text_cls = _block_classes(config)
        rng = np.random.default_rng(seed)
        common = {
            "rng": rng,
            "dropout_rate": config.dropout_rate,
            "heads": config.mhsa_heads,
        }
        self.video_blocks: list[FusionBlock] = []
        self.text_blocks: list[FusionBlock] = []
        for i in range(config.spaces):
            self.video_blocks.append(
                video_cls(
                    _video_inputs(config), config.space_dim, prefix=f"space{i}.video", **common
                )
            )
            self.text_blocks.append(
                text_cls(
                    list(config.text_features), config.space_dim, prefix=f"space{i}.text", **common
                )
            )

    @property
    def spaces(self) -> int:
        return self.config.spaces

    @property
    def attentional(self) -> bool:
        return self.video_blocks[0].attentional and self.text_blocks[0].attentional

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for video, text in zip(self.video_blocks, self.text_blocks, strict=True):
            params.extend(video.parameters())
            params.extend(text.parameters())
        return params

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state(self) -> list[Matrix]:
        """Copy of every parameter value in declaration order."""
        return [p.value.copy() for p in self.parameters()]

    def load_state(self, state: Sequence[Matrix]) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ConfigError(f"state has {len(state)} arrays, model has {len(params)}")
        for param, value in zip(params, state, strict=True):
            if value.shape != param.shape:
                raise ConfigError(f"{param.name}: state shape {value.shape} != {param.shape}")
            param.value[...] = value

    def __repr__(self) -> str:
        c = self.config
        return f"FusionModel(block={c.block}, h={c.spaces}, d={c.space_dim})"


# ── encoding ───────────────────────────────────────────────────────


def _encode(
    blocks: Sequence[FusionBlock],
    inputs: Sequence[Matrix | FrameBatch],
    train: bool,
    rng: np.random.Generator | None,
) -> SideEncoding:
    embeddings, weights, caches = [], [], []
    for block in blocks:
        out = block.forward(inputs, train=train, rng=rng)
        normed, norms = l2_normalize_rows(out.embedding)
        embeddings.append(normed)
        weights.append(out.weights)
        caches.append((out.cache, normed, norms))
    return SideEncoding(embeddings, weights, caches)


def encode_videos(
    model: FusionModel,
    inputs: Sequence[Matrix | FrameBatch],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> SideEncoding:
    return _encode(model.video_blocks, inputs, train, rng)


def encode_texts(
    model: FusionModel,
    inputs: Sequence[Matrix],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> SideEncoding:
    return _encode(model.text_blocks, inputs, train, rng)


def encode_pairwise(
    model: FusionModel,
    video_inputs: Sequence[Matrix | FrameBatch],
    text_inputs: Sequence[Matrix],
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[SideEncoding, SideEncoding]:
    """Encode both ends into ``h`` unit-norm embeddings each."""
    videos = encode_videos(model, video_inputs, train=train, rng=rng)
    texts = encode_texts(model, text_inputs, train=train, rng=rng)
    return videos, texts


def backward_side(
    blocks: Sequence[FusionBlock], encoding: SideEncoding, grads: Sequence[Matrix]
) -> None:
    """Backpropagate per-space embedding grads into the block parameters."""
    for block, (cache, normed, norms), grad in zip(blocks, encoding.caches, grads, strict=True):
        block.backward(cache, l2_normalize_backward(grad, normed, norms))


def similarity(
    video_embeddings: Sequence[Matrix], text_embeddings: Sequence[Matrix]
) -> tuple[Matrix, Matrix]:
    """Return (mean similarity, per-space similarities).

    Shapes are ``(n_text, n_video)`` and ``(h, n_text, n_video)``.
    """
    if len(video_embeddings) != len(text_embeddings):
        raise ConfigError(
            f"space count differs: {len(video_embeddings)} video vs {len(text_embeddings)} text"
        )
    per_space = np.stack(
        [t @ v.T for v, t in zip(video_embeddings, text_embeddings, strict=True)]
    )
    return per_space.mean(axis=0), per_space


# ── interpretability ───────────────────────────────────────────────


def average_attention_weights(
    model: FusionModel,
    video_inputs: Sequence[Matrix | FrameBatch],
    text_inputs: Sequence[Matrix],
) -> dict[str, dict[str, float]]:
    """Mean convex weight per feature over all samples and all spaces."""
    if not model.attentional:
        raise UnsupportedOperationError(
            f"block {model.config.block!r} produces no attention weights"
        )
    result: dict[str, dict[str, float]] = {}
    for side, encoding, feats in (
        ("video", encode_videos(model, video_inputs), model.config.video_features),
        ("text", encode_texts(model, text_inputs), model.config.text_features),
    ):
        means = np.mean([w.mean(axis=0) for w in encoding.weights if w is not None], axis=0)
        result[side] = {f.name: float(m) for f, m in zip(feats, means, strict=True)}
    return result


# ── serialization ──────────────────────────────────────────────────


def sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def save_model(model: FusionModel, path: str) -> None:
    """Write the binary model file and its JSON sidecar."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    chunks = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<I", len(cfg)),
        cfg,
    ]
    chunks.extend(p.value.astype("<f8").tobytes() for p in model.parameters())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(sidecar_path(path), "w") as f:
        json.dump(
            {"config": model.config.to_dict(), "param_count": param_count(model.config)},
            f,
            indent=2,
            sort_keys=True,
        )
    _log.debug("Saved %r to %s", model, path)


def load_model(path: str) -> FusionModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(path, 0, f"bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(path, len(blob), "truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(path, 4, f"unsupported model version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12 + cfg_len
    try:
        config = ModelConfig.from_dict(json.loads(blob[12:offset].decode()))
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(path, 12, f"unreadable model config: {e}") from e
    model = FusionModel(config)
    for param in model.parameters():
        end = offset + 8 * param.size
        if end > len(blob):
            raise FormatError(path, offset, f"truncated while reading {param.name}")
        raw = np.frombuffer(blob, dtype="<f8", count=param.size, offset=offset)
        param.value[...] = raw.reshape(param.shape)
        offset = end
    if offset != len(blob):
        raise FormatError(path, offset, f"{len(blob) - offset} trailing bytes")
    return model
