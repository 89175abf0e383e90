"""Deterministic synthetic cross-modal dataset.

Every video draws a latent ``z ~ N(0, I_g)``.  A signal feature is a fixed
random linear view of ``z`` plus Gaussian noise; its captions share the
video's ``z`` with their own noise.  Noise-only features carry no ``z`` at
all, which makes them the feature a fusion block should learn to ignore.
Frame-level streams emit jittered per-frame copies of the video vector.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import Any, NamedTuple

import numpy as np

from .blocks import FRAME_LEVEL, VIDEO_LEVEL
from .dataio import (
    SPLITS,
    CaptionRecord,
    DatasetManifest,
    FeatureEntry,
    FeatureRef,
    FeatureStore,
)
from .errors import ConfigError

_log = logging.getLogger("laff.synth")
_log.addHandler(logging.NullHandler())


class SynthFeature(NamedTuple):
    name: str
    dim: int
    sigma: float = 0.1
    noise_only: bool = False
    level: str = VIDEO_LEVEL
    frames: int = 0
    # Features sharing a mixing seed and dim share their mixing matrix.
    mixing_seed: int | None = None


class SynthSpec(NamedTuple):
    latent_dim: int = 16
    videos: int = 2000
    captions_per_video: int = 1
    video_features: tuple[SynthFeature, ...] = (
        SynthFeature("video_a", 32),
        SynthFeature("video_b", 48),
        SynthFeature("video_noise", 24, noise_only=True),
    )
    text_features: tuple[SynthFeature, ...] = (
        SynthFeature("text_a", 32),
        SynthFeature("text_b", 16),
    )
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    frame_jitter: float = 0.05
    seed: int = 0
    text_format: bool = False

    def to_dict(self) -> dict[str, Any]:
        data = self._asdict()
        data["video_features"] = [f._asdict() for f in self.video_features]
        data["text_features"] = [f._asdict() for f in self.text_features]
        data["split_fractions"] = list(self.split_fractions)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SynthSpec:
        known = {k: v for k, v in data.items() if k in cls._fields}
        for side in ("video_features", "text_features"):
            if side in known:
                known[side] = tuple(
                    SynthFeature(**{k: v for k, v in f.items() if k in SynthFeature._fields})
                    for f in known[side]
                )
        if "split_fractions" in known:
            known["split_fractions"] = tuple(float(x) for x in known["split_fractions"])
        return cls(**known)


def validate_spec(spec: SynthSpec) -> None:
    if spec.latent_dim < 1:
        raise ConfigError(f"latent_dim must be >= 1, got {spec.latent_dim}")
    if spec.videos < 2 or spec.captions_per_video < 1:
        raise ConfigError("a synthetic dataset needs >= 2 videos and >= 1 caption per video")
    if not spec.video_features or not spec.text_features:
        raise ConfigError("a synthetic dataset needs video and text features")
    if len(spec.split_fractions) != len(SPLITS) or any(f < 0 for f in spec.split_fractions):
        raise ConfigError(
            f"split_fractions must be three non-negative numbers: {spec.split_fractions}"
        )
    if not math.isclose(sum(spec.split_fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split_fractions must sum to 1, got {sum(spec.split_fractions)}")
    if spec.frame_jitter < 0:
        raise ConfigError(f"frame_jitter must be >= 0, got {spec.frame_jitter}")
    names = [f.name for f in (*spec.video_features, *spec.text_features)]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate synthetic feature names: {names}")
    for feat in (*spec.video_features, *spec.text_features):
        if feat.dim < 1 or feat.sigma < 0:
            raise ConfigError(f"feature {feat.name!r}: dim must be >= 1 and sigma >= 0")
        if feat.level == FRAME_LEVEL and feat.frames < 1:
            raise ConfigError(f"frame-level feature {feat.name!r} needs frames >= 1")
    for feat in spec.text_features:
        if feat.level != VIDEO_LEVEL:
            raise ConfigError(f"text feature {feat.name!r} must be sentence-level")


def _mixing_matrix(spec: SynthSpec, feat: SynthFeature, stream: Sequence[int]) -> np.ndarray:
    seed = feat.mixing_seed if feat.mixing_seed is not None else [spec.seed, *stream]
    mix_rng = np.random.default_rng(seed)
    return mix_rng.standard_normal((feat.dim, spec.latent_dim)) / math.sqrt(spec.latent_dim)


def _view(
    rng: np.random.Generator, latent: np.ndarray, feat: SynthFeature, mixing: np.ndarray
) -> np.ndarray:
    n = latent.shape[0]
    if feat.noise_only:
        return rng.standard_normal((n, feat.dim))
    return latent @ mixing.T + feat.sigma * rng.standard_normal((n, feat.dim))


def synth_generate(spec: SynthSpec) -> tuple[FeatureStore, DatasetManifest]:
    """Build the feature store and manifest for ``spec``."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    video_ids = [f"v{i:05d}" for i in range(spec.videos)]
    captions = [
        CaptionRecord(f"{vid}#{c}", vid)
        for vid in video_ids
        for c in range(spec.captions_per_video)
    ]
    latent = rng.standard_normal((spec.videos, spec.latent_dim))
    caption_latent = np.repeat(latent, spec.captions_per_video, axis=0)

    store = FeatureStore()
    video_refs, text_refs = [], []
    ext = "txt" if spec.text_format else "lftr"
    for i, feat in enumerate(spec.video_features):
        values = _view(rng, latent, feat, _mixing_matrix(spec, feat, (0, i)))
        if feat.level == FRAME_LEVEL:
            jitter = spec.frame_jitter * rng.standard_normal((spec.videos, feat.frames, feat.dim))
            vectors = {vid: values[j][None, :] + jitter[j] for j, vid in enumerate(video_ids)}
        else:
            vectors = {vid: values[j] for j, vid in enumerate(video_ids)}
        store[feat.name] = FeatureEntry(feat.name, feat.level, feat.dim, vectors)
        video_refs.append(
            FeatureRef(feat.name, feat.dim, feat.level, f"features/video/{feat.name}.{ext}")
        )
    for i, feat in enumerate(spec.text_features):
        values = _view(rng, caption_latent, feat, _mixing_matrix(spec, feat, (1, i)))
        vectors = {cap.caption_id: values[j] for j, cap in enumerate(captions)}
        store[feat.name] = FeatureEntry(feat.name, VIDEO_LEVEL, feat.dim, vectors)
        text_refs.append(
            FeatureRef(feat.name, feat.dim, VIDEO_LEVEL, f"features/text/{feat.name}.{ext}")
        )

    order = rng.permutation(spec.videos)
    bounds = np.rint(np.cumsum(spec.split_fractions) * spec.videos).astype(int)
    bounds[-1] = spec.videos
    splits: dict[str, tuple[str, ...]] = {}
    start = 0
    for split, end in zip(SPLITS, bounds, strict=True):
        splits[split] = tuple(video_ids[j] for j in sorted(order[start:end]))
        start = end
    manifest = DatasetManifest(
        tuple(video_ids), tuple(captions), splits, tuple(video_refs), tuple(text_refs)
    )
    _log.info(
        "Generated %d videos / %d captions (splits %s)",
        spec.videos,
        len(captions),
        {k: len(v) for k, v in splits.items()},
    )
    return store, manifest
